"""Command-line entry point: train, eval, attack-eval, ablate, verify-invariants."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError, load_model, save_model
from .config import COMMANDS, ConfigError, ExperimentConfig
from .experiments import (
    CLEAN,
    ResultRow,
    attack_images,
    evaluate,
    format_table,
    load_data,
    run_ablation,
    write_report,
)
from .invariants import report_dict, verify_model
from .model import VARIANTS, init_model
from .training import train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_INVARIANT = 0, 1, 2, 3

log = logging.getLogger("lyadeq")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lyadeq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON experiment config")
        s.add_argument("--seed", type=int)
        s.add_argument("--variant", choices=sorted(VARIANTS))
        s.add_argument("--epsilon", type=int, metavar="K", help="radius K/255")
        s.add_argument("--attack", choices=["ifgsm", "pgd"])
        s.add_argument("--out", type=Path)
        s.add_argument("--data-dir", type=Path)
        s.add_argument("--checkpoint", type=Path, help="model checkpoint to load")
        s.add_argument("--epochs", type=int)
        s.add_argument("--norm", choices=["layer", "batch"], help="normalization inside the implicit map")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = replace(cfg, command=args.command)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, seeds=[args.seed])
    if args.variant is not None:
        cfg = replace(cfg, variant=args.variant, variants=[args.variant])
    if args.epsilon is not None:
        if args.epsilon < 0:
            raise UsageError("--epsilon must be a nonnegative integer K (radius K/255)")
        cfg = replace(cfg, attack=replace(cfg.attack, eps_255=args.epsilon), radii_255=[args.epsilon])
    if args.attack is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, family=args.attack), attacks=[args.attack])
    if args.out is not None:
        cfg = replace(cfg, out=str(args.out))
    if args.data_dir is not None:
        cfg = replace(cfg, data_dir=str(args.data_dir))
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if args.norm is not None:
        cfg = replace(cfg, train=replace(cfg.train, norm=args.norm))
    for v in cfg.variants + [cfg.variant]:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    return cfg


def _model_for(cfg, args, train_ds):
    """Load --checkpoint, or train the configured variant from scratch."""
    if args.checkpoint is not None:
        model, meta = load_model(args.checkpoint)
        return model, {"checkpoint": str(args.checkpoint), "meta": meta}
    model = init_model(cfg.variant, cfg.seed, n_in=train_ds.images.shape[1],
                       classes=max(train_ds.classes, 2), norm=cfg.train.norm)
    model, hist = train(model, train_ds, cfg.train_config(), cfg.solver_config(), cfg.stability_config())
    return model, {"training": hist}


def cmd_train(cfg, args) -> int:
    tr, te = load_data(cfg)
    out = Path(cfg.out)
    model = init_model(cfg.variant, cfg.seed, n_in=tr.images.shape[1], classes=max(tr.classes, 2),
                       norm=cfg.train.norm)
    model, hist = train(model, tr, cfg.train_config(), cfg.solver_config(), cfg.stability_config(),
                        checkpoint_dir=out / "checkpoints")
    final = out / f"{cfg.variant}-seed{cfg.seed}.ckpt"
    save_model(final, model, cfg.seed, cfg.train.epochs - 1)
    acc, conv = evaluate(model, te.images, te.labels, cfg.solver_config(), cfg.stability_config())
    side = {"config": cfg.to_dict(), "training": hist, "test_accuracy": acc,
            "test_convergence_rate": conv, "checkpoint": str(final)}
    (out / "train.json").write_text(json.dumps(side, indent=2, sort_keys=True))
    print(f"{cfg.variant} seed {cfg.seed}: test accuracy {acc:.2f}% (convergence {conv:.3f}); saved {final}")
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    tr, te = load_data(cfg)
    t0 = time.time()
    model, extra = _model_for(cfg, args, tr)
    acc, conv = evaluate(model, te.images, te.labels, cfg.solver_config(), cfg.stability_config())
    row = ResultRow(model.variant, CLEAN, 0, acc, acc, cfg.seed, time.time() - t0, conv, len(te))
    path = write_report([row], cfg.out, cfg, "eval", extra)
    print(f"{model.variant}: clean accuracy {acc:.2f}% -> {path}")
    return EXIT_OK


def cmd_attack_eval(cfg, args) -> int:
    tr, te = load_data(cfg)
    model, extra = _model_for(cfg, args, tr)
    solver, stab = cfg.solver_config(), cfg.stability_config()
    clean, _ = evaluate(model, te.images, te.labels, solver, stab)
    rows = []
    for fam in cfg.attacks:
        for k in cfg.radii_255:
            t0 = time.time()
            acfg = cfg.attack_config(fam, k)
            xa = attack_images(model, te.images, te.labels, acfg, solver, stab)
            rob, conv = evaluate(model, xa, te.labels, solver, stab)
            rows.append(ResultRow(model.variant, fam, k, clean, rob, cfg.seed, time.time() - t0, conv, len(te)))
            print(f"{model.variant} {fam} eps {k}/255: robust {rob:.2f}% (clean {clean:.2f}%)")
    write_report(rows, cfg.out, cfg, "attack_eval", extra)
    return EXIT_OK


def cmd_ablate(cfg, args) -> int:
    rows = run_ablation(cfg, cfg.out)
    print(format_table(rows))
    failed = [r for r in rows if r.error]
    if failed:
        print(f"{len(failed)} of {len(rows)} rows failed; see {cfg.out}/ablation.csv", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_verify(cfg, args) -> int:
    tr, te = load_data(cfg)
    if args.checkpoint is not None:
        model, _ = load_model(args.checkpoint)
    else:
        model = init_model(cfg.variant, cfg.seed, n_in=te.images.shape[1], classes=max(te.classes, 2),
                           norm=cfg.train.norm)
    k = min(len(te), 500)
    results = verify_model(model, te.images[:k], te.labels[:k], cfg.solver_config(),
                           cfg.stability_config(), seed=cfg.seed)
    for r in results:
        print(r.line())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = report_dict(results)
    rep["config"] = cfg.to_dict()
    (out / "invariants.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
    if not rep["passed"]:
        names = ", ".join(r.name for r in results if not r.passed)
        print(f"invariant failures: {names}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack-eval": cmd_attack_eval,
    "ablate": cmd_ablate,
    "verify-invariants": cmd_verify,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return HANDLERS[args.command](cfg, args)
    except (FileNotFoundError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
