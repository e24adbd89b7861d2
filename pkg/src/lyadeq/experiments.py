"""Ablation grid: train the four variants, then score clean and attacked accuracy."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, run_attack
from .config import ExperimentConfig
from .datasets import Dataset, load_mnist_subsets, synth_blobs
from .fixedpoint import SolverConfig
from .layers import orthogonal_weight
from .lyapunov import StabilityConfig
from .model import ModelParams, forward, init_model, loss_and_input_grad
from .training import train

log = logging.getLogger(__name__)

CSV_HEADER = [
    "variant", "attack", "eps", "eps_255", "clean_accuracy", "robust_accuracy",
    "seed", "runtime_seconds", "solver_convergence_rate", "n_test", "error",
]
CLEAN = "none"


@dataclass
class ResultRow:
    variant: str
    attack: str  # "none" for the clean row, else "ifgsm" | "pgd"
    eps_255: int
    clean_accuracy: float
    robust_accuracy: float
    seed: int
    runtime_seconds: float
    solver_convergence_rate: float
    n_test: int
    error: str = ""

    def __post_init__(self):
        if not self.error:
            for v in (self.clean_accuracy, self.robust_accuracy):
                if not 0.0 <= v <= 100.0:
                    raise ValueError(f"accuracy {v} outside [0, 100]")

    @property
    def eps(self) -> Fraction:
        return Fraction(self.eps_255, 255)

    def as_csv(self) -> list:
        return [self.variant, self.attack, f"{self.eps_255}/255", self.eps_255,
                f"{self.clean_accuracy:.4f}", f"{self.robust_accuracy:.4f}", self.seed,
                f"{self.runtime_seconds:.3f}", f"{self.solver_convergence_rate:.6f}",
                self.n_test, self.error]

    @classmethod
    def from_csv(cls, rec: dict) -> "ResultRow":
        return cls(rec["variant"], rec["attack"], int(rec["eps_255"]), float(rec["clean_accuracy"]),
                   float(rec["robust_accuracy"]), int(rec["seed"]), float(rec["runtime_seconds"]),
                   float(rec["solver_convergence_rate"]), int(rec["n_test"]), rec["error"])


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue()


def read_csv(path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [ResultRow.from_csv(r) for r in reader]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def environment() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "cpus": os.cpu_count(),
    }


def write_report(rows: list[ResultRow], out_dir, cfg: ExperimentConfig, name: str = "results",
                 extra: dict | None = None) -> Path:
    """CSV plus a JSON sidecar with the resolved config and environment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    _atomic_write(path, rows_to_csv(rows))
    side = {"config": cfg.to_dict(), "environment": environment(), "rows": [asdict(r) for r in rows]}
    side.update(extra or {})
    _atomic_write(out / f"{name}.json", json.dumps(side, indent=2, sort_keys=True))
    return path


# -- data ------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig, seed: int | None = None) -> tuple[Dataset, Dataset]:
    seed = cfg.seed if seed is None else seed
    if cfg.dataset == "mnist":
        return load_mnist_subsets(cfg.subset.train, cfg.subset.test, seed, cfg.data_dir)
    # two-dimensional toy problem squashed into [0, 1] so attacks keep their meaning
    n_tr = cfg.subset.train or 500
    n_te = cfg.subset.test or 200
    full = synth_blobs(classes=2, per_class=(n_tr + n_te + 1) // 2, separation=4.0, seed=seed)
    x = (full.images - full.images.min()) / np.ptp(full.images)
    return (Dataset(x[:n_tr], full.labels[:n_tr], "train", full.note),
            Dataset(x[n_tr : n_tr + n_te], full.labels[n_tr : n_tr + n_te], "test", full.note))


# -- evaluation ------------------------------------------------------------------

def evaluate(model: ModelParams, images: np.ndarray, labels: np.ndarray,
             solver: SolverConfig = SolverConfig(), stability: StabilityConfig = StabilityConfig(),
             batch: int = 500) -> tuple[float, float]:
    """(accuracy %, fraction of samples whose fixed-point residual met tol)."""
    correct = conv = 0
    with T.no_grad():
        W = orthogonal_weight(model.head) if model.orthogonal else None
        for i in range(0, len(images), batch):
            res = forward(model, images[i : i + batch], solver, stability, head_weight=W)
            correct += int((res.logits.data.argmax(axis=1) == labels[i : i + batch]).sum())
            conv += int(res.report.sample_converged.sum())
    T.get_graph().clear()
    n = max(len(labels), 1)
    return 100.0 * correct / n, conv / n


def attack_images(model: ModelParams, images, labels, acfg: AttackConfig,
                  solver: SolverConfig = SolverConfig(), stability: StabilityConfig = StabilityConfig(),
                  batch: int = 500) -> np.ndarray:
    with T.no_grad():
        W = orthogonal_weight(model.head) if model.orthogonal else None

    def grad_fn(xa, ya):
        return loss_and_input_grad(model, xa, ya, solver, stability, W)[1]

    out = [run_attack(grad_fn, images[i : i + batch], labels[i : i + batch], acfg, offset=i)
           for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else images.copy()


def _error_row(variant, attack, k, seed, n, t0, exc) -> ResultRow:
    msg = f"ERROR: {type(exc).__name__}: {exc}".replace("\n", " ")
    log.error("%s/%s/%d seed %d failed\n%s", variant, attack, k, seed, traceback.format_exc())
    return ResultRow(variant, attack, k, float("nan"), float("nan"), seed, time.time() - t0,
                     float("nan"), n, msg)


def run_cell(cfg: ExperimentConfig, variant: str, seed: int, data=None, checkpoint_dir=None):
    """Train one variant for one seed and evaluate the full attack grid.

    Returns (rows, training history). Failures become error-marked rows.
    """
    tr, te = data if data is not None else load_data(cfg, seed)
    solver, stab = cfg.solver_config(), cfg.stability_config()
    n = len(te)
    t0 = time.time()
    try:
        model = init_model(variant, seed, n_in=tr.images.shape[1], classes=max(tr.classes, 2),
                           norm=cfg.train.norm)
        model, history = train(model, tr, cfg.train_config(seed), solver, stab, checkpoint_dir)
        clean, conv = evaluate(model, te.images, te.labels, solver, stab)
    except Exception as exc:  # noqa: BLE001 - recorded as an error row
        rows = [_error_row(variant, CLEAN, 0, seed, n, t0, exc)]
        rows += [_error_row(variant, a, k, seed, n, t0, exc) for a in cfg.attacks for k in cfg.radii_255]
        return rows, []
    rows = [ResultRow(variant, CLEAN, 0, clean, clean, seed, time.time() - t0, conv, n)]
    for fam in cfg.attacks:
        for k in cfg.radii_255:
            t1 = time.time()
            try:
                acfg = AttackConfig.from_255(fam, k, cfg.attack.step_255, seed=seed)
                xa = attack_images(model, te.images, te.labels, acfg, solver, stab)
                rob, conv_a = evaluate(model, xa, te.labels, solver, stab)
                rows.append(ResultRow(variant, fam, k, clean, rob, seed, time.time() - t1, conv_a, n))
            except Exception as exc:  # noqa: BLE001
                rows.append(_error_row(variant, fam, k, seed, n, t1, exc))
            log.info("%s seed %d %s eps %d/255: %s", variant, seed, fam, k, rows[-1].robust_accuracy)
    return rows, history


def _cell_job(args):
    cfg_dict, variant, seed, ckpt = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return run_cell(cfg, variant, seed, checkpoint_dir=ckpt)


def run_ablation(cfg: ExperimentConfig, out_dir=None, name: str = "ablation") -> list[ResultRow]:
    """Every (seed, variant) cell with shared data per seed; rows in grid order.

    The CSV is rewritten atomically after each finished cell; per-epoch
    checkpoints go to ``out_dir/checkpoints``.
    """
    ckpt = None if out_dir is None else str(Path(out_dir) / "checkpoints")
    seeds = list(cfg.seeds) if cfg.seeds else [cfg.seed]
    cells = [(s, v) for s in seeds for v in cfg.variants]
    results: dict[tuple, tuple] = {}

    def flush():
        if out_dir is None:
            return
        rows = [r for c in cells if c in results for r in results[c][0]]
        hist = {f"{v}/seed{s}": results[(s, v)][1] for (s, v) in cells if (s, v) in results}
        write_report(rows, out_dir, cfg, name, {"training": hist})

    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futs = {c: pool.submit(_cell_job, (cfg.to_dict(), c[1], c[0], ckpt)) for c in cells}
            for c in cells:
                results[c] = futs[c].result()
                flush()
    else:
        for s in seeds:
            data = load_data(cfg, s)
            for v in cfg.variants:
                results[(s, v)] = run_cell(cfg, v, s, data, ckpt)
                flush()
    return [r for c in cells for r in results[c][0]]


def summarize(rows: list[ResultRow]) -> dict:
    """Seed-averaged accuracy keyed by (variant, attack, eps_255)."""
    acc: dict[tuple, list] = {}
    for r in rows:
        if r.error:
            continue
        acc.setdefault((r.variant, r.attack, r.eps_255), []).append(r.robust_accuracy)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def format_table(rows: list[ResultRow]) -> str:
    """Text table: one line per variant, clean then attack columns."""
    summ = summarize(rows)
    variants = list(dict.fromkeys(r.variant for r in rows))
    cols = sorted({(a, k) for (_, a, k) in summ if a != CLEAN})
    head = ["variant", "clean"] + [f"{a}@{k}/255" for a, k in cols]
    lines = ["  ".join(f"{h:>14}" for h in head)]
    for v in variants:
        vals = [summ.get((v, CLEAN, 0), float("nan"))] + [summ.get((v, a, k), float("nan")) for a, k in cols]
        lines.append("  ".join([f"{v:>14}"] + [f"{x:>14.2f}" for x in vals]))
    return "\n".join(lines)


# modules whose source determines experiment numerics
NUMERIC_MODULES = ("tensor", "layers", "fixedpoint", "deq", "lyapunov", "model", "attacks",
                   "training", "datasets", "experiments")


def source_digest() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in NUMERIC_MODULES:
        h.update((root / f"{name}.py").read_bytes())
    return h.hexdigest()


def cache_key(cfg: ExperimentConfig) -> str:
    """Stable across output paths and worker counts; changes with numerics."""
    d = cfg.to_dict()
    for k in ("out", "workers", "command", "data_dir"):
        d.pop(k, None)
    blob = json.dumps(d, sort_keys=True) + source_digest()
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached_ablation(cfg: ExperimentConfig, cache_root, name: str = "ablation") -> tuple[list[ResultRow], Path]:
    """Reuse a finished, error-free run with the same key; otherwise run and store it."""
    out = Path(cache_root) / f"{name}-{cache_key(cfg)}"
    path = out / f"{name}.csv"
    expected = len(cfg.seeds or [cfg.seed]) * len(cfg.variants) * (1 + len(cfg.attacks) * len(cfg.radii_255))
    if path.exists():
        rows = read_csv(path)
        if len(rows) == expected and not any(r.error for r in rows):
            return rows, out
    return run_ablation(cfg, out, name), out
