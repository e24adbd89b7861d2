"""Adam, cosine schedule, and the training loop (optionally PGD adversarial training)."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd_attack
from .checkpoint import save_model
from .datasets import Dataset
from .deq import DEQStats, update_norm_stats
from .fixedpoint import SolverConfig
from .layers import feature_extractor_forward, orthogonal_weight
from .lyapunov import StabilityConfig
from .model import ModelParams, forward, loss_and_input_grad
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise TrainingError(f"missing gradient for parameter {p.name or '?'}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return max(0.0, lr0 * (1 + math.cos(math.pi * t / total)) / 2)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch: int = 128
    lr: float = 1e-3
    seed: int = 0
    adv_training: str = "none"  # "none" | "pgd-at"
    pgd_eps: float = 0.031
    pgd_step: float = 0.00784
    pgd_iters: int = 7
    abort_fraction: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.adv_training not in ("none", "pgd-at"):
            raise ValueError(f"unknown adversarial training {self.adv_training!r}")


def _adversarial_batch(model, xb, yb, cfg: TrainConfig, solver, stability, offset):
    acfg = AttackConfig("pgd", cfg.pgd_eps, cfg.pgd_step, cfg.pgd_iters, seed=cfg.seed)
    with T.no_grad():
        W = orthogonal_weight(model.head) if model.orthogonal else None

    def grad_fn(xa, ya):
        return loss_and_input_grad(model, xa, ya, solver, stability, W)[1]

    return pgd_attack(grad_fn, xb, yb, acfg, offset)


def train(model: ModelParams, data: Dataset, cfg: TrainConfig = TrainConfig(),
          solver: SolverConfig = SolverConfig(), stability: StabilityConfig = StabilityConfig(),
          checkpoint_dir=None, on_epoch=None):
    """Minimize softmax cross-entropy over shuffled mini-batches.

    Returns (model, per-epoch log entries).
    """
    opt = Adam(model.parameters(), cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    graph = T.get_graph()
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
        order = rng.permutation(n)
        stats = DEQStats()
        tot_loss = tot_correct = seen = 0
        t0 = time.time()
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            xb, yb = data.images[idx], data.labels[idx]
            if cfg.adv_training == "pgd-at":
                offset = epoch * n + start
                xb = _adversarial_batch(model, xb, yb, cfg, solver, stability, offset)
            graph.clear()
            res = forward(model, xb, solver, stability, stats)
            unconverged = 1.0 - res.report.sample_converged.mean()
            if unconverged > cfg.abort_fraction:
                raise TrainingError(
                    f"epoch {epoch} batch {start // cfg.batch}: fixed-point solve failed on "
                    f"{unconverged:.0%} of samples (max residual {res.report.final_residual:.3e}, "
                    f"{res.report.iterations} iterations)"
                )
            loss = T.softmax_cross_entropy(res.logits, yb)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {start // cfg.batch}")
            model.zero_grad()
            loss.backward()
            opt.step(lr)
            if model.deq.norm_inner.kind == "batch":
                update_norm_stats(model.deq, res.zstar.data, _features(model, xb))
            graph.clear()
            tot_loss += float(loss.data) * len(idx)
            tot_correct += int((res.logits.data.argmax(axis=1) == yb).sum())
            seen += len(idx)
        fwd = np.concatenate([r.sample_residuals for r in stats.forward])
        entry = {
            "epoch": epoch,
            "lr": lr,
            "loss": tot_loss / seen,
            "train_accuracy": 100.0 * tot_correct / seen,
            "solver_convergence_rate": float(np.mean(fwd <= solver.tol)),
            "mean_fixed_point_residual": float(np.mean(fwd)),
            "forward_iterations": float(np.mean([r.iterations for r in stats.forward])),
            "backward_convergence_rate": float(np.mean([r.converged for r in stats.backward]))
            if stats.backward else 1.0,
            "seconds": time.time() - t0,
        }
        history.append(entry)
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in entry.items()})
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_model(Path(checkpoint_dir) / f"{model.variant}-seed{cfg.seed}-epoch{epoch}.ckpt",
                       model, cfg.seed, epoch)
        if on_epoch is not None:
            on_epoch(model, entry)
    return model, history


def _features(model, xb):
    with T.no_grad():
        return feature_extractor_forward(model.feature, xb).data
