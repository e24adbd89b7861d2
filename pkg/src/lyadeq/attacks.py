"""White-box l-infinity attacks: I-FGSM and PGD with random start."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .fixedpoint import SolverDivergenceError

GradFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class AttackError(RuntimeError):
    pass


def steps_for_radius(eps: float) -> int:
    """floor(min(255 eps + 4, 1.25 * 255 eps)), evaluated on the rational k = 255 eps."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    k = Fraction(eps * 255).limit_denominator(10**6)
    return math.floor(min(k + 4, k * Fraction(5, 4)))


@dataclass(frozen=True)
class AttackConfig:
    family: str = "pgd"  # "ifgsm" | "pgd"
    eps: float = 8 / 255
    step: float = 1 / 255
    steps: int | None = None  # None -> steps_for_radius(eps)
    clip: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("ifgsm", "pgd"):
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def n_steps(self) -> int:
        return self.steps if self.steps is not None else steps_for_radius(self.eps)

    @classmethod
    def from_255(cls, family: str, k: int, step_255: float = 1.0, **kw) -> "AttackConfig":
        return cls(family=family, eps=k / 255, step=step_255 / 255, **kw)


def project(x_adv: np.ndarray, x: np.ndarray, eps: float, clip=(0.0, 1.0)) -> np.ndarray:
    """Clip into the eps-ball around x intersected with the pixel range."""
    out = np.clip(x_adv, x - eps, x + eps)
    return np.clip(out, clip[0], clip[1])


def _signed_steps(grad_fn: GradFn, x, y, start, cfg: AttackConfig) -> np.ndarray:
    x_adv = start
    for _ in range(cfg.n_steps):
        try:
            g = grad_fn(x_adv, y)
        except SolverDivergenceError as exc:
            raise AttackError(f"input gradient unavailable: {exc}") from exc
        x_adv = project(x_adv + cfg.step * np.sign(g), x, cfg.eps, cfg.clip)
    return x_adv


def ifgsm_attack(grad_fn: GradFn, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Iterated signed-gradient ascent started at x."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.eps == 0:
        return x.copy()
    return _signed_steps(grad_fn, x, y, x.copy(), cfg)


def uniform_start(x: np.ndarray, eps: float, seed: int, offset: int = 0) -> np.ndarray:
    """x + U[-eps, eps] with one RNG stream per sample index (shard-independent)."""
    noise = np.empty_like(x)
    for i in range(len(x)):
        rng = np.random.default_rng([seed, offset + i])
        noise[i] = rng.uniform(-eps, eps, x.shape[1:])
    return noise


def pgd_attack(grad_fn: GradFn, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               offset: int = 0) -> np.ndarray:
    """Projected signed-gradient ascent from a uniform random start in the ball."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.eps == 0:
        return x.copy()
    start = project(x + uniform_start(x, cfg.eps, cfg.seed, offset), x, cfg.eps, cfg.clip)
    return _signed_steps(grad_fn, x, y, start, cfg)


def run_attack(grad_fn: GradFn, x, y, cfg: AttackConfig, offset: int = 0) -> np.ndarray:
    if cfg.family == "ifgsm":
        return ifgsm_attack(grad_fn, x, y, cfg)
    return pgd_attack(grad_fn, x, y, cfg, offset)
