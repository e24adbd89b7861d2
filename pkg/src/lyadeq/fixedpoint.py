"""Fixed-point solvers for z = f(z): Picard iteration and Anderson acceleration.

States are numpy arrays. A 1-D state is a single problem; for ndim >= 2 the
leading axis indexes independent problems that share the stopping rule (the
batch is done when its worst sample is). Each sample keeps its best iterate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor


class SolverDivergenceError(RuntimeError):
    def __init__(self, msg, report: "SolverReport | None" = None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-4
    max_iter: int = 50
    anderson_m: int = 5
    beta: float = 1.0
    ridge: float = 1e-8
    # residual growth (relative to the starting residual) treated as blow-up
    divergence_factor: float = 1e8
    # raise instead of returning the best iterate when the budget runs out
    strict: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.anderson_m < 1:
            raise ValueError("anderson_m must be >= 1")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")


@dataclass
class SolverReport:
    iterations: int
    final_residual: float
    trace: list[float]
    converged: bool
    initial_residual: float = 0.0
    sample_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fallback_steps: int = 0
    method: str = ""
    tol: float = 0.0

    @property
    def sample_converged(self) -> np.ndarray:
        return self.sample_residuals <= self.tol


def _flatten(z) -> tuple[np.ndarray, tuple]:
    z = np.array(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    shape = z.shape
    if z.ndim <= 1:
        return z.reshape(1, -1), shape
    return z.reshape(shape[0], -1), shape


class _Tracker:
    """Best-iterate bookkeeping shared by both solvers."""

    def __init__(self, z, r, cfg, method):
        self.best_z = z.copy()
        self.best_r = r.copy()
        self.r0 = float(r.max())
        self.trace: list[float] = []
        self.cfg = cfg
        self.method = method
        self.fallbacks = 0

    def update(self, z, r):
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(r))):
            raise SolverDivergenceError(
                f"{self.method}: non-finite iterate at step {len(self.trace) + 1}",
                self.report(),
            )
        better = r < self.best_r
        self.best_z[better] = z[better]
        self.best_r[better] = r[better]
        self.trace.append(float(r.max()))
        if r.max() > self.cfg.divergence_factor * max(self.r0, 1.0):
            raise SolverDivergenceError(
                f"{self.method}: residual grew to {r.max():.3e} (start {self.r0:.3e})",
                self.report(),
            )

    @property
    def done(self) -> bool:
        return float(self.best_r.max()) <= self.cfg.tol

    def report(self) -> SolverReport:
        final = float(self.best_r.max())
        rep = SolverReport(
            iterations=len(self.trace),
            final_residual=final,
            trace=list(self.trace),
            converged=final <= self.cfg.tol,
            initial_residual=self.r0,
            sample_residuals=self.best_r.copy(),
            fallback_steps=self.fallbacks,
            method=self.method,
            tol=self.cfg.tol,
        )
        return rep

    def finish(self, shape):
        rep = self.report()
        if self.cfg.strict and not rep.converged:
            raise SolverDivergenceError(
                f"{self.method}: no convergence in {self.cfg.max_iter} iterations "
                f"(residual {rep.final_residual:.3e} > {self.cfg.tol:.1e})",
                rep,
            )
        return self.best_z.reshape(shape), rep


def _residual(fz, z):
    return np.max(np.abs(fz - z), axis=1)


def picard_solve(fn: Callable[[np.ndarray], np.ndarray], z0, cfg: SolverConfig = SolverConfig()):
    """Plain iteration z <- fn(z). Returns (z*, SolverReport)."""
    z, shape = _flatten(z0)

    def f(v):
        return np.asarray(fn(v.reshape(shape)), dtype=np.float64).reshape(v.shape)

    fz = f(z)
    tr = _Tracker(z, _residual(fz, z), cfg, "picard")
    for _ in range(cfg.max_iter):
        if tr.done:
            break
        z = fz
        fz = f(z)
        tr.update(z, _residual(fz, z))
    return tr.finish(shape)


def anderson_mix(G: np.ndarray, ridge: float) -> np.ndarray:
    """Mixing weights minimizing |sum_i a_i g_i|^2 subject to sum_i a_i = 1.

    G has shape (batch, k, dim). Solves the bordered normal equations with a
    ridge term scaled by the smallest nonzero Gram diagonal, so the
    regularization is invariant to the residual magnitude and vanishes
    relative to any residual already in the history. Rows whose system is
    singular come back as NaN.
    """
    b, k, _ = G.shape
    gram = G @ G.transpose(0, 2, 1)
    diag = np.diagonal(gram, axis1=1, axis2=2)
    scale = np.where(diag > 0, diag, np.inf).min(axis=1)
    scale = np.where(np.isfinite(scale), scale, 1.0)
    H = np.zeros((b, k + 1, k + 1))
    H[:, 0, 1:] = 1.0
    H[:, 1:, 0] = 1.0
    H[:, 1:, 1:] = gram + (ridge * scale)[:, None, None] * np.eye(k)
    rhs = np.zeros((b, k + 1))
    rhs[:, 0] = 1.0
    try:
        sol = np.linalg.solve(H, rhs[..., None])[..., 0]
        if np.all(np.isfinite(sol)):
            return sol[:, 1:]
    except np.linalg.LinAlgError:
        pass
    alpha = np.full((b, k), np.nan)
    for i in range(b):
        try:
            sol = np.linalg.solve(H[i], rhs[i])
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(sol)):
            alpha[i] = sol[1:]
    return alpha


def anderson_solve(fn: Callable[[np.ndarray], np.ndarray], z0, cfg: SolverConfig = SolverConfig()):
    """Anderson-accelerated fixed-point iteration. Returns (z*, SolverReport)."""
    z, shape = _flatten(z0)
    b, n = z.shape
    m = cfg.anderson_m

    def f(v):
        return np.asarray(fn(v.reshape(shape)), dtype=np.float64).reshape(v.shape)

    Z = np.zeros((b, m, n))
    FZ = np.zeros((b, m, n))
    fz = f(z)
    Z[:, 0], FZ[:, 0] = z, fz
    tr = _Tracker(z, _residual(fz, z), cfg, "anderson")
    for k in range(1, cfg.max_iter + 1):
        if tr.done:
            break
        cnt = min(k, m)
        idx = [(k - 1 - j) % m for j in range(cnt)]
        Zh, Fh = Z[:, idx], FZ[:, idx]
        if cnt == 1:
            z = cfg.beta * Fh[:, 0] + (1 - cfg.beta) * Zh[:, 0]
        else:
            alpha = anderson_mix(Fh - Zh, cfg.ridge)
            bad = ~np.all(np.isfinite(alpha), axis=1)
            if bad.any():
                # Picard step for samples whose Gram system failed
                alpha[bad] = 0.0
                alpha[bad, 0] = 1.0
                tr.fallbacks += int(bad.sum())
            mixed_f = np.einsum("bk,bkn->bn", alpha, Fh)
            mixed_z = np.einsum("bk,bkn->bn", alpha, Zh)
            z = cfg.beta * mixed_f + (1 - cfg.beta) * mixed_z
        fz = f(z)
        Z[:, k % m], FZ[:, k % m] = z, fz
        tr.update(z, _residual(fz, z))
    return tr.finish(shape)


SOLVERS = {"anderson": anderson_solve, "picard": picard_solve}


def vjp_linear_solve(vjp: Callable[[np.ndarray], np.ndarray], seed, cfg: SolverConfig = SolverConfig(),
                     solver: str = "anderson"):
    """Solve u = seed + vjp(u), i.e. u^T (I - J) = seed^T for a linear ``vjp``.

    Returns (u, SolverReport).
    """
    seed = np.array(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    return SOLVERS[solver](lambda u: seed + vjp(u), seed.copy(), cfg)
