"""The implicit layer, its fixed-point forward pass and implicit backward pass."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .fixedpoint import SOLVERS, SolverConfig, SolverReport, vjp_linear_solve
from .layers import LinearParams, NormParams, layer_normalize, update_running_stats
from .tensor import DimensionError, Tensor


@dataclass
class DEQParams:
    inner: LinearParams  # W1, b1
    outer: LinearParams  # W2, b2
    norm_inner: NormParams
    norm_out: NormParams

    @classmethod
    def init(cls, n, rng, norm="layer", outer_scale=0.1):
        """``outer_scale`` shrinks W2 so the map starts out contractive."""
        inner = LinearParams.init(n, n, rng, "deq.W1")
        outer = LinearParams.init(n, n, rng, "deq.W2")
        outer.weight.data = outer.weight.data * outer_scale
        return cls(
            inner,
            outer,
            NormParams.init(n, norm, "deq.norm_inner"),
            NormParams.init(n, norm, "deq.norm_out"),
        )

    @classmethod
    def zeros(cls, n, norm="layer"):
        p = cls.init(n, np.random.default_rng(0), norm)
        for t in p.parameters():
            t.data[...] = 0.0
        return p

    @property
    def n(self) -> int:
        return self.inner.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return (
            self.inner.parameters() + self.outer.parameters()
            + self.norm_inner.parameters() + self.norm_out.parameters()
        )

    def leaf_copy(self) -> "DEQParams":
        """Same values as fresh grad-requiring leaves (for local backward graphs)."""

        def lin(p):
            return LinearParams(Tensor(p.weight.data, True), Tensor(p.bias.data, True))

        def nrm(p):
            return replace(p, scale=Tensor(p.scale.data, True), shift=Tensor(p.shift.data, True))

        return DEQParams(lin(self.inner), lin(self.outer), nrm(self.norm_inner), nrm(self.norm_out))


def _inner_pre(p: DEQParams, z) -> Tensor:
    return T.relu(T.matmul(z, T.transpose(p.inner.weight)) + p.inner.bias)


def implicit_map(p: DEQParams, z, x) -> Tensor:
    """f(z, x) = Norm(ReLU(x + W2 Norm(ReLU(W1 z + b1)) + b2))."""
    z, x = T.as_tensor(z), T.as_tensor(x)
    if z.shape != x.shape or z.shape[-1] != p.n:
        raise DimensionError(f"implicit map: z {z.shape}, x {x.shape}, state {p.n}")
    y = T.matmul(layer_normalize(_inner_pre(p, z), p.norm_inner), T.transpose(p.outer.weight))
    y = y + p.outer.bias
    return layer_normalize(T.relu(x + y), p.norm_out)


def numpy_map(p: DEQParams, x: np.ndarray):
    def fn(z):
        with T.no_grad():
            return implicit_map(p, z, x).data

    return fn


def update_norm_stats(p: DEQParams, z: np.ndarray, x: np.ndarray) -> None:
    """Refresh the frozen statistics of batch-mode normalization at a fixed point."""
    if p.norm_inner.kind != "batch":
        return
    with T.no_grad():
        pre = _inner_pre(p, z).data
        update_running_stats(p.norm_inner, pre)
        y = layer_normalize(pre, p.norm_inner) @ p.outer.weight.data.T + p.outer.bias.data
        update_running_stats(p.norm_out, np.maximum(x + y.data, 0.0))


@dataclass
class DEQStats:
    """Counters over forward/backward solves (training diagnostics)."""

    forward: list[SolverReport]
    backward: list[SolverReport]

    def __init__(self):
        self.forward, self.backward = [], []


def deq_forward(p: DEQParams, x, cfg: SolverConfig = SolverConfig(), solver: str = "anderson",
                stats: DEQStats | None = None, z0=None):
    """Solve z* = f(z*, x) from z0 = 0; z* joins the graph through an implicit node.

    Returns (z*, SolverReport).
    """
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != p.n:
        raise DimensionError(f"deq input must be (batch, {p.n}), got {x.shape}")
    start = np.zeros(x.shape) if z0 is None else np.asarray(z0, dtype=np.float64)
    zstar, report = SOLVERS[solver](numpy_map(p, x.data), start, cfg)
    if stats is not None:
        stats.forward.append(report)

    params = p.parameters()
    parents = (x, *params)

    def vjp(g):
        upstream = g.data
        gx, gp = deq_backward(upstream, zstar, x.data, p, cfg, solver, stats)
        return (Tensor(gx), *(Tensor(a) for a in gp))

    out = T._result(zstar, "deq_fixed_point", parents, vjp)
    return out, report


def deq_backward(upstream, zstar, x, p: DEQParams, cfg: SolverConfig = SolverConfig(),
                 solver: str = "anderson", stats: DEQStats | None = None):
    """Implicit-function-theorem gradients for x and the DEQ parameters.

    Solves u = upstream + u^T df/dz at z*, then returns (u^T df/dx, [u^T df/dp]).
    """
    local = p.leaf_copy()
    zl = Tensor(zstar, requires_grad=True)
    xl = Tensor(x, requires_grad=True)
    with T.enable_grad():
        fz = implicit_map(local, zl, xl)

    def vjp_z(u):
        return T.grad(fz, zl, grad_outputs=Tensor(u), retain_graph=True)[0].data

    u, report = vjp_linear_solve(vjp_z, np.asarray(upstream, dtype=np.float64), cfg, solver)
    if stats is not None:
        stats.backward.append(report)
    leaves = [xl, *local.parameters()]
    grads = T.grad(fz, leaves, grad_outputs=Tensor(u), retain_graph=False)
    return grads[0].data, [g.data for g in grads[1:]]
