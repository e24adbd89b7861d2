"""Parameterized layers: linear maps, normalization, the ICNN Lyapunov
candidate, and the Householder-parametrized semi-orthogonal output layer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

LN_EPS = 1e-5


def _param(a, name):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    @classmethod
    def init(cls, n_in, n_out, rng, name="linear"):
        bound = 1.0 / np.sqrt(n_in)
        return cls(
            _param(rng.uniform(-bound, bound, (n_out, n_in)), f"{name}.weight"),
            _param(rng.uniform(-bound, bound, n_out), f"{name}.bias"),
        )

    def parameters(self):
        return [self.weight, self.bias]


def linear_forward(p: LinearParams, x) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != p.weight.shape[1]:
        raise DimensionError(f"linear: input extent {x.shape[-1]} != {p.weight.shape[1]}")
    return T.matmul(x, T.transpose(p.weight)) + p.bias


def feature_extractor_forward(p: LinearParams, image) -> Tensor:
    """Flattened 28x28 images -> 64 rectified features."""
    image = T.as_tensor(image)
    if image.ndim != 2 or image.shape[1] != p.weight.shape[1]:
        raise DimensionError(
            f"feature extractor expects (batch, {p.weight.shape[1]}), got {image.shape}"
        )
    return T.relu(linear_forward(p, image))


@dataclass
class NormParams:
    scale: Tensor
    shift: Tensor
    kind: str = "layer"
    # only used by kind="batch": frozen running statistics
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @classmethod
    def init(cls, n, kind="layer", name="norm"):
        if kind not in ("layer", "batch"):
            raise ValueError(f"unknown normalization {kind!r}")
        p = cls(_param(np.ones(n), f"{name}.scale"), _param(np.zeros(n), f"{name}.shift"), kind)
        if kind == "batch":
            p.running_mean = np.zeros(n)
            p.running_var = np.ones(n)
        return p

    def parameters(self):
        return [self.scale, self.shift]


def normalize(x, eps: float = LN_EPS) -> Tensor:
    """Per-row standardization without the affine part."""
    x = T.as_tensor(x)
    if x.shape[-1] < 2:
        raise DimensionError("normalization needs at least 2 features")
    centered = x - T.mean(x, axis=-1, keepdims=True)
    var = T.mean(T.square(centered), axis=-1, keepdims=True)
    return centered * T.power(var + eps, -0.5)


def layer_normalize(x, p: NormParams | None = None) -> Tensor:
    if p is not None and p.kind == "batch":
        return batch_normalize_frozen(x, p)
    out = normalize(x)
    if p is None:
        return out
    return out * p.scale + p.shift


def batch_normalize_frozen(x, p: NormParams) -> Tensor:
    x = T.as_tensor(x)
    inv = 1.0 / np.sqrt(p.running_var + LN_EPS)
    return (x - p.running_mean) * inv * p.scale + p.shift


def update_running_stats(p: NormParams, pre: np.ndarray, momentum: float = 0.1) -> None:
    if p.kind != "batch":
        return
    p.running_mean = (1 - momentum) * p.running_mean + momentum * pre.mean(axis=0)
    p.running_var = (1 - momentum) * p.running_var + momentum * pre.var(axis=0)


@dataclass
class ICNNParams:
    """Two-layer input-convex network g(z); U1 is kept raw and rectified on use."""

    W0: Tensor  # (hidden, n)
    b0: Tensor  # (hidden,)
    W1: Tensor  # (1, n)
    b1: Tensor  # (1,)
    U1_raw: Tensor  # (1, hidden)
    d: float = 0.1

    @classmethod
    def init(cls, n, rng, hidden=64, d=0.1):
        bound = 1.0 / np.sqrt(n)
        return cls(
            W0=_param(rng.uniform(-bound, bound, (hidden, n)), "icnn.W0"),
            b0=_param(rng.uniform(-bound, bound, hidden), "icnn.b0"),
            W1=_param(rng.uniform(-bound, bound, (1, n)), "icnn.W1"),
            b1=_param(rng.uniform(-bound, bound, 1), "icnn.b1"),
            U1_raw=_param(0.1 * rng.standard_normal((1, hidden)), "icnn.U1_raw"),
            d=d,
        )

    @classmethod
    def zeros(cls, n, hidden=64, d=0.1):
        z = np.zeros
        return cls(
            _param(z((hidden, n)), "icnn.W0"), _param(z(hidden), "icnn.b0"),
            _param(z((1, n)), "icnn.W1"), _param(z(1), "icnn.b1"),
            _param(z((1, hidden)), "icnn.U1_raw"), d,
        )

    @property
    def n(self) -> int:
        return self.W0.shape[1]

    def skip_weights(self) -> Tensor:
        return T.relu(self.U1_raw)

    def parameters(self):
        return [self.W0, self.b0, self.W1, self.b1, self.U1_raw]


def _as_batch(z) -> tuple[Tensor, bool]:
    z = T.as_tensor(z)
    if z.ndim == 1:
        return T.reshape(z, (1, z.shape[0])), True
    return z, False


def icnn_forward(p: ICNNParams, z) -> Tensor:
    """g(z), one scalar per sample (shape (batch,), or () for a single vector)."""
    z, single = _as_batch(z)
    if z.shape[1] != p.n:
        raise DimensionError(f"icnn: state extent {z.shape[1]} != {p.n}")
    q1 = T.smooth_relu(T.matmul(z, T.transpose(p.W0)) + p.b0, p.d)
    pre = (
        T.matmul(q1, T.transpose(p.skip_weights()))
        + T.matmul(z, T.transpose(p.W1))
        + p.b1
    )
    g = T.reshape(T.smooth_relu(pre, p.d), (z.shape[0],))
    return T.reshape(g, ()) if single else g


def lyapunov_V(p: ICNNParams, z) -> Tensor:
    """V(z) = sigma(g(z) - g(0)) + ||z||^2 per sample."""
    z, single = _as_batch(z)
    g = icnn_forward(p, z)
    g0 = icnn_forward(p, np.zeros((1, p.n)))
    v = T.smooth_relu(g - g0, p.d) + T.sum_squares(z, axis=1)
    return T.reshape(v, ()) if single else v


@dataclass
class OrthogonalFCParams:
    vectors: Tensor  # (r, n) Householder vectors as rows
    n_out: int
    n_in: int

    @classmethod
    def init(cls, n_in, n_out, rng, reflections=None):
        n = max(n_in, n_out)
        r = n if reflections is None else reflections
        return cls(_param(rng.standard_normal((r, n)), "orth.vectors"), n_out, n_in)

    @property
    def n(self) -> int:
        return self.vectors.shape[1]

    def parameters(self):
        return [self.vectors]


DEGENERATE_NORM_SQ = 1e-12


def orthogonal_weight(p: OrthogonalFCParams) -> Tensor:
    """First n_out rows / n_in columns of H_1 H_2 ... H_r, H_j = I - 2 v v^T / |v|^2."""
    n = p.n
    if p.n_out > n or p.n_in > n:
        raise DimensionError(f"orthogonal layer {p.n_out}x{p.n_in} exceeds n={n}")
    rows = Tensor(np.eye(n)[: p.n_out])
    for j in range(p.vectors.shape[0]):
        v = p.vectors[j : j + 1]  # (1, n)
        nsq = float(np.dot(p.vectors.data[j], p.vectors.data[j]))
        if nsq < DEGENERATE_NORM_SQ:
            continue
        proj = T.matmul(rows, T.transpose(v))  # (out, 1)
        rows = rows - T.matmul(proj, v) * (2.0 / T.sum_squares(v))
    return rows[:, : p.n_in]


def orthogonal_fc_forward(p: OrthogonalFCParams, z, weight: Tensor | None = None) -> Tensor:
    z = T.as_tensor(z)
    if z.shape[-1] != p.n_in:
        raise DimensionError(f"orthogonal layer: input extent {z.shape[-1]} != {p.n_in}")
    W = orthogonal_weight(p) if weight is None else weight
    return T.matmul(z, T.transpose(W))


def orthogonality_defect(W) -> float:
    W = W.data if isinstance(W, Tensor) else np.asarray(W)
    return float(np.max(np.abs(W @ W.T - np.eye(W.shape[0]))))
