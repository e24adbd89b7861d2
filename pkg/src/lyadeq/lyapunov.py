"""Lyapunov stability module.

The DEQ residual F(z) = f(z, x) - z is projected so that the learned
Lyapunov function V decreases at least exponentially along it:

    phi(z) = grad V(z)^T F(z) + alpha V(z)
    F_hat  = F                                   if phi <= 0
             F - grad V(z) phi / |grad V(z)|^2   otherwise

grad V is obtained by differentiating V with ``create_graph`` so that the
projected state stays differentiable in z, x and every parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .deq import DEQParams, implicit_map
from .layers import ICNNParams, lyapunov_V
from .tensor import Tensor


@dataclass(frozen=True)
class StabilityConfig:
    alpha: float = 0.1
    gamma: float = 1.0
    steps: int = 1
    guard: float = 1e-12

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def residual_dynamics(p: DEQParams, z, x) -> Tensor:
    return implicit_map(p, z, x) - z


def value_and_grad(icnn: ICNNParams, z) -> tuple[Tensor, Tensor]:
    """V(z) and grad V(z) for a batch of states; both differentiable when grad mode is on."""
    z = T.as_tensor(z)
    outer = T.is_grad_enabled()
    with T.enable_grad():
        zz = z if (z.requires_grad and outer) else Tensor(z.data, requires_grad=True)
        V = lyapunov_V(icnn, zz)
        (gV,) = T.grad(T.sum_(V), zz, create_graph=outer)
    if not outer:
        return V.detach(), gV.detach()
    return V, gV


def projection_terms(F, z, icnn: ICNNParams, cfg: StabilityConfig):
    """(F_hat, phi, V, grad V, active-mask) for batched F, z of shape (batch, n)."""
    F = T.as_tensor(F)
    V, gV = value_and_grad(icnn, z)
    phi = T.sum_(gV * F, axis=1) + V * cfg.alpha
    nsq = T.sum_squares(gV, axis=1)
    active = (phi.data > 0) & (nsq.data >= cfg.guard)
    denom = T.where(active, nsq, 1.0)
    coef = T.where(active, phi / denom, 0.0)
    F_hat = F - gV * T.reshape(coef, (coef.shape[0], 1))
    return F_hat, phi, V, gV, active


def stability_projection(F, z, icnn: ICNNParams, cfg: StabilityConfig = StabilityConfig()) -> Tensor:
    F, z = T.as_tensor(F), T.as_tensor(z)
    single = z.ndim == 1
    if single:
        F = T.reshape(F, (1, F.shape[0]))
        z = T.reshape(z, (1, z.shape[0]))
    F_hat = projection_terms(F, z, icnn, cfg)[0]
    return T.reshape(F_hat, (F_hat.shape[1],)) if single else F_hat


def stabilized_state(p: DEQParams, icnn: ICNNParams, zstar, x,
                     cfg: StabilityConfig = StabilityConfig()) -> Tensor:
    """h = z* + gamma F_hat(z*), repeated ``cfg.steps`` times."""
    h = T.as_tensor(zstar)
    for _ in range(cfg.steps):
        F = residual_dynamics(p, h, x)
        h = h + stability_projection(F, h, icnn, cfg) * cfg.gamma
    return h


def certificate_margin(F, z, icnn: ICNNParams, cfg: StabilityConfig) -> np.ndarray:
    """grad V^T F_hat + alpha V per sample; <= 0 means the decrease condition holds."""
    with T.no_grad():
        F_hat, _, V, gV, _ = projection_terms(T.as_tensor(F), T.as_tensor(z), icnn, cfg)
    return np.sum(gV.data * F_hat.data, axis=1) + cfg.alpha * V.data
