"""Runtime invariant suite with measured margins for each check."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd_attack
from .deq import DEQParams, deq_forward
from .fixedpoint import SolverConfig
from .layers import ICNNParams, icnn_forward, lyapunov_V, orthogonal_weight, orthogonality_defect
from .lyapunov import StabilityConfig, certificate_margin
from .model import ModelParams, forward, loss_and_input_grad

CERTIFICATE_TOL = 1e-9
ORTHO_TOL = 1e-6
CONVEXITY_TOL = 1e-9
FD_REL_TOL = 1e-3
CONVERGED_FRACTION = 0.99


@dataclass
class InvariantResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: measured={self.measured:.3e} threshold={self.threshold:.3e} {self.detail}".rstrip()


def check_lyapunov(icnn: ICNNParams, n_states: int = 1000, alpha: float = 0.1, seed: int = 0,
                   scale: float = 2.0) -> list[InvariantResult]:
    """Decrease certificate, V(0) = 0, V >= |z|^2 and midpoint convexity of g."""
    rng = np.random.default_rng(seed)
    n = icnn.n
    z = scale * rng.standard_normal((n_states, n))
    F = scale * rng.standard_normal((n_states, n))
    cfg = StabilityConfig(alpha=alpha)
    margin = float(np.max(certificate_margin(F, z, icnn, cfg)))
    with T.no_grad():
        V = lyapunov_V(icnn, z).data
        v0 = abs(float(lyapunov_V(icnn, np.zeros(n)).data))
        a, b = z, scale * rng.standard_normal((n_states, n))
        gap = icnn_forward(icnn, (a + b) / 2).data - (icnn_forward(icnn, a).data + icnn_forward(icnn, b).data) / 2
    lower = float(np.max(np.sum(z * z, axis=1) - V))
    return [
        InvariantResult("lyapunov_decrease", margin <= CERTIFICATE_TOL, margin, CERTIFICATE_TOL,
                        f"max grad V^T F_hat + alpha V over {n_states} states"),
        InvariantResult("lyapunov_zero_at_origin", v0 <= 1e-12, v0, 1e-12),
        InvariantResult("lyapunov_lower_bound", lower <= 1e-12, lower, 1e-12, "max |z|^2 - V(z)"),
        InvariantResult("icnn_midpoint_convexity", float(gap.max()) <= CONVEXITY_TOL, float(gap.max()),
                        CONVEXITY_TOL, "max g(mid) - mean(g(a), g(b))"),
    ]


def check_skip_nonnegative(icnn: ICNNParams) -> InvariantResult:
    m = float(icnn.skip_weights().data.min()) + 0.0
    return InvariantResult("icnn_skip_nonnegative", m >= 0.0, m, 0.0, "min rectified skip weight")


def check_orthogonality(W) -> InvariantResult:
    d = orthogonality_defect(W)
    return InvariantResult("orthogonal_rows", d <= ORTHO_TOL, d, ORTHO_TOL, "max |W W^T - I|")


def check_primitive_gradients(seed: int = 0) -> InvariantResult:
    """Reverse-mode gradient of a composite expression against central differences."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((5, 4))
    x0 = rng.standard_normal((3, 5))

    def f(xv):
        x = T.as_tensor(xv)
        h = T.smooth_relu(T.matmul(x, A), 0.1) + T.exp(x[:, :4] * 0.3)
        return T.sum_(T.log(h * h + 1.0)) + T.sum_squares(T.relu(x))

    xt = T.Tensor(x0, requires_grad=True)
    (g,) = T.grad(f(xt), xt)
    with T.no_grad():
        fd = T.finite_difference_gradient(lambda v: f(v).data, x0, 1e-6)
    err = float(np.max(np.abs(g.data - fd)) / max(np.max(np.abs(fd)), 1e-12))
    return InvariantResult("tensor_gradient_oracle", err <= 1e-6, err, 1e-6, "relative error vs central FD")


def check_implicit_gradient(seed: int = 0, n: int = 8) -> InvariantResult:
    """d/dx of a linear readout of z*(x) on a small instance, against central differences."""
    rng = np.random.default_rng(seed)
    p = DEQParams.init(n, rng)
    x0 = rng.standard_normal((2, n))
    w = rng.standard_normal((2, n))
    cfg = SolverConfig(tol=1e-11, max_iter=300)

    def loss(xv):
        with T.no_grad():
            return float(np.sum(deq_forward(p, xv, cfg)[0].data * w))

    xt = T.Tensor(x0, requires_grad=True)
    z, _ = deq_forward(p, xt, cfg)
    (g,) = T.grad(T.sum_(z * w), xt)
    fd = T.finite_difference_gradient(loss, x0, 1e-5)
    err = float(np.max(np.abs(g.data - fd)) / max(np.max(np.abs(fd)), 1e-12))
    return InvariantResult("implicit_gradient_oracle", err <= FD_REL_TOL, err, FD_REL_TOL,
                           "input gradient through the fixed point vs central FD")


def check_solver(model: ModelParams, images: np.ndarray, solver: SolverConfig,
                 stability: StabilityConfig) -> InvariantResult:
    with T.no_grad():
        W = orthogonal_weight(model.head) if model.orthogonal else None
        res = forward(model, images, solver, stability, head_weight=W)
    T.get_graph().clear()
    frac = float(res.report.sample_converged.mean())
    return InvariantResult("fixed_point_residual", frac >= CONVERGED_FRACTION, frac, CONVERGED_FRACTION,
                           f"fraction of {len(images)} samples with residual <= {solver.tol:g}")


def check_attack_containment(model: ModelParams, images, labels, solver, stability,
                             eps_255: int = 8, seed: int = 0) -> InvariantResult:
    acfg = AttackConfig.from_255("pgd", eps_255, seed=seed)
    with T.no_grad():
        W = orthogonal_weight(model.head) if model.orthogonal else None
    xa = pgd_attack(lambda a, b: loss_and_input_grad(model, a, b, solver, stability, W)[1],
                    images, labels, acfg)
    excess = float(max(np.max(np.abs(xa - images)) - acfg.eps, -xa.min(), xa.max() - 1.0, 0.0))
    return InvariantResult("attack_containment", excess <= 1e-12, excess, 1e-12,
                           f"l-inf ball {eps_255}/255 and [0, 1] range")


def verify_model(model: ModelParams, images: np.ndarray, labels: np.ndarray,
                 solver: SolverConfig = SolverConfig(), stability: StabilityConfig = StabilityConfig(),
                 head_weight=None, seed: int = 0, n_states: int = 1000) -> list[InvariantResult]:
    """Run every check that applies to the model's variant.

    ``head_weight`` overrides the parametrized orthogonal weight (negative controls).
    """
    out = [check_primitive_gradients(seed), check_implicit_gradient(seed)]
    if model.icnn is not None:
        out += check_lyapunov(model.icnn, n_states, stability.alpha, seed)
        out.append(check_skip_nonnegative(model.icnn))
    if model.orthogonal or head_weight is not None:
        W = head_weight
        if W is None:
            with T.no_grad():
                W = orthogonal_weight(model.head)
        out.append(check_orthogonality(W))
    out.append(check_solver(model, images, solver, stability))
    k = min(len(images), 16)
    out.append(check_attack_containment(model, images[:k], labels[:k], solver, stability, seed=seed))
    return out


def report_dict(results: list[InvariantResult]) -> dict:
    return {"passed": all(r.passed for r in results), "checks": [asdict(r) for r in results]}
