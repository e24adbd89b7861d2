import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lyadeq import tensor as T
from lyadeq.deq import DEQParams, deq_forward
from lyadeq.fixedpoint import SolverConfig
from lyadeq.layers import ICNNParams
from lyadeq.lyapunov import (
    StabilityConfig,
    certificate_margin,
    projection_terms,
    residual_dynamics,
    stability_projection,
    stabilized_state,
)
from lyadeq.tensor import Tensor

QUADRATIC = ICNNParams.zeros(2)  # V(z) = |z|^2


def proj(F, z, alpha, icnn=QUADRATIC):
    return stability_projection(np.array(F, float), np.array(z, float), icnn, StabilityConfig(alpha=alpha)).data


def test_hand_projection_active_branch():
    F_hat = proj([1, 0], [1, 0], 2.0)
    np.testing.assert_allclose(F_hat, [-1, 0], atol=1e-12)
    # the decrease condition holds with equality after projection
    assert np.dot(2 * np.array([1.0, 0]), F_hat) == pytest.approx(-2.0, abs=1e-12)


def test_hand_projection_inactive_branch():
    np.testing.assert_array_equal(proj([-2, 0], [1, 0], 1.0), [-2, 0])


def test_origin_leaves_F_unchanged():
    np.testing.assert_array_equal(proj([0.3, -0.7], [0, 0], 0.5), [0.3, -0.7])


def test_hand_stabilized_state():
    z = np.array([1.0, 0])
    h = z + 1.0 * proj([1, 0], z, 2.0)
    np.testing.assert_allclose(h, [0, 0], atol=1e-12)


def test_residual_dynamics_zero_network():
    p = DEQParams.zeros(4)
    assert np.all(residual_dynamics(p, np.zeros((1, 4)), np.zeros((1, 4))).data == 0)


def test_residual_small_at_fixed_point(rng):
    p = DEQParams.init(16, rng)
    x = rng.standard_normal((4, 16))
    cfg = SolverConfig(tol=1e-8)
    z, rep = deq_forward(p, x, cfg)
    with T.no_grad():
        F = residual_dynamics(p, z, x).data
    assert np.abs(F).max() <= 1e-7


def _random_icnn(seed, n=5):
    rng = np.random.default_rng(seed)
    p = ICNNParams.init(n, rng, hidden=7)
    p.U1_raw.data = np.abs(p.U1_raw.data) + 0.1
    return p, rng


@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_certificate_holds(seed, alpha):
    icnn, rng = _random_icnn(seed)
    z, F = rng.standard_normal((2, 200, 5)) * 3
    assert certificate_margin(F, z, icnn, StabilityConfig(alpha=alpha)).max() <= 1e-9


@given(st.integers(0, 10_000))
def test_projection_idempotent(seed):
    icnn, rng = _random_icnn(seed)
    z, F = rng.standard_normal((2, 50, 5))
    cfg = StabilityConfig(alpha=0.5)
    with T.no_grad():
        once = stability_projection(F, z, icnn, cfg).data
        twice = stability_projection(once, z, icnn, cfg).data
    np.testing.assert_allclose(twice, once, atol=1e-10)


@given(st.integers(0, 10_000))
def test_projection_is_closest_feasible_point(seed):
    icnn, rng = _random_icnn(seed)
    z, F = rng.standard_normal((2, 50, 5))
    cfg = StabilityConfig(alpha=0.5)
    with T.no_grad():
        F_hat, phi, V, gV, active = (t.data if isinstance(t, Tensor) else t
                                     for t in projection_terms(F, z, icnn, cfg))
    np.testing.assert_array_equal(F_hat[~active], F[~active])
    # any other point of the half-space {G : gV.G <= -alpha V} is at least as far from F
    for _ in range(20):
        G = F_hat + rng.standard_normal(F.shape)
        feasible = np.sum(gV * G, axis=1) + cfg.alpha * V <= 0
        d_hat = np.linalg.norm(F - F_hat, axis=1)
        d_g = np.linalg.norm(F - G, axis=1)
        assert np.all(d_g[feasible] >= d_hat[feasible] - 1e-12)


def test_stabilized_state_gradient_matches_fd(rng):
    p = DEQParams.init(8, rng)
    icnn = ICNNParams.init(8, rng, hidden=8)
    cfg = SolverConfig(tol=1e-11, max_iter=300)
    stab = StabilityConfig(alpha=0.5)
    x0 = rng.standard_normal((3, 8))
    w = rng.standard_normal((3, 8))

    def run(x):
        z, _ = deq_forward(p, x, cfg)
        return T.sum_(stabilized_state(p, icnn, z, x, stab) * w)

    x = Tensor(x0, requires_grad=True)
    (g,) = T.grad(run(x), x)

    def loss(v):
        with T.no_grad():
            return float(run(v).data)

    fd = T.finite_difference_gradient(loss, x0, 1e-5)
    assert np.max(np.abs(g.data - fd)) / np.max(np.abs(fd)) <= 1e-3


def test_icnn_parameters_receive_gradient(rng):
    p = DEQParams.init(8, rng)
    icnn = ICNNParams.init(8, rng, hidden=8)
    icnn.b1.data = np.array([1.0])  # keep the output unit on its linear branch
    icnn.W1.data = rng.standard_normal((1, 8))
    x = rng.standard_normal((6, 8))
    z, _ = deq_forward(p, x)
    T.sum_(T.square(stabilized_state(p, icnn, z, x))).backward()
    assert icnn.W0.grad is not None and np.any(icnn.W0.grad.data != 0)


@pytest.mark.parametrize("bad", [dict(alpha=-1), dict(gamma=0), dict(steps=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        StabilityConfig(**bad)
