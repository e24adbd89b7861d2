import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lyadeq.fixedpoint import (
    SolverConfig,
    SolverDivergenceError,
    anderson_solve,
    picard_solve,
    vjp_linear_solve,
)


def affine(A, b):
    return lambda z: z @ A.T + b if z.ndim > 1 else A @ z + b


def contraction(n, radius, rng):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q @ np.diag(radius * rng.uniform(0.5, 1.0, n) * np.sign(rng.standard_normal(n))) @ Q.T


def test_picard_affine_scalar():
    z, rep = picard_solve(lambda z: 0.5 * z + 1, np.zeros(1), SolverConfig(tol=1e-6, max_iter=25))
    assert z[0] == pytest.approx(2.0, abs=1e-5)
    assert rep.converged and rep.final_residual <= 1e-6 and rep.iterations <= 25


def test_identity_map_converges_immediately():
    z0 = np.array([1.0, -2.0])
    for solve in (picard_solve, anderson_solve):
        z, rep = solve(lambda z: z, z0, SolverConfig())
        np.testing.assert_array_equal(z, z0)
        assert rep.final_residual == 0 and rep.iterations == 0


def test_expansion_diverges_under_picard():
    with pytest.raises(SolverDivergenceError):
        picard_solve(lambda z: 2 * z, np.ones(1), SolverConfig(max_iter=200))


def test_anderson_extrapolates_to_repelling_fixed_point():
    # z = 2z has the fixed point 0; a secant step on a linear map lands on it
    z, rep = anderson_solve(lambda z: 2 * z, np.ones(1), SolverConfig())
    assert rep.converged and abs(z[0]) < 1e-6


def test_anderson_exact_on_affine():
    z, rep = anderson_solve(lambda z: 0.5 * z + 1, np.zeros(1), SolverConfig(tol=1e-10, anderson_m=2))
    assert rep.final_residual <= 1e-10 and rep.iterations <= 3
    assert z[0] == pytest.approx(2.0, abs=1e-10)


def test_anderson_beats_picard_64d():
    rng = np.random.default_rng(0)
    A = 0.9 * np.linalg.qr(rng.standard_normal((64, 64)))[0]  # spectral radius exactly 0.9
    b = rng.standard_normal(64)
    cfg = SolverConfig(tol=1e-8, max_iter=1000)
    za, ra = anderson_solve(affine(A, b), np.zeros(64), cfg)
    zp, rp = picard_solve(affine(A, b), np.zeros(64), cfg)
    assert ra.converged and rp.converged
    assert ra.iterations < rp.iterations
    np.testing.assert_allclose(za, np.linalg.solve(np.eye(64) - A, b), atol=1e-6)


def test_strict_mode_raises_when_budget_exhausted():
    cfg = SolverConfig(tol=1e-12, max_iter=3, strict=True)
    with pytest.raises(SolverDivergenceError) as info:
        picard_solve(lambda z: 0.99 * z + 1, np.zeros(1), cfg)
    assert info.value.report is not None


def test_lenient_mode_returns_best_iterate():
    z, rep = picard_solve(lambda z: 0.99 * z + 1, np.zeros(1), SolverConfig(tol=1e-12, max_iter=3))
    assert not rep.converged and rep.final_residual == min(rep.trace)


def test_batched_residuals_are_per_sample(rng):
    A = contraction(4, 0.5, rng)
    b = rng.standard_normal((3, 4))
    z, rep = anderson_solve(affine(A, b), np.zeros((3, 4)), SolverConfig(tol=1e-9))
    assert rep.sample_residuals.shape == (3,) and np.all(rep.sample_converged)


def test_solvers_deterministic(rng):
    A = contraction(16, 0.8, rng)
    b = rng.standard_normal((5, 16))
    runs = [anderson_solve(affine(A, b), np.zeros((5, 16)))[0] for _ in range(2)]
    np.testing.assert_array_equal(*runs)


def test_vjp_solve_trivial_cases():
    u, _ = vjp_linear_solve(lambda u: np.zeros_like(u), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(u, [1.0, 2.0])
    u, _ = vjp_linear_solve(lambda u: 0.5 * u, np.array([1.0]), SolverConfig(tol=1e-12))
    assert u[0] == pytest.approx(2.0, abs=1e-10)


@given(st.integers(0, 10_000))
def test_vjp_solve_matches_dense_inverse(seed):
    rng = np.random.default_rng(seed)
    J = contraction(8, 0.8, rng)
    seed_vec = rng.standard_normal(8)
    u, rep = vjp_linear_solve(lambda u: J.T @ u, seed_vec, SolverConfig(tol=1e-12, max_iter=200))
    want = np.linalg.solve(np.eye(8) - J.T, seed_vec)
    np.testing.assert_allclose(u, want, atol=1e-8)


@pytest.mark.parametrize("bad", [dict(tol=0), dict(max_iter=0), dict(anderson_m=0), dict(beta=1.5)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)
