import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lyadeq.attacks import (
    AttackConfig,
    AttackError,
    ifgsm_attack,
    pgd_attack,
    project,
    run_attack,
    steps_for_radius,
    uniform_start,
)
from lyadeq.fixedpoint import SolverDivergenceError


def noisy_grad(seed=0):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((784, 3))
    return lambda x, y: np.sin(x @ W) @ W.T  # arbitrary smooth field


@pytest.mark.parametrize("k, n", [(2, 2), (4, 5), (6, 7), (8, 10)])
def test_steps_for_radius(k, n):
    assert steps_for_radius(k / 255) == n


def test_steps_for_zero_radius():
    assert steps_for_radius(0.0) == 0


@given(st.integers(0, 16), st.sampled_from(["ifgsm", "pgd"]), st.integers(0, 1000))
def test_containment(k, family, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (4, 784))
    x[:, :50] = 0.0
    x[:, 50:100] = 1.0  # pixels on the range boundary
    cfg = AttackConfig.from_255(family, k, seed=seed)
    xa = run_attack(noisy_grad(seed), x, np.zeros(4, int), cfg)
    assert np.max(np.abs(xa - x)) <= cfg.eps + 1e-12
    assert xa.min() >= 0.0 and xa.max() <= 1.0


@pytest.mark.parametrize("family", ["ifgsm", "pgd"])
def test_zero_radius_is_identity(family):
    x = np.random.default_rng(0).uniform(0, 1, (3, 784))
    xa = run_attack(noisy_grad(), x, np.zeros(3, int), AttackConfig(family, eps=0.0))
    np.testing.assert_array_equal(xa, x)


def test_linear_model_single_step():
    w = np.random.default_rng(1).standard_normal((1, 10))
    x = np.full((1, 10), 0.5)
    cfg = AttackConfig("ifgsm", eps=0.1, step=1 / 255, steps=1)
    xa = ifgsm_attack(lambda a, b: np.broadcast_to(w, a.shape), x, np.zeros(1, int), cfg)
    np.testing.assert_allclose(xa - x, np.sign(w) / 255, atol=1e-15)


def test_pgd_deterministic_and_seed_sensitive():
    x = np.random.default_rng(3).uniform(0, 1, (5, 784))
    y = np.zeros(5, int)
    g = noisy_grad()
    a = pgd_attack(g, x, y, AttackConfig("pgd", 8 / 255, seed=7))
    b = pgd_attack(g, x, y, AttackConfig("pgd", 8 / 255, seed=7))
    c = pgd_attack(g, x, y, AttackConfig("pgd", 8 / 255, seed=8))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_pgd_noise_is_shard_independent():
    x = np.random.default_rng(3).uniform(0, 1, (6, 20))
    whole = uniform_start(x, 0.1, seed=2)
    halves = np.concatenate([uniform_start(x[:3], 0.1, 2, 0), uniform_start(x[3:], 0.1, 2, 3)])
    np.testing.assert_array_equal(whole, halves)


def test_project_clips_ball_and_range():
    x = np.array([[0.0, 0.5, 1.0]])
    out = project(np.array([[-0.5, 0.9, 1.5]]), x, 0.1)
    np.testing.assert_allclose(out, [[0.0, 0.6, 1.0]])


def test_solver_failure_surfaces_as_attack_error():
    def bad(x, y):
        raise SolverDivergenceError("blow-up")

    with pytest.raises(AttackError):
        ifgsm_attack(bad, np.zeros((1, 4)), np.zeros(1, int), AttackConfig("ifgsm", 2 / 255))


@pytest.mark.parametrize("kw", [dict(family="fgsm"), dict(eps=-1.0), dict(step=0.0), dict(steps=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)
