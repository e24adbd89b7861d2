import numpy as np
import pytest

from lyadeq import tensor as T
from lyadeq.datasets import synth_blobs
from lyadeq.model import init_model, predict
from lyadeq.tensor import Tensor
from lyadeq.training import Adam, TrainConfig, TrainingError, cosine_lr, train


def blobs01(seed=0, per_class=250):
    ds = synth_blobs(2, per_class, 4.0, seed)
    ds.images = (ds.images - ds.images.min()) / np.ptp(ds.images)
    return ds


def test_adam_first_step_magnitude():
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([p], lr=1e-3)
    p.grad = Tensor(np.array([1.0]))
    opt.step()
    assert p.data[0] == pytest.approx(0.5 - 1e-3, abs=1e-9)


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([0.5, -2.0]), requires_grad=True)
    opt = Adam([p])
    for _ in range(3):
        p.grad = Tensor(np.zeros(2))
        opt.step()
    np.testing.assert_array_equal(p.data, [0.5, -2.0])


def test_adam_missing_gradient():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(TrainingError):
        Adam([p]).step()


def test_cosine_schedule():
    assert cosine_lr(0, 10, 1e-3) == 1e-3
    assert cosine_lr(10, 10, 1e-3) == 0.0
    assert cosine_lr(5, 10, 1e-3) == pytest.approx(5e-4)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1e-3)


def test_lyadeq_fits_two_gaussians():
    ds = blobs01()
    model = init_model("lyadeq", 0, n_in=2, classes=2)
    model, hist = train(model, ds, TrainConfig(epochs=20, batch=64, lr=1e-2))
    assert hist[-1]["train_accuracy"] >= 95.0
    assert all(np.isfinite(h["loss"]) for h in hist)
    assert (predict(model, ds.images) == ds.labels).mean() >= 0.95


def test_history_fields():
    model = init_model("deq", 0, n_in=2, classes=2)
    _, hist = train(model, blobs01(per_class=50), TrainConfig(epochs=1, batch=32))
    assert set(hist[0]) >= {"loss", "train_accuracy", "solver_convergence_rate",
                            "mean_fixed_point_residual", "backward_convergence_rate"}


def test_training_deterministic():
    ds = blobs01(per_class=60)
    params = []
    for _ in range(2):
        m = init_model("lyadeq", 3, n_in=2, classes=2)
        train(m, ds, TrainConfig(epochs=1, batch=32, seed=3))
        params.append([p.data.copy() for p in m.parameters()])
    for a, b in zip(*params):
        np.testing.assert_array_equal(a, b)


def test_pgd_adversarial_training_runs():
    ds = blobs01(per_class=40)
    m = init_model("lyadeq", 0, n_in=2, classes=2)
    _, hist = train(m, ds, TrainConfig(epochs=1, batch=40, adv_training="pgd-at"))
    assert np.isfinite(hist[0]["loss"])


def test_unconverged_batches_abort():
    ds = blobs01(per_class=20)
    m = init_model("deq", 0, n_in=2, classes=2)
    m.deq.outer.weight.data *= 300.0  # strongly expansive map
    from lyadeq.fixedpoint import SolverConfig

    with pytest.raises(TrainingError, match="fixed-point"):
        train(m, ds, TrainConfig(epochs=1, batch=40), SolverConfig(tol=1e-10, max_iter=5))


def test_checkpoints_written_per_epoch(tmp_path):
    m = init_model("deq-orth", 0, n_in=2, classes=2)
    train(m, blobs01(per_class=20), TrainConfig(epochs=2, batch=40), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["deq-orth-seed0-epoch0.ckpt",
                                                          "deq-orth-seed0-epoch1.ckpt"]


def test_batch_norm_mode_trains_and_tracks_statistics():
    m = init_model("lyadeq", 0, n_in=2, classes=2, norm="batch")
    before = m.deq.norm_inner.running_mean.copy()
    _, hist = train(m, blobs01(per_class=60), TrainConfig(epochs=2, batch=40))
    assert np.isfinite(hist[-1]["loss"])
    assert not np.array_equal(before, m.deq.norm_inner.running_mean)
