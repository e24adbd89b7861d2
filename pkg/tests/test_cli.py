import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lyadeq.cli import EXIT_INVARIANT, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from lyadeq.config import ConfigError, ExperimentConfig
from lyadeq.experiments import CSV_HEADER, ResultRow, read_csv, rows_to_csv, run_ablation, summarize
from lyadeq.invariants import check_orthogonality, verify_model
from lyadeq.model import init_model

BLOBS = {"dataset": "blobs", "subset": {"train": 120, "test": 40},
         "train": {"epochs": 1, "batch": 40}}


@pytest.fixture
def blob_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(BLOBS))
    return path


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict(BLOBS)
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg and again.train.epochs == 1


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"solver": {"tol": 1e-4, "nope": 2}},
                                 {"dataset": "cifar"}, {"command": "fly"}, {"train": 3}])
def test_config_rejects_bad_input(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_config_conversions():
    cfg = ExperimentConfig.from_dict({"attack": {"family": "ifgsm", "eps_255": 4, "step_255": 1.0}})
    a = cfg.attack_config()
    assert a.family == "ifgsm" and a.n_steps == 5
    assert cfg.solver_config().tol == 1e-4 and cfg.stability_config().alpha == 0.1


@given(st.integers(0, 255), st.floats(0, 100), st.floats(0, 100))
def test_result_row_csv_round_trip(k, clean, rob):
    row = ResultRow("lyadeq", "pgd", k, clean, rob, 0, 1.0, 1.0, 10)
    assert row.eps == Fraction(k, 255)
    text = rows_to_csv([row])
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert f",{k}/255," in text


def test_result_row_rejects_out_of_range():
    with pytest.raises(ValueError):
        ResultRow("deq", "pgd", 8, 50.0, 101.0, 0, 1.0, 1.0, 10)


def test_ablation_grid_shape(tmp_path):
    cfg = ExperimentConfig.from_dict(BLOBS)
    rows = run_ablation(cfg, tmp_path)
    assert len(rows) == 36
    assert [r.variant for r in rows[::9]] == ["deq", "deq-orth", "lyadeq-noorth", "lyadeq"]
    back = read_csv(tmp_path / "ablation.csv")
    assert len(back) == 36 and not any(r.error for r in back)
    side = json.loads((tmp_path / "ablation.json").read_text())
    assert side["config"] == cfg.to_dict() and "numpy" in side["environment"]
    assert len(summarize(rows)) == 36


def test_ablation_is_deterministic(tmp_path):
    cfg = ExperimentConfig.from_dict({**BLOBS, "variants": ["lyadeq"], "radii_255": [8]})
    a = run_ablation(cfg)
    b = run_ablation(cfg)
    assert [r.robust_accuracy for r in a] == [r.robust_accuracy for r in b]


def test_ablation_failure_becomes_error_rows(tmp_path):
    cfg = ExperimentConfig.from_dict({**BLOBS, "variants": ["deq"], "radii_255": [2],
                                      "solver": {"tol": 1e-12, "max_iter": 1}})
    rows = run_ablation(cfg, tmp_path)
    assert len(rows) == 3 and all(r.error.startswith("ERROR") for r in rows)
    assert len(read_csv(tmp_path / "ablation.csv")) == 3


def test_cli_exit_codes(tmp_path, blob_config):
    assert main(["nonsense"]) == EXIT_USAGE
    assert main(["train", "--variant", "nope"]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text('{"extra": true}')
    assert main(["eval", "--config", str(bad)]) == EXIT_USAGE
    assert main(["eval", "--config", str(blob_config), "--checkpoint", str(tmp_path / "missing"),
                 "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_cli_train_then_attack_eval(tmp_path, blob_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(blob_config), "--variant", "lyadeq", "--out", str(out)]) == EXIT_OK
    ckpt = out / "lyadeq-seed0.ckpt"
    assert ckpt.exists()
    rc = main(["attack-eval", "--config", str(blob_config), "--checkpoint", str(ckpt), "--attack", "pgd",
               "--epsilon", "4", "--out", str(out)])
    assert rc == EXIT_OK
    rows = read_csv(out / "attack_eval.csv")
    assert [(r.attack, r.eps_255) for r in rows] == [("pgd", 4)]


def test_cli_verify_invariants(tmp_path, blob_config):
    rc = main(["verify-invariants", "--config", str(blob_config), "--variant", "lyadeq", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    rep = json.loads((tmp_path / "invariants.json").read_text())
    names = {c["name"]: c for c in rep["checks"]}
    assert names["lyapunov_decrease"]["measured"] <= 1e-9


def test_fresh_model_passes_invariants():
    m = init_model("lyadeq", 0, n_in=30, classes=10)
    x = np.random.default_rng(0).uniform(0, 1, (50, 30))
    results = verify_model(m, x, np.zeros(50, int))
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_corrupted_orthogonal_weight_fails():
    W = np.linalg.qr(np.random.default_rng(0).standard_normal((64, 64)))[0][:10]
    assert check_orthogonality(W).passed
    W[3, 5] += 1e-3
    assert not check_orthogonality(W).passed
    m = init_model("lyadeq", 0, n_in=30, classes=10)
    x = np.random.default_rng(0).uniform(0, 1, (8, 30))
    res = verify_model(m, x, np.zeros(8, int), head_weight=W)
    assert [r.name for r in res if not r.passed] == ["orthogonal_rows"]


def test_cli_verify_reports_failure(tmp_path, blob_config, monkeypatch):
    import lyadeq.invariants as inv

    monkeypatch.setattr(inv, "ORTHO_TOL", -1.0)  # nothing can pass
    rc = main(["verify-invariants", "--config", str(blob_config), "--variant", "deq-orth", "--out", str(tmp_path)])
    assert rc == EXIT_INVARIANT
