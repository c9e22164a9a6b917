import json
import math
import os
import pathlib

import numpy as np
import pytest

import gml_longtail as gml

SOURCE = pathlib.Path(os.environ.get("GML_SOURCE_DIR", pathlib.Path(__file__).resolve().parents[2]))


def tiny_config(seed=3):
    return {
        "dataset": {
            "num_classes": 4,
            "imbalance_factor": 10.0,
            "seed": seed,
            "synthetic": {"n_max": 80, "test_per_class": 50},
        },
        "model": {"hidden": [16], "feature_dim": 8},
        "queues": {"k": 64, "k_m": 2, "prefill_batch": 32},
        "train": {"epochs": 3, "batch_size": 32, "seed": seed},
        "eval": {"every": 3},
    }


def test_fast_suites_pass():
    for suite in ("identities", "gradients", "queues"):
        props = gml.verify(suite)
        assert props
        assert all(p["passed"] for p in props), [p for p in props if not p["passed"]]


def test_flipped_eta_is_caught():
    assert not all(p["passed"] for p in gml.verify("identities", eta_sign=-1.0))


def test_unknown_suite_is_a_value_error():
    with pytest.raises(ValueError):
        gml.verify("nope")


def test_exact_mi():
    assert gml.exact_mi(np.array([[0.5, 0.0], [0.0, 0.5]])) == pytest.approx(math.log(2.0), abs=1e-15)
    assert abs(gml.exact_mi(np.outer([0.3, 0.7], [0.2, 0.8]))) < 1e-15
    with pytest.raises(ValueError):
        gml.exact_mi(np.full((2, 2), 0.3))


def test_gml_loss_examples():
    q = np.array([[1.0, 0.0]])
    # One class: the loss is zero.
    assert gml.gml_loss(q, [0], np.array([[0.0, 1.0], [1.0, 0.0]]), [0, 2], [0.0], 0.1) == 0.0
    # Two classes sharing one feature under equal priors: ln 2.
    z = np.array([[0.6, 0.8], [0.6, 0.8]])
    eta = [math.log(0.5)] * 2
    assert gml.gml_loss(q, [0], z, [0, 1, 2], eta, 0.3) == pytest.approx(math.log(2.0), abs=1e-15)
    with pytest.raises(ValueError, match="class without contrast samples"):
        gml.gml_loss(q, [0], z, [0, 2, 2], eta, 0.3)


def test_adjusted_nll_matches_numpy():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 4))
    p = rng.dirichlet(np.ones(4))
    y = rng.integers(0, 4, size=5)
    z = f + np.log(p)
    ref = np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(5), y])
    assert gml.adjusted_nll(f, y.tolist(), np.log(p).tolist(), 1.0) == pytest.approx(ref, abs=1e-12)


def test_profiles_and_plan():
    assert gml.exponential_profile(3, 100, 100.0) == [100, 10, 1]
    counts = gml.pareto_profile(20, 500, 6.0)
    assert counts[0] == 500 and counts == sorted(counts, reverse=True)
    caps = gml.plan_capacities([500, 50, 5], 60, 2)
    assert sum(caps) == 60 and min(caps) >= 2


def test_config_round_trip():
    cfg = gml.load_config(str(SOURCE / "configs" / "synthetic_teacher.json"))
    assert gml.config_hash(cfg) == gml.config_hash(str(SOURCE / "configs" / "synthetic_teacher.json"))
    with pytest.raises(ValueError):
        gml.config_hash({"loss": {"gama": 1.0}})


def test_make_longtail_train_and_evaluate(tmp_path):
    cfg = tiny_config()
    made = gml.make_longtail(cfg, str(tmp_path / "data"))
    assert made["counts"][0] == 80 and made["counts"][-1] == 8
    assert json.loads((tmp_path / "data" / "train.manifest.json").read_text())["counts"] == made["counts"]

    teacher = gml.train(cfg, "teacher", out_dir=str(tmp_path / "t"))
    assert len(teacher["rows"]) == 3
    assert pathlib.Path(teacher["checkpoint"]).exists()
    report = gml.evaluate(teacher["checkpoint"])
    assert report["acc_all"] == pytest.approx(teacher["report"]["acc_all"], abs=1e-12)
    assert report["alpha"] == 0.0

    student_cfg = dict(cfg, loss={"train_tau_g": True})
    with pytest.raises(ValueError, match="teacher"):
        gml.train(student_cfg, "student")
    a = gml.train(student_cfg, "student", teacher_ckpt=teacher["checkpoint"], out_dir=str(tmp_path / "s1"))
    b = gml.train(student_cfg, "student", teacher_ckpt=teacher["checkpoint"], out_dir=str(tmp_path / "s2"))
    assert a["rows"][-1]["loss_gml"] > 0.0
    assert a["tau_g"] != pytest.approx(0.1, abs=1e-6)
    assert pathlib.Path(a["checkpoint"]).read_bytes() == pathlib.Path(b["checkpoint"]).read_bytes()
