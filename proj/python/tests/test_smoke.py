import json

import numpy as np
import pytest

import mirrormamba as mm

TINY = json.dumps({"base_channels": 4, "d_state": 2, "stage_depths": [1, 1, 1, 1], "mode": "video"})


def test_generate_scene_shapes_and_determinism():
    s = mm.generate_scene(64, 64, cues="all", seed=3)
    for key in ("rgb", "depth", "flow"):
        assert s[key].shape == (3, 64, 64)
        assert s[key].dtype == np.float32
    assert s["mask"].shape == (1, 64, 64)
    assert set(np.unique(s["mask"])) <= {0.0, 1.0}
    spec = s["spec"]
    y, x, h, w = spec["mirror"]
    assert s["mask"][0, y : y + h, x : x + w].all()
    assert s["mask"].sum() == h * w
    again = mm.generate_scene(64, 64, cues="all", seed=3)
    assert np.array_equal(s["rgb"], again["rgb"])
    rendered = mm.render_scene(spec, seed=3)
    assert np.array_equal(rendered["flow"], s["flow"])


def test_metrics_worked_examples():
    gt = np.zeros(16, np.float32)
    gt[[0, 1, 4, 5]] = 1
    pred = np.zeros(16, np.float32)
    pred[[0, 2, 4, 6]] = 1
    assert mm.iou(pred, gt) == pytest.approx(2 / 6, abs=0)
    gt2 = np.zeros(16, np.float32)
    gt2[:2] = 1
    pred2 = np.zeros(16, np.float32)
    pred2[:4] = 1
    assert round(mm.f_beta(pred2, gt2), 4) == 0.5652
    pred3 = np.zeros(16, np.float32)
    pred3[:5] = 1
    assert mm.accuracy(pred3, gt2) == 13 / 16
    assert mm.mae(gt, gt) == 0.0
    with pytest.raises(ValueError):
        mm.iou(pred, gt[:15])


def test_poly_lr():
    assert mm.poly_lr(0, 1000) == 6e-5
    assert mm.poly_lr(1000, 1000) == 0.0
    assert mm.poly_lr(500, 1000) == pytest.approx(6e-5 * 0.5**0.9, abs=1e-12)
    with pytest.raises(ValueError):
        mm.poly_lr(1001, 1000)


def _scan_reference(x, g, p):
    # The recurrence written with numpy, independent of the C++ kernel.
    L, D = x.shape
    N = p["a_log"].shape[1]
    h = np.zeros((D, N))
    y = np.zeros((L, D))
    A = -np.exp(p["a_log"])
    for t in range(L):
        delta = np.logaddexp(0.0, p["dt_up"] @ (p["dt_down"] @ x[t]) + p["dt_bias"])
        b = p["b_proj"] @ x[t]
        c = p["c_proj"] @ g[t]
        h = np.exp(delta[:, None] * A) * h + (delta * x[t])[:, None] * b[None, :]
        y[t] = h @ c + p["d_skip"] * x[t]
    return y


def test_selective_scan_matches_numpy():
    rng = np.random.default_rng(0)
    p = mm.init_scan_params(3, 4, seed=1)
    p = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in p.items()}
    x = rng.standard_normal((12, 3))
    g = rng.standard_normal((12, 3))
    assert np.abs(mm.selective_scan(x, p) - _scan_reference(x, x, p)).max() < 1e-10
    assert np.abs(mm.cross_selective_scan(x, g, p) - _scan_reference(x, g, p)).max() < 1e-10
    batched = mm.selective_scan(np.stack([x, g]), p)
    assert batched.shape == (2, 12, 3)


def test_model_predict_and_round_trip(tmp_path):
    model = mm.Model(TINY)
    s = mm.generate_scene(32, 32, seed=5)
    prob = model.predict([s["rgb"], s["depth"], s["flow"]])
    assert prob.shape == (1, 1, 32, 32)
    assert ((prob >= 0) & (prob <= 1)).all()
    path = tmp_path / "m.mmck"
    model.save(path)
    loaded = mm.Model.load(path)
    assert loaded.parameter_total == model.parameter_total
    assert np.array_equal(loaded.predict([s["rgb"], s["depth"], s["flow"]]), prob)
    with pytest.raises(ValueError):
        model.predict([s["rgb"], s["depth"]])
    with pytest.raises(RuntimeError):
        mm.Model.load(tmp_path / "missing.mmck")


def test_make_dataset(tmp_path):
    manifest = mm.make_dataset(tmp_path / "d", 3, 2, cues="mixed", seed=4, size=32)
    assert len(manifest["samples"]) == 5
    assert (tmp_path / "d" / "manifest.json").exists()
    assert sorted(e["split"] for e in manifest["samples"]) == ["test", "test", "train", "train", "train"]
