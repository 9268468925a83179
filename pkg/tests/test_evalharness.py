import json

import numpy as np
import pytest
from PIL import Image

import oracles
from latentseg.evalharness import (
    EvalDataset, MetricsReport, center_square, evaluate, f_beta, f_beta_curve, iou, load_dataset,
    max_f_beta, pixel_accuracy, thresholds,
)


def test_accuracy_examples():
    gt = np.zeros((4, 4), np.uint8)
    gt[:2] = 1
    assert pixel_accuracy(gt, gt) == 1.0
    assert pixel_accuracy(1 - gt, gt) == 0.0
    assert pixel_accuracy(np.ones_like(gt), gt) == 0.5


def test_iou_examples():
    gt = np.zeros((4, 4), np.uint8)
    gt[:2] = 1
    assert iou(gt, gt) == 1.0
    assert iou(1 - gt, gt) == 0.0
    assert iou(np.ones_like(gt), gt) == 0.5
    assert iou(np.zeros_like(gt), np.zeros_like(gt)) == 1.0


def test_f_beta_examples():
    gt = np.zeros((4, 4), np.uint8)
    gt[:2] = 1
    assert f_beta(gt, gt) == 1.0
    assert f_beta(np.ones_like(gt), gt) == pytest.approx(1.3 * 0.5 / 1.15)
    empty = np.zeros_like(gt)
    assert f_beta(empty, empty) == 1.0
    assert f_beta(empty, gt) == 0.0
    assert f_beta(gt, empty) == 0.0


def test_shape_mismatch_raises():
    for fn in (pixel_accuracy, iou, f_beta):
        with pytest.raises(ValueError):
            fn(np.zeros((3, 3)), np.zeros((3, 4)))


def test_metrics_match_oracles_exactly():
    rng = np.random.default_rng(0)
    for _ in range(300):
        density = rng.uniform(0, 1, 2)
        pred = (rng.random((8, 8)) < density[0]).astype(np.uint8)
        gt = (rng.random((8, 8)) < density[1]).astype(np.uint8)
        assert pixel_accuracy(pred, gt) == oracles.accuracy(pred.tolist(), gt.tolist())
        assert iou(pred, gt) == oracles.iou(pred.tolist(), gt.tolist())
        assert f_beta(pred, gt) == oracles.f_beta(pred.tolist(), gt.tolist())


def test_metrics_transpose_invariant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = rng.integers(0, 2, (5, 7))
        g = rng.integers(0, 2, (5, 7))
        for fn in (pixel_accuracy, iou, f_beta):
            assert fn(p, g) == fn(p.T, g.T)
        s = rng.random((5, 7))
        assert max_f_beta([s], [g]) == max_f_beta([s.T], [g.T])


def test_metric_ranges():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p, g = rng.integers(0, 2, (2, 6, 6))
        for fn in (pixel_accuracy, iou, f_beta):
            assert 0.0 <= fn(p, g) <= 1.0


def test_thresholds_grid():
    t = thresholds(255)
    assert t[0] == 1 / 256 and t[-1] == 255 / 256 and t.size == 255
    with pytest.raises(ValueError):
        thresholds(0)


def test_max_f_beta_binary_inputs():
    rng = np.random.default_rng(3)
    gts = [rng.integers(0, 2, (8, 8)) for _ in range(4)]
    assert max_f_beta([g.astype(float) for g in gts], gts) == 1.0


def test_max_f_beta_dominates_half_threshold():
    rng = np.random.default_rng(4)
    softs = [rng.random((8, 8)) for _ in range(5)]
    gts = [rng.integers(0, 2, (8, 8)) for _ in range(5)]
    at_half = np.mean([f_beta(s >= 0.5, g) for s, g in zip(softs, gts)])
    assert max_f_beta(softs, gts) >= at_half


def test_max_f_beta_brute_force_4x4():
    rng = np.random.default_rng(5)
    for _ in range(20):
        soft = rng.permutation(16).reshape(4, 4) / 16 + rng.random() / 32
        gt = rng.integers(0, 2, (4, 4))
        assert max_f_beta([soft], [gt]) == oracles.max_f_beta([soft.tolist()], [gt.tolist()])


def test_max_f_beta_nested_thresholds_monotone():
    rng = np.random.default_rng(6)
    softs = [rng.random((8, 8)) for _ in range(3)]
    gts = [rng.integers(0, 2, (8, 8)) for _ in range(3)]
    values = [max_f_beta(softs, gts, n) for n in (1, 3, 7, 15, 31, 63, 127, 255)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_max_f_beta_errors():
    with pytest.raises(ValueError):
        max_f_beta([], [])
    with pytest.raises(ValueError):
        max_f_beta([np.zeros((2, 2))], [np.zeros((2, 3))])


def test_curve_is_threshold_mean():
    rng = np.random.default_rng(7)
    softs = [rng.random((6, 6)) for _ in range(3)]
    gts = [rng.integers(0, 2, (6, 6)) for _ in range(3)]
    curve = f_beta_curve(softs, gts, 7)
    for k, t in enumerate(thresholds(7)):
        assert curve[k] == pytest.approx(np.mean([f_beta(s >= t, g) for s, g in zip(softs, gts)]), abs=1e-15)


# -- datasets ------------------------------------------------------------------

def _write(root, stem, img, mask, ext=".png"):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(root / "images" / f"{stem}{ext}")
    Image.fromarray(mask).save(root / "masks" / f"{stem}.png")


def _rand_pair(rng, h, w):
    img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    mask = (rng.random((h, w)) > 0.5).astype(np.uint8) * 255
    return img, mask


def test_load_dataset_sorted_and_binarized(tmp_path):
    rng = np.random.default_rng(8)
    for stem in ("c", "a", "b"):
        _write(tmp_path, stem, *_rand_pair(rng, 10, 12))
    ds = load_dataset(tmp_path, "demo")
    assert ds.name == "demo" and len(ds) == 3 and ds.stems == ["a", "b", "c"]
    assert ds.native_resolutions == [(10, 12)] * 3
    img, mask = ds.load(0)
    assert img.shape == (3, 10, 12) and img.min() >= -1 and img.max() <= 1
    assert set(np.unique(mask)) <= {0, 1}
    raw = np.asarray(Image.open(tmp_path / "masks" / "a.png"))
    assert np.array_equal(mask, (raw == 255).astype(np.uint8))


def test_mask_threshold_is_midpoint(tmp_path):
    img = np.zeros((2, 2, 3), np.uint8)
    _write(tmp_path, "x", img, np.array([[127, 128], [0, 255]], np.uint8))
    _, mask = load_dataset(tmp_path).load(0)
    assert mask.tolist() == [[0, 1], [0, 1]]


def test_center_crop_geometry(tmp_path):
    rng = np.random.default_rng(9)
    img, mask = _rand_pair(rng, 200, 100)
    _write(tmp_path, "tall", img, mask)
    ds = load_dataset(tmp_path, center_crop=True)
    got_img, got_mask = ds.load(0)
    assert got_img.shape == (3, 100, 100) and got_mask.shape == (100, 100)
    assert np.array_equal(got_mask, (mask[50:150] > 127).astype(np.uint8))
    assert center_square(np.zeros((5, 9))).shape == (5, 5)


def test_unmatched_and_unreadable(tmp_path):
    rng = np.random.default_rng(10)
    _write(tmp_path / "u", "a", *_rand_pair(rng, 4, 4))
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "u" / "masks" / "b.png")
    with pytest.raises(ValueError, match="unmatched"):
        load_dataset(tmp_path / "u")
    _write(tmp_path / "bad", "a", *_rand_pair(rng, 4, 4))
    (tmp_path / "bad" / "masks" / "a.png").write_bytes(b"not an image")
    with pytest.raises(OSError):
        load_dataset(tmp_path / "bad")
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


# -- evaluate ------------------------------------------------------------------

@pytest.fixture()
def small_set(tmp_path):
    rng = np.random.default_rng(11)
    for i in range(5):
        img, mask = _rand_pair(rng, 16, 16)
        mask[:] = 0
        mask[3:3 + i + 4, 5:12] = 255
        _write(tmp_path, f"{i:02d}", img, mask)
    return load_dataset(tmp_path, "small")


def _gt_lookup(ds):
    table = {}
    for i in range(len(ds)):
        img, mask = ds.load(i)
        table[img.tobytes()] = mask
    return lambda img: table[img.tobytes()].astype(float)


def test_oracle_predictor_is_perfect(small_set):
    rep = evaluate(_gt_lookup(small_set), small_set)
    assert rep.aggregate == {"acc": 1.0, "iou": 1.0, "f_beta": 1.0, "max_f_beta": 1.0}


def test_constant_half_predictor(small_set):
    rep = evaluate(lambda img: np.full(img.shape[1:], 0.5), small_set)
    gts = [small_set.load(i)[1] for i in range(len(small_set))]
    full = np.mean([f_beta(np.ones_like(g), g) for g in gts])
    none = np.mean([f_beta(np.zeros_like(g), g) for g in gts])
    assert rep.aggregate["max_f_beta"] == pytest.approx(max(full, none), abs=1e-15)


def test_aggregates_are_means_and_report_roundtrip(small_set, tmp_path):
    rng = np.random.default_rng(12)
    rep = evaluate(lambda img: rng.random(img.shape[1:]), small_set)
    for k in ("acc", "iou", "f_beta"):
        assert len(rep.per_image[k]) == 5
        assert rep.aggregate[k] == pytest.approx(np.mean(rep.per_image[k]), abs=1e-15)
    assert rep.config["beta_sq"] == 0.3 and rep.config["n_thresholds"] == 255
    rep.save(tmp_path / "r.json")
    back = MetricsReport.load(tmp_path / "r.json")
    assert back.aggregate == rep.aggregate and back.stems == rep.stems
    assert json.loads((tmp_path / "r.json").read_text())["schema"].startswith("latentseg.report")


def test_empty_ground_truth_with_background_predictor(tmp_path):
    rng = np.random.default_rng(13)
    for i in range(3):
        img, _ = _rand_pair(rng, 8, 8)
        _write(tmp_path, str(i), img, np.zeros((8, 8), np.uint8))
    rep = evaluate(lambda img: np.zeros(img.shape[1:]), load_dataset(tmp_path))
    assert rep.aggregate["acc"] == 1.0 and rep.aggregate["iou"] == 1.0


def test_parallel_evaluation_matches_serial(small_set):
    fn = lambda img: (img.mean(axis=0) + 1) / 2
    assert evaluate(fn, small_set, workers=3).to_json() == evaluate(fn, small_set).to_json()


def test_prediction_shape_mismatch_raises(small_set):
    with pytest.raises(ValueError):
        evaluate(lambda img: np.zeros((4, 4)), small_set)
    with pytest.raises(ValueError):
        evaluate(lambda img: None, EvalDataset("empty", [], False, []))


def test_model_predictor_resizes(small_set):
    from latentseg.segnet import SegArchConfig, init_model
    model = init_model(SegArchConfig(levels=1, base_channels=4), 0, (8, 8))
    rep = evaluate(model, small_set)
    assert len(rep.per_image["acc"]) == 5
    rep2 = evaluate([model, model], small_set)
    assert rep2.aggregate == rep.aggregate
