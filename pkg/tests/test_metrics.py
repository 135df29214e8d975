from __future__ import annotations

import csv

import numpy as np
import pytest

from metricunet.errors import UndefinedMetricError, ValidationError
from metricunet.metrics import (
    arvd,
    asd,
    dsc,
    evaluate,
    hd_hd95,
    nearest_rank,
    ppv_sen,
    summarize,
    surface_points,
    write_eval_csv,
)
from oracles import brute_directed, brute_percentile, brute_surface, random_pair


def test_dsc_examples():
    m = np.zeros((10, 10), bool)
    m[2:6, 2:6] = True
    assert dsc(m, m) == 1.0
    other = np.zeros_like(m)
    other[7:, 7:] = True
    assert dsc(m, other) == 0.0
    gt = np.zeros(200, bool)
    seg = np.zeros(200, bool)
    gt[:100] = True
    seg[20:120] = True
    assert dsc(gt, seg) == pytest.approx(0.8)
    assert dsc(np.zeros(5, bool), np.zeros(5, bool)) == 1.0
    assert dsc(np.zeros(5, bool), np.ones(5, bool)) == 0.0


def test_dsc_shape_mismatch():
    with pytest.raises(ValidationError):
        dsc(np.zeros((3, 3)), np.zeros((3, 4)))


def test_ppv_sen_examples():
    gt = np.zeros(300, bool)
    seg = np.zeros(300, bool)
    gt[:160] = True
    seg[80:180] = True
    assert ppv_sen(gt, seg) == pytest.approx((0.8, 0.5))
    inner = np.zeros(300, bool)
    inner[10:50] = True
    ppv, sen = ppv_sen(gt, inner)
    assert ppv == 1.0 and sen < 1.0
    assert ppv_sen(gt, gt) == (1.0, 1.0)
    with pytest.raises(UndefinedMetricError):
        ppv_sen(gt, np.zeros(300, bool))


def test_arvd_examples():
    gt = np.zeros(300, bool)
    gt[:100] = True
    seg = np.zeros(300, bool)
    seg[50:160] = True
    assert arvd(gt, seg) == pytest.approx(10.0)
    assert arvd(gt, gt) == 0.0
    with pytest.raises(UndefinedMetricError):
        arvd(np.zeros(3, bool), gt[:3])


def test_identical_masks_zero_distance():
    m = np.zeros((6, 6, 6), bool)
    m[1:4, 2:5, 1:5] = True
    assert asd(m, m) == 0.0
    assert hd_hd95(m, m) == (0.0, 0.0)


def test_shifted_cube_against_oracle():
    a = np.zeros((8, 8, 8), bool)
    a[2:5, 2:5, 2:5] = True
    b = np.roll(a, 1, axis=0)
    expected = 0.5 * (brute_directed(a, b, (1, 1, 1)).mean() + brute_directed(b, a, (1, 1, 1)).mean())
    assert asd(a, b) == pytest.approx(expected, abs=1e-12)


def test_unit_voxel_shift():
    a = np.zeros((4, 4, 4), bool)
    a[1, 1, 1] = True
    b = np.roll(a, 1, axis=2)
    assert asd(a, b) == 1.0
    assert hd_hd95(a, b) == (1.0, 1.0)


def test_spacing_scales_distances():
    rng = np.random.default_rng(0)
    a, b = random_pair(rng, (8, 8, 8))
    assert asd(a, b, (2, 2, 2)) == pytest.approx(2 * asd(a, b, (1, 1, 1)), rel=1e-12)
    hd1, p1 = hd_hd95(a, b)
    hd2, p2 = hd_hd95(a, b, (2, 2, 2))
    assert (hd2, p2) == pytest.approx((2 * hd1, 2 * p1), rel=1e-12)


def test_outlier_spike_moves_hd_not_hd95():
    gt = np.zeros((30, 30, 30), bool)
    gt[5:20, 5:20, 5:20] = True
    seg = gt.copy()
    seg[27, 12, 12] = True
    hd, hd95 = hd_hd95(gt, seg)
    d_ab = brute_directed(gt, seg, (1, 1, 1))
    d_ba = brute_directed(seg, gt, (1, 1, 1))
    assert hd == pytest.approx(max(d_ab.max(), d_ba.max()))
    assert hd95 == pytest.approx(max(brute_percentile(d_ab, 95), brute_percentile(d_ba, 95)))
    assert hd == pytest.approx(8.0) and hd95 == 0.0


def test_distance_metrics_need_nonempty_masks():
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    with pytest.raises(UndefinedMetricError):
        asd(m, np.zeros_like(m))
    with pytest.raises(UndefinedMetricError):
        hd_hd95(np.zeros_like(m), m)


def test_surface_points_match_face_neighbour_scan():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, _ = random_pair(rng, (7, 8, 6))
        got = surface_points(a).points
        np.testing.assert_array_equal(got, brute_surface(a).astype(int))


def test_exhaustive_oracle_equivalence():
    rng = np.random.default_rng(2)
    for _ in range(15):
        shape = tuple(int(s) for s in rng.integers(3, 11, 3))
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        a, b = random_pair(rng, shape)
        d_ab, d_ba = brute_directed(a, b, spacing), brute_directed(b, a, spacing)
        assert asd(a, b, spacing) == pytest.approx(0.5 * (d_ab.mean() + d_ba.mean()), abs=1e-9)
        hd, hd95 = hd_hd95(a, b, spacing)
        assert hd == pytest.approx(max(d_ab.max(), d_ba.max()), abs=1e-9)
        assert hd95 == pytest.approx(max(brute_percentile(d_ab, 95), brute_percentile(d_ba, 95)), abs=1e-9)


def test_hd95_never_exceeds_hd():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b = random_pair(rng, (6, 6, 6))
        hd, hd95 = hd_hd95(a, b)
        assert hd95 <= hd


def test_symmetry_and_translation_invariance():
    rng = np.random.default_rng(4)
    for _ in range(10):
        a, b = random_pair(rng, (8, 8, 8))
        assert dsc(a, b) == dsc(b, a)
        assert asd(a, b) == pytest.approx(asd(b, a), abs=1e-12)
        assert ppv_sen(a, b)[0] == ppv_sen(b, a)[1]
        big_a = np.zeros((12, 12, 12), bool)
        big_b = np.zeros_like(big_a)
        big_a[2:10, 3:11, 1:9] = a
        big_b[2:10, 3:11, 1:9] = b
        # Border voxels count as surface in the small frame; real background surrounds them in the large one.
        assert asd(big_a, big_b) == pytest.approx(asd(a, b), abs=1e-12)
        shifted_a, shifted_b = np.roll(big_a, 1, axis=1), np.roll(big_b, 1, axis=1)
        assert asd(shifted_a, shifted_b) == pytest.approx(asd(big_a, big_b), abs=1e-12)
        assert hd_hd95(shifted_a, shifted_b) == pytest.approx(hd_hd95(big_a, big_b), abs=1e-12)


def test_nearest_rank():
    assert nearest_rank(np.arange(1, 101, dtype=float), 95) == 95.0
    assert nearest_rank(np.array([3.0]), 95) == 3.0
    assert nearest_rank(np.array([1.0, 2.0]), 95) == 2.0


def test_evaluate_reports_undefined_as_none():
    gt = np.zeros((5, 5, 5), bool)
    gt[1:3, 1:3, 1:3] = True
    rep = evaluate(gt, np.zeros_like(gt))
    assert rep.dsc == 0.0 and rep.sen == 0.0
    assert rep.ppv is None and rep.asd_mm is None and rep.hd_mm is None and rep.hd95_mm is None
    assert rep.arvd_percent == 100.0
    full = evaluate(gt, gt)
    assert (full.dsc, full.asd_mm, full.hd_mm, full.hd95_mm, full.sen, full.ppv, full.arvd_percent) == (1, 0, 0, 0, 1, 1, 0)


def test_eval_csv(tmp_path):
    gt = np.zeros((5, 5, 5), bool)
    gt[1:4, 1:4, 1:4] = True
    seg = gt.copy()
    seg[1] = False
    reports = [evaluate(gt, gt), evaluate(gt, seg), evaluate(gt, np.zeros_like(gt))]
    path = tmp_path / "eval.csv"
    write_eval_csv(["a", "b", "c"], reports, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["case_id", "dsc", "asd_mm", "hd_mm", "hd95_mm", "sen", "ppv", "arvd"]
    assert rows[3][2] == "NA"
    assert rows[4][0] == "mean±std" and "±" in rows[4][1]
    assert rows[5][0] == "median"
    s = summarize(reports)
    assert s["dsc"].count == 3 and s["asd_mm"].count == 2
    assert s["dsc"].mean == pytest.approx(np.mean([r.dsc for r in reports]))
