import math

import numpy as np
import pytest

from kevs.errors import ValidationError
from kevs.grids import BinaryMask, GridGeometry
from kevs.metrics import (
    MetricConfig,
    compute_report,
    dice,
    nsd,
    organ_overlap_fraction,
    organ_ring_dice,
    per_slice_metrics,
    precision_recall,
)

from conftest import make_mask, random_mask


def nsd_bruteforce(pred: np.ndarray, gt: np.ndarray, spacing, tau: float) -> float:
    """Independent NSD: explicit neighbour scan for boundaries, all-pairs
    distances between boundary voxel centres."""
    def boundary(bits):
        pts = []
        nx, ny, nz = bits.shape
        for x, y, z in np.argwhere(bits):
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                               (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                px, py, pz = x + dx, y + dy, z + dz
                if not (0 <= px < nx and 0 <= py < ny and 0 <= pz < nz) \
                        or not bits[px, py, pz]:
                    pts.append((x, y, z))
                    break
        return pts

    bp, bg = boundary(pred), boundary(gt)
    if not bp and not bg:
        return 1.0
    if not bp or not bg:
        return math.nan

    def min_dist(p, points):
        return min(
            math.sqrt(sum(((a - b) * s) ** 2 for a, b, s in zip(p, q, spacing)))
            for q in points
        )

    close_p = sum(1 for p in bp if min_dist(p, bg) <= tau)
    close_g = sum(1 for g in bg if min_dist(g, bp) <= tau)
    return (close_p + close_g) / (len(bp) + len(bg))


# ---------------------------------------------------------------- dice / pr

def test_dice_identical_masks():
    rng = np.random.default_rng(1)
    m = random_mask(rng, (5, 5, 5))
    assert dice(m, m) == 1.0


def test_dice_disjoint_masks():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, 0] = True
    b[3, 3, 3] = True
    assert dice(make_mask(a), make_mask(b)) == 0.0


def test_dice_half_overlap():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[0, 0, :4] = a[1, 0, :4] = True  # 8 voxels
    b[1, 0, :4] = b[2, 0, :4] = True  # 8 voxels, 4 shared
    assert dice(make_mask(a), make_mask(b)) == 0.5


def test_dice_both_empty_is_one():
    e = make_mask(np.zeros((2, 2, 2), dtype=bool))
    assert dice(e, e) == 1.0


def test_dice_symmetric():
    rng = np.random.default_rng(2)
    a, b = random_mask(rng, (6, 6, 6)), random_mask(rng, (6, 6, 6))
    assert dice(a, b) == dice(b, a)


def test_dice_geometry_mismatch():
    a = make_mask(np.zeros((2, 2, 2), dtype=bool))
    b = make_mask(np.zeros((2, 2, 3), dtype=bool))
    with pytest.raises(ValidationError):
        dice(a, b)


def test_precision_recall_identical():
    rng = np.random.default_rng(3)
    m = random_mask(rng, (5, 5, 5))
    assert precision_recall(m, m) == (1.0, 1.0)


def test_precision_recall_double_volume_superset():
    gt = np.zeros((4, 4, 4), dtype=bool)
    gt[:2, :2, :2] = True  # 8 voxels
    pred = gt.copy()
    pred[2:, :2, :2] = True  # 16 voxels total
    p, r = precision_recall(make_mask(pred), make_mask(gt))
    assert (p, r) == (0.5, 1.0)


def test_precision_recall_counting_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        pred, gt = random_mask(rng, (5, 6, 4)), random_mask(rng, (5, 6, 4))
        if pred.empty or gt.empty:
            continue
        inter = int(np.sum(pred.bits & gt.bits))
        p, r = precision_recall(pred, gt)
        assert p == inter / pred.count
        assert r == inter / gt.count


def test_precision_of_empty_pred_is_nan():
    e = make_mask(np.zeros((3, 3, 3), dtype=bool))
    rng = np.random.default_rng(5)
    gt = random_mask(rng, (3, 3, 3), p=0.5)
    p, r = precision_recall(e, gt)
    assert math.isnan(p)
    assert r == 0.0


def test_precision_is_reversed_recall():
    rng = np.random.default_rng(6)
    a, b = random_mask(rng, (5, 5, 5)), random_mask(rng, (5, 5, 5))
    pa, ra = precision_recall(a, b)
    pb, rb = precision_recall(b, a)
    assert pa == rb and ra == pb


# ---------------------------------------------------------------- nsd

def test_nsd_identical_is_one():
    rng = np.random.default_rng(7)
    m = random_mask(rng, (6, 6, 6), p=0.4)
    if m.empty:
        pytest.skip("empty draw")
    assert nsd(m, m) == 1.0


def test_nsd_far_apart_is_zero():
    a = np.zeros((3, 3, 15), dtype=bool)
    b = np.zeros((3, 3, 15), dtype=bool)
    a[1, 1, 0] = True
    b[1, 1, 10] = True  # 10 mm apart at unit spacing
    assert nsd(make_mask(a), make_mask(b), MetricConfig(nsd_tolerance_mm=2.0)) == 0.0


def test_nsd_shifted_cube_matches_bruteforce():
    a = np.zeros((8, 8, 8), dtype=bool)
    b = np.zeros((8, 8, 8), dtype=bool)
    a[2:5, 2:5, 2:5] = True
    b[3:6, 2:5, 2:5] = True  # one-voxel shift at 1.5 mm spacing
    spacing = (1.5, 1.5, 1.5)
    pa, pb = make_mask(a, spacing=spacing), make_mask(b, spacing=spacing)
    expected = nsd_bruteforce(a, b, spacing, 2.0)
    assert nsd(pa, pb) == pytest.approx(expected, abs=1e-12)


def test_nsd_random_masks_match_bruteforce():
    rng = np.random.default_rng(8)
    spacing = (1.5, 1.0, 2.0)
    for _ in range(3):
        a = rng.random((6, 6, 6)) < 0.25
        b = rng.random((6, 6, 6)) < 0.25
        if not a.any() or not b.any():
            continue
        got = nsd(make_mask(a, spacing=spacing), make_mask(b, spacing=spacing),
                  MetricConfig(nsd_tolerance_mm=2.5))
        expected = nsd_bruteforce(a, b, spacing, 2.5)
        assert got == pytest.approx(expected, abs=1e-12)


def test_nsd_symmetric():
    rng = np.random.default_rng(9)
    a, b = random_mask(rng, (6, 6, 6)), random_mask(rng, (6, 6, 6))
    assert nsd(a, b) == nsd(b, a)


def test_nsd_monotone_in_tolerance():
    rng = np.random.default_rng(10)
    a, b = random_mask(rng, (7, 7, 7)), random_mask(rng, (7, 7, 7))
    values = [nsd(a, b, MetricConfig(nsd_tolerance_mm=t)) for t in (0.5, 1.0, 2.0, 5.0)]
    assert all(v1 <= v2 for v1, v2 in zip(values, values[1:]))


def test_nsd_one_empty_is_nan():
    rng = np.random.default_rng(11)
    m = random_mask(rng, (4, 4, 4), p=0.5)
    e = make_mask(np.zeros((4, 4, 4), dtype=bool))
    assert math.isnan(nsd(m, e))
    assert nsd(e, e) == 1.0


def test_nsd_tau_in_voxels():
    a = np.zeros((3, 3, 10), dtype=bool)
    b = np.zeros((3, 3, 10), dtype=bool)
    a[1, 1, 0] = True
    b[1, 1, 2] = True
    # 2 voxels apart = 6 mm at 3 mm spacing: fails in mm, passes in voxels
    pa = make_mask(a, spacing=(3.0, 3.0, 3.0))
    pb = make_mask(b, spacing=(3.0, 3.0, 3.0))
    assert nsd(pa, pb, MetricConfig(nsd_tolerance_mm=2.0)) == 0.0
    assert nsd(pa, pb, MetricConfig(nsd_tolerance_mm=2.0, tau_in_voxels=True)) == 1.0


# ---------------------------------------------------------------- per-slice

def test_per_slice_single_slice_matches_3d():
    rng = np.random.default_rng(12)
    a2 = rng.random((6, 6)) < 0.4
    b2 = rng.random((6, 6)) < 0.4
    a = np.zeros((6, 6, 3), dtype=bool)
    b = np.zeros((6, 6, 3), dtype=bool)
    a[:, :, 1], b[:, :, 1] = a2, b2
    pa, pb = make_mask(a), make_mask(b)
    rows = per_slice_metrics(pa, pb)
    assert len(rows) == 1
    assert rows[0].z == 1
    assert rows[0].dice == dice(pa, pb)
    p3, r3 = precision_recall(pa, pb)
    assert rows[0].precision == p3 and rows[0].recall == r3


def test_per_slice_identical_volumes_all_ones():
    rng = np.random.default_rng(13)
    m = random_mask(rng, (5, 5, 6), p=0.4)
    for row in per_slice_metrics(m, m):
        assert row.dice == 1.0 and row.nsd == 1.0


def test_per_slice_skips_empty_slices():
    a = np.zeros((4, 4, 5), dtype=bool)
    a[1, 1, 2] = True
    rows = per_slice_metrics(make_mask(a), make_mask(a))
    assert [r.z for r in rows] == [2]


def test_per_slice_mean_tracks_volume_dice():
    rng = np.random.default_rng(14)
    base = rng.random((8, 8, 6)) < 0.5
    noisy = base ^ (rng.random((8, 8, 6)) < 0.05)
    pa, pb = make_mask(base), make_mask(noisy)
    rows = per_slice_metrics(pa, pb)
    mean_dice = float(np.mean([r.dice for r in rows]))
    assert abs(mean_dice - dice(pa, pb)) < 0.1


# ---------------------------------------------------------------- organ analyses

def test_organ_overlap_trivials():
    rng = np.random.default_rng(15)
    organs = random_mask(rng, (5, 5, 5), p=0.3)
    pred_outside = make_mask(~organs.bits)
    assert organ_overlap_fraction(pred_outside, organs) == 0.0
    inside_bits = organs.bits.copy()
    if inside_bits.any():
        assert organ_overlap_fraction(make_mask(inside_bits), organs) == 1.0


def test_organ_overlap_counting_oracle():
    rng = np.random.default_rng(16)
    pred = random_mask(rng, (6, 6, 6), p=0.4)
    organs = random_mask(rng, (6, 6, 6), p=0.3)
    if pred.empty:
        pytest.skip("empty")
    inter = int(np.sum(pred.bits & organs.bits))
    assert organ_overlap_fraction(pred, organs) == inter / pred.count


def test_organ_ring_dice_trivials():
    organs = np.zeros((7, 7, 7), dtype=bool)
    organs[3, 3, 3] = True
    rng = np.random.default_rng(17)
    gt = random_mask(rng, (7, 7, 7), p=0.4)
    assert organ_ring_dice(gt, gt, make_mask(organs)) == 1.0
    # organs covering everything leave no ring
    full = make_mask(np.ones((7, 7, 7), dtype=bool))
    assert math.isnan(organ_ring_dice(gt, gt, full))


def test_organ_ring_is_two_layer_shell():
    organs = np.zeros((9, 9, 9), dtype=bool)
    organs[4, 4, 4] = True
    ring_pred = np.zeros((9, 9, 9), dtype=bool)
    ring_pred[3, 4, 4] = True  # first layer
    far_pred = np.zeros((9, 9, 9), dtype=bool)
    far_pred[0, 4, 4] = True  # four steps out, beyond the ring
    gt = ring_pred | far_pred
    d = organ_ring_dice(make_mask(ring_pred), make_mask(gt), make_mask(organs), layers=2)
    assert d == 1.0  # the far voxel is outside the ring, so it cannot hurt


# ---------------------------------------------------------------- report

def test_report_all_defined():
    rng = np.random.default_rng(18)
    pred, gt = random_mask(rng, (6, 6, 6)), random_mask(rng, (6, 6, 6))
    organs = random_mask(rng, (6, 6, 6), p=0.2)
    report = compute_report(pred, gt, organ_union=organs, per_slice=True)
    payload = report.to_dict()
    assert payload["dice"] == dice(pred, gt)
    assert payload["region"] == "full_cavity"
    assert payload["undefined"] == []
    assert isinstance(payload["per_slice"], list)


def test_report_marks_undefined():
    e = make_mask(np.zeros((3, 3, 3), dtype=bool))
    rng = np.random.default_rng(19)
    gt = random_mask(rng, (3, 3, 3), p=0.6)
    report = compute_report(e, gt)
    assert "precision" in report.undefined
    assert "nsd" in report.undefined
    payload = report.to_dict()
    assert payload["precision"] is None  # NaN never leaks into JSON


def test_report_both_empty_convention():
    e = make_mask(np.zeros((3, 3, 3), dtype=bool))
    report = compute_report(e, e)
    assert report.dice == 1.0 and report.nsd == 1.0
    assert set(report.undefined) >= {"dice", "nsd", "precision", "recall"}
