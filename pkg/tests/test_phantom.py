import json

import numpy as np
import pytest
from scipy import stats as spstats

from kevs.errors import ValidationError
from kevs.grids import LabelSchema
from kevs.nifti import read_nifti
from kevs.phantom import (
    PhantomSpec,
    counter_normal,
    counter_uniform,
    generate_phantom,
    phantom_layout,
    phantom_suite,
)


def rasterize_oracle(layout):
    """Independent point-in-shape rasterisation from the resolved layout.

    Re-derives every mask with full meshgrid membership tests (different code
    path from the generator's per-slice broadcasting and bounding boxes).
    """
    spec = layout.spec
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    X, Y, Z = np.meshgrid(np.arange(nx) * sx, np.arange(ny) * sy,
                          np.arange(nz) * sz, indexing="ij")
    cx, cy = spec.center_mm
    a, b = spec.body_semiaxes_mm
    ia, ib = spec.inner_semiaxes_mm
    body = ((X - cx) / a) ** 2 + ((Y - cy) / b) ** 2 <= 1.0
    inner = ((X - cx) / ia) ** 2 + ((Y - cy) / ib) ** 2 <= 1.0
    sat = body & ~inner

    vx, vy = spec.vertebra_center_mm
    z_lo, z_hi = spec.vertebra_z_range
    zidx = np.rint(Z / sz).astype(int)
    vert = ((X - vx) ** 2 + (Y - vy) ** 2 <= spec.vertebra_radius_mm ** 2) \
        & inner & (zidx >= z_lo) & (zidx <= z_hi)

    cavity_region = inner & ~vert
    organ_union = np.zeros_like(body)
    for ox, oy, oz, r in layout.organs:
        organ_union |= ((X - ox) ** 2 + (Y - oy) ** 2 + (Z - oz) ** 2 <= r * r) \
            & cavity_region
    cavity_label = cavity_region & ~organ_union

    vat = np.zeros_like(body)
    for bx, by, bz, r in layout.blobs:
        vat |= (X - bx) ** 2 + (Y - by) ** 2 + (Z - bz) ** 2 <= r * r
    vat &= cavity_label
    return sat, cavity_label, vert, organ_union, vat


def test_same_spec_is_bit_identical():
    spec = PhantomSpec(seed=7)
    ct1, lm1, gt1 = generate_phantom(spec)
    ct2, lm2, gt2 = generate_phantom(spec)
    assert np.array_equal(ct1.data.view(np.uint32), ct2.data.view(np.uint32))
    assert np.array_equal(lm1.data, lm2.data)
    assert np.array_equal(gt1.bits, gt2.bits)


def test_different_seeds_differ():
    ct1, _, gt1 = generate_phantom(PhantomSpec(seed=1))
    ct2, _, gt2 = generate_phantom(PhantomSpec(seed=2))
    assert not np.array_equal(ct1.data, ct2.data)
    assert not np.array_equal(gt1.bits, gt2.bits)


def test_zero_blobs_gives_empty_truth():
    _, _, gt = generate_phantom(PhantomSpec(seed=3, vat_count=0))
    assert gt.empty


def test_label_counts_match_membership_oracle():
    spec = PhantomSpec(seed=42)
    layout = phantom_layout(spec)
    ct, lm, gt = generate_phantom(spec)
    sat, cavity, vert, organs, vat = rasterize_oracle(layout)

    schema = lm.schema
    assert int((lm.data == schema.label_of("sat")).sum()) == int(sat.sum())
    assert int((lm.data == schema.label_of("abdominal_cavity")).sum()) == int(cavity.sum())
    vert_labels = [schema.label_of(f"vertebra_L{i}") for i in range(1, 6)]
    assert int(np.isin(lm.data, vert_labels).sum()) == int(vert.sum())
    organ_labels = [schema.label_of(r) for r in schema.organ_roles]
    assert int(np.isin(lm.data, organ_labels).sum()) == int(organs.sum())
    assert gt.count == int(vat.sum())
    np.testing.assert_array_equal(gt.bits, vat)


def test_truth_inside_cavity_and_outside_organs():
    for seed in range(1, 6):
        _, lm, gt = generate_phantom(PhantomSpec(seed=seed))
        cavity = lm.data == lm.schema.label_of("abdominal_cavity")
        organ_labels = [lm.schema.label_of(r) for r in lm.schema.organ_roles]
        organs = np.isin(lm.data, organ_labels)
        assert np.all(~gt.bits | cavity), "gt_vat must lie inside the cavity label"
        assert not np.any(gt.bits & organs)


def test_lumbar_bands_ordered_top_to_bottom():
    _, lm, _ = generate_phantom(PhantomSpec(seed=4))
    zs = {}
    for i in range(1, 6):
        where = np.nonzero(lm.data == lm.schema.label_of(f"vertebra_L{i}"))[2]
        assert where.size > 0
        zs[i] = (where.min(), where.max())
    # L1 is the topmost band, L5 the lowest
    for upper, lower in zip(range(1, 5), range(2, 6)):
        assert zs[upper][0] > zs[lower][1]


def test_background_is_constant_air():
    ct, lm, _ = generate_phantom(PhantomSpec(seed=5))
    outside = lm.data == 0
    assert np.all(ct.data[outside] == np.float32(-1000.0))


def test_sat_and_vat_share_distribution():
    # the property the density pipeline exploits: two-sample KS must not
    # reject identical SAT/VAT HU distributions
    spec = PhantomSpec(seed=11, dims=(96, 96, 64))
    ct, lm, gt = generate_phantom(spec)
    sat_vals = ct.data[lm.data == lm.schema.label_of("sat")]
    vat_vals = ct.data[gt.bits]
    result = spstats.ks_2samp(sat_vals, vat_vals)
    assert result.pvalue > 0.01


def test_tissue_means_roughly_correct():
    spec = PhantomSpec(seed=12)
    ct, lm, gt = generate_phantom(spec)
    vat_mean = float(ct.data[gt.bits].mean())
    assert abs(vat_mean - spec.hu_at[0]) < 2.0
    organ_labels = [lm.schema.label_of(r) for r in lm.schema.organ_roles]
    organ_mean = float(ct.data[np.isin(lm.data, organ_labels)].mean())
    assert abs(organ_mean - spec.hu_organ[0]) < 3.0


def test_noise_scale_widens_distribution():
    base = generate_phantom(PhantomSpec(seed=13))[0]
    noisy = generate_phantom(PhantomSpec(seed=13, noise_scale=2.5))[0]
    _, lm, gt = generate_phantom(PhantomSpec(seed=13))
    base_std = float(base.data[gt.bits].std())
    noisy_std = float(noisy.data[gt.bits].std())
    assert noisy_std == pytest.approx(2.5 * base_std, rel=0.05)


def test_infeasible_spec_rejected():
    with pytest.raises(ValidationError, match="infeasible"):
        phantom_layout(PhantomSpec(seed=1, organ_radius_mm=(28.0, 30.0)))
    with pytest.raises(ValidationError):
        PhantomSpec(body_semiaxes_mm=(200.0, 36.0))  # does not fit the grid
    with pytest.raises(ValidationError):
        PhantomSpec(sat_thickness_mm=50.0)  # no cavity left


def test_counter_rng_reproducible_and_order_free():
    counters = np.arange(100, dtype=np.uint64)
    a = counter_uniform(9, 1, counters)
    b = counter_uniform(9, 1, counters[::-1].copy())[::-1]
    np.testing.assert_array_equal(a, b)
    assert np.all((a > 0) & (a < 1))
    z = counter_normal(9, 1, counters)
    assert np.isfinite(z).all()


def test_counter_rng_streams_independent():
    counters = np.arange(50, dtype=np.uint64)
    a = counter_uniform(9, 1, counters)
    b = counter_uniform(9, 2, counters)
    assert not np.array_equal(a, b)


def test_suite_single_case_layout(tmp_path):
    manifest = phantom_suite([42], [1.0], tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == [
        "manifest.json",
        "seed0042_noise1_ct.nii.gz",
        "seed0042_noise1_gt_vat.nii.gz",
        "seed0042_noise1_labels.nii.gz",
    ]
    assert len(manifest["cases"]) == 1
    assert "schema" in manifest


def test_suite_grid_of_cases_roundtrips(tmp_path):
    small = PhantomSpec(dims=(32, 32, 24), body_semiaxes_mm=(20.0, 17.0),
                        sat_thickness_mm=6.0, vertebra_radius_mm=3.5,
                        organ_count=1, organ_radius_mm=(3.0, 5.0),
                        vat_count=40, vat_radius_mm=(2.5, 5.0))
    manifest = phantom_suite([1, 2, 3, 4, 5], [1.0, 2.5], tmp_path, base_spec=small)
    assert len(manifest["cases"]) == 10
    schema = LabelSchema.from_dict(manifest["schema"])
    for case in manifest["cases"]:
        ct = read_nifti(tmp_path / case["ct"], "scalar")
        lm = read_nifti(tmp_path / case["labels"], "label", schema)
        gt = read_nifti(tmp_path / case["gt_vat"], "mask")
        assert ct.geometry == lm.geometry == gt.geometry
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk["cases"] == manifest["cases"]
