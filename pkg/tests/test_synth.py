import numpy as np
import pytest

from deepmts.metrics import c_index, dsc
from deepmts.synth import (
    CohortParams,
    HazardCoefficients,
    generate_cohort,
    read_truth,
    validate_params,
)
from deepmts.volio import read_manifest, read_mask, read_volume, resolve

EXTENT = (32, 32, 16)


def params(**kw):
    kw.setdefault("n", 12)
    kw.setdefault("extent", EXTENT)
    kw.setdefault("seed", 5)
    return CohortParams(**kw)


def file_bytes(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


class TestGeneratorContract:
    def test_minimum_cohort_size(self):
        with pytest.raises(ValueError, match="minimum"):
            validate_params(params(n=5))

    def test_extent_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            validate_params(params(extent=(30, 32, 16)))

    def test_all_zero_hazard_rejected_with_warning(self):
        with pytest.raises(ValueError, match="degenerate hazard"):
            validate_params(params(betas=HazardCoefficients(0.0, 0.0, 0.0)))

    def test_same_seed_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_cohort(a, params())
        generate_cohort(b, params())
        assert file_bytes(a) == file_bytes(b)

    def test_different_seed_differs(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        generate_cohort(a, params(seed=1))
        generate_cohort(b, params(seed=2))
        assert file_bytes(a) != file_bytes(b)

    def test_manifest_and_files_consistent(self, tmp_path):
        res = generate_cohort(tmp_path, params(n=15))
        records = read_manifest(res.manifest_path)
        assert len(records) == 15
        assert sorted({r.fold for r in records}) == [0, 1, 2, 3, 4]
        for r in records[:3]:
            pet, spacing = read_volume(resolve(res.manifest_path, r.pet))
            ct, _ = read_volume(resolve(res.manifest_path, r.ct))
            mask, _ = read_mask(resolve(res.manifest_path, r.mask))
            assert pet.shape == ct.shape == mask.shape == (1, *EXTENT)
            assert spacing.tolist() == [4.0, 4.0, 4.0]
            assert r.time > 0
            assert r.event in (0, 1)
            assert mask.sum() > 0

    def test_truth_matches_mask_volumes(self, tmp_path):
        res = generate_cohort(tmp_path, params())
        truth = {t.id: t for t in read_truth(tmp_path / "truth.csv")}
        for r in read_manifest(res.manifest_path)[:5]:
            mask, _ = read_mask(resolve(res.manifest_path, r.mask))
            assert truth[r.id].tumor_volume == int(mask.sum())

    def test_nodule_stays_out_of_mask_and_hazard(self, tmp_path):
        res = generate_cohort(tmp_path, params(n=30, p_node=1.0, seed=2))
        truth = read_truth(tmp_path / "truth.csv")
        assert all(t.node_present == 1 for t in truth)
        b = HazardCoefficients()
        for t in truth:
            expected = (b.volume * np.log(t.tumor_volume)
                        + b.uptake * t.mean_uptake + b.node)
            assert t.true_log_hazard == pytest.approx(expected, rel=1e-9)


class TestHazardGroundTruth:
    def test_node_only_hazard_orders_survival(self, tmp_path):
        # out-of-tumor signal alone must make nodule carriers die sooner
        p = params(n=1000, seed=3, betas=HazardCoefficients(0.0, 0.0, 2.0),
                   c_max=1e9)
        res = generate_cohort(tmp_path, p)
        truth = read_truth(tmp_path / "truth.csv")
        records = read_manifest(res.manifest_path)
        node = np.array([t.node_present for t in truth], dtype=float)
        time = np.array([r.time for r in records])
        event = np.array([r.event for r in records])
        assert c_index(node, time, event) > 0.5
        assert time[node == 1].mean() < time[node == 0].mean()

    def test_oracle_ceiling_with_default_hazard(self, tmp_path):
        res = generate_cohort(tmp_path, params(n=500, seed=0))
        assert res.oracle_c_index >= 0.80

    def test_censoring_vanishes_for_large_c_max(self, tmp_path):
        res = generate_cohort(tmp_path, params(c_max=1e12))
        assert res.censoring_fraction == 0.0

    def test_censoring_calibration_near_target(self, tmp_path):
        res = generate_cohort(tmp_path, params(n=300, censor_target=0.65, seed=9))
        assert abs(res.censoring_fraction - 0.65) < 0.08


class TestPhantomGeometry:
    def test_node_disjoint_from_tumor(self, tmp_path):
        res = generate_cohort(tmp_path, params(n=20, p_node=1.0, seed=4))
        truth = read_truth(tmp_path / "truth.csv")
        for r, t in zip(read_manifest(res.manifest_path), truth):
            pet, _ = read_volume(resolve(res.manifest_path, r.pet))
            mask, _ = read_mask(resolve(res.manifest_path, r.mask))
            # nodule uptake must appear somewhere outside the tumor mask
            outside = pet[0] * (1 - mask[0])
            assert t.node_present == 1
            assert (outside > 1.5).any()

    def test_marker_slab_pins_percentile(self, tmp_path):
        res = generate_cohort(tmp_path, params(n=12, seed=8))
        scales = []
        for r in read_manifest(res.manifest_path):
            pet, _ = read_volume(resolve(res.manifest_path, r.pet))
            scales.append(np.percentile(pet[0], 99.5))
        spread = (max(scales) - min(scales)) / np.mean(scales)
        assert spread < 0.05
