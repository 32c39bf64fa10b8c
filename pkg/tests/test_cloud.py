import numpy as np
import pytest

from fusionseg.cloud import (FLOOR, HUMAN, ROBOT, UNLABELED, CloudFormatError,
                             CloudValidationError, DecimationPolicy,
                             LabeledCloud, class_aware_decimate, load_cloud,
                             merge_clouds, resample_to_budget, save_cloud,
                             voxel_downsample, voxel_keys,
                             zero_center_normalize)


def random_cloud(n, rng, labeled=True):
    pts = rng.normal(size=(n, 3))
    labels = rng.integers(0, 8, size=n) if labeled else None
    return LabeledCloud(pts, labels)


class TestValidation:
    def test_nan_rejected(self):
        with pytest.raises(CloudValidationError):
            LabeledCloud(np.array([[0.0, np.nan, 0.0]]))

    def test_label_length_mismatch(self):
        with pytest.raises(CloudValidationError):
            LabeledCloud(np.zeros((2, 3)), labels=[1])

    def test_label_out_of_range(self):
        with pytest.raises(CloudValidationError):
            LabeledCloud(np.zeros((1, 3)), labels=[9])


class TestFormats:
    def test_empty_binary_is_header_only(self, tmp_path):
        path = tmp_path / "empty.pcsb"
        save_cloud(LabeledCloud(np.zeros((0, 3))), path, "binary")
        assert path.stat().st_size == 12
        cloud = load_cloud(path)
        assert len(cloud) == 0 and not cloud.has_labels

    def test_labels_flag_set(self, tmp_path):
        path = tmp_path / "lab.pcsb"
        save_cloud(LabeledCloud(np.zeros((1, 3)), [FLOOR]), path, "binary")
        raw = path.read_bytes()
        flags = int.from_bytes(raw[6:8], "little")
        assert flags & 1

    def test_pcst_parse(self, tmp_path):
        path = tmp_path / "two.pcst"
        path.write_text("# comment\n0 0 0 1\n1 0 0 4\n")
        cloud = load_cloud(path)
        assert len(cloud) == 2
        assert list(cloud.labels) == [FLOOR, HUMAN]

    @pytest.mark.parametrize("n", [0, 1, 11000])
    @pytest.mark.parametrize("labeled", [True, False])
    @pytest.mark.parametrize("fmt", ["binary", "ascii"])
    def test_round_trip(self, tmp_path, n, labeled, fmt):
        rng = np.random.default_rng(n + labeled)
        cloud = random_cloud(n, rng, labeled)
        path = tmp_path / f"c.{fmt}"
        save_cloud(cloud, path, fmt)
        back = load_cloud(path)
        assert len(back) == n
        if fmt == "ascii" and n == 0:
            # headerless text format cannot record label presence when empty
            assert not back.has_labels
        else:
            assert back.has_labels == labeled
        np.testing.assert_allclose(back.points,
                                   cloud.points.astype(np.float32),
                                   rtol=0, atol=1e-6)
        if labeled:
            np.testing.assert_array_equal(back.labels, cloud.labels)

    def test_binary_ascii_binary_cycle(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = random_cloud(3, rng)
        save_cloud(cloud, tmp_path / "a.pcsb", "binary")
        mid = load_cloud(tmp_path / "a.pcsb")
        save_cloud(mid, tmp_path / "b.pcst", "ascii")
        back = load_cloud(tmp_path / "b.pcst")
        save_cloud(back, tmp_path / "c.pcsb", "binary")
        assert (tmp_path / "a.pcsb").read_bytes() == (tmp_path / "c.pcsb").read_bytes()
        np.testing.assert_allclose(back.points, mid.points, atol=1e-6)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pcsb"
        path.write_bytes(b"PCSB" + b"\xff" * 8)
        with pytest.raises(CloudFormatError):
            load_cloud(path)


class TestNormalize:
    def test_single_point(self):
        out, rec = zero_center_normalize(LabeledCloud([[1.0, 1.0, 1.0]]))
        np.testing.assert_allclose(out.points, [[0, 0, 0]])
        np.testing.assert_allclose(rec.centroid, [1, 1, 1])
        assert rec.scale == 1.0

    def test_symmetric_pair_unit(self):
        out, rec = zero_center_normalize(
            LabeledCloud([[-1.0, 0, 0], [1.0, 0, 0]]))
        np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]])
        assert rec.scale == pytest.approx(1.0)

    def test_hand_computed(self):
        out, rec = zero_center_normalize(
            LabeledCloud([[0.0, 0, 0], [0.0, 0, 4.0]]))
        np.testing.assert_allclose(rec.centroid, [0, 0, 2])
        assert rec.scale == pytest.approx(2.0)
        np.testing.assert_allclose(out.points, [[0, 0, -1], [0, 0, 1]])

    def test_invariants(self):
        rng = np.random.default_rng(5)
        cloud = random_cloud(300, rng)
        out, rec = zero_center_normalize(cloud)
        np.testing.assert_allclose(out.points.mean(axis=0), 0, atol=1e-6)
        assert np.linalg.norm(out.points, axis=1).max() == pytest.approx(1.0, abs=1e-6)
        # idempotent
        out2, rec2 = zero_center_normalize(out)
        np.testing.assert_allclose(out2.points, out.points, atol=1e-6)
        # invertible
        np.testing.assert_allclose(rec.invert(out.points), cloud.points,
                                   rtol=1e-6, atol=1e-9)

    def test_empty_error(self):
        with pytest.raises(CloudValidationError):
            zero_center_normalize(LabeledCloud(np.zeros((0, 3))))


class TestVoxel:
    def test_singleton_identity(self):
        cloud = LabeledCloud([[0.3, 0.4, 0.5]], [ROBOT])
        out = voxel_downsample(cloud, 0.05)
        np.testing.assert_allclose(out.points, cloud.points)
        assert list(out.labels) == [ROBOT]

    def test_two_points_same_voxel(self):
        cloud = LabeledCloud([[0.01, 0.01, 0.0], [0.02, 0.03, 0.0]])
        out = voxel_downsample(cloud, 0.05)
        assert len(out) == 1
        np.testing.assert_allclose(out.points, [[0.015, 0.02, 0.0]])

    def test_occupancy_oracle(self):
        rng = np.random.default_rng(9)
        pts = rng.random((10000, 3))
        cloud = LabeledCloud(pts)
        out = voxel_downsample(cloud, 0.05)
        occupied = {tuple(k) for k in voxel_keys(pts, 0.05)}
        assert len(out) == len(occupied)

    def test_permutation_invariant_multiset(self):
        rng = np.random.default_rng(10)
        cloud = random_cloud(500, rng)
        perm = rng.permutation(500)
        a = voxel_downsample(cloud, 0.1)
        b = voxel_downsample(cloud.take(perm), 0.1)
        sa = sorted(map(tuple, np.round(a.points, 9)))
        sb = sorted(map(tuple, np.round(b.points, 9)))
        assert sa == sb

    def test_majority_label_tie_low(self):
        cloud = LabeledCloud([[0.0, 0, 0], [0.01, 0, 0]], [HUMAN, ROBOT])
        out = voxel_downsample(cloud, 0.05)
        assert out.labels[0] == ROBOT  # lower class id wins the 1-1 tie


class TestDecimate:
    def test_rates(self):
        pts = np.zeros((200, 3))
        labels = np.array([FLOOR] * 100 + [HUMAN] * 100)
        cloud = LabeledCloud(pts, labels)
        out = class_aware_decimate(cloud, DecimationPolicy(), rng_seed=0)
        counts = out.class_counts()
        assert counts[FLOOR] == 10
        assert counts[HUMAN] == 50

    def test_ceiling_singleton(self):
        cloud = LabeledCloud([[0.0, 0, 0]], [ROBOT])
        out = class_aware_decimate(cloud, DecimationPolicy(), rng_seed=0)
        assert len(out) == 1

    def test_unlabeled_uses_static_rate(self):
        cloud = LabeledCloud(np.zeros((100, 3)), [UNLABELED] * 100)
        out = class_aware_decimate(cloud, DecimationPolicy(), rng_seed=0)
        assert len(out) == 10

    def test_deterministic_and_presence(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(1000, rng)
        a = class_aware_decimate(cloud, DecimationPolicy(), rng_seed=7)
        b = class_aware_decimate(cloud, DecimationPolicy(), rng_seed=7)
        np.testing.assert_array_equal(a.points, b.points)
        present_in = set(np.unique(cloud.labels))
        present_out = set(np.unique(a.labels))
        assert present_in == present_out

    def test_requires_labels(self):
        with pytest.raises(CloudValidationError):
            class_aware_decimate(LabeledCloud(np.zeros((5, 3))),
                                 DecimationPolicy(), 0)


class TestResample:
    def test_exact_budget_noop(self):
        rng = np.random.default_rng(0)
        cloud = random_cloud(50, rng)
        out = resample_to_budget(cloud, 50, rng_seed=1)
        sa = sorted(map(tuple, cloud.points))
        sb = sorted(map(tuple, out.points))
        assert sa == sb

    def test_padding_retains_support(self):
        cloud = LabeledCloud([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]],
                             [1, 2, 3])
        out = resample_to_budget(cloud, 5, rng_seed=0)
        assert len(out) == 5
        for p in cloud.points:
            assert any(np.allclose(p, q) for q in out.points)

    def test_subsample_distinct_indices(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(20000, rng)
        out = resample_to_budget(cloud, 11000, rng_seed=4)
        assert len(out) == 11000
        keys = set(map(tuple, out.points))
        assert len(keys) == 11000  # distinct input rows

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(100, rng)
        a = resample_to_budget(cloud, 30, rng_seed=9)
        b = resample_to_budget(cloud, 30, rng_seed=9)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.labels, b.labels)


class TestMerge:
    def test_identity_with_empty(self):
        rng = np.random.default_rng(0)
        cloud = random_cloud(10, rng)
        out = merge_clouds(cloud, LabeledCloud(np.zeros((0, 3)),
                                               np.zeros(0, dtype=int)))
        np.testing.assert_array_equal(out.points, cloud.points)

    def test_concatenation_order(self):
        a = LabeledCloud([[0.0, 0, 0], [1.0, 0, 0]], [1, 2])
        b = LabeledCloud([[2.0, 0, 0], [3.0, 0, 0], [4.0, 0, 0]], [3, 4, 5])
        out = merge_clouds(a, b)
        assert len(out) == 5
        np.testing.assert_array_equal(out.points[:2], a.points)
        np.testing.assert_array_equal(out.labels[2:], b.labels)

    def test_mixed_labels_dropped_with_warning(self):
        a = LabeledCloud([[0.0, 0, 0]], [1])
        b = LabeledCloud([[1.0, 0, 0]])
        with pytest.warns(UserWarning):
            out = merge_clouds(a, b)
        assert not out.has_labels

    def test_merge_then_voxel_matches_occupancy(self):
        rng = np.random.default_rng(8)
        a = LabeledCloud(rng.random((500, 3)))
        b = LabeledCloud(rng.random((500, 3)) + [0.5, 0, 0])
        merged = merge_clouds(a, b)
        out = voxel_downsample(merged, 0.05)
        occupied = {tuple(k) for k in voxel_keys(merged.points, 0.05)}
        assert len(out) == len(occupied)
        assert len(out) < len(merged)
