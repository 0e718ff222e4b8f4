from __future__ import annotations

import itertools

import numpy as np
import pytest

from conftest import make_random_sample
from sagnet import metrics
from sagnet.errors import ContractError, DegenerateGeometryError
from sagnet.metrics import (
    CavityReport,
    EvalPointCloud,
    cavity_scores,
    chamfer,
    coplanarity_score,
    emd,
    inception_mode_score,
    knn_retrieve,
    mmd_cov,
    part_point_cloud,
    shape_distance,
    shape_point_cloud,
    symmetry_score,
    voxel_iou,
)
from sagnet.shapes import Box6, PartMask, ShapeSample, VoxelGrid
from sagnet.synthjoints import generate_dataset


def chamfer_oracle(a, b):
    """Quadratic python-loop scan."""
    total = 0.0
    for p in a:
        total += min(float(np.sqrt(((p - q) ** 2).sum())) for q in b)
    for q in b:
        total += min(float(np.sqrt(((p - q) ** 2).sum())) for p in a)
    return total


class TestChamfer:
    def test_identical_clouds_zero(self, rng):
        a = rng.random((20, 3))
        assert chamfer(a, a.copy()) == 0.0

    def test_single_points(self):
        a = np.array([[0.0, 0.0, 0.0]])
        b = np.array([[3.0, 4.0, 0.0]])
        assert chamfer(a, b) == pytest.approx(10.0)  # 2 * distance 5

    def test_matches_quadratic_scan(self, rng):
        a = rng.random((50, 3))
        b = rng.random((50, 3))
        assert chamfer(a, b) == pytest.approx(chamfer_oracle(a, b), rel=1e-12)

    def test_symmetry(self, rng):
        a, b = rng.random((30, 3)), rng.random((40, 3))
        assert chamfer(a, b) == chamfer(b, a)

    def test_empty_rejected(self, rng):
        with pytest.raises(ContractError):
            chamfer(np.zeros((0, 3)), rng.random((5, 3)))


class TestEMD:
    def test_identical_zero(self, rng):
        a = rng.random((16, 3))
        assert emd(a, a.copy()) == 0.0

    def test_crossed_pairing_two_points(self):
        a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        b = np.array([[1.1, 0, 0], [-0.1, 0, 0]])
        # identity pairing costs 1.1 + 1.1; crossed costs 0.1 + 0.1
        assert emd(a, b) == pytest.approx(0.2)

    def test_exhaustive_permutation_minimum(self, rng):
        a = rng.random((8, 3))
        b = rng.random((8, 3))
        cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        best = min(
            sum(cost[i, p[i]] for i in range(8)) for p in itertools.permutations(range(8))
        )
        assert emd(a, b) == pytest.approx(best, rel=1e-12)

    def test_resamples_mismatched_sizes(self, rng):
        a, b = rng.random((10, 3)), rng.random((25, 3))
        v = emd(a, b)
        assert np.isfinite(v) and v >= 0.0

    def test_symmetric_and_nonnegative(self, rng):
        a, b = rng.random((12, 3)), rng.random((12, 3))
        assert emd(a, b) == pytest.approx(emd(b, a), rel=1e-9)
        assert emd(a, b) > 0.0

    def test_empty_rejected(self, rng):
        with pytest.raises(ContractError):
            emd(rng.random((4, 3)), np.zeros((0, 3)))


class TestShapeDistance:
    def test_self_distance_zero(self, rng):
        s = make_random_sample(rng, k=3, r=8)
        assert shape_distance(s, s.copy()) == 0.0

    def test_symmetric(self, rng):
        a = make_random_sample(rng, k=2, r=8)
        b = make_random_sample(rng, k=2, r=8)
        assert shape_distance(a, b) == pytest.approx(shape_distance(b, a), rel=1e-12)

    def test_box_shift_analytic(self, rng):
        a = make_random_sample(rng, k=2, r=8)
        delta = np.array([0.07, -0.04, 0.02], dtype=np.float32)
        b = a.copy()
        for i in range(2):
            b.boxes[i] = Box6(a.boxes[i].center + delta, a.boxes[i].extents)
        expected = 2 * float(np.linalg.norm(delta.astype(np.float64)))
        for i in range(2):
            ca = part_point_cloud(a, i)
            expected += chamfer_oracle(ca, ca + delta.astype(np.float64))
        assert shape_distance(a, b) == pytest.approx(expected, rel=1e-6)

    def test_missing_parts_skipped_pairwise(self, rng):
        a = make_random_sample(rng, k=3, r=8, mask=[True, True, False])
        b = make_random_sample(rng, k=3, r=8, mask=[True, False, True])
        v = shape_distance(a, b)  # only part 0 is present in both
        only0 = float(np.linalg.norm(
            a.boxes[0].as_array().astype(np.float64) - b.boxes[0].as_array().astype(np.float64)
        )) + chamfer(part_point_cloud(a, 0), part_point_cloud(b, 0))
        assert v == pytest.approx(only0, rel=1e-9)

    def test_k_mismatch(self, rng):
        with pytest.raises(ContractError):
            shape_distance(make_random_sample(rng, k=2), make_random_sample(rng, k=3))


class TestKnn:
    def test_query_in_dataset_first(self, rng):
        data = [make_random_sample(rng, k=2, r=8) for _ in range(6)]
        got = knn_retrieve(data[3], data, n=3)
        assert got[0] == 3
        assert shape_distance(data[3], data[got[0]]) == 0.0

    def test_equals_linear_scan(self, rng):
        data = [make_random_sample(rng, k=2, r=8) for _ in range(8)]
        q = make_random_sample(rng, k=2, r=8)
        got = knn_retrieve(q, data, n=4)
        dists = [shape_distance(q, s) for s in data]
        assert got == sorted(range(8), key=lambda i: (dists[i], i))[:4]

    def test_clamps_with_warning(self, rng, caplog):
        data = [make_random_sample(rng, k=2, r=8) for _ in range(2)]
        with caplog.at_level("WARNING"):
            got = knn_retrieve(data[0], data, n=10)
        assert len(got) == 2
        assert any("clamped" in r.message for r in caplog.records)

    def test_empty_dataset(self, rng):
        with pytest.raises(ContractError):
            knn_retrieve(make_random_sample(rng), [], n=1)


class TestMmdCov:
    def test_self_match_is_zero_one(self, rng):
        x = [make_random_sample(rng, k=2, r=8) for _ in range(5)]
        mmd, cov = mmd_cov(x, x)
        assert mmd == 0.0 and cov == 1.0

    def test_matches_exhaustive_oracle(self, rng):
        gen = [make_random_sample(rng, k=2, r=8) for _ in range(3)]
        train = [make_random_sample(rng, k=2, r=8) for _ in range(4)]
        mmd, cov = mmd_cov(gen, train, ground="cd")
        # oracle: explicit loops over every (generated, training, slot) triple
        d = {}
        for slot in range(2):
            for gi, g in enumerate(gen):
                for ti, t in enumerate(train):
                    d[(slot, gi, ti)] = chamfer(part_point_cloud(g, slot), part_point_cloud(t, slot))
        covered = set()
        for slot in range(2):
            for gi in range(3):
                covered.add(min(range(4), key=lambda ti: d[(slot, gi, ti)]))
        assert cov == pytest.approx(len(covered) / 4)
        shape_scores = []
        for ti in range(4):
            parts = [min(d[(slot, gi, ti)] for gi in range(3)) for slot in range(2)]
            shape_scores.append(np.mean(parts))
        assert mmd == pytest.approx(np.mean(shape_scores), rel=1e-12)

    def test_cov_bounds(self, rng):
        gen = [make_random_sample(rng, k=2, r=8) for _ in range(2)]
        train = [make_random_sample(rng, k=2, r=8) for _ in range(5)]
        mmd, cov = mmd_cov(gen, train)
        assert 1 / 5 <= cov <= 1.0 and mmd >= 0.0

    def test_emd_ground(self, rng):
        x = [make_random_sample(rng, k=2, r=8) for _ in range(3)]
        mmd, cov = mmd_cov(x, x, ground="emd")
        assert mmd == 0.0 and cov == 1.0

    def test_empty_rejected(self, rng):
        with pytest.raises(ContractError):
            mmd_cov([], [make_random_sample(rng)])
        with pytest.raises(ContractError):
            mmd_cov([make_random_sample(rng)], [])

    def test_unknown_ground(self, rng):
        x = [make_random_sample(rng, k=2, r=8)]
        with pytest.raises(ContractError):
            mmd_cov(x, x, ground="l2")

    def test_threads_do_not_change_result(self, rng):
        gen = [make_random_sample(rng, k=2, r=8) for _ in range(3)]
        train = [make_random_sample(rng, k=2, r=8) for _ in range(4)]
        assert mmd_cov(gen, train, threads=1) == mmd_cov(gen, train, threads=2)


def mirrored_pair_sample(rng, offset=0.0):
    """Two parts that are exact mirror images across the x mid-plane."""
    r = 8
    occ = (rng.random((r, r, r)) < 0.4).astype(np.float32)
    left = VoxelGrid.from_dense(occ)
    right = VoxelGrid.from_dense(np.ascontiguousarray(np.flip(occ, axis=0)))
    cl = np.array([0.3, 0.5, 0.5], dtype=np.float32)
    ext = np.array([0.2, 0.3, 0.25], dtype=np.float32)
    cr = np.array([0.7 + offset, 0.5, 0.5], dtype=np.float32)
    return ShapeSample(
        class_id="pair",
        parts=[left, right],
        boxes=[Box6(cl, ext), Box6(cr, ext)],
        mask=PartMask.full(2),
    )


class TestSymmetry:
    def test_perfect_mirror_is_zero(self, rng):
        s = mirrored_pair_sample(rng)
        assert symmetry_score(s, (0, 1), mirror_plane=(0, 0.5)) <= 1e-6

    def test_default_plane_matches_explicit(self, rng):
        s = mirrored_pair_sample(rng)
        assert symmetry_score(s, (0, 1)) == pytest.approx(
            symmetry_score(s, (0, 1), mirror_plane=(0, 0.5)), abs=1e-9
        )

    def test_monotone_in_offset(self, rng):
        scores = [
            symmetry_score(mirrored_pair_sample(rng, offset=d), (0, 1), mirror_plane=(0, 0.5))
            for d in (0.01, 0.03, 0.05, 0.08, 0.1)
        ]
        assert all(b > a for a, b in zip(scores, scores[1:]))

    def test_asymmetric_exceeds_symmetric(self, rng):
        sym = mirrored_pair_sample(rng)
        asym = make_random_sample(rng, k=2, r=8)
        assert symmetry_score(asym, (0, 1), (0, 0.5)) > symmetry_score(sym, (0, 1), (0, 0.5))

    def test_absent_part_rejected(self, rng):
        s = make_random_sample(rng, k=2, r=8, mask=[True, False])
        with pytest.raises(ContractError):
            symmetry_score(s, (0, 1))


def sample_with_centers(centers):
    k = len(centers)
    rng = np.random.default_rng(0)
    parts, boxes = [], []
    for c in centers:
        occ = (rng.random(8**3) < 0.3).astype(np.float32)
        parts.append(VoxelGrid(8, occ))
        boxes.append(Box6(np.asarray(c, dtype=np.float32), np.full(3, 0.1, dtype=np.float32)))
    return ShapeSample("x", parts, boxes, PartMask.full(k))


class TestCoplanarity:
    def test_coplanar_is_zero(self):
        s = sample_with_centers([(0, 0, 0.3), (1, 0, 0.3), (0, 1, 0.3), (0.7, 0.2, 0.3)])
        assert coplanarity_score(s, (0, 1, 2, 3)) <= 1e-7

    def test_offset_along_normal_is_exact(self):
        h = 0.123
        s = sample_with_centers([(0, 0, 0.2), (1, 0, 0.2), (0, 1, 0.2), (0.5, 0.5, 0.2 + h)])
        assert coplanarity_score(s, (0, 1, 2, 3)) == pytest.approx(h, rel=1e-5)

    def test_matches_plane_equation_oracle(self, rng):
        centers = rng.random((4, 3))
        s = sample_with_centers(centers)
        got = coplanarity_score(s, (0, 1, 2, 3))
        c = centers.astype(np.float32).astype(np.float64)  # boxes store float32
        n = np.cross(c[1] - c[0], c[2] - c[0])
        expected = abs(np.dot(c[3] - c[0], n / np.linalg.norm(n)))
        assert got == pytest.approx(expected, rel=1e-9)

    def test_collinear_rejected(self):
        s = sample_with_centers([(0, 0, 0), (0.5, 0, 0), (1.0, 0, 0), (0, 1, 0)])
        with pytest.raises(DegenerateGeometryError):
            coplanarity_score(s, (0, 1, 2, 3))


class TestCavityScores:
    def test_training_joints_perfect(self):
        samples, _ = generate_dataset(10, seed=4, resolution=16)
        report = cavity_scores(samples)
        assert report.r_over == 1.0
        assert np.all(report.r_values == 0.0)
        assert all(not rec.flags for rec in report.records)

    def test_empty_tenon_flagged(self):
        samples, _ = generate_dataset(2, seed=4, resolution=16)
        samples[0].parts[0].occupancy[:] = 0.0
        report = cavity_scores(samples)
        assert report.records[0].flags == ["empty_tenon"]
        assert report.records[0].r_o == 0.0 and report.records[0].r_e == 0.0

    def test_r_range(self, rng):
        samples = [make_random_sample(rng, k=2, r=16) for _ in range(5)]
        report = cavity_scores(samples)
        for rec in report.records:
            assert 0.0 <= rec.r <= 2.0


class TestVoxelIoU:
    def test_identical_is_one(self, rng):
        g = VoxelGrid(8, (rng.random(512) < 0.5).astype(np.float32))
        assert voxel_iou(g, g) == 1.0

    def test_disjoint_is_zero(self):
        a = np.zeros(8, dtype=np.float32)
        b = np.zeros(8, dtype=np.float32)
        a[0], b[1] = 1.0, 1.0
        assert voxel_iou(VoxelGrid(2, a), VoxelGrid(2, b)) == 0.0

    def test_both_empty_is_one(self):
        assert voxel_iou(VoxelGrid.empty(2), VoxelGrid.empty(2)) == 1.0


class TestInceptionScore:
    def _classifier_stub(self, proba_fn):
        clf = metrics.ModeClassifier(16, seed=0)
        clf.val_accuracy = 1.0
        clf.predict_proba = proba_fn
        return clf

    def test_untrained_rejected(self):
        clf = metrics.ModeClassifier(16, seed=0)
        samples, _ = generate_dataset(3, seed=0, resolution=16)
        with pytest.raises(ContractError):
            inception_mode_score(samples, clf)

    def test_uniform_classifier_scores_one(self):
        samples, _ = generate_dataset(5, seed=0, resolution=16)
        clf = self._classifier_stub(lambda g: np.full((len(g), 8), 1 / 8))
        assert inception_mode_score(samples, clf) == pytest.approx(1.0)

    def test_confident_uniform_spread_scores_eight(self):
        samples, _ = generate_dataset(8, seed=0, resolution=16, stratified=True)
        eye = np.eye(8)
        eps = 1e-12
        clf = self._classifier_stub(
            lambda g: np.clip(eye[: len(g)], eps, 1 - 7 * eps)
            / np.clip(eye[: len(g)], eps, 1 - 7 * eps).sum(1, keepdims=True)
        )
        assert inception_mode_score(samples, clf) == pytest.approx(8.0, rel=1e-6)

    def test_real_classifier_reaches_holdout_accuracy(self):
        samples, labels = generate_dataset(320, seed=21, resolution=16, stratified=True)
        clf = metrics.train_mode_classifier(samples, labels, seed=3)
        assert clf.val_accuracy is not None and clf.val_accuracy >= 0.95
        score = inception_mode_score(samples, clf)
        assert 1.0 <= score <= 8.0
        assert score > 4.0  # stratified real data should spread over the modes


class TestPointClouds:
    def test_budget_resampling_deterministic(self, rng):
        s = make_random_sample(rng, k=2, r=8)
        a = part_point_cloud(s, 0)
        b = part_point_cloud(s, 0)
        assert np.array_equal(a, b)
        assert len(a) == metrics.POINT_BUDGET

    def test_absent_part_empty(self, rng):
        s = make_random_sample(rng, k=2, r=8, mask=[True, False])
        assert len(part_point_cloud(s, 1)) == 0

    def test_shape_cloud_labels(self, rng):
        s = make_random_sample(rng, k=3, r=8, mask=[True, False, True])
        cloud = shape_point_cloud(s)
        assert isinstance(cloud, EvalPointCloud)
        assert set(np.unique(cloud.part_id)) == {0, 2}

    def test_cloud_finite_invariant(self):
        with pytest.raises(ContractError):
            EvalPointCloud(np.array([[np.nan, 0, 0]]), np.array([0]))
