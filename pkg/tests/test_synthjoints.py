from __future__ import annotations

import numpy as np
import pytest

from sagnet.errors import ContractError, JointSpecError
from sagnet.shapes import Box6, encode_sample
from sagnet.synthjoints import (
    JointSpec,
    N_MODES,
    fit_counts,
    fit_oracle,
    generate_dataset,
    generate_joint,
    random_spec,
    read_labels,
    recover_mode,
    write_labels,
)


def brute_force_fit(sample):
    """Independent loop-based reimplementation of the world-grid fit counts."""
    r = sample.resolution
    tb, mb = sample.boxes
    lo = np.minimum(tb.lo, mb.lo).astype(np.float64)
    hi = np.maximum(tb.hi, mb.hi).astype(np.float64)
    tenon = sample.parts[0].dense()
    mort = sample.parts[1].dense()

    def probe(point, box, dense):
        blo, bhi = box.lo.astype(np.float64), box.hi.astype(np.float64)
        if np.any(point < blo) or np.any(point >= bhi):
            return None
        idx = np.clip(((point - blo) / (bhi - blo) * r).astype(int), 0, r - 1)
        return bool(dense[idx[0], idx[1], idx[2]])

    n_overlap = n_mort_in_tbox = n_cavity = n_tenon = 0
    for ix in range(r):
        for iy in range(r):
            for iz in range(r):
                p = lo + (np.array([ix, iy, iz]) + 0.5) / r * (hi - lo)
                t_occ = probe(p, tb, tenon)
                m_occ = probe(p, mb, mort)
                if t_occ:
                    n_tenon += 1
                    if m_occ:
                        n_overlap += 1
                    if m_occ is False:
                        n_cavity += 1
                if m_occ and t_occ is not None:
                    n_mort_in_tbox += 1
    return n_overlap, n_mort_in_tbox, n_cavity, n_tenon


class TestGenerator:
    @pytest.mark.parametrize("mode", range(N_MODES))
    @pytest.mark.parametrize("resolution", [16, 32])
    def test_every_mode_fits_exactly(self, mode, resolution):
        rng = np.random.default_rng(mode + 10 * resolution)
        spec = random_spec(rng, resolution=resolution, mode=mode)
        sample = generate_joint(spec)
        assert fit_oracle(sample) == (0.0, 1.0)

    def test_mirror_symmetry_mode0_vs_mode1(self):
        from sagnet.synthjoints import LATTICE

        common = dict(resolution=16, tenon_size=(7, 5, 6), tenon_offset=(4, 3),
                      block_extents=(20, 18, 22))
        a = generate_joint(JointSpec(mode=0, block_origin=(3, 5, 4), **common))
        b = generate_joint(
            JointSpec(mode=1, block_origin=(LATTICE - 3 - 20, 5, 4), **common)
        )
        # mortise voxels mirror along x
        np.testing.assert_array_equal(
            a.parts[1].dense(), np.flip(b.parts[1].dense(), axis=0)
        )
        for pa, pb in zip(a.boxes, b.boxes):
            np.testing.assert_allclose(pa.center[0], 1.0 - pb.center[0], atol=1e-6)
            np.testing.assert_allclose(pa.center[1:], pb.center[1:])
            np.testing.assert_allclose(pa.extents, pb.extents)

    def test_fixed_seed_regenerates_identical_bytes(self):
        a, la = generate_dataset(12, seed=42, resolution=16)
        b, lb = generate_dataset(12, seed=42, resolution=16)
        assert la == lb
        for sa, sb in zip(a, b):
            assert encode_sample(sa) == encode_sample(sb)

    def test_different_seeds_differ(self):
        a, _ = generate_dataset(10, seed=1, resolution=16)
        b, _ = generate_dataset(10, seed=2, resolution=16)
        assert any(encode_sample(x) != encode_sample(y) for x, y in zip(a, b))

    def test_stratified_covers_all_modes(self):
        _, labels = generate_dataset(8, seed=0, resolution=16, stratified=True)
        assert sorted(labels) == list(range(8))

    def test_count_validation(self):
        with pytest.raises(ContractError):
            generate_dataset(0, seed=0)

    def test_labels_sidecar(self, tmp_path):
        write_labels([3, 1, 7], tmp_path)
        assert read_labels(tmp_path) == [3, 1, 7]

    def test_mode_recoverable(self):
        samples, labels = generate_dataset(40, seed=9, resolution=16)
        assert [recover_mode(s) for s in samples] == labels

    def test_invalid_specs(self):
        ok = dict(mode=0, resolution=16, tenon_size=(6, 5, 5), tenon_offset=(4, 4),
                  block_origin=(0, 0, 0), block_extents=(20, 20, 20))
        JointSpec(**ok)
        with pytest.raises(JointSpecError):
            JointSpec(**{**ok, "tenon_size": (6, 20, 5)})  # larger than the grid wall
        with pytest.raises(JointSpecError):
            JointSpec(**{**ok, "mode": 9})
        with pytest.raises(JointSpecError):
            JointSpec(**{**ok, "tenon_offset": (0, 4)})  # breaches the side wall
        with pytest.raises(JointSpecError):
            JointSpec(**{**ok, "block_extents": (40, 20, 20)})  # outside lattice
        with pytest.raises(JointSpecError):
            JointSpec(**{**ok, "tenon_size": (0, 5, 5)})


class TestFitOracle:
    def test_arity(self, rng):
        from conftest import make_random_sample

        with pytest.raises(ContractError):
            fit_oracle(make_random_sample(rng, k=3))

    def test_non_binary(self):
        spec = random_spec(np.random.default_rng(0), resolution=16)
        sample = generate_joint(spec)
        sample.parts[0].occupancy[0] = 0.5
        with pytest.raises(ContractError):
            fit_oracle(sample)

    def test_perfect_fit_property(self):
        samples, _ = generate_dataset(25, seed=3, resolution=16)
        for s in samples:
            r_o, r_e = fit_oracle(s)
            assert 1.0 - (r_e - r_o) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for mode in (0, 3, 6, 7):
            sample = generate_joint(random_spec(rng, resolution=16, mode=mode))
            counts = fit_counts(sample)
            expected = brute_force_fit(sample)
            assert (counts.overlap_occ, counts.mortise_occ_in_tenon_box,
                    counts.tenon_in_cavity, counts.tenon_occ) == expected

    def test_dilated_tenon_overlaps(self):
        sample = generate_joint(random_spec(np.random.default_rng(2), resolution=16, mode=0))
        grown = sample.copy()
        tb = grown.boxes[0]
        cell = grown.boxes[1].extents / 16.0
        grown.boxes[0] = Box6(tb.center, tb.extents + 2 * cell)
        r_o, r_e = fit_oracle(grown)
        assert r_o > 0.0
        counts = fit_counts(grown)
        assert (counts.overlap_occ, counts.mortise_occ_in_tenon_box,
                counts.tenon_in_cavity, counts.tenon_occ) == brute_force_fit(grown)

    def test_tenon_outside_mortise(self):
        sample = generate_joint(random_spec(np.random.default_rng(4), resolution=16, mode=0))
        moved = sample.copy()
        tb = moved.boxes[0]
        moved.boxes[0] = Box6(tb.center + np.array([2.0, 0, 0], dtype=np.float32), tb.extents)
        r_o, r_e = fit_oracle(moved)
        assert r_e == 0.0 and r_o == 0.0

    def test_empty_tenon_guard(self):
        sample = generate_joint(random_spec(np.random.default_rng(6), resolution=16))
        sample.parts[0].occupancy[:] = 0.0
        r_o, r_e = fit_oracle(sample)
        assert (r_o, r_e) == (0.0, 0.0)

    def test_scores_in_unit_interval(self, rng):
        from conftest import make_random_sample

        for _ in range(10):
            s = make_random_sample(rng, k=2, r=16)
            r_o, r_e = fit_oracle(s)
            assert 0.0 <= r_o <= 1.0 and 0.0 <= r_e <= 1.0
