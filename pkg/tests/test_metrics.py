"""PSNR/SSIM golden values, symmetry and scaling laws."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facesr import synth
from facesr.errors import DataError
from facesr.metrics import (PSNR_CAP, facial_region, psnr, score_records,
                            ssim)


def _region(shape, margin=2):
    m = np.zeros(shape, dtype=bool)
    m[margin:shape[0] - margin, margin:shape[1] - margin] = True
    return m


class TestPsnr:
    def test_identical_is_infinite(self):
        a = np.random.default_rng(0).random((20, 20))
        assert psnr(a, a) == np.inf

    def test_uniform_half_peak_closed_form(self):
        a = np.zeros((16, 16))
        b = np.full((16, 16), 0.5)
        want = 20.0 * np.log10(2.0)
        assert abs(psnr(a, b, _region((16, 16))) - want) < 1e-6

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((14, 15))
        b = rng.random((14, 15))
        region = _region((14, 15))
        total = 0.0
        count = 0
        for y in range(14):
            for x in range(15):
                if region[y, x]:
                    total += (a[y, x] - b[y, x]) ** 2
                    count += 1
        want = 10.0 * np.log10(1.0 / (total / count))
        assert abs(psnr(a, b, region) - want) < 1e-9

    def test_symmetry_exact(self):
        rng = np.random.default_rng(2)
        a = rng.random((12, 12))
        b = rng.random((12, 12))
        assert psnr(a, b) == psnr(b, a)

    def test_residual_scaling_law(self):
        rng = np.random.default_rng(3)
        a = rng.random((18, 18))
        r = rng.standard_normal((18, 18)) * 0.05
        for s in (2.0, 3.5, 10.0):
            drop = psnr(a, a + r) - psnr(a, a + s * r)
            assert abs(drop - 20.0 * np.log10(s)) < 1e-9

    def test_extent_mismatch(self):
        with pytest.raises(DataError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_empty_region(self):
        with pytest.raises(DataError):
            psnr(np.zeros((4, 4)), np.ones((4, 4)),
                 np.zeros((4, 4), dtype=bool))


class TestSsim:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(4)
        a = rng.random((24, 26))
        assert ssim(a, a) == 1.0

    def test_inverted_pattern_negative(self):
        ys, xs = np.mgrid[0:32, 0:32]
        a = 0.5 + 0.45 * np.sin(xs * 0.9) * np.cos(ys * 0.7)
        b = 1.0 - a
        assert ssim(a, b) < 0.0

    def test_constant_vs_constant_luminance_term(self):
        for mu1, mu2 in ((0.3, 0.6), (0.1, 0.9), (0.5, 0.5)):
            a = np.full((20, 20), mu1)
            b = np.full((20, 20), mu2)
            c1 = 0.01 ** 2
            want = (2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
            assert abs(ssim(a, b) - want) < 1e-9

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((16, 16))
        b = rng.random((16, 16))
        v = ssim(a, b)
        assert -1.0 <= v <= 1.0

    def test_affine_shift_tolerance(self):
        rng = np.random.default_rng(5)
        a = 0.3 + 0.3 * rng.random((30, 30))
        b = a + 0.002
        assert ssim(a, b) > 1.0 - 1e-3

    def test_too_small_image(self):
        with pytest.raises(DataError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestFacialRegion:
    def test_hull_of_landmarks(self):
        lms = synth.canonical_landmarks() * 20 + [40, 40]
        mask = facial_region(lms, (90, 90))
        assert mask.any()
        inner = np.round(lms.mean(axis=0)).astype(int)
        assert mask[inner[1], inner[0]]
        assert not mask[0, 0]

    def test_degenerate_raises(self):
        lms = np.tile([[5.0, 5.0]], (68, 1))
        with pytest.raises(DataError):
            facial_region(lms, (20, 20))


class TestScoreRecords:
    def test_identical_capped_and_ssim_one(self):
        rng = np.random.default_rng(6)
        img = rng.random((24, 24))
        rep = score_records([("a", img, img, None), ("b", img, img, None)])
        assert all(r.psnr_db == PSNR_CAP for r in rep.rows)
        assert all(r.ssim == 1.0 for r in rep.rows)
        assert rep.mean_psnr == PSNR_CAP
        assert rep.mean_ssim == 1.0

    def test_single_record_mean_equals_value(self):
        rng = np.random.default_rng(7)
        a = rng.random((20, 20))
        b = rng.random((20, 20))
        rep = score_records([("only", a, b, None)])
        assert rep.mean_psnr == rep.rows[0].psnr_db
        assert rep.mean_ssim == rep.rows[0].ssim

    def test_bad_record_collected_not_fatal(self):
        rng = np.random.default_rng(8)
        a = rng.random((20, 20))
        rep = score_records([("ok", a, a, None),
                             ("bad", a, np.zeros((5, 5)), None)])
        assert len(rep.rows) == 1
        assert len(rep.errors) == 1
        assert rep.errors[0][0] == "bad"

    def test_tsv_layout(self):
        rng = np.random.default_rng(9)
        a = rng.random((20, 20))
        b = np.clip(a + 0.05, 0, 1)
        rep = score_records([("x", a, b, None)])
        text = rep.to_tsv()
        lines = text.strip().split("\n")
        assert lines[0] == "name\tpsnr_db\tssim"
        assert lines[1].startswith("x\t")
        assert lines[-1].startswith("mean\t")
