"""Detail-prior construction tests: partition properties and determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facesr import geometry as G
from facesr import synth
from facesr.errors import DataError
from facesr.prior import (PriorConfig, build_preliminary, build_prior,
                          partition_channels, rescale_channels)
from facesr.resample import gaussian_blur, resize_bicubic


@pytest.fixture(scope="module")
def template():
    rng = np.random.default_rng(11)
    shapes = [synth.sample_landmarks(rng) for _ in range(30)]
    model = G.build_shape_model(shapes, n_bases=10)
    return G.make_template(model, px_iod=20)


def _identity_field(template):
    return G.eval_warp(template, np.zeros(template.n_bases))


def _pair(template, rng, extra=None):
    """Training triple whose residual magnitude is exactly |extra|."""
    base = gaussian_blur(rng.random(template.shape), 2.0)
    h, w = template.shape
    lo = resize_bicubic(base, out_shape=(h // 2, w // 2))
    hi = resize_bicubic(lo, out_shape=(h, w))
    if extra is not None:
        hi = hi + extra
    return hi, lo, _identity_field(template)


def _blob(shape, center, sigma=2.0, amp=0.5):
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    d2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    return amp * np.exp(-d2 / (2.0 * sigma * sigma))


class TestConfig:
    def test_channel_floor(self):
        with pytest.raises(DataError):
            PriorConfig(channels=0)

    def test_percentile_range(self):
        with pytest.raises(DataError):
            PriorConfig(percentile=1.0)
        with pytest.raises(DataError):
            PriorConfig(percentile=-0.1)


class TestBuildPrior:
    def test_zero_residuals_zero_channels(self, template):
        rng = np.random.default_rng(0)
        pairs = [_pair(template, rng) for _ in range(4)]
        # residual of up(down(x)) against itself is exactly zero
        pairs = [(hi, resize_bicubic(hi, out_shape=(template.shape[0] // 2,
                                                    template.shape[1] // 2)),
                  f) for hi, _, f in pairs]
        pairs = [(resize_bicubic(lo, out_shape=template.shape), lo, f)
                 for _, lo, f in pairs]
        chans = build_prior(pairs, template, PriorConfig(channels=4))
        assert np.all(chans == 0.0)

    def test_two_blobs_two_channels(self, template):
        rng = np.random.default_rng(1)
        c0 = template.eye_left
        c1 = template.eye_right
        extra = _blob(template.shape, c0) + _blob(template.shape, c1)
        pair = _pair(template, rng, extra=extra)
        chans = build_prior([pair], template, PriorConfig(channels=2))
        assert chans.shape[0] == 2
        centers = np.stack([c0, c1])
        picked = []
        for c in range(2):
            ys, xs = np.nonzero(chans[c])
            assert len(ys) > 0
            pts = np.stack([xs, ys], axis=1)
            d = np.linalg.norm(pts[:, None, :] - centers[None], axis=2)
            nearest = d.argmin(axis=1)
            assert np.all(nearest == nearest[0])   # one blob per channel
            picked.append(nearest[0])
        assert sorted(picked) == [0, 1]
        assert np.all(chans[0] * chans[1] == 0.0)

    def test_empty_training_set(self, template):
        with pytest.raises(DataError):
            build_prior([], template, PriorConfig())

    def test_deterministic(self, template):
        rng = np.random.default_rng(2)
        extra = _blob(template.shape, template.eye_left, sigma=4.0)
        pairs = [_pair(template, rng, extra=extra) for _ in range(3)]
        a = build_prior(pairs, template, PriorConfig(channels=6))
        b = build_prior(pairs, template, PriorConfig(channels=6))
        assert np.array_equal(a, b)

    def test_partition_of_preliminary(self, template):
        rng = np.random.default_rng(3)
        extra = gaussian_blur(np.abs(rng.standard_normal(template.shape)), 1.5)
        pairs = [_pair(template, rng, extra=extra) for _ in range(3)]
        cfg = PriorConfig(channels=5)
        pre = build_preliminary(pairs, template, cfg)
        chans = partition_channels(pre, template.mask, cfg)
        thr = np.percentile(pre[template.mask], cfg.percentile * 100.0)
        active = (pre > thr) & template.mask
        assert np.array_equal(chans.sum(axis=0), np.where(active, pre, 0.0))
        assert np.all(chans >= 0.0)

    def test_peak_normalisation(self, template):
        rng = np.random.default_rng(4)
        extra = _blob(template.shape, template.eye_left, sigma=3.0, amp=2.0)
        pairs = [_pair(template, rng, extra=extra)]
        pre = build_preliminary(pairs, template, PriorConfig())
        assert abs(pre.max() - 1.0) < 1e-12
        raw = build_preliminary(pairs, template,
                                PriorConfig(normalize_peak=False))
        assert raw.max() > 0 and abs(raw.max() - 1.0) > 1e-6


class TestPartitionProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
    def test_invariants_on_random_maps(self, seed, n_chan):
        rng = np.random.default_rng(seed)
        pre = gaussian_blur(np.abs(rng.standard_normal((24, 22))), 1.0)
        mask = np.zeros((24, 22), dtype=bool)
        mask[3:21, 3:19] = True
        cfg = PriorConfig(channels=n_chan)
        chans = partition_channels(pre, mask, cfg)
        assert chans.shape == (n_chan, 24, 22)
        assert np.all(chans >= 0.0)
        support = (chans > 0).sum(axis=0)
        assert support.max() <= 1
        thr = np.percentile(pre[mask], cfg.percentile * 100.0)
        active = (pre > thr) & mask
        assert np.array_equal(chans.sum(axis=0), np.where(active, pre, 0.0))

    def test_constant_map_no_channels(self):
        pre = np.full((16, 16), 0.5)
        mask = np.ones((16, 16), dtype=bool)
        chans = partition_channels(pre, mask, PriorConfig(channels=3))
        assert np.all(chans == 0.0)

    def test_more_channels_than_pixels(self):
        pre = np.zeros((10, 10))
        pre[4, 4] = 1.0
        pre[4, 5] = 0.9
        mask = np.ones((10, 10), dtype=bool)
        chans = partition_channels(pre, mask, PriorConfig(channels=5))
        assert np.all(chans >= 0.0)
        assert (chans > 0).sum(axis=0).max() <= 1


class TestRescale:
    def test_downscale_keeps_invariants(self, template):
        rng = np.random.default_rng(5)
        extra = _blob(template.shape, template.eye_left) + \
            _blob(template.shape, template.eye_right)
        pair = _pair(template, rng, extra=extra)
        chans = build_prior([pair], template, PriorConfig(channels=2))
        h, w = template.shape
        small = rescale_channels(chans, (h // 2, w // 2))
        assert small.shape == (2, h // 2, w // 2)
        assert np.all(small >= 0.0)
        assert np.all(small[0] * small[1] == 0.0)
        assert small[0].max() > 0 and small[1].max() > 0

    def test_identity_rescale(self, template):
        rng = np.random.default_rng(6)
        extra = _blob(template.shape, template.eye_left, sigma=3.0)
        pair = _pair(template, rng, extra=extra)
        chans = build_prior([pair], template, PriorConfig(channels=3))
        same = rescale_channels(chans, template.shape)
        # nearest-neighbour labels are exact at identity; map resize is too
        assert np.allclose(same, chans, atol=1e-9)
