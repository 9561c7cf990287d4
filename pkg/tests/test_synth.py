import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peakloc.frame_io import Frame
from peakloc.synth import (
    PeakParams,
    PlacementError,
    SceneConfig,
    poissonize,
    pv_value,
    render_patch,
    render_scene,
)


def _params(**kw):
    base = dict(bg=0.0, amp=10.0, eta=0.5, mu_y=5.0, mu_z=5.0, sigma_y=1.2, sigma_z=1.5)
    base.update(kw)
    return PeakParams(**base)


class TestPvValue:
    def test_peak_value_at_center(self):
        for eta in (0.0, 0.3, 1.0):
            p = _params(eta=eta, amp=10.0)
            assert pv_value(p, p.mu_y, p.mu_z) == pytest.approx(10.0)

    def test_gaussian_point(self):
        # eta=0, r2=1: exp(-1/2)
        p = _params(eta=0.0, amp=1.0, sigma_y=1.0, sigma_z=1.0)
        val = pv_value(p, p.mu_y + 1.0, p.mu_z)
        assert val == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_lorentzian_point(self):
        p = _params(eta=1.0, amp=1.0, sigma_y=1.0, sigma_z=1.0)
        val = pv_value(p, p.mu_y + 1.0, p.mu_z)
        assert val == pytest.approx(0.5, abs=1e-12)

    @given(
        d=st.floats(0.01, 20.0),
        eta=st.floats(0.0, 1.0),
        sig=st.floats(0.3, 4.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, d, eta, sig):
        p = _params(eta=eta, sigma_y=sig, sigma_z=sig, bg=2.0)
        left = pv_value(p, p.mu_y - d, p.mu_z)
        right = pv_value(p, p.mu_y + d, p.mu_z)
        assert left == pytest.approx(right, rel=1e-12)
        up = pv_value(p, p.mu_y, p.mu_z - d)
        down = pv_value(p, p.mu_y, p.mu_z + d)
        assert up == pytest.approx(down, rel=1e-12)

    def test_monotone_decreasing_in_r2(self):
        p = _params(eta=0.4)
        dists = np.linspace(0, 8, 200)
        vals = pv_value(p, p.mu_y + dists, p.mu_z)
        assert np.all(np.diff(vals) < 0)

    def test_eta_limits_match_closed_forms(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            sy, sz = rng.uniform(0.5, 3.0, 2)
            y, z = rng.uniform(-10, 10, 2)
            amp = rng.uniform(1, 100)
            r2 = (y / sy) ** 2 + (z / sz) ** 2
            g = _params(eta=0.0, amp=amp, mu_y=0, mu_z=0, sigma_y=sy, sigma_z=sz)
            l = _params(eta=1.0, amp=amp, mu_y=0, mu_z=0, sigma_y=sy, sigma_z=sz)
            assert pv_value(g, y, z) == pytest.approx(amp * math.exp(-r2 / 2), abs=1e-12 * amp)
            assert pv_value(l, y, z) == pytest.approx(amp / (1 + r2), abs=1e-12 * amp)


class TestRenderScene:
    def test_zero_peaks_constant_bg(self):
        cfg = SceneConfig(n_frames=2, n_peaks=0, width=32, height=32,
                          bg_range=(7.0, 7.0), min_separation=0.0, seed=1)
        stack, records = render_scene(cfg)
        assert records == []
        assert np.allclose(stack.data, 7.0)

    def test_argmax_pixel_contains_center(self):
        cfg = SceneConfig(n_frames=1, n_peaks=1, width=64, height=64,
                          min_separation=0.0, seed=9)
        stack, records = render_scene(cfg)
        rec = records[0]
        frame = stack.frame(0)
        r, c = np.unravel_index(np.argmax(frame.counts), frame.counts.shape)
        assert c == round(rec.center_y)
        assert r == round(rec.center_z)

    def test_deterministic_for_seed(self):
        cfg = SceneConfig(n_frames=3, n_peaks=6, seed=123, poisson_noise=True)
        a, ra = render_scene(cfg)
        b, rb = render_scene(cfg)
        assert np.array_equal(a.data, b.data)
        assert [(r.center_y, r.center_z) for r in ra] == [(r.center_y, r.center_z) for r in rb]

    def test_ground_truth_exact_at_centers(self):
        # noiseless, disjoint supports: the model built from the recorded
        # params reproduces bg + amp at each center and the rendered pixels
        from peakloc.synth import render_frame

        cfg = SceneConfig(n_frames=1, n_peaks=5, width=96, height=96,
                          bg_range=(4.0, 4.0), min_separation=20.0,
                          sigma_range=(0.9, 1.5), seed=21)
        frame, records, params = render_frame(cfg, 0)
        for rec, p in zip(records, params):
            assert pv_value(p, rec.center_y, rec.center_z) == pytest.approx(p.bg + p.amp)
            r, c = round(rec.center_z), round(rec.center_y)
            assert frame.counts[r, c] == pytest.approx(pv_value(p, c, r), rel=1e-5)

    def test_min_separation_honored(self):
        cfg = SceneConfig(n_frames=1, n_peaks=8, width=128, height=128,
                          min_separation=15.0, sigma_range=(0.9, 1.4), seed=3)
        _, records = render_scene(cfg)
        pts = np.array([[r.center_y, r.center_z] for r in records])
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                assert np.hypot(*(pts[i] - pts[j])) >= 15.0

    def test_placement_error_when_impossible(self):
        cfg = SceneConfig(n_frames=1, n_peaks=50, width=48, height=48,
                          min_separation=12.0, border_margin=8.0,
                          sigma_range=(0.5, 1.2), seed=0)
        with pytest.raises(PlacementError):
            render_scene(cfg)

    def test_separation_vs_sigma_validated(self):
        with pytest.raises(ValueError, match="min_separation"):
            SceneConfig(min_separation=5.0, sigma_range=(0.9, 1.6))

    def test_frames_render_independently(self):
        # per-frame seed streams: rendering frames out of order reproduces
        # the sequential scene byte for byte (parallel-rendering contract)
        from peakloc.synth import render_frame

        cfg = SceneConfig(n_frames=5, n_peaks=6, seed=77, poisson_noise=True)
        stack, _ = render_scene(cfg)
        for i in reversed(range(cfg.n_frames)):
            frame, _, _ = render_frame(cfg, i)
            assert np.array_equal(frame.counts, stack.frame(i).counts)


class TestRenderPatch:
    def test_matches_pv_value(self):
        p = _params(bg=3.0, mu_y=4.7, mu_z=6.1)
        patch = render_patch(p, 11)
        assert patch.shape == (11, 11)
        assert patch[6, 4] == pytest.approx(pv_value(p, 4.0, 6.0))


class TestPoissonize:
    def test_zero_frame_stays_zero(self):
        frame = Frame(np.zeros((8, 8)))
        out = poissonize(frame, 1)
        assert np.array_equal(out.counts, np.zeros((8, 8)))

    def test_mean_within_clt_bound(self):
        # 64x64 pixels of mean 10000: SE of the sample mean is 100/64
        frame = Frame(np.full((64, 64), 10000.0))
        out = poissonize(frame, 2024)
        assert abs(float(out.counts.mean()) - 10000.0) <= 3.0 * (100.0 / 64.0)

    def test_deterministic(self):
        frame = Frame(np.full((16, 16), 50.0))
        a = poissonize(frame, 7)
        b = poissonize(frame, 7)
        assert np.array_equal(a.counts, b.counts)

    def test_negative_pixel_rejected(self):
        frame = Frame(np.zeros((4, 4)))
        frame.counts = frame.counts - 1.0  # bypass the constructor check
        with pytest.raises(ValueError, match="nonnegative"):
            poissonize(frame, 0)
