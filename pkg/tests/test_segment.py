import numpy as np
import pytest

from peakloc.frame_io import Frame
from peakloc.segment import (
    CandidateSummary,
    Patch,
    auto_threshold,
    crop_patch,
    extract_candidates,
    label_components,
    region_maxima,
    threshold,
    to_frame_coords,
)
from peakloc.synth import PeakParams, SceneConfig, render_scene


def flood_fill_labels(mask):
    """Oracle: iterative 8-connected flood fill, labels in raster order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=int)
    next_label = 0
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or labels[r0, c0]:
                continue
            next_label += 1
            stack = [(r0, c0)]
            labels[r0, c0] = next_label
            while stack:
                r, c = stack.pop()
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not labels[rr, cc]:
                            labels[rr, cc] = next_label
                            stack.append((rr, cc))
    return labels


class TestThreshold:
    def test_below_min_all_true(self):
        frame = Frame(np.arange(16, dtype=float).reshape(4, 4))
        assert threshold(frame, -1.0).all()

    def test_above_max_all_false(self):
        frame = Frame(np.arange(16, dtype=float).reshape(4, 4))
        assert not threshold(frame, 16.0).any()

    def test_strict_inequality_at_boundary(self):
        frame = Frame(np.full((3, 3), 5.0))
        assert not threshold(frame, 5.0).any()

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            threshold(Frame(np.zeros((2, 2))), np.nan)

    def test_auto_threshold_tracks_background(self):
        rng = np.random.default_rng(0)
        frame = Frame(rng.poisson(10.0, size=(64, 64)).astype(float))
        t = auto_threshold(frame)
        assert 10.0 < t < 40.0


class TestLabelComponents:
    def test_empty_mask(self):
        labels, regions = label_components(np.zeros((5, 5), dtype=bool))
        assert regions == []
        assert not labels.any()

    def test_diagonal_pixels_share_region(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 1] = mask[2, 2] = True
        _, regions = label_components(mask)
        assert len(regions) == 1
        assert sorted(regions[0].pixels) == [(1, 1), (2, 2)]

    def test_labels_dense_and_raster_ordered(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[0, 5] = True   # region 1: first true pixel in raster order
        mask[3, 0] = True   # region 2
        mask[5, 3] = True   # region 3
        labels, regions = label_components(mask)
        assert [r.label for r in regions] == [1, 2, 3]
        assert labels[0, 5] == 1 and labels[3, 0] == 2 and labels[5, 3] == 3

    def test_u_shape_merges_into_one(self):
        # the two arms only connect at the bottom; union-find must merge them
        mask = np.zeros((5, 5), dtype=bool)
        mask[0:4, 0] = True
        mask[0:4, 4] = True
        mask[4, 0:5] = True
        _, regions = label_components(mask)
        assert len(regions) == 1

    def test_matches_flood_fill_oracle_random(self):
        rng = np.random.default_rng(1234)
        for density in (0.1, 0.3, 0.5, 0.7, 0.9):
            for _ in range(10):
                mask = rng.random((32, 32)) < density
                ours, regions = label_components(mask)
                oracle = flood_fill_labels(mask)
                # identical partitions and identical label numbering
                assert np.array_equal(ours, oracle)
                assert len(regions) == oracle.max()


class TestRegionMaxima:
    def _regions_for(self, counts, t):
        frame = Frame(counts)
        _, regions = label_components(threshold(frame, t))
        return frame, regions

    def test_single_peak_single_maximum(self):
        counts = np.zeros((7, 7))
        counts[3, 3] = 10.0
        counts[3, 4] = 6.0
        counts[2, 3] = 5.0
        frame, regions = self._regions_for(counts, 0.5)
        assert len(regions) == 1
        assert region_maxima(frame, regions[0]) == [(3, 3)]

    def test_flat_plateau_counts_once(self):
        # a saturated 2x2 top is one maximum, not four
        counts = np.zeros((7, 7))
        counts[2:4, 2:4] = 8.0
        counts[1, 2] = 3.0
        counts[4, 3] = 3.0
        frame, regions = self._regions_for(counts, 1.0)
        maxima = region_maxima(frame, regions[0])
        assert maxima == [(2, 2)]  # raster-first pixel represents the plateau

    def test_two_separate_maxima_detected(self):
        counts = np.zeros((5, 9))
        counts[2, 1:8] = [5, 9, 5, 4, 5, 9, 5]
        frame, regions = self._regions_for(counts, 1.0)
        assert len(regions) == 1
        assert region_maxima(frame, regions[0]) == [(2, 2), (2, 6)]

    def test_plateau_touching_higher_value_not_maximum(self):
        counts = np.zeros((3, 6))
        counts[1, 1:5] = [4, 4, 5, 3]
        frame, regions = self._regions_for(counts, 1.0)
        assert region_maxima(frame, regions[0]) == [(1, 3)]


class TestExtractCandidates:
    def test_single_rendered_peak_centered(self):
        cfg = SceneConfig(n_frames=1, n_peaks=0, width=64, height=64,
                          bg_range=(0.0, 0.0), min_separation=0.0, seed=0)
        stack, _ = render_scene(cfg)
        counts = stack.frame(0).counts.astype(float)
        from peakloc.synth import pv_value

        p = PeakParams(bg=0.0, amp=100.0, eta=0.3, mu_y=30.0, mu_z=20.0,
                       sigma_y=1.2, sigma_z=1.2)
        yy, zz = np.meshgrid(np.arange(64.0), np.arange(64.0))
        frame = Frame(pv_value(p, yy, zz))
        patches, summary = extract_candidates(frame, threshold(frame, 5.0), 11)
        assert summary.emitted == 1 and summary.n_regions == 1
        assert patches[0].origin == (20 - 5, 30 - 5)
        assert patches[0].values.shape == (11, 11)

    def test_merged_peaks_discarded_as_multi_maxima(self):
        from peakloc.synth import pv_value

        yy, zz = np.meshgrid(np.arange(64.0), np.arange(64.0))
        a = PeakParams(bg=0.0, amp=100.0, eta=0.2, mu_y=28.0, mu_z=30.0,
                       sigma_y=1.4, sigma_z=1.4)
        b = PeakParams(bg=0.0, amp=90.0, eta=0.2, mu_y=36.0, mu_z=30.0,
                       sigma_y=1.4, sigma_z=1.4)
        frame = Frame(pv_value(a, yy, zz) + pv_value(b, yy, zz))
        # low threshold merges the two peaks into one region with two maxima
        patches, summary = extract_candidates(frame, threshold(frame, 0.5), 11)
        assert summary.multi_maxima == 1
        assert patches == []

    def test_border_peak_discarded(self):
        from peakloc.synth import pv_value

        yy, zz = np.meshgrid(np.arange(64.0), np.arange(64.0))
        p = PeakParams(bg=0.0, amp=100.0, eta=0.3, mu_y=3.0, mu_z=30.0,
                       sigma_y=1.0, sigma_z=1.0)
        frame = Frame(pv_value(p, yy, zz))
        patches, summary = extract_candidates(frame, threshold(frame, 5.0), 11)
        assert summary.border == 1
        assert patches == []

    def test_counts_add_up(self):
        rng = np.random.default_rng(77)
        frame = Frame(rng.random((48, 48)) * 10)
        patches, summary = extract_candidates(frame, threshold(frame, 9.0), 5)
        assert summary.emitted + summary.multi_maxima + summary.border == summary.n_regions
        assert len(patches) == summary.emitted

    def test_even_patch_size_rejected(self):
        frame = Frame(np.zeros((8, 8)))
        with pytest.raises(ValueError):
            extract_candidates(frame, np.zeros((8, 8), dtype=bool), 10)


class TestToFrameCoords:
    def test_documented_example(self):
        patch = Patch(values=np.zeros((11, 11)), origin=(100, 200))
        assert to_frame_coords(patch, 5.0, 5.0) == (205.0, 105.0)

    def test_zero_origin_identity(self):
        patch = Patch(values=np.zeros((11, 11)), origin=(0, 0))
        assert to_frame_coords(patch, 0.0, 0.0) == (0.0, 0.0)

    def test_crop_then_map_back_is_identity(self):
        rng = np.random.default_rng(5)
        frame = Frame(rng.random((40, 40)))
        for _ in range(20):
            r = int(rng.integers(6, 34))
            c = int(rng.integers(6, 34))
            truth = (c + float(rng.uniform(-0.5, 0.5)), r + float(rng.uniform(-0.5, 0.5)))
            patch = crop_patch(frame, (r, c), 11, label_center_frame=truth)
            back = to_frame_coords(patch, *patch.label_center)
            assert back[0] == pytest.approx(truth[0], abs=1e-12)
            assert back[1] == pytest.approx(truth[1], abs=1e-12)

    def test_nonfinite_prediction_rejected(self):
        patch = Patch(values=np.zeros((5, 5)), origin=(0, 0))
        with pytest.raises(ValueError):
            to_frame_coords(patch, np.nan, 0.0)


class TestOnRenderedScenes:
    def test_every_interior_peak_yields_one_patch(self):
        # noiseless, separated scene at threshold bg + amp_min/10
        cfg = SceneConfig(n_frames=3, n_peaks=8, width=128, height=128,
                          amp_range=(100.0, 500.0), bg_range=(5.0, 5.0),
                          min_separation=22.0, border_margin=12.0,
                          sigma_range=(0.9, 1.5), seed=42)
        stack, records = render_scene(cfg)
        for frame in stack:
            n_truth = sum(1 for r in records if r.frame_index == frame.frame_index)
            patches, summary = extract_candidates(
                frame, threshold(frame, 5.0 + 100.0 / 10.0), 11
            )
            assert summary.emitted == n_truth
            assert summary.multi_maxima == 0
