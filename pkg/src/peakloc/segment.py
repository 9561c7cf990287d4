"""Frame segmentation: from raw counts to candidate peak patches.

The stages mirror the standard reduction pipeline for area-detector data:
threshold the frame into a binary mask, label 8-connected components with a
two-pass union-find pass, reject regions with more than one local maximum
(overlapping peaks), and crop an odd-sized patch centered on each surviving
region's maximum. ``to_frame_coords`` is the exact inverse of the crop for
sub-pixel predictions made inside a patch.

Conventions fixed here (and relied on everywhere else):

* 8-connectivity for components, so diagonally touching tails merge;
* a local maximum is a plateau: a maximal 8-connected set of equal-valued
  pixels none of whose neighbors (inside the region) is strictly greater.
  A flat-topped saturated peak therefore counts as one maximum;
* regions whose crop would cross the frame border are discarded, never
  padded;
* patch coordinates are (y, z) = (column, row) relative to the patch's
  (0, 0) pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frame_io import Frame


@dataclass
class Region:
    """One 8-connected thresholded component."""

    label: int
    pixels: list[tuple[int, int]]          # (row, col), raster order
    maxima: list[tuple[int, int]]          # one (row, col) per plateau maximum
    bbox: tuple[int, int, int, int]        # (row0, col0, row1, col1) inclusive


@dataclass
class Patch:
    """Odd-sized crop of a frame around a candidate peak maximum."""

    values: np.ndarray
    origin: tuple[int, int]                # (row, col) of patch pixel (0, 0)
    frame_index: int = 0
    label_center: tuple[float, float] | None = None   # (y, z) in patch coords

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        h, w = self.values.shape
        if h != w or h % 2 == 0:
            raise ValueError(f"patch must be square with odd size, got {h}x{w}")

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass
class CandidateSummary:
    """Book-keeping for extract_candidates (discards are reported, not raised)."""

    n_regions: int = 0
    emitted: int = 0
    multi_maxima: int = 0
    border: int = 0

    def __add__(self, other: "CandidateSummary") -> "CandidateSummary":
        return CandidateSummary(
            self.n_regions + other.n_regions,
            self.emitted + other.emitted,
            self.multi_maxima + other.multi_maxima,
            self.border + other.border,
        )


def threshold(frame: Frame, t: float) -> np.ndarray:
    """Binary mask: counts strictly greater than t."""
    if not np.isfinite(t):
        raise ValueError(f"threshold must be finite, got {t}")
    return np.asarray(frame.counts) > t


def auto_threshold(frame: Frame, n_mad: float = 5.0) -> float:
    """Heuristic threshold: median background plus n_mad median absolute deviations."""
    counts = np.asarray(frame.counts, dtype=float)
    med = float(np.median(counts))
    mad = float(np.median(np.abs(counts - med)))
    return med + n_mad * mad


class _UnionFind:
    """Array-backed union-find with path compression, labels are ints."""

    def __init__(self):
        self.parent: list[int] = [0]  # index 0 unused (labels start at 1)

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller root so final labels follow raster order
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def label_components(mask: np.ndarray) -> tuple[np.ndarray, list[Region]]:
    """Two-pass 8-connected component labeling with union-find.

    Returns a label map (0 = background) and regions with labels densely
    numbered 1..K in raster order of each region's first pixel. Region
    maxima are left empty here; they depend on intensities, not the mask
    (see :func:`region_maxima`).
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    uf = _UnionFind()

    true_pixels = np.argwhere(mask)
    # first pass: provisional labels, merging via already-visited neighbors
    # (NW, N, NE, W under raster order)
    for r, c in true_pixels:
        neighbor_labels = []
        if r > 0:
            for cc in (c - 1, c, c + 1):
                if 0 <= cc < w and labels[r - 1, cc] > 0:
                    neighbor_labels.append(labels[r - 1, cc])
        if c > 0 and labels[r, c - 1] > 0:
            neighbor_labels.append(labels[r, c - 1])
        if not neighbor_labels:
            labels[r, c] = uf.make()
        else:
            lab = min(neighbor_labels)
            labels[r, c] = lab
            for other in neighbor_labels:
                uf.union(lab, other)

    # second pass: resolve to roots and compact to 1..K in raster order
    remap: dict[int, int] = {}
    regions: list[Region] = []
    for r, c in true_pixels:
        root = uf.find(labels[r, c])
        if root not in remap:
            remap[root] = len(remap) + 1
            regions.append(
                Region(label=remap[root], pixels=[], maxima=[], bbox=(int(r), int(c), int(r), int(c)))
            )
        lab = remap[root]
        labels[r, c] = lab
        reg = regions[lab - 1]
        reg.pixels.append((int(r), int(c)))
        r0, c0, r1, c1 = reg.bbox
        reg.bbox = (min(r0, int(r)), min(c0, int(c)), max(r1, int(r)), max(c1, int(c)))
    return labels, regions


_NEIGHBORS_8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def region_maxima(frame: Frame, region: Region) -> list[tuple[int, int]]:
    """Plateau-merged local maxima of the frame intensity within one region.

    Pixels outside the region are below threshold by construction, hence
    strictly below any region pixel, so only in-region neighbors matter.
    """
    counts = np.asarray(frame.counts)
    in_region = set(region.pixels)
    # candidates: no strictly greater 8-neighbor inside the region
    candidates = []
    for r, c in region.pixels:
        v = counts[r, c]
        if all(
            counts[r + dr, c + dc] <= v
            for dr, dc in _NEIGHBORS_8
            if (r + dr, c + dc) in in_region
        ):
            candidates.append((r, c))

    # group equal-valued plateaus; a plateau survives only if none of its
    # pixels borders a strictly greater region pixel (i.e. all its pixels
    # are candidates)
    cand_set = set(candidates)
    seen: set[tuple[int, int]] = set()
    maxima: list[tuple[int, int]] = []
    for start in region.pixels:  # raster order fixes representative choice
        if start not in cand_set or start in seen:
            continue
        v = counts[start]
        plateau = [start]
        seen.add(start)
        queue = [start]
        is_max = True
        while queue:
            r, c = queue.pop()
            for dr, dc in _NEIGHBORS_8:
                nb = (r + dr, c + dc)
                if nb in seen or nb not in in_region:
                    continue
                if counts[nb] == v:
                    seen.add(nb)
                    plateau.append(nb)
                    queue.append(nb)
                    if nb not in cand_set:
                        is_max = False
        if is_max:
            maxima.append(min(plateau))  # raster-first pixel represents the plateau
    maxima.sort()
    return maxima


def extract_candidates(
    frame: Frame, mask: np.ndarray, patch_size: int = 11
) -> tuple[list[Patch], CandidateSummary]:
    """One centered patch per single-maximum region; discards are counted.

    Regions with two or more plateau maxima indicate overlapping peaks and
    are dropped (``multi_maxima``); regions whose crop would cross the frame
    bounds are dropped (``border``).
    """
    if patch_size < 3 or patch_size % 2 == 0:
        raise ValueError(f"patch_size must be odd and >= 3, got {patch_size}")
    half = patch_size // 2
    counts = np.asarray(frame.counts)
    h, w = counts.shape
    labels, regions = label_components(mask)
    summary = CandidateSummary(n_regions=len(regions))
    patches: list[Patch] = []
    for reg in regions:
        reg.maxima = region_maxima(frame, reg)
        if len(reg.maxima) != 1:
            summary.multi_maxima += 1
            continue
        r, c = reg.maxima[0]
        if r - half < 0 or r + half >= h or c - half < 0 or c + half >= w:
            summary.border += 1
            continue
        origin = (r - half, c - half)
        patches.append(
            Patch(
                values=counts[r - half : r + half + 1, c - half : c + half + 1].astype(float),
                origin=origin,
                frame_index=frame.frame_index,
            )
        )
        summary.emitted += 1
    return patches, summary


def to_frame_coords(patch: Patch, pred_y: float, pred_z: float) -> tuple[float, float]:
    """Map a (y, z) prediction in patch coordinates back to frame coordinates."""
    if not (np.isfinite(pred_y) and np.isfinite(pred_z)):
        raise ValueError(f"prediction must be finite, got ({pred_y}, {pred_z})")
    row0, col0 = patch.origin
    return (col0 + pred_y, row0 + pred_z)


def crop_patch(
    frame: Frame,
    center: tuple[int, int],
    patch_size: int,
    label_center_frame: tuple[float, float] | None = None,
) -> Patch:
    """Crop a patch whose geometric center pixel is ``center`` (row, col).

    Optionally attach a sub-pixel label given in frame coordinates; it is
    stored in patch coordinates so that ``to_frame_coords`` recovers it
    exactly.
    """
    half = patch_size // 2
    r, c = center
    h, w = frame.counts.shape
    if r - half < 0 or r + half >= h or c - half < 0 or c + half >= w:
        raise ValueError(
            f"crop centered at {center} with size {patch_size} exceeds frame bounds"
        )
    origin = (r - half, c - half)
    label = None
    if label_center_frame is not None:
        label = (label_center_frame[0] - origin[1], label_center_frame[1] - origin[0])
    return Patch(
        values=np.asarray(frame.counts, dtype=float)[
            r - half : r + half + 1, c - half : c + half + 1
        ],
        origin=origin,
        frame_index=frame.frame_index,
        label_center=label,
    )
