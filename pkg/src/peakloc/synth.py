"""Synthetic diffraction frames rendered from known pseudo-Voigt peaks.

Real detector data has no exact ground truth: reference centers come from
fitting, which has its own error. Scenes rendered here carry the exact
sub-pixel centers used to draw them, which makes them usable as training
targets and as an oracle for every localization method in the package.

Peak model (shared with the fitting module)::

    I(y, z) = bg + amp * (eta * L(r2) + (1 - eta) * G(r2))
    G(r2)   = exp(-r2 / 2)
    L(r2)   = 1 / (1 + r2)
    r2      = ((y - mu_y) / sigma_y)**2 + ((z - mu_z) / sigma_z)**2

i.e. a shared Lorentzian fraction ``eta``, axis-aligned elliptical widths,
no rotation term, and an additive constant background.

Randomness: every frame draws from its own ``numpy.random.Generator``
seeded with ``SeedSequence((scene_seed, frame_index, salt))`` where salt 0
is placement/params and salt 1 is Poisson noise. Frames can therefore be
rendered in parallel and still reproduce the sequential bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .frame_io import Frame, FrameStack, PeakRecord

# Peak support is cut at r2 > 36 (6 sigma) while rendering; the largest
# omitted value is amp * eta / 37 at the cut for the Lorentzian part, but
# only outside a 6-sigma ellipse, so the omitted mass is < 1e-8 * amp for
# Gaussian-dominated peaks and spatially bounded for all.
SUPPORT_R2 = 36.0

_PLACEMENT_TRIES_PER_PEAK = 200


class PlacementError(RuntimeError):
    """Raised when peaks cannot be placed with the required separation."""


@dataclass
class PeakParams:
    """Parameters of one pseudo-Voigt peak."""

    bg: float
    amp: float
    eta: float
    mu_y: float
    mu_z: float
    sigma_y: float
    sigma_z: float

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.sigma_y <= 0 or self.sigma_z <= 0:
            raise ValueError(f"sigmas must be > 0, got {self.sigma_y}, {self.sigma_z}")
        if self.amp <= 0:
            raise ValueError(f"amp must be > 0, got {self.amp}")
        if self.bg < 0:
            raise ValueError(f"bg must be >= 0, got {self.bg}")


@dataclass
class SceneConfig:
    """Knobs for one synthetic scan.

    ``n_peaks`` is per frame. All ranges are closed sampling intervals.
    ``min_separation = 0`` disables the separation constraint (overlaps
    allowed); when enabled it must be at least 6 * sigma_max so thresholded
    regions stay disjoint.
    """

    n_frames: int = 1
    n_peaks: int = 10
    width: int = 128
    height: int = 128
    amp_range: tuple[float, float] = (200.0, 2000.0)
    sigma_range: tuple[float, float] = (0.9, 1.6)
    eta_range: tuple[float, float] = (0.1, 0.9)
    bg_range: tuple[float, float] = (5.0, 15.0)
    min_separation: float = 12.0
    border_margin: float = 8.0
    poisson_noise: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1 or self.n_peaks < 0:
            raise ValueError("n_frames must be >= 1 and n_peaks >= 0")
        if self.min_separation > 0 and self.min_separation < 6.0 * self.sigma_range[1]:
            raise ValueError(
                f"min_separation {self.min_separation} < 6*sigma_max "
                f"{6.0 * self.sigma_range[1]}: regions may merge under thresholding"
            )
        if 2 * self.border_margin >= min(self.width, self.height):
            raise ValueError("border_margin leaves no room to place peaks")


def pv_value(p: PeakParams, y, z):
    """Pseudo-Voigt intensity at (y, z); accepts scalars or arrays."""
    u = (np.asarray(y, dtype=float) - p.mu_y) / p.sigma_y
    v = (np.asarray(z, dtype=float) - p.mu_z) / p.sigma_z
    r2 = u * u + v * v
    return p.bg + p.amp * (p.eta / (1.0 + r2) + (1.0 - p.eta) * np.exp(-0.5 * r2))


def render_patch(p: PeakParams, size: int) -> np.ndarray:
    """Evaluate the peak model exactly on a size x size pixel grid.

    No support truncation and no noise: the returned array is the model
    itself, sampled at pixel centers (y = column, z = row). Used to build
    fitting oracles and network inputs with zero rendering error.
    """
    yy = np.arange(size, dtype=float)
    zz = np.arange(size, dtype=float)
    return pv_value(p, yy[None, :], zz[:, None])


def _add_peak(canvas: np.ndarray, p: PeakParams) -> None:
    """Accumulate one peak's contribution (minus bg) onto the canvas in place."""
    h, w = canvas.shape
    ry = 6.0 * p.sigma_y
    rz = 6.0 * p.sigma_z
    y0 = max(0, int(math.floor(p.mu_y - ry)))
    y1 = min(w - 1, int(math.ceil(p.mu_y + ry)))
    z0 = max(0, int(math.floor(p.mu_z - rz)))
    z1 = min(h - 1, int(math.ceil(p.mu_z + rz)))
    if y0 > y1 or z0 > z1:
        return
    yy = np.arange(y0, y1 + 1, dtype=float)
    zz = np.arange(z0, z1 + 1, dtype=float)
    u = (yy[None, :] - p.mu_y) / p.sigma_y
    v = (zz[:, None] - p.mu_z) / p.sigma_z
    r2 = u * u + v * v
    contrib = p.amp * (p.eta / (1.0 + r2) + (1.0 - p.eta) * np.exp(-0.5 * r2))
    contrib[r2 > SUPPORT_R2] = 0.0
    canvas[z0 : z1 + 1, y0 : y1 + 1] += contrib


def _place_centers(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample n_peaks centers honoring margin and separation."""
    lo_y, hi_y = cfg.border_margin, cfg.width - 1 - cfg.border_margin
    lo_z, hi_z = cfg.border_margin, cfg.height - 1 - cfg.border_margin
    centers: list[tuple[float, float]] = []
    budget = _PLACEMENT_TRIES_PER_PEAK * max(cfg.n_peaks, 1)
    min_sep2 = cfg.min_separation**2
    for _ in range(budget):
        if len(centers) == cfg.n_peaks:
            break
        cy = rng.uniform(lo_y, hi_y)
        cz = rng.uniform(lo_z, hi_z)
        if cfg.min_separation > 0:
            ok = all((cy - py) ** 2 + (cz - pz) ** 2 >= min_sep2 for py, pz in centers)
            if not ok:
                continue
        centers.append((cy, cz))
    if len(centers) != cfg.n_peaks:
        raise PlacementError(
            f"placed only {len(centers)} of {cfg.n_peaks} peaks with separation "
            f">= {cfg.min_separation} after {budget} draws"
        )
    return np.array(centers, dtype=float).reshape(cfg.n_peaks, 2)


def _frame_rng(seed: int, frame_index: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, frame_index, salt)))


def render_frame(cfg: SceneConfig, frame_index: int) -> tuple[Frame, list[PeakRecord], list[PeakParams]]:
    """Render one frame of the scene. Deterministic in (cfg.seed, frame_index)."""
    rng = _frame_rng(cfg.seed, frame_index, 0)
    bg = rng.uniform(*cfg.bg_range)
    centers = _place_centers(cfg, rng)
    canvas = np.full((cfg.height, cfg.width), bg, dtype=float)
    records: list[PeakRecord] = []
    params: list[PeakParams] = []
    for cy, cz in centers:
        p = PeakParams(
            bg=bg,
            amp=rng.uniform(*cfg.amp_range),
            eta=rng.uniform(*cfg.eta_range),
            mu_y=cy,
            mu_z=cz,
            sigma_y=rng.uniform(*cfg.sigma_range),
            sigma_z=rng.uniform(*cfg.sigma_range),
        )
        _add_peak(canvas, p)
        params.append(p)
        records.append(
            PeakRecord(
                frame_index=frame_index,
                center_y=p.mu_y,
                center_z=p.mu_z,
                amplitude=p.amp,
                source="ground_truth",
            )
        )
    frame = Frame(canvas, frame_index=frame_index)
    if cfg.poisson_noise:
        frame = poissonize(frame, np.random.SeedSequence((cfg.seed, frame_index, 1)))
    return frame, records, params


def render_scene(cfg: SceneConfig) -> tuple[FrameStack, list[PeakRecord]]:
    """Render all frames of a scene with exact ground-truth peak records."""
    frames: list[Frame] = []
    records: list[PeakRecord] = []
    for i in range(cfg.n_frames):
        frame, recs, _ = render_frame(cfg, i)
        frames.append(frame)
        records.extend(recs)
    return FrameStack.from_frames(frames), records


def poissonize(frame: Frame, seed) -> Frame:
    """Replace each pixel by a Poisson draw with that pixel's mean.

    ``seed`` may be an int or a ``numpy.random.SeedSequence``; the same seed
    always yields the same output.
    """
    counts = np.asarray(frame.counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("poissonize requires nonnegative pixel means")
    rng = np.random.default_rng(seed)
    noisy = rng.poisson(counts).astype(np.float32)
    return Frame(noisy, frame_index=frame.frame_index)
