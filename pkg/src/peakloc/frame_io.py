"""Data model and persistence for detector frames and peak lists.

Two on-disk formats live here:

* ``BFRM`` -- a little-endian binary stack of float32 rasters, the only
  frame container the pipeline reads or writes.
* a peak CSV (``frame,center_y,center_z,amplitude,source``) used for ground
  truth, fit output, and network output alike.

Coordinates follow the (y, z) convention used throughout the package:
``y`` runs along columns (0 <= y < width), ``z`` along rows
(0 <= z < height). Pixel centers sit at integer coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

BFRM_MAGIC = b"BFRM"
BFRM_VERSION = 1

PEAK_SOURCES = ("ground_truth", "voigt_fit", "net", "maxima")

PEAK_CSV_HEADER = "frame,center_y,center_z,amplitude,source"


class FrameFormatError(ValueError):
    """Raised when a BFRM file or peak CSV cannot be parsed."""


@dataclass
class Frame:
    """One detector frame: a (height, width) float32 raster of photon counts."""

    counts: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float32)
        if self.counts.ndim != 2:
            raise ValueError(f"frame counts must be 2D, got shape {self.counts.shape}")
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        if not np.all(np.isfinite(self.counts)):
            raise ValueError("frame counts must be finite")

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]


@dataclass
class FrameStack:
    """A stack of same-sized frames stored as one (n, height, width) array."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"stack data must be 3D, got shape {self.data.shape}")

    @classmethod
    def from_frames(cls, frames: list[Frame]) -> "FrameStack":
        if not frames:
            raise ValueError("cannot build a stack from zero frames")
        shape = frames[0].counts.shape
        for f in frames:
            if f.counts.shape != shape:
                raise ValueError(
                    f"inconsistent frame dimensions: {f.counts.shape} vs {shape}"
                )
        return cls(np.stack([f.counts for f in frames]))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def frame(self, i: int) -> Frame:
        return Frame(self.data[i], frame_index=i)

    def __iter__(self):
        return (self.frame(i) for i in range(self.n_frames))


@dataclass
class PeakRecord:
    """A localized peak: sub-pixel center in frame coordinates plus provenance."""

    frame_index: int
    center_y: float
    center_z: float
    amplitude: float
    source: str = "ground_truth"

    def __post_init__(self):
        if self.source not in PEAK_SOURCES:
            raise ValueError(
                f"unknown peak source {self.source!r}, expected one of {PEAK_SOURCES}"
            )


def write_frames(stack: FrameStack, path) -> None:
    """Write a frame stack as a BFRM file.

    Layout: magic ``BFRM``, then u32 little-endian {version, width, height,
    n_frames}, then n_frames row-major float32 little-endian rasters.
    """
    header = BFRM_MAGIC + struct.pack(
        "<4I", BFRM_VERSION, stack.width, stack.height, stack.n_frames
    )
    payload = np.ascontiguousarray(stack.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_frames(path) -> FrameStack:
    """Read a BFRM file written by :func:`write_frames` (bit-exact inverse)."""
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20:
            raise FrameFormatError(f"{path}: file too short for a BFRM header")
        if head[:4] != BFRM_MAGIC:
            raise FrameFormatError(
                f"{path}: bad magic {head[:4]!r}, expected {BFRM_MAGIC!r}"
            )
        version, width, height, n_frames = struct.unpack("<4I", head[4:])
        if version != BFRM_VERSION:
            raise FrameFormatError(
                f"{path}: unsupported BFRM version {version}, expected {BFRM_VERSION}"
            )
        frame_bytes = width * height * 4
        raw = fh.read(n_frames * frame_bytes)
    if len(raw) != n_frames * frame_bytes:
        bad_index = len(raw) // frame_bytes
        raise FrameFormatError(
            f"{path}: truncated payload, frame {bad_index} of {n_frames} is incomplete"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(n_frames, height, width)
    return FrameStack(data.copy())


def write_peaks(peaks: list[PeakRecord], path) -> None:
    """Write peak records as CSV, coordinates with 9 decimal digits."""
    with open(path, "w", newline="") as fh:
        fh.write(PEAK_CSV_HEADER + "\n")
        for p in peaks:
            fh.write(
                f"{p.frame_index},{p.center_y:.9f},{p.center_z:.9f},"
                f"{p.amplitude:.9f},{p.source}\n"
            )


def read_peaks(path) -> list[PeakRecord]:
    """Read a peak CSV written by :func:`write_peaks`.

    Inverse of the writer up to print precision (<= 1e-6 per coordinate).
    Malformed rows are reported with their 1-based line number.
    """
    peaks: list[PeakRecord] = []
    with open(path, "r") as fh:
        header = fh.readline().rstrip("\n")
        if header != PEAK_CSV_HEADER:
            raise FrameFormatError(
                f"{path}: bad peak CSV header {header!r}, expected {PEAK_CSV_HEADER!r}"
            )
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise FrameFormatError(
                    f"{path}:{lineno}: expected 5 fields, got {len(parts)}"
                )
            try:
                peaks.append(
                    PeakRecord(
                        frame_index=int(parts[0]),
                        center_y=float(parts[1]),
                        center_z=float(parts[2]),
                        amplitude=float(parts[3]),
                        source=parts[4],
                    )
                )
            except ValueError as exc:
                raise FrameFormatError(f"{path}:{lineno}: {exc}") from exc
    return peaks
