"""Error reports, baselines, ablations, and the throughput benchmark.

Errors are Euclidean distances between predicted and reference centers,
summarized at the 50th/75th/95th percentiles with a linear-interpolation
estimator (index p*(n-1) between order statistics, zero-based). Signed
per-axis deviations are kept so over/underestimation bias stays visible.

The benchmark times the localization step only (patch in, center out),
excluding segmentation and matching, with a warm-up pass and the median
wall time of repeated runs.
"""

from __future__ import annotations

import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .frame_io import PeakRecord
from .peaknet import ArchSpec, ModelWeights, forward, init_weights, tensor_names
from .segment import Patch, to_frame_coords
from .trainer import (
    AugmentConfig,
    Dataset,
    TrainConfig,
    augment_crop,
    normalize_batch,
    normalize_patch,
    train,
)
from .voigtfit import LMOptions, fit_patch

METHODS = ("voigt", "net", "maxima")


class AmbiguousMatchError(ValueError):
    """Two predictions claimed the same reference peak."""


@dataclass
class MatchResult:
    """Per-peak signed deviations for the matched pairs, plus the leftovers."""

    dy: np.ndarray
    dz: np.ndarray
    dist: np.ndarray
    pairs: list[tuple[int, int]]         # (pred index, ref index)
    unmatched_pred: list[int]

    @property
    def n_matched(self) -> int:
        return len(self.pairs)


@dataclass
class EvalReport:
    method: str
    reference: str
    n_peaks: int
    p50: float
    p75: float
    p95: float
    dy: np.ndarray = field(default_factory=lambda: np.empty(0))
    dz: np.ndarray = field(default_factory=lambda: np.empty(0))
    dist: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        if not self.p50 <= self.p75 <= self.p95:
            raise ValueError(
                f"percentiles must be non-decreasing, got {self.p50}, {self.p75}, {self.p95}"
            )

    def to_text(self) -> str:
        return (
            f"{self.method:<24} vs {self.reference:<14} n={self.n_peaks:<7d} "
            f"P50={self.p50:.4f}  P75={self.p75:.4f}  P95={self.p95:.4f} px"
        )

    def to_csv_row(self) -> str:
        return (
            f"{self.method},{self.reference},{self.n_peaks},"
            f"{self.p50:.6f},{self.p75:.6f},{self.p95:.6f}"
        )


REPORT_CSV_HEADER = "method,reference,n_peaks,p50,p75,p95"


@dataclass
class BenchResult:
    method: str
    n_patches: int
    wall_time_s: float
    patches_per_s: float
    threads: int

    def to_json_line(self) -> str:
        return (
            '{"method": "%s", "n_patches": %d, "wall_time_s": %.6f, '
            '"patches_per_s": %.3f, "threads": %d}'
            % (self.method, self.n_patches, self.wall_time_s, self.patches_per_s, self.threads)
        )


def percentile_linear(values: np.ndarray, p: float) -> float:
    """Order-statistic percentile with linear interpolation at p*(n-1).

    Computed as lo + frac*(hi - lo), which is monotone in p under floating
    point (the symmetric two-product form is not, by an ulp).
    """
    values = np.sort(np.asarray(values, dtype=float))
    if values.size == 0:
        raise ValueError("cannot take a percentile of an empty sample")
    idx = (p / 100.0) * (values.size - 1)
    lo = int(np.floor(idx))
    hi = min(lo + 1, values.size - 1)
    frac = idx - lo
    return float(values[lo] + frac * (values[hi] - values[lo]))


def euclidean_errors(
    pred: list[PeakRecord], ref: list[PeakRecord], match_radius: float = 2.0
) -> MatchResult:
    """Pair predictions with references (same frame, nearest within radius).

    Predictions with no reference inside the radius are reported in
    ``unmatched_pred``; two predictions nearest the same reference raise
    :class:`AmbiguousMatchError`, since that means the segmentation stage
    produced inconsistent candidates.
    """
    ref_by_frame: dict[int, list[tuple[int, PeakRecord]]] = {}
    for j, r in enumerate(ref):
        ref_by_frame.setdefault(r.frame_index, []).append((j, r))

    dy, dz, dist = [], [], []
    pairs: list[tuple[int, int]] = []
    unmatched: list[int] = []
    claimed: dict[int, int] = {}
    for i, p in enumerate(pred):
        candidates = ref_by_frame.get(p.frame_index, [])
        best_j = -1
        best_d2 = match_radius**2
        for j, r in candidates:
            d2 = (p.center_y - r.center_y) ** 2 + (p.center_z - r.center_z) ** 2
            if d2 <= best_d2:
                best_d2 = d2
                best_j = j
        if best_j < 0:
            unmatched.append(i)
            continue
        if best_j in claimed:
            raise AmbiguousMatchError(
                f"predictions {claimed[best_j]} and {i} both match reference {best_j} "
                f"in frame {p.frame_index}"
            )
        claimed[best_j] = i
        r = ref[best_j]
        dy.append(p.center_y - r.center_y)
        dz.append(p.center_z - r.center_z)
        dist.append(float(np.hypot(dy[-1], dz[-1])))
        pairs.append((i, best_j))
    return MatchResult(
        dy=np.array(dy), dz=np.array(dz), dist=np.array(dist),
        pairs=pairs, unmatched_pred=unmatched,
    )


def percentile_report(
    errors, method: str = "", reference: str = "ground_truth"
) -> EvalReport:
    """Summarize distance errors (a MatchResult or a plain array) at P50/75/95."""
    if isinstance(errors, MatchResult):
        dy, dz, dist = errors.dy, errors.dz, errors.dist
    else:
        dist = np.asarray(errors, dtype=float)
        dy = np.empty(0)
        dz = np.empty(0)
    if dist.size == 0:
        raise ValueError("cannot build a report from zero errors")
    return EvalReport(
        method=method,
        reference=reference,
        n_peaks=int(dist.size),
        p50=percentile_linear(dist, 50),
        p75=percentile_linear(dist, 75),
        p95=percentile_linear(dist, 95),
        dy=dy, dz=dz, dist=dist,
    )


# ---------------------------------------------------------------------------
# localization backends (patch -> center), shared by the CLI and the bench
# ---------------------------------------------------------------------------

def maxima_baseline(patches: list[Patch]) -> list[PeakRecord]:
    """Predict each center as the integer coordinates of the brightest pixel."""
    records = []
    for patch in patches:
        flat = int(np.argmax(patch.values))
        r, c = divmod(flat, patch.size)
        y, z = to_frame_coords(patch, float(c), float(r))
        records.append(
            PeakRecord(
                frame_index=patch.frame_index,
                center_y=y,
                center_z=z,
                amplitude=float(patch.values[r, c]),
                source="maxima",
            )
        )
    return records


def _fit_one(values: np.ndarray, opts: LMOptions | None = None) -> tuple[float, float, float, bool]:
    result = fit_patch(Patch(values=values, origin=(0, 0)), opts)
    cy, cz = result.center_in_patch
    return cy, cz, result.params.amp, result.converged


def _voigt_centers(
    value_list: list[np.ndarray], threads: int, opts: LMOptions | None = None
) -> list[tuple[float, float, float, bool]]:
    if threads <= 1:
        return [_fit_one(v, opts) for v in value_list]
    chunk = max(1, len(value_list) // (threads * 8))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_fit_one, value_list, (opts,) * len(value_list), chunksize=chunk))


def _net_centers(value_list: list[np.ndarray], weights: ModelWeights,
                 batch_size: int = 256) -> np.ndarray:
    # 256 keeps the attention matrices (N x P x P) around 100 MB for an
    # 11x11 patch while still amortizing the per-batch overhead
    out = np.empty((len(value_list), 2))
    for start in range(0, len(value_list), batch_size):
        stop = min(start + batch_size, len(value_list))
        batch = normalize_batch(np.stack(value_list[start:stop]))
        pred, _ = forward(weights, batch)
        out[start:stop] = pred
    return out


def localize_patches(
    method: str,
    patches: list[Patch],
    weights: ModelWeights | None = None,
    threads: int = 1,
    fit_options: LMOptions | None = None,
) -> list[PeakRecord]:
    """Run one localization method over patches; output order equals input order."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    if method == "maxima":
        return maxima_baseline(patches)
    if method == "voigt":
        results = _voigt_centers([p.values for p in patches], threads, fit_options)
        records = []
        for patch, (cy, cz, amp, _) in zip(patches, results):
            y, z = to_frame_coords(patch, cy, cz)
            records.append(
                PeakRecord(patch.frame_index, y, z, amp, source="voigt_fit")
            )
        return records
    if weights is None:
        raise ValueError("method 'net' requires trained weights")
    centers = _net_centers([p.values for p in patches], weights)
    records = []
    for patch, (cy, cz) in zip(patches, centers):
        y, z = to_frame_coords(patch, float(cy), float(cz))
        records.append(
            PeakRecord(patch.frame_index, y, z, float(patch.values.max()), source="net")
        )
    return records


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationRun:
    seed: int
    report_on: EvalReport
    report_off: EvalReport
    checksum_on: str
    checksum_off: str


@dataclass
class AblationResult:
    kind: str
    runs: list[AblationRun]

    def mean_p75_ratio(self) -> float:
        """Mean of (switch-on P75) / (switch-off P75) across runs."""
        return float(np.mean([r.report_on.p75 / r.report_off.p75 for r in self.runs]))

    def to_text(self) -> str:
        lines = [f"ablation: {self.kind}"]
        for run in self.runs:
            lines.append(f"  seed {run.seed}  init checksums on={run.checksum_on} off={run.checksum_off}")
            lines.append("    " + run.report_on.to_text())
            lines.append("    " + run.report_off.to_text())
        lines.append(f"  mean P75 ratio (on/off): {self.mean_p75_ratio():.4f}")
        return "\n".join(lines)


def evaluate_on_entries(
    w: ModelWeights,
    stack,
    dataset: Dataset,
    indices: np.ndarray,
    offsets: np.ndarray,
    method_label: str,
) -> EvalReport:
    """Evaluate a model on fixed (entry, offset) pairs against exact labels."""
    xs = []
    labels = []
    for (idx, (m, n)) in zip(indices, offsets):
        entry = dataset.entries[int(idx)]
        patch = augment_crop(
            stack.frame(entry.frame_index), entry.maxima, entry.truth,
            int(m), int(n), dataset.patch_size,
        )
        xs.append(normalize_patch(patch.values))
        labels.append(patch.label_center)
    pred, _ = forward(w, np.stack(xs))
    diff = pred - np.asarray(labels)
    dist = np.hypot(diff[:, 0], diff[:, 1])
    report = percentile_report(dist, method=method_label)
    report.dy = diff[:, 0]
    report.dz = diff[:, 1]
    return report


def _sample_offsets(n: int, max_offset: int, seed: int) -> np.ndarray:
    if max_offset == 0:
        return np.zeros((n, 2), dtype=int)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    return rng.integers(-max_offset, max_offset + 1, size=(n, 2))


def run_ablation(
    kind: str,
    stack,
    dataset: Dataset,
    arch: ArchSpec,
    train_cfg: TrainConfig,
    aug_cfg: AugmentConfig,
    seeds: tuple[int, ...] = (0,),
    test_offset: int = 1,
    max_test_peaks: int = 2000,
) -> AblationResult:
    """Train paired models differing in exactly one switch and compare them.

    kind='attention': same data, same seed, attention on vs off, centered
    test crops. kind='augmentation': offset augmentation on vs off, test
    patches cropped with offsets drawn from the +-test_offset square so
    only a fraction of test maxima sit at the geometric center.
    """
    if kind not in ("attention", "augmentation"):
        raise ValueError(f"unknown ablation kind {kind!r}")
    runs: list[AblationRun] = []
    test_idx = dataset.test_idx[:max_test_peaks]
    for seed in seeds:
        cfg = TrainConfig(
            batch_size=train_cfg.batch_size,
            max_iterations=train_cfg.max_iterations,
            lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
            eps=train_cfg.eps, eval_interval=train_cfg.eval_interval,
            patience=train_cfg.patience, seed=seed,
        )
        if kind == "attention":
            arch_on = ArchSpec(
                arch.patch_size, arch.conv_channels, arch.fc_sizes,
                attention_enabled=True, attention_bottleneck=arch.attention_bottleneck,
            )
            arch_off = ArchSpec(
                arch.patch_size, arch.conv_channels, arch.fc_sizes,
                attention_enabled=False, attention_bottleneck=arch.attention_bottleneck,
            )
            w_on, _ = train(stack, dataset, arch_on, cfg, aug_cfg)
            w_off, _ = train(stack, dataset, arch_off, cfg, aug_cfg)
            offsets = _sample_offsets(len(test_idx), 0, seed)
            label_on, label_off = "net[attention]", "net[no-attention]"
            # the shared (non-attention) tensors must start identical
            init_on = _shared_checksum(arch_on, seed)
            init_off = _shared_checksum(arch_off, seed)
        else:
            aug_on = AugmentConfig(max_offset=test_offset, enabled=True)
            aug_off = AugmentConfig(max_offset=0, enabled=False)
            w_on, _ = train(stack, dataset, arch, cfg, aug_on)
            w_off, _ = train(stack, dataset, arch, cfg, aug_off)
            offsets = _sample_offsets(len(test_idx), test_offset, seed)
            label_on, label_off = "net[augmented]", "net[no-augmentation]"
            init_on = init_weights(arch, seed).checksum()
            init_off = init_weights(arch, seed).checksum()
        report_on = evaluate_on_entries(w_on, stack, dataset, test_idx, offsets, label_on)
        report_off = evaluate_on_entries(w_off, stack, dataset, test_idx, offsets, label_off)
        runs.append(AblationRun(seed, report_on, report_off, init_on, init_off))
    return AblationResult(kind=kind, runs=runs)


def _shared_checksum(arch: ArchSpec, seed: int) -> str:
    """Checksum of the non-attention tensors of a fresh initialization."""
    w = init_weights(arch, seed)
    crc = 0
    for name in tensor_names(arch):
        if name.startswith("attn."):
            continue
        crc = zlib.crc32(np.ascontiguousarray(w[name], dtype="<f8").tobytes(), crc)
    return f"{crc:08x}"


# ---------------------------------------------------------------------------
# throughput benchmark
# ---------------------------------------------------------------------------

def bench_throughput(
    method: str,
    patches: list[Patch],
    weights: ModelWeights | None = None,
    threads: int = 1,
    repetitions: int = 3,
    min_patches: int = 1000,
) -> BenchResult:
    """Median wall time of repeated full passes, after an untimed warm-up.

    Only the localization step is timed. Worker pools honor ``threads``
    exactly; BLAS-internal threading is whatever the numpy build does.
    """
    if len(patches) < min_patches:
        raise ValueError(
            f"need at least {min_patches} patches for stable timing, got {len(patches)}"
        )
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    localize_patches(method, patches[: min(len(patches), 1000)], weights, threads)  # warm-up
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        localize_patches(method, patches, weights, threads)
        times.append(time.perf_counter() - t0)
    wall = float(np.median(times))
    return BenchResult(
        method=method,
        n_patches=len(patches),
        wall_time_s=wall,
        patches_per_s=len(patches) / wall,
        threads=threads,
    )
