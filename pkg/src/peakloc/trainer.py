"""Dataset assembly, offset augmentation, Adam, and the training loop.

The training protocol: mini-batches of patches are cropped online, each
with fresh integer offsets (m, n) drawn uniformly from
[-max_offset, +max_offset] per axis, so the peak maximum wanders around
the patch center while the sub-pixel label moves the opposite way.
Validation runs with augmentation disabled (offsets (0, 0)) every
``eval_interval`` iterations; the weights returned are the checkpoint with
the lowest validation loss, never the last iterate.

Everything is deterministic for a fixed seed: one sequential generator
drives shuffling and offset draws, and weight initialization derives
per-tensor streams from the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frame_io import FrameStack, PeakRecord
from .peaknet import ArchSpec, ModelWeights, backward, forward, init_weights, loss_mse
from .segment import Patch, auto_threshold, crop_patch, extract_candidates, threshold

_OFFSET_RETRIES = 10


@dataclass
class DatasetEntry:
    frame_index: int
    maxima: tuple[int, int]          # (row, col) of the peak's maximum pixel
    truth: tuple[float, float]       # (y, z) reference center in frame coords


@dataclass
class Dataset:
    entries: list[DatasetEntry]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    patch_size: int = 11

    def __post_init__(self):
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.val_idx = np.asarray(self.val_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        combined = np.concatenate([self.train_idx, self.val_idx, self.test_idx])
        if len(np.unique(combined)) != combined.size or combined.size != len(self.entries):
            raise ValueError("splits must be disjoint and cover all entries")


@dataclass
class AugmentConfig:
    """Integer crop offsets; the offset-robustness ablation uses max_offset=1."""

    max_offset: int = 2
    enabled: bool = True

    def __post_init__(self):
        if self.max_offset < 0:
            raise ValueError(f"max_offset must be >= 0, got {self.max_offset}")


@dataclass
class TrainConfig:
    batch_size: int = 512
    max_iterations: int = 3000       # desk-scale default; full-scale runs use 80000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_interval: int = 200
    patience: int = 10               # validation checks without improvement
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "max_iterations", "lr", "eval_interval", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, w: ModelWeights) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in w.tensors.items()},
            v={k: np.zeros_like(a) for k, a in w.tensors.items()},
            step=0,
        )


@dataclass
class HistoryRow:
    iteration: int
    train_loss: float
    val_loss: float


@dataclass
class TrainingHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    best_iteration: int = 0
    best_val_loss: float = math.inf
    stopped_iteration: int = 0


def normalize_patch(values: np.ndarray) -> np.ndarray:
    """Scale a patch to [0, 1] by its own min/max (flat patches become zeros).

    This is the network's input convention; training and inference must both
    route patches through here (or through :func:`normalize_batch`).
    """
    values = np.asarray(values, dtype=float)
    lo = values.min()
    span = values.max() - lo
    if span <= 0:
        return np.zeros_like(values)
    return (values - lo) / span


def normalize_batch(values: np.ndarray) -> np.ndarray:
    """Vectorized :func:`normalize_patch` over a (n, size, size) stack."""
    values = np.asarray(values, dtype=float)
    lo = values.min(axis=(1, 2), keepdims=True)
    span = values.max(axis=(1, 2), keepdims=True) - lo
    flat = span <= 0
    span[flat] = 1.0
    out = (values - lo) / span
    out[flat[:, 0, 0]] = 0.0
    return out


def augment_crop(
    frame, maxima: tuple[int, int], truth: tuple[float, float],
    m: int, n: int, patch_size: int,
) -> Patch:
    """Crop shifted by (m, n) from the maximum pixel, label adjusted to match.

    The patch origin is ``maxima + (m, n) - (half, half)`` so the maximum
    sits (m, n) away from the geometric center; the stored label is
    ``truth - origin`` in (y, z) patch coordinates, hence
    ``to_frame_coords(patch, *label)`` returns ``truth`` exactly.
    """
    r, c = maxima
    return crop_patch(frame, (r + m, c + n), patch_size, label_center_frame=truth)


def _sample_patch(frame, entry: DatasetEntry, aug: AugmentConfig,
                  patch_size: int, rng: np.random.Generator) -> Patch:
    if not aug.enabled or aug.max_offset == 0:
        return augment_crop(frame, entry.maxima, entry.truth, 0, 0, patch_size)
    k = aug.max_offset
    for _ in range(_OFFSET_RETRIES):
        m = int(rng.integers(-k, k + 1))
        n = int(rng.integers(-k, k + 1))
        try:
            return augment_crop(frame, entry.maxima, entry.truth, m, n, patch_size)
        except ValueError:
            continue
    raise ValueError(
        f"peak at {entry.maxima} in frame {entry.frame_index} is too close to the "
        f"border for any offset in +-{k} after {_OFFSET_RETRIES} retries"
    )


def make_batch(
    stack: FrameStack,
    entries: list[DatasetEntry],
    indices: np.ndarray,
    aug: AugmentConfig,
    patch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble (inputs, labels) for the given entry indices.

    Inputs are min-max normalized patches (n, size, size); labels are (y, z)
    patch coordinates.
    """
    xs = np.empty((len(indices), patch_size, patch_size))
    labels = np.empty((len(indices), 2))
    for j, idx in enumerate(indices):
        entry = entries[int(idx)]
        patch = _sample_patch(stack.frame(entry.frame_index), entry, aug, patch_size, rng)
        xs[j] = normalize_patch(patch.values)
        labels[j] = patch.label_center
    return xs, labels


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    w: ModelWeights,
    grads: dict[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> tuple[ModelWeights, AdamState]:
    """One bias-corrected Adam update; functional (inputs untouched)."""
    t = state.step + 1
    new_t: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for name, arr in w.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for tensor {name}")
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * (g * g)
        new_t[name] = arr - hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_m[name] = m
        new_v[name] = v
    return ModelWeights(w.arch, new_t), AdamState(new_m, new_v, t)


def _validation_loss(
    w: ModelWeights, stack: FrameStack, dataset: Dataset, batch_size: int
) -> float:
    """Mean loss over the validation split, centered crops, no augmentation."""
    no_aug = AugmentConfig(max_offset=0, enabled=False)
    rng = np.random.default_rng(0)  # unused by centered crops
    total = 0.0
    count = 0
    for start in range(0, len(dataset.val_idx), batch_size):
        chunk = dataset.val_idx[start : start + batch_size]
        xs, labels = make_batch(stack, dataset.entries, chunk, no_aug, dataset.patch_size, rng)
        pred, _ = forward(w, xs)
        loss, _ = loss_mse(pred, labels)
        total += loss * len(chunk)
        count += len(chunk)
    return total / count


def train(
    stack: FrameStack,
    dataset: Dataset,
    arch: ArchSpec,
    cfg: TrainConfig,
    aug: AugmentConfig,
    init: ModelWeights | None = None,
    start_iteration: int = 0,
) -> tuple[ModelWeights, TrainingHistory]:
    """Mini-batch training with online augmentation and early stopping.

    Epochs reshuffle the training split; augmentation offsets are resampled
    for every sample occurrence. Returns the weights of the best validation
    checkpoint and the loss history. ``init``/``start_iteration`` support
    resuming from a saved weights file.
    """
    if len(dataset.train_idx) == 0 or len(dataset.val_idx) == 0:
        raise ValueError("train and validation splits must be nonempty")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    w = init.copy() if init is not None else init_weights(arch, cfg.seed)
    state = AdamState.zeros(w)
    hyper = AdamHyper(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    history = TrainingHistory()
    best_w = w.copy()
    best_val = math.inf
    best_iter = start_iteration
    checks_since_best = 0
    train_loss_acc = 0.0
    train_loss_n = 0

    order = rng.permutation(dataset.train_idx)
    pos = 0
    it = start_iteration
    for local_it in range(1, cfg.max_iterations + 1):
        it = start_iteration + local_it
        if pos + cfg.batch_size > len(order):
            order = rng.permutation(dataset.train_idx)
            pos = 0
        # a split smaller than batch_size just yields one whole-split batch
        batch_idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size

        xs, labels = make_batch(stack, dataset.entries, batch_idx, aug, dataset.patch_size, rng)
        pred, cache = forward(w, xs)
        loss, grad_pred = loss_mse(pred, labels)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite training loss at iteration {it}")
        grads = backward(w, cache, grad_pred)
        w, state = adam_step(w, grads, state, hyper)
        train_loss_acc += loss
        train_loss_n += 1

        if local_it % cfg.eval_interval == 0 or local_it == cfg.max_iterations:
            val_loss = _validation_loss(w, stack, dataset, cfg.batch_size)
            history.rows.append(HistoryRow(it, train_loss_acc / train_loss_n, val_loss))
            train_loss_acc = 0.0
            train_loss_n = 0
            if val_loss < best_val:
                best_val = val_loss
                best_w = w.copy()
                best_iter = it
                checks_since_best = 0
            else:
                checks_since_best += 1
                if checks_since_best >= cfg.patience:
                    break

    history.best_iteration = best_iter
    history.best_val_loss = best_val
    history.stopped_iteration = it
    return best_w, history


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class AssemblyStats:
    n_candidates: int = 0
    n_matched: int = 0
    n_unmatched: int = 0
    n_duplicate: int = 0


def assemble_entries(
    stack: FrameStack,
    references: list[PeakRecord],
    patch_size: int = 11,
    threshold_value: float | None = None,
    match_radius: float = 2.0,
) -> tuple[list[DatasetEntry], AssemblyStats]:
    """Segment every frame and pair candidate maxima with reference centers.

    Each candidate takes the nearest reference within ``match_radius``
    pixels; when two candidates claim the same reference only the nearer
    pair is kept. Unmatched candidates are counted, not raised.
    """
    by_frame: dict[int, list[PeakRecord]] = {}
    for rec in references:
        by_frame.setdefault(rec.frame_index, []).append(rec)

    entries: list[DatasetEntry] = []
    stats = AssemblyStats()
    for frame in stack:
        refs = by_frame.get(frame.frame_index, [])
        if not refs:
            continue
        ref_yz = np.array([[r.center_y, r.center_z] for r in refs])
        t = auto_threshold(frame) if threshold_value is None else threshold_value
        patches, _ = extract_candidates(frame, threshold(frame, t), patch_size)
        claimed: dict[int, tuple[float, int]] = {}  # ref index -> (dist, entry pos)
        half = patch_size // 2
        for patch in patches:
            stats.n_candidates += 1
            row = patch.origin[0] + half
            col = patch.origin[1] + half
            d2 = (ref_yz[:, 0] - col) ** 2 + (ref_yz[:, 1] - row) ** 2
            j = int(np.argmin(d2))
            dist = float(np.sqrt(d2[j]))
            if dist > match_radius:
                stats.n_unmatched += 1
                continue
            entry = DatasetEntry(
                frame_index=frame.frame_index,
                maxima=(row, col),
                truth=(float(ref_yz[j, 0]), float(ref_yz[j, 1])),
            )
            if j in claimed:
                stats.n_duplicate += 1
                prev_dist, prev_pos = claimed[j]
                if dist < prev_dist:
                    entries[prev_pos] = entry
                    claimed[j] = (dist, prev_pos)
                continue
            entries.append(entry)
            claimed[j] = (dist, len(entries) - 1)
            stats.n_matched += 1
    return entries, stats


def split_entries(
    entries: list[DatasetEntry],
    patch_size: int = 11,
    train_frac: float = 0.80,
    val_frac: float = 0.09,
    seed: int = 0,
) -> Dataset:
    """Shuffle entries and split train/val/test by the given fractions.

    Train and validation counts are rounded; the remainder goes to test.
    """
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1:
        raise ValueError("need 0 < train_frac, 0 < val_frac, train_frac+val_frac < 1")
    n = len(entries)
    perm = np.random.default_rng(np.random.SeedSequence((seed, 2))).permutation(n)
    n_train = round(train_frac * n)
    n_val = round(val_frac * n)
    return Dataset(
        entries=entries,
        train_idx=perm[:n_train],
        val_idx=perm[n_train : n_train + n_val],
        test_idx=perm[n_train + n_val :],
        patch_size=patch_size,
    )


def write_history(history: TrainingHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("iteration,train_loss,val_loss\n")
        for row in history.rows:
            fh.write(f"{row.iteration},{row.train_loss:.9e},{row.val_loss:.9e}\n")


def read_history(path) -> TrainingHistory:
    history = TrainingHistory()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "iteration,train_loss,val_loss":
            raise ValueError(f"{path}: not a training history CSV")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 3:
                continue
            history.rows.append(HistoryRow(int(parts[0]), float(parts[1]), float(parts[2])))
    if history.rows:
        best = min(history.rows, key=lambda r: r.val_loss)
        history.best_iteration = best.iteration
        history.best_val_loss = best.val_loss
        history.stopped_iteration = history.rows[-1].iteration
    return history
