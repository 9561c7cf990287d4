"""Convolutional regression network for sub-pixel peak localization.

Maps an odd-sized single-channel patch to a (y, z) center in patch
coordinates through a stack of valid 3x3 convolutions (ReLU), an optional
non-local self-attention block after the first convolution, and a fully
connected head whose final layer is linear.

Everything is explicit 64-bit numpy: the forward pass caches every
intermediate tensor and :func:`backward` applies the chain rule by hand.
The model is small enough that exact, checkable gradients are worth far
more than raw speed; the throughput benchmark clears its bar regardless.

Array layouts: batches are (N, H, W, C); conv kernels are
(3, 3, C_in, C_out); FC weights are (n_in, n_out) applied as ``x @ W + b``.
Convolution is implemented as cross-correlation (no kernel flip).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

WEIGHTS_MAGIC = b"BNNW"
WEIGHTS_VERSION = 1

_ATTN_TENSORS = ("theta_w", "theta_b", "phi_w", "phi_b", "g_w", "g_b", "out_w", "out_b")


class WeightsFormatError(ValueError):
    """Raised when a weights file cannot be parsed or does not match an arch."""


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; every tensor shape follows from it."""

    patch_size: int = 11
    conv_channels: tuple[int, ...] = (64, 32, 8)
    fc_sizes: tuple[int, ...] = (64, 32, 2)
    attention_enabled: bool = True
    attention_bottleneck: int = 32

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "fc_sizes", tuple(self.fc_sizes))
        if self.patch_size % 2 == 0 or self.patch_size < 3:
            raise ValueError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if not self.conv_channels or not self.fc_sizes:
            raise ValueError("need at least one conv layer and one fc layer")
        if self.fc_sizes[-1] != 2:
            raise ValueError(f"last fc size must be 2, got {self.fc_sizes[-1]}")
        if self.final_map_size < 3:
            raise ValueError(
                f"patch {self.patch_size} with {len(self.conv_channels)} valid 3x3 "
                f"convolutions leaves a {self.final_map_size}x{self.final_map_size} map; need >= 3x3"
            )
        if self.attention_enabled and self.conv_channels[0] < self.attention_bottleneck:
            raise ValueError(
                f"attention bottleneck {self.attention_bottleneck} exceeds first "
                f"conv width {self.conv_channels[0]}"
            )

    @property
    def final_map_size(self) -> int:
        return self.patch_size - 2 * len(self.conv_channels)

    @property
    def flat_size(self) -> int:
        return self.final_map_size**2 * self.conv_channels[-1]


def tensor_names(arch: ArchSpec) -> list[str]:
    """Canonical tensor declaration order; save/load and Adam rely on it."""
    names = []
    for i in range(len(arch.conv_channels)):
        names += [f"conv{i}.kernel", f"conv{i}.bias"]
    if arch.attention_enabled:
        names += [f"attn.{t}" for t in _ATTN_TENSORS]
    for i in range(len(arch.fc_sizes)):
        names += [f"fc{i}.weight", f"fc{i}.bias"]
    return names


def tensor_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, c_out in enumerate(arch.conv_channels):
        shapes[f"conv{i}.kernel"] = (3, 3, c_in, c_out)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    if arch.attention_enabled:
        c = arch.conv_channels[0]
        b = arch.attention_bottleneck
        for t in ("theta", "phi", "g"):
            shapes[f"attn.{t}_w"] = (c, b)
            shapes[f"attn.{t}_b"] = (b,)
        shapes["attn.out_w"] = (b, c)
        shapes["attn.out_b"] = (c,)
    n_in = arch.flat_size
    for i, n_out in enumerate(arch.fc_sizes):
        shapes[f"fc{i}.weight"] = (n_in, n_out)
        shapes[f"fc{i}.bias"] = (n_out,)
        n_in = n_out
    return shapes


@dataclass
class ModelWeights:
    """All learnable tensors, keyed by the canonical names of ``tensor_names``."""

    arch: ArchSpec
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = tensor_shapes(self.arch)
        if list(self.tensors.keys()) != list(expected.keys()):
            raise ValueError(
                f"tensor set mismatch: got {list(self.tensors)}, expected {list(expected)}"
            )
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def checksum(self) -> str:
        """crc32 over the serialized tensor bytes (declaration order), as hex."""
        crc = 0
        for name in tensor_names(self.arch):
            crc = zlib.crc32(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes(), crc)
        return f"{crc:08x}"


def _tensor_seed(seed: int, name: str) -> np.random.SeedSequence:
    # per-tensor streams keyed by name so that e.g. disabling attention does
    # not shift the initialization of the conv/fc tensors (ablation contract)
    return np.random.SeedSequence((seed, zlib.crc32(name.encode())))


def init_weights(arch: ArchSpec, seed: int = 0) -> ModelWeights:
    """Kaiming fan-in init for kernels and FC weights; biases zero.

    The attention out-projection starts at zero so the block begins as the
    identity map, which keeps early training indistinguishable from the
    attention-free model.
    """
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(arch).items():
        if name.endswith(".bias") or name.endswith("_b") or name == "attn.out_w":
            tensors[name] = np.zeros(shape)
            continue
        rng = np.random.default_rng(_tensor_seed(seed, name))
        fan_in = int(np.prod(shape[:-1]))
        tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return ModelWeights(arch, tensors)


def zeros_like_weights(w: ModelWeights) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in w.tensors.items()}


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad_mask(pre: np.ndarray) -> np.ndarray:
    """Subgradient at exactly 0 is fixed to 0."""
    return (pre > 0.0).astype(float)


def conv2d_valid(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid 3x3 cross-correlation: (..., H, W, C_in) -> (..., H-2, W-2, C_out)."""
    single = x.ndim == 3
    if single:
        x = x[None]
    n, h, w, c_in = x.shape
    if h < 3 or w < 3:
        raise ValueError(f"input {h}x{w} too small for a valid 3x3 convolution")
    if kernel.shape[:3] != (3, 3, c_in):
        raise ValueError(f"kernel shape {kernel.shape} does not match input channels {c_in}")
    if c_in <= 4:
        # few input channels: one im2col GEMM beats nine tiny matmuls
        win = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(1, 2))
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
        out = cols.reshape(n, h - 2, w - 2, 9 * c_in) @ kernel.reshape(9 * c_in, -1) + bias
    else:
        # many channels: the im2col copy dominates, the offset loop is cheaper
        out = np.broadcast_to(bias, (n, h - 2, w - 2, kernel.shape[3])).copy()
        for di in range(3):
            for dj in range(3):
                out += x[:, di : di + h - 2, dj : dj + w - 2, :] @ kernel[di, dj]
    return out[0] if single else out


def conv2d_valid_backward(
    x: np.ndarray, kernel: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_valid w.r.t. input, kernel, and bias."""
    n, h, w, _ = x.shape
    hh, ww = d_out.shape[1], d_out.shape[2]
    d_x = np.zeros_like(x)
    d_kernel = np.empty_like(kernel)
    for di in range(3):
        for dj in range(3):
            xs = x[:, di : di + hh, dj : dj + ww, :]
            d_kernel[di, dj] = np.tensordot(xs, d_out, axes=([0, 1, 2], [0, 1, 2]))
            d_x[:, di : di + hh, dj : dj + ww, :] += d_out @ kernel[di, dj].T
    return d_x, d_kernel, d_out.sum(axis=(0, 1, 2))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    # consumes its input: the P x P matrices dominate inference time and the
    # extra temporaries of the naive form triple the cost; every caller
    # passes a fresh scores product
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


@dataclass
class AttentionCache:
    x_flat: np.ndarray      # (N, P, C)
    theta: np.ndarray       # (N, P, B)
    phi: np.ndarray
    g: np.ndarray
    attn: np.ndarray        # (N, P, P), rows sum to 1
    y: np.ndarray           # (N, P, B)


def nonlocal_block(x: np.ndarray, w: ModelWeights) -> np.ndarray:
    """Embedded-Gaussian non-local block with residual connection."""
    out, _ = nonlocal_forward(x, w)
    return out


def nonlocal_forward(x: np.ndarray, w: ModelWeights) -> tuple[np.ndarray, AttentionCache]:
    n, h, ww, c = x.shape
    p = h * ww
    xf = x.reshape(n, p, c)
    theta = xf @ w["attn.theta_w"] + w["attn.theta_b"]
    phi = xf @ w["attn.phi_w"] + w["attn.phi_b"]
    g = xf @ w["attn.g_w"] + w["attn.g_b"]
    # contiguous transpose keeps the batched GEMM on the fast path
    attn = _softmax_rows(theta @ np.ascontiguousarray(phi.transpose(0, 2, 1)))
    y = attn @ g
    out = xf + y @ w["attn.out_w"] + w["attn.out_b"]
    return out.reshape(n, h, ww, c), AttentionCache(xf, theta, phi, g, attn, y)


def nonlocal_backward(
    d_out: np.ndarray, w: ModelWeights, cache: AttentionCache
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Input gradient and per-tensor gradients for the attention block."""
    n, h, ww, c = d_out.shape
    d_flat = d_out.reshape(n, h * ww, c)
    grads: dict[str, np.ndarray] = {}
    d_x = d_flat.copy()  # residual path

    grads["attn.out_w"] = np.tensordot(cache.y, d_flat, axes=([0, 1], [0, 1]))
    grads["attn.out_b"] = d_flat.sum(axis=(0, 1))
    d_y = d_flat @ w["attn.out_w"].T

    d_attn = d_y @ cache.g.transpose(0, 2, 1)
    d_g = cache.attn.transpose(0, 2, 1) @ d_y
    # softmax jacobian applied row-wise
    d_scores = cache.attn * (d_attn - (d_attn * cache.attn).sum(axis=-1, keepdims=True))
    d_theta = d_scores @ cache.phi
    d_phi = d_scores.transpose(0, 2, 1) @ cache.theta

    for proj, d_proj in (("theta", d_theta), ("phi", d_phi), ("g", d_g)):
        grads[f"attn.{proj}_w"] = np.tensordot(cache.x_flat, d_proj, axes=([0, 1], [0, 1]))
        grads[f"attn.{proj}_b"] = d_proj.sum(axis=(0, 1))
        d_x += d_proj @ w[f"attn.{proj}_w"].T
    return d_x.reshape(n, h, ww, c), grads


# ---------------------------------------------------------------------------
# full network
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Every intermediate needed to run the chain rule backwards."""

    conv_inputs: list[np.ndarray] = field(default_factory=list)
    conv_pre: list[np.ndarray] = field(default_factory=list)
    attention: AttentionCache | None = None
    flat: np.ndarray | None = None
    fc_inputs: list[np.ndarray] = field(default_factory=list)
    fc_pre: list[np.ndarray] = field(default_factory=list)
    n: int = 0


def forward(w: ModelWeights, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Feed-forward pass over a batch of (N, size, size) patches.

    Returns (N, 2) predicted (y, z) centers in patch coordinates plus the
    cache consumed by :func:`backward`.
    """
    arch = w.arch
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.shape[1] != arch.patch_size or batch.shape[2] != arch.patch_size:
        raise ValueError(
            f"patch size {batch.shape[1]}x{batch.shape[2]} does not match the "
            f"trained architecture's {arch.patch_size}x{arch.patch_size}; a model "
            f"trained with one patch size cannot be applied to another"
        )
    cache = ForwardCache(n=batch.shape[0])
    x = batch[..., None]  # single input channel

    for i in range(len(arch.conv_channels)):
        cache.conv_inputs.append(x)
        pre = conv2d_valid(x, w[f"conv{i}.kernel"], w[f"conv{i}.bias"])
        cache.conv_pre.append(pre)
        x = relu(pre)
        if i == 0 and arch.attention_enabled:
            x, cache.attention = nonlocal_forward(x, w)

    flat = x.reshape(cache.n, arch.flat_size)
    cache.flat = flat
    x = flat
    n_fc = len(arch.fc_sizes)
    for i in range(n_fc):
        cache.fc_inputs.append(x)
        pre = x @ w[f"fc{i}.weight"] + w[f"fc{i}.bias"]
        cache.fc_pre.append(pre)
        x = pre if i == n_fc - 1 else relu(pre)  # output layer is linear
    return x, cache


def loss_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared Euclidean distance and its gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = pred.shape[0]
    return float((diff * diff).sum() / n), (2.0 / n) * diff


def backward(w: ModelWeights, cache: ForwardCache, grad_pred: np.ndarray) -> dict[str, np.ndarray]:
    """Chain-rule gradients for every tensor, keyed like ``tensor_names``."""
    arch = w.arch
    grad_pred = np.asarray(grad_pred, dtype=float)
    if grad_pred.shape != (cache.n, arch.fc_sizes[-1]):
        raise ValueError(
            f"grad_pred shape {grad_pred.shape} does not match cached batch "
            f"({cache.n}, {arch.fc_sizes[-1]})"
        )
    grads: dict[str, np.ndarray] = {}

    d = grad_pred
    n_fc = len(arch.fc_sizes)
    for i in reversed(range(n_fc)):
        if i != n_fc - 1:
            d = d * relu_grad_mask(cache.fc_pre[i])
        grads[f"fc{i}.weight"] = cache.fc_inputs[i].T @ d
        grads[f"fc{i}.bias"] = d.sum(axis=0)
        d = d @ w[f"fc{i}.weight"].T

    m = arch.final_map_size
    d = d.reshape(cache.n, m, m, arch.conv_channels[-1])
    for i in reversed(range(len(arch.conv_channels))):
        if i == 0 and arch.attention_enabled:
            d, attn_grads = nonlocal_backward(d, w, cache.attention)
            grads.update(attn_grads)
        d = d * relu_grad_mask(cache.conv_pre[i])
        d, grads[f"conv{i}.kernel"], grads[f"conv{i}.bias"] = conv2d_valid_backward(
            cache.conv_inputs[i], w[f"conv{i}.kernel"], d
        )
    return {name: grads[name] for name in tensor_names(arch)}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_weights(w: ModelWeights, path) -> None:
    """Versioned binary: magic, u32 version, arch descriptor, then tensors
    as 64-bit little-endian floats in declaration order."""
    arch = w.arch
    head = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION)]
    head.append(struct.pack("<2I", arch.patch_size, len(arch.conv_channels)))
    head.append(struct.pack(f"<{len(arch.conv_channels)}I", *arch.conv_channels))
    head.append(struct.pack("<I", len(arch.fc_sizes)))
    head.append(struct.pack(f"<{len(arch.fc_sizes)}I", *arch.fc_sizes))
    head.append(struct.pack("<2I", int(arch.attention_enabled), arch.attention_bottleneck))
    with open(path, "wb") as fh:
        fh.write(b"".join(head))
        for name in tensor_names(arch):
            fh.write(np.ascontiguousarray(w.tensors[name], dtype="<f8").tobytes())


def load_weights(path, expect: ArchSpec | None = None) -> ModelWeights:
    """Bit-exact inverse of :func:`save_weights`.

    If ``expect`` is given, the stored architecture must match it exactly;
    the error names the first differing field.
    """
    with open(path, "rb") as fh:
        def take(n: int, what: str) -> bytes:
            buf = fh.read(n)
            if len(buf) != n:
                raise WeightsFormatError(f"{path}: truncated while reading {what}")
            return buf

        magic = take(4, "magic")
        if magic != WEIGHTS_MAGIC:
            raise WeightsFormatError(f"{path}: bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != WEIGHTS_VERSION:
            raise WeightsFormatError(
                f"{path}: unsupported weights version {version}, expected {WEIGHTS_VERSION}"
            )
        patch_size, n_conv = struct.unpack("<2I", take(8, "arch header"))
        conv = struct.unpack(f"<{n_conv}I", take(4 * n_conv, "conv channels"))
        (n_fc,) = struct.unpack("<I", take(4, "fc count"))
        fc = struct.unpack(f"<{n_fc}I", take(4 * n_fc, "fc sizes"))
        attn_flag, bottleneck = struct.unpack("<2I", take(8, "attention fields"))
        arch = ArchSpec(
            patch_size=patch_size,
            conv_channels=conv,
            fc_sizes=fc,
            attention_enabled=bool(attn_flag),
            attention_bottleneck=bottleneck,
        )
        if expect is not None and arch != expect:
            for fname in ("patch_size", "conv_channels", "fc_sizes",
                          "attention_enabled", "attention_bottleneck"):
                if getattr(arch, fname) != getattr(expect, fname):
                    raise WeightsFormatError(
                        f"{path}: stored arch {fname}={getattr(arch, fname)} does not "
                        f"match expected {fname}={getattr(expect, fname)}"
                    )
        tensors: dict[str, np.ndarray] = {}
        shapes = tensor_shapes(arch)
        for name in tensor_names(arch):
            shape = shapes[name]
            count = int(np.prod(shape))
            raw = take(8 * count, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        extra = fh.read(1)
        if extra:
            raise WeightsFormatError(f"{path}: trailing bytes after the last tensor")
    return ModelWeights(arch, tensors)
