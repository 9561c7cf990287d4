"""Flat key-value run configuration shared by every CLI subcommand.

One file, namespaced keys (``synth.n_peaks``, ``train.batch_size``), so an
ablation is always a one-key diff. Command-line ``--key value`` pairs
override file values. Unknown keys are rejected by name, typed per the
schema below.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type tag, default); type tags: int, float, bool, str
SCHEMA: dict[str, tuple[str, Any]] = {
    "threads": ("int", 1),
    "seed": ("int", 0),
    # file paths
    "io.frames": ("str", "frames.bfrm"),
    "io.truth": ("str", "truth_peaks.csv"),
    "io.peaks_out": ("str", "peaks_out.csv"),
    "io.weights": ("str", "model.bnnw"),
    "io.history": ("str", "history.csv"),
    "io.report": ("str", "report.csv"),
    # synthetic scene
    "synth.n_frames": ("int", 8),
    "synth.n_peaks": ("int", 12),
    "synth.width": ("int", 128),
    "synth.height": ("int", 128),
    "synth.amp_min": ("float", 200.0),
    "synth.amp_max": ("float", 2000.0),
    "synth.sigma_min": ("float", 0.9),
    "synth.sigma_max": ("float", 1.6),
    "synth.eta_min": ("float", 0.1),
    "synth.eta_max": ("float", 0.9),
    "synth.bg_min": ("float", 5.0),
    "synth.bg_max": ("float", 15.0),
    "synth.min_separation": ("float", 12.0),
    "synth.border_margin": ("float", 8.0),
    "synth.poisson": ("bool", False),
    # segmentation
    "segment.threshold": ("str", "auto"),   # "auto" or a number
    "segment.patch_size": ("int", 11),
    # pseudo-Voigt fit
    "fit.max_iterations": ("int", 200),
    "fit.cost_tol": ("float", 1e-10),
    "fit.step_tol": ("float", 1e-8),
    "fit.damping_init": ("float", 1e-3),
    "fit.damping_up": ("float", 10.0),
    "fit.damping_down": ("float", 0.1),
    # network architecture
    "net.conv_channels": ("str", "64,32,8"),
    "net.fc_sizes": ("str", "64,32,2"),
    "net.attention": ("bool", True),
    "net.bottleneck": ("int", 32),
    # training
    "train.batch_size": ("int", 512),
    "train.max_iterations": ("int", 3000),
    "train.lr": ("float", 1e-3),
    "train.beta1": ("float", 0.9),
    "train.beta2": ("float", 0.999),
    "train.eps": ("float", 1e-8),
    "train.eval_interval": ("int", 200),
    "train.patience": ("int", 10),
    "train.train_frac": ("float", 0.80),
    "train.val_frac": ("float", 0.09),
    "train.label_source": ("str", "ground_truth"),   # or "voigt_fit"
    "train.augment": ("bool", True),
    "train.max_offset": ("int", 2),
    "train.resume": ("str", ""),
    # localization / evaluation
    "localize.method": ("str", "maxima"),
    "eval.method": ("str", "net"),
    "eval.match_radius": ("float", 2.0),
    # ablations
    "ablate.kind": ("str", "augmentation"),
    "ablate.n_seeds": ("int", 1),
    "ablate.test_offset": ("int", 1),
    "ablate.max_test_peaks": ("int", 2000),
    # benchmark
    "bench.methods": ("str", "maxima,voigt,net"),
    "bench.n_patches": ("int", 1000),
    "bench.repetitions": ("int", 3),
}

_PARSERS = {"int": int, "float": float, "bool": _parse_bool, "str": str}


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: default for k, (_, default) in SCHEMA.items()})

    def set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key!r}")
        type_tag, _ = SCHEMA[key]
        try:
            self.values[key] = _PARSERS[type_tag](raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key!r}")
        return self.values[key]

    def int_list(self, key: str) -> tuple[int, ...]:
        text = str(self[key]).strip()
        try:
            return tuple(int(tok) for tok in text.split(",") if tok.strip())
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: expected comma-separated ints, got {text!r}") from exc

    def str_list(self, key: str) -> tuple[str, ...]:
        return tuple(tok.strip() for tok in str(self[key]).split(",") if tok.strip())


def load_config(path: str | None = None, overrides: list[tuple[str, str]] | None = None) -> RunConfig:
    """Defaults, then the file (``key = value`` lines, ``#`` comments), then
    command-line overrides, later sources winning."""
    cfg = RunConfig.defaults()
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
                key, _, raw = stripped.partition("=")
                cfg.set(key.strip(), raw.strip())
    for key, raw in overrides or []:
        cfg.set(key, raw)
    return cfg
