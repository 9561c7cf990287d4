"""Command-line pipeline: simulate | localize | train | eval | ablate | bench.

Every subcommand reads the shared config (see :mod:`peakloc.config`),
accepts ``--key value`` overrides for any schema key, and is byte-for-byte
reproducible for a fixed config and seed (bench timing fields excepted).
Exit code 0 means every requested output file was written.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import evaluator, frame_io, peaknet, segment, synth, trainer, voigtfit
from .config import ConfigError, RunConfig, load_config

_COMMANDS = ("simulate", "localize", "train", "eval", "ablate", "bench")


def _scene_config(cfg: RunConfig) -> synth.SceneConfig:
    return synth.SceneConfig(
        n_frames=cfg["synth.n_frames"],
        n_peaks=cfg["synth.n_peaks"],
        width=cfg["synth.width"],
        height=cfg["synth.height"],
        amp_range=(cfg["synth.amp_min"], cfg["synth.amp_max"]),
        sigma_range=(cfg["synth.sigma_min"], cfg["synth.sigma_max"]),
        eta_range=(cfg["synth.eta_min"], cfg["synth.eta_max"]),
        bg_range=(cfg["synth.bg_min"], cfg["synth.bg_max"]),
        min_separation=cfg["synth.min_separation"],
        border_margin=cfg["synth.border_margin"],
        poisson_noise=cfg["synth.poisson"],
        seed=cfg["seed"],
    )


def _arch(cfg: RunConfig) -> peaknet.ArchSpec:
    return peaknet.ArchSpec(
        patch_size=cfg["segment.patch_size"],
        conv_channels=cfg.int_list("net.conv_channels"),
        fc_sizes=cfg.int_list("net.fc_sizes"),
        attention_enabled=cfg["net.attention"],
        attention_bottleneck=cfg["net.bottleneck"],
    )


def _train_config(cfg: RunConfig) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        batch_size=cfg["train.batch_size"],
        max_iterations=cfg["train.max_iterations"],
        lr=cfg["train.lr"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        eval_interval=cfg["train.eval_interval"],
        patience=cfg["train.patience"],
        seed=cfg["seed"],
    )


def _lm_options(cfg: RunConfig) -> voigtfit.LMOptions:
    return voigtfit.LMOptions(
        max_iterations=cfg["fit.max_iterations"],
        cost_tol=cfg["fit.cost_tol"],
        step_tol=cfg["fit.step_tol"],
        damping_init=cfg["fit.damping_init"],
        damping_up=cfg["fit.damping_up"],
        damping_down=cfg["fit.damping_down"],
    )


def _threshold_value(cfg: RunConfig) -> float | None:
    raw = str(cfg["segment.threshold"]).strip()
    if raw == "auto":
        return None
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"segment.threshold must be 'auto' or a number, got {raw!r}") from exc


def _segment_stack(cfg: RunConfig, stack: frame_io.FrameStack) -> list[segment.Patch]:
    """Threshold + label + crop every frame; per-frame discards go to stderr."""
    fixed_t = _threshold_value(cfg)
    patch_size = cfg["segment.patch_size"]
    patches: list[segment.Patch] = []
    total = segment.CandidateSummary()
    for frame in stack:
        t = segment.auto_threshold(frame) if fixed_t is None else fixed_t
        found, summary = segment.extract_candidates(frame, segment.threshold(frame, t), patch_size)
        patches.extend(found)
        total = total + summary
        print(
            f"frame {frame.frame_index}: regions={summary.n_regions} "
            f"emitted={summary.emitted} multi_maxima={summary.multi_maxima} "
            f"border={summary.border}",
            file=sys.stderr,
        )
    print(
        f"total: regions={total.n_regions} emitted={total.emitted} "
        f"multi_maxima={total.multi_maxima} border={total.border}",
        file=sys.stderr,
    )
    return patches


def cmd_simulate(cfg: RunConfig) -> int:
    scene = _scene_config(cfg)
    stack, records = synth.render_scene(scene)
    frame_io.write_frames(stack, cfg["io.frames"])
    frame_io.write_peaks(records, cfg["io.truth"])
    print(
        f"simulate: wrote {stack.n_frames} frames ({stack.width}x{stack.height}) "
        f"to {cfg['io.frames']}, {len(records)} ground-truth peaks to {cfg['io.truth']}"
    )
    return 0


def _load_weights_checked(cfg: RunConfig) -> peaknet.ModelWeights:
    weights = peaknet.load_weights(cfg["io.weights"])
    patch_size = cfg["segment.patch_size"]
    if weights.arch.patch_size != patch_size:
        raise ConfigError(
            f"weights {cfg['io.weights']} were trained for patch size "
            f"{weights.arch.patch_size}, but segment.patch_size is {patch_size}; "
            f"a model trained with one patch size cannot be applied to another"
        )
    return weights


def cmd_localize(cfg: RunConfig) -> int:
    method = cfg["localize.method"]
    if method not in evaluator.METHODS:
        raise ConfigError(f"localize.method must be one of {evaluator.METHODS}, got {method!r}")
    stack = frame_io.read_frames(cfg["io.frames"])
    weights = _load_weights_checked(cfg) if method == "net" else None
    patches = _segment_stack(cfg, stack)
    records = evaluator.localize_patches(
        method, patches, weights, threads=_threads(cfg), fit_options=_lm_options(cfg)
    )
    frame_io.write_peaks(records, cfg["io.peaks_out"])
    print(f"localize[{method}]: wrote {len(records)} peaks to {cfg['io.peaks_out']}")
    return 0


def _assemble_dataset(cfg: RunConfig, stack: frame_io.FrameStack) -> trainer.Dataset:
    patch_size = cfg["segment.patch_size"]
    label_source = cfg["train.label_source"]
    if label_source == "ground_truth":
        references = frame_io.read_peaks(cfg["io.truth"])
        entries, stats = trainer.assemble_entries(
            stack, references, patch_size, _threshold_value(cfg), cfg["eval.match_radius"]
        )
    elif label_source == "voigt_fit":
        # the field protocol: labels come from fitting the candidate patches
        opts = _lm_options(cfg)
        entries = []
        half = patch_size // 2
        for patch in _segment_stack(cfg, stack):
            result = voigtfit.fit_patch(patch, opts)
            if not result.converged:
                continue
            y, z = segment.to_frame_coords(patch, *result.center_in_patch)
            entries.append(
                trainer.DatasetEntry(
                    frame_index=patch.frame_index,
                    maxima=(patch.origin[0] + half, patch.origin[1] + half),
                    truth=(y, z),
                )
            )
        stats = None
    else:
        raise ConfigError(
            f"train.label_source must be 'ground_truth' or 'voigt_fit', got {label_source!r}"
        )
    if stats is not None:
        print(
            f"dataset: candidates={stats.n_candidates} matched={stats.n_matched} "
            f"unmatched={stats.n_unmatched} duplicate={stats.n_duplicate}",
            file=sys.stderr,
        )
    return trainer.split_entries(
        entries, patch_size, cfg["train.train_frac"], cfg["train.val_frac"], cfg["seed"]
    )


def cmd_train(cfg: RunConfig) -> int:
    stack = frame_io.read_frames(cfg["io.frames"])
    dataset = _assemble_dataset(cfg, stack)
    aug = trainer.AugmentConfig(max_offset=cfg["train.max_offset"], enabled=cfg["train.augment"])
    init = None
    start_iteration = 0
    old_rows: list[trainer.HistoryRow] = []
    if cfg["train.resume"]:
        init = peaknet.load_weights(cfg["train.resume"])
        if os.path.exists(cfg["io.history"]):
            old = trainer.read_history(cfg["io.history"])
            old_rows = old.rows
            start_iteration = old.stopped_iteration
    weights, history = trainer.train(
        stack, dataset, _arch(cfg), _train_config(cfg), aug, init, start_iteration
    )
    peaknet.save_weights(weights, cfg["io.weights"])
    history.rows = old_rows + history.rows
    trainer.write_history(history, cfg["io.history"])
    print(
        f"train: best val loss {history.best_val_loss:.6e} at iteration "
        f"{history.best_iteration}, stopped at {history.stopped_iteration}; "
        f"weights -> {cfg['io.weights']}, history -> {cfg['io.history']}"
    )
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    method = cfg["eval.method"]
    if method not in evaluator.METHODS:
        raise ConfigError(f"eval.method must be one of {evaluator.METHODS}, got {method!r}")
    stack = frame_io.read_frames(cfg["io.frames"])
    references = frame_io.read_peaks(cfg["io.truth"])
    weights = _load_weights_checked(cfg) if method == "net" else None
    patches = _segment_stack(cfg, stack)
    records = evaluator.localize_patches(
        method, patches, weights, threads=_threads(cfg), fit_options=_lm_options(cfg)
    )
    matches = evaluator.euclidean_errors(records, references, cfg["eval.match_radius"])
    ref_label = references[0].source if references else "reference"
    report = evaluator.percentile_report(matches, method=method, reference=ref_label)
    with open(cfg["io.report"], "w") as fh:
        fh.write(evaluator.REPORT_CSV_HEADER + "\n")
        fh.write(report.to_csv_row() + "\n")
    print(report.to_text())
    if matches.unmatched_pred:
        print(f"unmatched predictions: {len(matches.unmatched_pred)}", file=sys.stderr)
    print(f"eval: report -> {cfg['io.report']}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    kind = cfg["ablate.kind"]
    stack = frame_io.read_frames(cfg["io.frames"])
    dataset = _assemble_dataset(cfg, stack)
    seeds = tuple(cfg["seed"] + k for k in range(cfg["ablate.n_seeds"]))
    result = evaluator.run_ablation(
        kind,
        stack,
        dataset,
        _arch(cfg),
        _train_config(cfg),
        trainer.AugmentConfig(max_offset=cfg["train.max_offset"], enabled=cfg["train.augment"]),
        seeds=seeds,
        test_offset=cfg["ablate.test_offset"],
        max_test_peaks=cfg["ablate.max_test_peaks"],
    )
    with open(cfg["io.report"], "w") as fh:
        fh.write(evaluator.REPORT_CSV_HEADER + "\n")
        for run in result.runs:
            fh.write(run.report_on.to_csv_row() + "\n")
            fh.write(run.report_off.to_csv_row() + "\n")
    print(result.to_text())
    print(f"ablate: report -> {cfg['io.report']}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    stack = frame_io.read_frames(cfg["io.frames"])
    patches = _segment_stack(cfg, stack)
    if len(patches) < cfg["bench.n_patches"]:
        raise ConfigError(
            f"bench needs at least {cfg['bench.n_patches']} patches but segmentation "
            f"produced {len(patches)}; simulate a larger scene first"
        )
    patches = patches[: cfg["bench.n_patches"]]
    methods = cfg.str_list("bench.methods")
    weights = _load_weights_checked(cfg) if "net" in methods else None
    lines = []
    for method in methods:
        result = evaluator.bench_throughput(
            method, patches,
            weights if method == "net" else None,
            threads=_threads(cfg),
            repetitions=cfg["bench.repetitions"],
        )
        lines.append(result.to_json_line())
        print(
            f"bench[{method}]: {result.n_patches} patches in {result.wall_time_s:.3f} s "
            f"({result.patches_per_s:.0f} patches/s, threads={result.threads})"
        )
    with open(cfg["io.report"], "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"bench: report -> {cfg['io.report']}")
    return 0


def _threads(cfg: RunConfig) -> int:
    n = cfg["threads"]
    if n <= 0:  # 0 = auto
        return os.cpu_count() or 1
    return n


def _parse_overrides(tokens: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key value")
        if i + 1 >= len(tokens):
            raise ConfigError(f"override {tok!r} is missing a value")
        overrides.append((tok[2:], tokens[i + 1]))
        i += 2
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="peakloc",
        description="Sub-pixel Bragg peak localization pipeline",
    )
    parser.add_argument("command", choices=_COMMANDS)
    parser.add_argument("--config", default=None, help="path to a key = value config file")
    parser.add_argument("--threads", type=int, default=None, help="worker count for parallel stages")
    parser.add_argument("--seed", type=int, default=None, help="run seed")
    args, extra = parser.parse_known_args(argv)

    try:
        overrides = _parse_overrides(extra)
        cfg = load_config(args.config, overrides)
        if args.threads is not None:
            cfg.set("threads", str(args.threads))
        if args.seed is not None:
            cfg.set("seed", str(args.seed))
        handler = {
            "simulate": cmd_simulate,
            "localize": cmd_localize,
            "train": cmd_train,
            "eval": cmd_eval,
            "ablate": cmd_ablate,
            "bench": cmd_bench,
        }[args.command]
        return handler(cfg)
    except (ConfigError, frame_io.FrameFormatError, peaknet.WeightsFormatError,
            ValueError, RuntimeError, OSError) as exc:
        print(f"peakloc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
