"""Command-line entry point: ``gshdl <command> [options]``."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import polars as pl

from .config import PROFILE_ALIASES, PROFILES, PipelineConfig, config_snapshot, load_config, with_seed
from .container import write_container
from .conv_rbm import fit_standardization, layer_chunk, load_layers, prune_filters
from .errors import ConfigError, GshdlError
from .monitoring import StageTimings, start_exporter
from .pca_prior import learn_pca_filters, load_priors, prior_chunk, sample_patches, save_priors
from .persistence import RunRecorder
from .pipeline.bundle import (
    ModelBundle,
    forward_stages,
    load_bundle,
    save_bundle,
    stack_stages,
    stage_depth,
    stage_name,
    standardize,
)
from .pipeline.dataset import Dataset, load_dataset, read_image, save_dataset
from .pipeline.experiment import (
    ExperimentReport,
    FoldReport,
    QuickCrfEvaluator,
    evaluate,
    extract_hc,
    fit_crf_stage,
    fold_seed,
    run_experiment,
    run_size_sweep,
    run_stage_ablation,
    train_hierarchy,
    write_report,
    write_sweep,
)
from .pipeline.overlay import render_overlay, save_labels
from .pipeline.synthetic import SyntheticSpec, generate_synthetic
from .scatternet import build_filter_bank, save_features, scatter_many

logger = logging.getLogger("gshdl")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default="config.toml", help="Path to config file")
    common.add_argument("--profile", choices=PROFILES + tuple(PROFILE_ALIASES), default="desk", help="Option profile")
    common.add_argument("--seed", type=int, default=None, help="Experiment seed (overrides the config)")
    common.add_argument("--out", type=str, default="runs", help="Output directory")
    common.add_argument("--data", type=str, default=None,
                        help="Dataset manifest; a synthetic dataset is generated when omitted")
    common.add_argument("--debug", action="store_true", help="Enable debug logging")
    common.add_argument("--cprofile", type=str, default=None, help="Write a cProfile dump to this file")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="gshdl", description="G-SHDL semantic segmentation pipeline")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("synth", parents=[common], help="Generate a synthetic texture dataset")
    commands.add_parser("scatter", parents=[common], help="Export scattering features")
    commands.add_parser("train-priors", parents=[common], help="Learn PCA priors of the first RBM layer")
    commands.add_parser("train-rbm", parents=[common], help="Train the RBM feature hierarchy")

    prune = commands.add_parser("prune", parents=[common], help="Prune the last layer of a trained hierarchy")
    prune.add_argument("--layers", type=str, required=True, help="Layer file written by train-rbm")

    train_crf = commands.add_parser("train-crf", parents=[common], help="Train the CRF and write a model bundle")
    train_crf.add_argument("--layers", type=str, default=None, help="Layer file (trained on the fly when omitted)")

    segment = commands.add_parser("segment", parents=[common], help="Segment images with a model bundle")
    segment.add_argument("--model", type=str, required=True, help="Model bundle")
    segment.add_argument("--image", type=str, nargs="*", default=None, help="Image files (instead of --data)")
    segment.add_argument("--alpha", type=float, default=0.5, help="Overlay opacity in [0, 1]")

    evaluate_cmd = commands.add_parser("eval", parents=[common], help="Per-class pixel accuracy of a model bundle")
    evaluate_cmd.add_argument("--model", type=str, required=True, help="Model bundle")

    sweep = commands.add_parser("sweep", parents=[common], help="Accuracy versus training-set size")
    sweep.add_argument("--sizes", type=int, nargs="+", default=None, help="Train sizes (default: [experiment] sizes)")

    pipeline = commands.add_parser("pipeline", parents=[common], help="Run every stage over all folds")
    pipeline.add_argument("--ablation", action="store_true", help="Also report PA per feature stage")
    pipeline.add_argument("--overlays", type=int, default=4, help="Overlays written for the first fold")
    return parser


def _dataset(args: argparse.Namespace, config: PipelineConfig) -> Dataset:
    if args.data:
        return load_dataset(args.data)
    synth = config.synthetic
    spec = SyntheticSpec(synth.num_images, synth.size, synth.num_classes, config.experiment.seed, synth.noise)
    return generate_synthetic(spec)


def _layer_inputs(dataset: Dataset, config: PipelineConfig, layers) -> List[np.ndarray]:
    """Raw input volumes of the last of ``layers`` for every image."""
    hc = extract_hc(dataset.images, config.scatter, config.runtime.workers)
    depth = len(layers) - 1
    return [forward_stages(v, layers, depth)[stage_name(depth)] for v in hc]


def cmd_synth(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> None:
    manifest = save_dataset(_dataset(args, config), Path(args.out) / "data")
    print(manifest)


def cmd_scatter(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> None:
    dataset = _dataset(args, config)
    with timings.stage("scatter"):
        stacks = scatter_many(dataset.images, build_filter_bank(config.scatter), config.scatter, config.runtime.workers)
    save_features(Path(args.out) / "features.gshd", stacks)


def cmd_train_priors(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> None:
    dataset = _dataset(args, config)
    spec = config.rbm.layers[0]
    with timings.stage("scatter"):
        hc = extract_hc(dataset.images, config.scatter, config.runtime.workers)
    mean, scale = fit_standardization(hc)
    x = [standardize(v, mean, scale) for v in hc]
    with timings.stage("priors"):
        patches = sample_patches(x, spec.filter_size, config.prior.patch_count, fold_seed(config.experiment.seed, 0))
        priors = learn_pca_filters(patches, min(spec.num_filters, patches.dimension), config.prior.method)
    logger.info(f"{int(priors.checkerboard_flags.sum())} of {priors.num_filters} priors flagged as checkerboard")
    save_priors(Path(args.out) / "priors.gshd", [priors])


def _write_hierarchy(path: Path, priors, layers) -> None:
    chunks = [prior_chunk(p, name=stage_name(i + 1)) for i, p in enumerate(priors)]
    chunks += [layer_chunk(layer, name=stage_name(i + 1)) for i, layer in enumerate(layers)]
    write_container(path, chunks)
    logger.info(f"Wrote {len(layers)} layers to {path}")


def cmd_train_rbm(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> None:
    dataset = _dataset(args, config)
    with timings.stage("scatter"):
        hc = extract_hc(dataset.images, config.scatter, config.runtime.workers)
    hierarchy = train_hierarchy(hc, dataset, config, fold_seed(config.experiment.seed, 0), timings=timings)
    out = Path(args.out)
    _write_hierarchy(out / "layers.gshd", hierarchy.priors, hierarchy.layers)
    rows = [
        (stage_name(i + 1), epoch + 1, error)
        for i, layer in enumerate(hierarchy.layers)
        for epoch, error in enumerate(layer.trace.reconstruction_errors)
    ]
    pl.DataFrame(rows, schema=["layer", "epoch", "error"], orient="row").write_csv(out / "convergence.csv")


def cmd_prune(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> None:
    dataset = _dataset(args, config)
    layers = load_layers(args.layers)
    if not layers:
        raise ConfigError(f"{args.layers} holds no RBM layers")
    last = layers[-1]
    inputs = [last.prepare(v) for v in _layer_inputs(dataset, config, layers)]
    seed = fold_seed(config.experiment.seed, 0)
    with timings.stage("prune"):
        layers[-1], kept = prune_filters(
            last, inputs, QuickCrfEvaluator(dataset, config, seed),
            folds=config.prune.folds,
            tolerance=config.prune.tolerance,
            candidates=config.prune.candidates,
            seed=seed,
        )
    logger.info(f"Layer {stage_name(len(layers))}: kept {kept} of {last.num_filters} filters")
    _write_hierarchy(Path(args.out) / "layers.gshd", load_priors(args.layers), layers)


def cmd_train_crf(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> None:
    dataset = _dataset(args, config)
    names = config.crf.feature_layers
    depth = max(stage_depth(n) for n in names)
    seed = fold_seed(config.experiment.seed, 0)
    with timings.stage("scatter"):
        hc = extract_hc(dataset.images, config.scatter, config.runtime.workers)
    if args.layers:
        layers, priors = load_layers(args.layers), load_priors(args.layers)
    else:
        hierarchy = train_hierarchy(hc, dataset, config, seed, depth, timings)
        layers, priors = hierarchy.layers, hierarchy.priors
    volumes = [stack_stages(forward_stages(v, layers, depth), names) for v in hc]
    with timings.stage("crf"):
        stage = fit_crf_stage(volumes, dataset.images, dataset.labels, dataset.num_classes, config, config.crf.l2)
    bundle = ModelBundle(
        scatter_config=config.scatter,
        layers=list(layers),
        crf=stage.weights,
        inference=config.crf.inference(),
        feature_layers=names,
        crf_mean=stage.mean,
        crf_scale=stage.scale,
        class_map=dataset.class_map,
        priors=list(priors),
        provenance={
            "seed": int(seed),
            "dataset": dataset.fingerprint(),
            "train_size": len(dataset),
            "l2": float(config.crf.l2),
            "profile": config.profile,
            "config": config_snapshot(config),
        },
    )
    save_bundle(bundle, Path(args.out) / "model.gshd")


def _write_segmentations(model: ModelBundle, names: List[str], images: List[np.ndarray], out: Path,
                         alpha: float, workers: int) -> None:
    labels = model.segment_many(images, workers)
    for name, image, mask in zip(names, images, labels):
        save_labels(mask, model.class_map, out / f"{name}_labels.png")
        render_overlay(image, mask, model.class_map, alpha, out / f"{name}_overlay.png")
    logger.info(f"Wrote {len(images)} segmentations to {out}")


def cmd_segment(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> None:
    model = load_bundle(args.model)
    if args.image:
        names = [Path(p).stem for p in args.image]
        images = [read_image(p) for p in args.image]
    else:
        dataset = _dataset(args, config)
        names, images = dataset.names, dataset.images
    with timings.stage("segment"):
        _write_segmentations(model, names, images, Path(args.out) / "segmentations", args.alpha,
                             config.runtime.workers)


def cmd_eval(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> ExperimentReport:
    model = load_bundle(args.model)
    dataset = _dataset(args, config)
    if dataset.num_classes != model.num_classes:
        raise ConfigError(f"model has {model.num_classes} classes, dataset has {dataset.num_classes}")
    with timings.stage("evaluate"):
        per_class, pa, _ = evaluate(model, dataset, config.runtime.workers)
    fold = FoldReport(0, int(model.provenance.get("train_size", 0)), len(dataset), per_class.tolist(), pa,
                      float(model.provenance.get("l2", config.crf.l2)))
    names = [dataset.class_map[c].name for c in range(dataset.num_classes)]
    report = ExperimentReport("eval", names, [fold], config_snapshot(config))
    write_report(report, Path(args.out), timings)
    return report


def cmd_sweep(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> None:
    dataset = _dataset(args, config)
    reports = run_size_sweep(dataset, args.sizes or config.experiment.sizes, config, timings)
    write_sweep(reports, Path(args.out) / "sweep", timings)
    for report in reports.values():
        _recorder(config).record(report)


def cmd_pipeline(args: argparse.Namespace, config: PipelineConfig, timings: StageTimings) -> ExperimentReport:
    dataset = _dataset(args, config)
    out = Path(args.out)

    def keep_first(fold: int, model: ModelBundle, test: Dataset) -> None:
        if fold != 0:
            return
        save_bundle(model, out / "model.gshd")
        count = min(args.overlays, len(test))
        _write_segmentations(model, test.names[:count], test.images[:count], out / "segmentations", 0.5,
                             config.runtime.workers)

    report = run_experiment(dataset, config, timings, on_model=keep_first)
    if args.ablation:
        ablation = run_stage_ablation(dataset, config, timings)
        write_report(ablation, out / "ablation")
        _recorder(config).record(ablation)
    write_report(report, out, timings)
    return report


def _recorder(config: PipelineConfig) -> RunRecorder:
    return RunRecorder(config)


HANDLERS: Dict[str, Callable[[argparse.Namespace, PipelineConfig, StageTimings], object]] = {
    "synth": cmd_synth,
    "scatter": cmd_scatter,
    "train-priors": cmd_train_priors,
    "train-rbm": cmd_train_rbm,
    "prune": cmd_prune,
    "train-crf": cmd_train_crf,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "pipeline": cmd_pipeline,
}


def run(args: argparse.Namespace) -> None:
    """Load the configuration and dispatch ``args.command``."""
    config = load_config(args.config, args.profile)
    if args.seed is not None:
        config = with_seed(config, args.seed)
    if args.debug or config.debug.debug_logging:
        logger.setLevel(logging.DEBUG)
        logger.debug("Debug mode enabled")
    if config.monitoring.enabled:
        start_exporter(config.monitoring.port)

    logger.info(f"Running {args.command} with the {config.profile} profile (seed {config.experiment.seed})")
    timings = StageTimings()
    result = HANDLERS[args.command](args, config, timings)
    if isinstance(result, ExperimentReport):
        _recorder(config).record(result)


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and return the process exit code."""
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    args = build_parser().parse_args(argv)
    try:
        if args.cprofile:
            import cProfile

            logger.info(f"Profiling enabled, output: {args.cprofile}")
            profiler = cProfile.Profile()
            profiler.runcall(run, args)
            profiler.dump_stats(args.cprofile)
        else:
            run(args)
    except GshdlError as e:
        print(f"error: {e.category}: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130
    except Exception as e:
        logger.critical(f"Unexpected failure: {e}", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
