"""Experiment protocol: fold splits, model fitting, evaluation and reports.

Every fold trains the whole hierarchy on its train split, picks the CRF
ridge strength on the validation split and reports per-class pixel accuracy
on the test split. All randomness flows from ``[experiment] seed``.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import polars as pl

from ..config import PipelineConfig, config_snapshot
from ..conv_rbm import RbmLayer, feature_forward, fit_standardization, prune_filters, train_layer
from ..crf import CrfExample, CrfWeights, InferenceOptions, Potentials, build_potentials, segment_many, train_crf
from ..errors import ConfigError, DataError
from ..monitoring import StageTimings
from ..numerics import OptimizerOptions, derive_seed, rng_from_seed
from ..pca_prior import PriorFilterSet, learn_pca_filters, sample_patches
from ..scatternet import ComplexFilterBank, ScatterConfig, build_filter_bank, scatter_many
from .bundle import ModelBundle, forward_stages, map_images, stack_stages, stage_depth, stage_name, standardize
from .dataset import Dataset
from .metrics import dataset_pixel_accuracy, majority_label

logger = logging.getLogger("gshdl.pipeline")


class FoldSplit(NamedTuple):
    """Image indices of one fold."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def split_sizes(num_images: int, fractions: Sequence[float]) -> Tuple[int, ...]:
    """Split sizes rounded by largest remainder so that they sum to ``num_images``.

    Raises:
        ConfigError: Fractions negative or not summing to 1 within 1e-9
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fractions.tolist()}")
    raw = fractions * num_images
    sizes = np.floor(raw + 1e-9).astype(np.int64)
    remainder = num_images - int(sizes.sum())
    if remainder > 0:
        order = np.argsort(-(raw - sizes), kind="stable")
        sizes[order[:remainder]] += 1
    return tuple(int(s) for s in sizes)


def make_folds(num_images: int, folds: int = 5, fractions: Sequence[float] = (0.45, 0.15, 0.40),
               seed: int = 0) -> List[FoldSplit]:
    """Random train/validation/test splits, one independent permutation per fold.

    Raises:
        ConfigError: Bad fractions, ``folds < 1`` or fewer images than folds
    """
    if folds < 1:
        raise ConfigError(f"folds must be >= 1, got {folds}")
    if num_images < folds:
        raise ConfigError(f"need at least {folds} images for {folds} folds, got {num_images}")
    n_train, n_val, _ = split_sizes(num_images, fractions)
    splits = []
    for fold in range(folds):
        order = rng_from_seed(seed, 5, fold).permutation(num_images)
        splits.append(FoldSplit(
            train=np.sort(order[:n_train]),
            validation=np.sort(order[n_train:n_train + n_val]),
            test=np.sort(order[n_train + n_val:]),
        ))
    return splits


def fold_seed(seed: int, fold: int) -> int:
    """Training seed of ``fold``."""
    return derive_seed(seed, 9, fold)


def class_balanced_subset(dominant: Sequence[int], size: int, num_classes: int, seed: int = 0) -> np.ndarray:
    """Positions of a subset with equal per-class image counts.

    Images are grouped by their dominant label and drawn round-robin over
    the classes, so counts differ by at most one while every class has
    images left. Asking for every image returns all positions in order.

    Args:
        dominant: Dominant label of each candidate image (-1 for all-void)
        size: Subset size
        num_classes: Class count
        seed: Seed of the per-class shuffles

    Raises:
        ConfigError: ``size`` below ``num_classes`` or above the candidate count
    """
    dominant = np.asarray(dominant, dtype=np.int64)
    if size < num_classes:
        raise ConfigError(f"subset size {size} is smaller than the number of classes {num_classes}")
    if size > len(dominant):
        raise ConfigError(f"subset size {size} exceeds the {len(dominant)} available images")
    if size == len(dominant):
        return np.arange(len(dominant))

    rng = rng_from_seed(seed, 6)
    pools = [rng.permutation(np.flatnonzero(dominant == c)).tolist() for c in range(num_classes)]
    chosen: List[int] = []
    while len(chosen) < size and any(pools):
        for pool in pools:
            if pool and len(chosen) < size:
                chosen.append(pool.pop(0))
    if len(chosen) < size:
        rest = rng.permutation(np.setdiff1d(np.arange(len(dominant)), chosen))
        chosen.extend(rest[:size - len(chosen)].tolist())
    return np.sort(np.asarray(chosen, dtype=np.int64))


def extract_hc(images: Sequence[np.ndarray], config: ScatterConfig, workers: int = 1,
               bank: Optional[ComplexFilterBank] = None) -> List[np.ndarray]:
    """Scattering feature volumes of a list of images."""
    bank = bank or build_filter_bank(config)
    return [stack.channels() for stack in scatter_many(images, bank, config, workers)]


@dataclass
class CrfStage:
    """CRF weights plus the standardization of their input volume."""

    weights: CrfWeights
    mean: np.ndarray
    scale: np.ndarray

    def potentials(self, volume: np.ndarray, image: np.ndarray) -> Potentials:
        return build_potentials(standardize(volume, self.mean, self.scale), image, self.weights)

    def predict(self, volumes: Sequence[np.ndarray], images: Sequence[np.ndarray],
                inference: InferenceOptions) -> List[np.ndarray]:
        return segment_many([self.potentials(v, img) for v, img in zip(volumes, images)], inference)


def fit_crf_stage(volumes: Sequence[np.ndarray], images: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                  num_classes: int, config: PipelineConfig, l2: float, *,
                  inference: Optional[InferenceOptions] = None, optimizer: Optional[OptimizerOptions] = None,
                  unary_only: bool = False) -> CrfStage:
    """Standardize ``volumes`` and train CRF weights on them."""
    mean, scale = fit_standardization(volumes)
    examples = [CrfExample(standardize(v, mean, scale), img, lab) for v, img, lab in zip(volumes, images, labels)]
    weights = train_crf(
        examples,
        optimizer or config.crf.optimizer(),
        inference or config.crf.inference(),
        l2,
        num_labels=num_classes,
        beta=config.crf.beta,
        subsample=config.crf.subsample,
        workers=config.runtime.workers,
        unary_only=unary_only,
    )
    return CrfStage(weights, mean, scale)


def stage_accuracy(stage: CrfStage, volumes: Sequence[np.ndarray], dataset: Dataset,
                   inference: InferenceOptions) -> Tuple[np.ndarray, float]:
    preds = stage.predict(volumes, dataset.images, inference)
    per_class, pa, _ = dataset_pixel_accuracy(preds, dataset.labels, dataset.num_classes)
    return per_class, pa


class QuickCrfEvaluator:
    """Cross-validated PA of a quickly trained CRF on candidate feature maps.

    Used to score filter subsets while pruning: the maps of the labeled
    training images are split into ``folds`` groups, a short CRF training
    run is fitted on all but one group and scored on the held-out one.
    """

    def __init__(self, dataset: Dataset, config: PipelineConfig, seed: int):
        self.dataset = dataset
        self.config = config
        self.seed = seed
        self.inference = replace(config.crf.inference(), iterations=config.prune.quick_iterations)
        self.optimizer = OptimizerOptions(max_iterations=config.prune.quick_lbfgs_iterations)

    def __call__(self, maps: Sequence[np.ndarray], folds: int) -> float:
        n = len(maps)
        folds = max(2, min(folds, n))
        groups = np.array_split(rng_from_seed(self.seed, 7).permutation(n), folds)
        scores = []
        for held_out in groups:
            train = np.setdiff1d(np.arange(n), held_out)
            if not len(held_out) or not len(train):
                continue
            stage = fit_crf_stage(
                [maps[i] for i in train],
                [self.dataset.images[i] for i in train],
                [self.dataset.labels[i] for i in train],
                self.dataset.num_classes,
                self.config,
                self.config.crf.l2,
                inference=self.inference,
                optimizer=self.optimizer,
            )
            held = self.dataset.subset(held_out)
            _, pa = stage_accuracy(stage, [maps[i] for i in held_out], held, self.inference)
            if np.isfinite(pa):
                scores.append(pa)
        return float(np.mean(scores)) if scores else 0.0


@dataclass
class Hierarchy:
    """Greedily trained feature hierarchy and the stage features of its training images."""

    priors: List[PriorFilterSet]
    layers: List[RbmLayer]
    stages: Dict[str, List[np.ndarray]]


def train_hierarchy(hc: Sequence[np.ndarray], dataset: Dataset, config: PipelineConfig, seed: int,
                    depth: Optional[int] = None, timings: Optional[StageTimings] = None) -> Hierarchy:
    """Train the RBM layers one after another on the previous stage's output.

    Each layer's inputs are standardized per channel; with priors enabled
    the layer is seeded with PCA filters of its standardized inputs, and
    with pruning enabled redundant filters are removed before the next
    layer is trained.

    Args:
        hc: Scattering volumes of the training images
        dataset: The labeled training images (labels are used for pruning only)
        config: Pipeline configuration
        seed: Training seed
        depth: Number of layers to train (default: every configured layer)
        timings: Stage timer
    """
    timings = timings or StageTimings()
    specs = config.rbm.layers[:len(config.rbm.layers) if depth is None else depth]
    workers = config.runtime.workers
    stages: Dict[str, List[np.ndarray]] = {"HC": list(hc)}
    priors: List[PriorFilterSet] = []
    layers: List[RbmLayer] = []
    inputs = list(hc)
    for i, spec in enumerate(specs):
        name = stage_name(i + 1)
        mean, scale = fit_standardization(inputs)
        x = [standardize(v, mean, scale) for v in inputs]

        prior = None
        if config.rbm.use_priors:
            with timings.stage("priors"):
                patches = sample_patches(x, spec.filter_size, config.prior.patch_count, derive_seed(seed, 1, i))
                prior = learn_pca_filters(patches, min(spec.num_filters, patches.dimension), config.prior.method)
            priors.append(prior)

        with timings.stage("rbm"):
            layer, _ = train_layer(x, spec, prior, config.rbm.train_options(derive_seed(seed, 2, i)))
        layer = replace(layer, input_mean=mean, input_scale=scale)

        if config.prune.enabled:
            with timings.stage("prune"):
                layer, kept = prune_filters(
                    layer, x, QuickCrfEvaluator(dataset, config, derive_seed(seed, 3, i)),
                    folds=config.prune.folds,
                    tolerance=config.prune.tolerance,
                    candidates=config.prune.candidates,
                    seed=derive_seed(seed, 4, i),
                )
            logger.info(f"Layer {name}: kept {kept} of {spec.num_filters} filters")

        with timings.stage("forward"):
            inputs = map_images(lambda v: feature_forward(layer, v), x, workers)
        stages[name] = inputs
        layers.append(layer)
    return Hierarchy(priors, layers, stages)


def stage_volumes(hc: Sequence[np.ndarray], layers: Sequence[RbmLayer], names: Sequence[str],
                  workers: int = 1) -> List[np.ndarray]:
    """Stacked ``names`` stages of new images pushed through trained layers."""
    depth = max(stage_depth(name) for name in names)
    return map_images(lambda v: stack_stages(forward_stages(v, layers, depth), names), list(hc), workers)


def fit_model(train: Dataset, config: PipelineConfig, seed: int, validation: Optional[Dataset] = None,
              timings: Optional[StageTimings] = None) -> ModelBundle:
    """Train scattering + RBM hierarchy + CRF on ``train``.

    When a non-empty validation set is given and ``[crf] l2_grid`` has more
    than one value, the ridge strength with the best validation PA is kept
    (the first one on ties); otherwise ``[crf] l2`` is used.
    """
    if not len(train):
        raise DataError("cannot fit a model on an empty training set")
    timings = timings or StageTimings()
    workers = config.runtime.workers
    names = config.crf.feature_layers
    bank = build_filter_bank(config.scatter)

    with timings.stage("scatter"):
        hc = extract_hc(train.images, config.scatter, workers, bank)
    hierarchy = train_hierarchy(hc, train, config, seed, max(stage_depth(n) for n in names), timings)
    volumes = [stack_stages({k: v[i] for k, v in hierarchy.stages.items()}, names) for i in range(len(train))]

    inference = config.crf.inference()
    with timings.stage("crf"):
        if validation is not None and len(validation) and len(config.crf.l2_grid) > 1:
            val_volumes = stage_volumes(extract_hc(validation.images, config.scatter, workers, bank),
                                        hierarchy.layers, names, workers)
            best = None
            for l2 in config.crf.l2_grid:
                stage = fit_crf_stage(volumes, train.images, train.labels, train.num_classes, config, l2)
                _, pa = stage_accuracy(stage, val_volumes, validation, inference)
                logger.info(f"l2 {l2:g}: validation PA {pa:.2f}")
                if best is None or pa > best[0]:
                    best = (pa, l2, stage)
            _, l2, stage = best
        else:
            l2 = config.crf.l2
            stage = fit_crf_stage(volumes, train.images, train.labels, train.num_classes, config, l2)

    return ModelBundle(
        scatter_config=config.scatter,
        layers=hierarchy.layers,
        crf=stage.weights,
        inference=inference,
        feature_layers=names,
        crf_mean=stage.mean,
        crf_scale=stage.scale,
        class_map=train.class_map,
        priors=hierarchy.priors,
        provenance={
            "seed": int(seed),
            "dataset": train.fingerprint(),
            "train_size": len(train),
            "l2": float(l2),
            "profile": config.profile,
            "config": config_snapshot(config),
        },
    )


def evaluate(model: ModelBundle, dataset: Dataset, workers: int = 1) -> Tuple[np.ndarray, float, np.ndarray]:
    """Per-class accuracy, PA and confusion matrix of ``model`` on ``dataset``."""
    preds = model.segment_many(dataset.images, workers)
    return dataset_pixel_accuracy(preds, dataset.labels, dataset.num_classes)


def _plain(value: Any) -> Any:
    """JSON-ready copy: numpy scalars to Python, NaN to None."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return None if not np.isfinite(value) else float(value)
    return value


@dataclass
class FoldReport:
    fold: int
    train_size: int
    test_size: int
    per_class: List[float]
    pa: float
    l2: float

    def to_dict(self) -> Dict[str, Any]:
        return _plain({
            "fold": self.fold,
            "train_size": self.train_size,
            "test_size": self.test_size,
            "per_class": self.per_class,
            "pa": self.pa,
            "l2": self.l2,
        })


@dataclass
class ExperimentReport:
    """Per-class and mean pixel accuracy over folds.

    ``per_class`` averages each class over the folds where it occurs;
    ``mean_pa`` is the mean of ``per_class`` over the classes present.
    """

    command: str
    class_names: List[str]
    folds: List[FoldReport]
    config: Dict[str, Any]
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def per_class(self) -> np.ndarray:
        if not self.folds:
            return np.full(len(self.class_names), np.nan)
        table = np.array([fold.per_class for fold in self.folds], dtype=np.float64)
        present = ~np.isnan(table)
        sums = np.where(present, table, 0.0).sum(axis=0)
        counts = present.sum(axis=0)
        return np.divide(sums, counts, out=np.full(len(sums), np.nan), where=counts > 0)

    @property
    def mean_pa(self) -> float:
        per_class = self.per_class
        present = ~np.isnan(per_class)
        return float(per_class[present].mean()) if present.any() else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return _plain({
            "command": self.command,
            "class_names": self.class_names,
            "per_class": self.per_class,
            "mean_pa": self.mean_pa,
            "folds": [fold.to_dict() for fold in self.folds],
            "config": self.config,
            "extras": self.extras,
        })


def write_report(report: ExperimentReport, out_dir: Union[str, Path],
                 timings: Optional[StageTimings] = None) -> Path:
    """Write ``report.json``, ``per_class.csv`` and, if given, ``timings.json``.

    ``report.json`` holds no wall-clock data, so identical runs give
    identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    table = {
        "class": list(range(len(report.class_names))),
        "name": report.class_names,
        "accuracy": [float(v) for v in report.per_class],
    }
    for fold in report.folds:
        table[f"fold_{fold.fold}"] = [float(v) for v in fold.per_class]
    pl.DataFrame(table).write_csv(out_dir / "per_class.csv")

    if timings is not None:
        (out_dir / "timings.json").write_text(json.dumps(timings.as_dict(), indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {report.command} report (PA {report.mean_pa:.2f}) to {out_dir}")
    return path


def _class_names(dataset: Dataset) -> List[str]:
    return [dataset.class_map[c].name for c in range(dataset.num_classes)]


def _fold_datasets(dataset: Dataset, split: FoldSplit) -> Tuple[Dataset, Dataset, Dataset]:
    return dataset.subset(split.train), dataset.subset(split.validation), dataset.subset(split.test)


def run_experiment(dataset: Dataset, config: PipelineConfig, timings: Optional[StageTimings] = None,
                   on_model: Optional[Callable[[int, ModelBundle, Dataset], None]] = None) -> ExperimentReport:
    """Fit and evaluate one model per fold.

    Args:
        dataset: Labeled images
        config: Pipeline configuration (folds, fractions and seed from ``[experiment]``)
        timings: Stage timer
        on_model: Called as ``on_model(fold, model, test_set)`` after each fold

    Returns:
        ExperimentReport: Per-fold and mean test PA
    """
    timings = timings or StageTimings()
    exp = config.experiment
    splits = make_folds(len(dataset), exp.folds, exp.fractions, exp.seed)
    reports = []
    for fold, split in enumerate(splits):
        train, validation, test = _fold_datasets(dataset, split)
        model = fit_model(train, config, fold_seed(exp.seed, fold), validation, timings)
        with timings.stage("evaluate"):
            per_class, pa, _ = evaluate(model, test, config.runtime.workers)
        reports.append(FoldReport(fold, len(train), len(test), per_class.tolist(), pa, model.provenance["l2"]))
        logger.info(f"Fold {fold + 1}/{len(splits)}: test PA {pa:.2f}")
        if on_model is not None:
            on_model(fold, model, test)
    return ExperimentReport("experiment", _class_names(dataset), reports, config_snapshot(config))


def run_stage_ablation(dataset: Dataset, config: PipelineConfig,
                       timings: Optional[StageTimings] = None) -> ExperimentReport:
    """Test PA of a CRF on each feature stage, plus unary-only and majority baselines.

    Uses the first fold and ``[crf] l2`` throughout. The report's main figures
    are those of the configured ``feature_layers``; ``extras`` holds
    ``stages`` (PA per stage) and ``baselines``.
    """
    timings = timings or StageTimings()
    exp = config.experiment
    workers = config.runtime.workers
    train, _, test = _fold_datasets(dataset, make_folds(len(dataset), exp.folds, exp.fractions, exp.seed)[0])
    seed = fold_seed(exp.seed, 0)
    bank = build_filter_bank(config.scatter)
    with timings.stage("scatter"):
        hc_train = extract_hc(train.images, config.scatter, workers, bank)
        hc_test = extract_hc(test.images, config.scatter, workers, bank)
    hierarchy = train_hierarchy(hc_train, train, config, seed, timings=timings)
    test_stages = map_images(lambda v: forward_stages(v, hierarchy.layers), hc_test, workers)
    inference = config.crf.inference()

    def fit_and_score(names: Sequence[str], unary_only: bool = False) -> Tuple[np.ndarray, float]:
        volumes = [stack_stages({k: v[i] for k, v in hierarchy.stages.items()}, names) for i in range(len(train))]
        stage = fit_crf_stage(volumes, train.images, train.labels, train.num_classes, config, config.crf.l2,
                              unary_only=unary_only)
        return stage_accuracy(stage, [stack_stages(s, names) for s in test_stages], test, inference)

    stages = {}
    with timings.stage("crf"):
        for name in hierarchy.stages:
            _, stages[name] = fit_and_score([name])
            logger.info(f"Stage {name}: test PA {stages[name]:.2f}")
        per_class, pa = fit_and_score(config.crf.feature_layers)
        _, unary_pa = fit_and_score(config.crf.feature_layers, unary_only=True)

    majority = majority_label(train.labels, train.num_classes)
    _, majority_pa, _ = dataset_pixel_accuracy(
        [np.full(labels.shape, majority) for labels in test.labels], test.labels, test.num_classes)
    logger.info(f"Full model PA {pa:.2f}, unary-only {unary_pa:.2f}, majority class {majority_pa:.2f}")
    return ExperimentReport(
        "ablation",
        _class_names(dataset),
        [FoldReport(0, len(train), len(test), per_class.tolist(), pa, config.crf.l2)],
        config_snapshot(config),
        extras={"stages": stages, "baselines": {"unary_only": unary_pa, "majority": majority_pa}},
    )


def run_size_sweep(dataset: Dataset, sizes: Sequence[int], config: PipelineConfig,
                   timings: Optional[StageTimings] = None) -> Dict[int, ExperimentReport]:
    """Train on class-balanced subsets of the first fold's train split.

    Every size is fitted with the first fold's seed and evaluated on the
    full test split, so the full train size reproduces the first fold of
    :func:`run_experiment`.

    Raises:
        ConfigError: A size below the class count or above the train split
    """
    timings = timings or StageTimings()
    exp = config.experiment
    split = make_folds(len(dataset), exp.folds, exp.fractions, exp.seed)[0]
    train, validation, test = _fold_datasets(dataset, split)
    for size in sizes:
        if not dataset.num_classes <= size <= len(train):
            raise ConfigError(f"sweep size {size} must lie in [{dataset.num_classes}, {len(train)}]")
    dominant = train.dominant_labels()
    reports = {}
    for size in sizes:
        subset = train.subset(class_balanced_subset(dominant, size, dataset.num_classes, exp.seed))
        model = fit_model(subset, config, fold_seed(exp.seed, 0), validation, timings)
        with timings.stage("evaluate"):
            per_class, pa, _ = evaluate(model, test, config.runtime.workers)
        logger.info(f"Train size {size}: test PA {pa:.2f}")
        reports[int(size)] = ExperimentReport(
            "sweep",
            _class_names(dataset),
            [FoldReport(0, size, len(test), per_class.tolist(), pa, model.provenance["l2"])],
            config_snapshot(config),
            extras={"size": int(size)},
        )
    return reports


def write_sweep(reports: Dict[int, ExperimentReport], out_dir: Union[str, Path],
                timings: Optional[StageTimings] = None) -> Path:
    """Per-size reports under ``size_<n>/``, a ``sweep.csv`` summary and a ``sweep.png`` plot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    for size, report in reports.items():
        write_report(report, out_dir / f"size_{size}")
    sizes = sorted(reports)
    summary = pl.DataFrame({"size": sizes, "pa": [reports[s].mean_pa for s in sizes]})
    summary.write_csv(out_dir / "sweep.csv")
    if timings is not None:
        (out_dir / "timings.json").write_text(json.dumps(timings.as_dict(), indent=2) + "\n", encoding="utf-8")

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(sizes, summary["pa"].to_list(), marker="o")
    ax.set_xlabel("Training images")
    ax.set_ylabel("Test PA (%)")
    ax.set_title("Accuracy vs. training-set size")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "sweep.png", dpi=100)
    plt.close(fig)
    logger.info(f"Wrote sweep over sizes {sizes} to {out_dir}")
    return out_dir / "sweep.csv"
