"""Datasets, experiments, model bundles and overlays."""

from .bundle import ModelBundle, load_bundle, save_bundle
from .dataset import ClassInfo, Dataset, DatasetManifest, load_dataset, read_manifest, save_dataset
from .experiment import (
    ExperimentReport,
    FoldReport,
    FoldSplit,
    class_balanced_subset,
    evaluate,
    fit_model,
    make_folds,
    run_experiment,
    run_size_sweep,
    run_stage_ablation,
    write_report,
    write_sweep,
)
from .metrics import confusion_matrix, dataset_pixel_accuracy, per_class_pixel_accuracy
from .overlay import blend_overlay, render_overlay, save_labels
from .synthetic import SyntheticSpec, generate_synthetic

__all__ = [
    "ClassInfo",
    "Dataset",
    "DatasetManifest",
    "ExperimentReport",
    "FoldReport",
    "FoldSplit",
    "ModelBundle",
    "SyntheticSpec",
    "blend_overlay",
    "class_balanced_subset",
    "confusion_matrix",
    "dataset_pixel_accuracy",
    "evaluate",
    "fit_model",
    "generate_synthetic",
    "load_bundle",
    "load_dataset",
    "make_folds",
    "per_class_pixel_accuracy",
    "read_manifest",
    "render_overlay",
    "run_experiment",
    "run_size_sweep",
    "run_stage_ablation",
    "save_bundle",
    "save_dataset",
    "save_labels",
    "write_report",
    "write_sweep",
]
