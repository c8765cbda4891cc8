"""Grid CRF back-end: potentials, TRW inference and clique-loss training."""

from .inference import (
    Beliefs,
    InferenceOptions,
    MessageState,
    labels_from_beliefs,
    segment,
    segment_many,
    trw_infer,
    trw_infer_many,
)
from .potentials import (
    CrfWeights,
    GridGraph,
    Potentials,
    build_potentials,
    calibrate_beta,
    contrast_factors,
    labeling_energy,
)
from .training import (
    CrfDataset,
    CrfExample,
    clique_loss,
    crf_objective,
    dataset_loss_and_gradient,
    load_model,
    loss_and_gradient,
    model_chunk,
    model_from_chunk,
    save_model,
    train_crf,
)

__all__ = [
    "Beliefs",
    "CrfDataset",
    "CrfExample",
    "CrfWeights",
    "GridGraph",
    "InferenceOptions",
    "MessageState",
    "Potentials",
    "build_potentials",
    "calibrate_beta",
    "clique_loss",
    "contrast_factors",
    "crf_objective",
    "dataset_loss_and_gradient",
    "labeling_energy",
    "labels_from_beliefs",
    "load_model",
    "loss_and_gradient",
    "model_chunk",
    "model_from_chunk",
    "save_model",
    "segment",
    "segment_many",
    "train_crf",
    "trw_infer",
    "trw_infer_many",
]
