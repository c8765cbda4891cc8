"""Clique-loss training of grid CRF weights through unrolled TRW inference."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from ..container import Chunk, read_container, write_container
from ..errors import ConfigError, ContainerError, DataError
from ..monitoring import CLAMPED_BELIEFS
from ..numerics import OptimizerOptions, ensure_finite, lbfgs_minimize
from .inference import Beliefs, InferenceOptions, MessageState
from .potentials import (
    CrfWeights,
    GridGraph,
    as_feature_volume,
    contrast_factors,
    potential_tables,
    unary_design,
)

logger = logging.getLogger("gshdl.crf")

BELIEF_FLOOR = 1e-12
MODEL_TAG = "CRFW"


class CrfExample(NamedTuple):
    """Features ``(D, H, W)``, the image used for contrast, and labels (-1 = void)."""

    features: np.ndarray
    image: np.ndarray
    labels: np.ndarray


@dataclass
class _Prepared:
    design: np.ndarray
    labels: np.ndarray
    height: int
    width: int
    image: np.ndarray
    contrast: Dict[Optional[float], np.ndarray] = field(default_factory=dict)

    def contrast_for(self, beta: Optional[float]) -> np.ndarray:
        if beta not in self.contrast:
            self.contrast[beta] = contrast_factors(self.image, beta)
        return self.contrast[beta]


def _prepare(example: CrfExample, num_labels: int) -> _Prepared:
    volume = ensure_finite(as_feature_volume(example.features), "features")
    labels = np.asarray(example.labels)
    h, w = volume.shape[1:]
    if labels.shape != (h, w):
        raise DataError(f"labels {labels.shape} do not match features {(h, w)}")
    image = np.asarray(example.image, dtype=np.float64)
    if image.shape[-2:] != (h, w):
        raise DataError(f"image {image.shape} does not match features {(h, w)}")
    if labels.max(initial=-1) >= num_labels or labels.min(initial=0) < -1:
        raise DataError(f"labels must lie in [-1, {num_labels})")
    return _Prepared(unary_design(volume), labels.ravel().astype(np.int64), h, w, image)


def _counted(graph: GridGraph, labels: np.ndarray, subsample: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Masks of nodes and edges that enter the loss."""
    nodes = labels >= 0
    if subsample:
        nodes &= (graph.node_rows % 2 == 0) & (graph.node_cols % 2 == 0)
    u, v = graph.endpoints
    edges = (labels[u] >= 0) & (labels[v] >= 0)
    if subsample:
        edges &= nodes[u]
    return nodes, edges


def _loss_terms(graph: GridGraph, node: np.ndarray, edge: np.ndarray, labels: np.ndarray, subsample: bool):
    """Per-node and per-edge clique-loss terms plus the coefficients of their log-beliefs.

    Entries whose true-label belief falls below the floor are clamped; they
    contribute ``log(1e-12)`` and no gradient.
    """
    nodes, edges = _counted(graph, labels, subsample)
    u, v = graph.endpoints
    safe = np.where(labels >= 0, labels, 0)

    node_true = node[np.arange(graph.num_nodes), safe]
    edge_true = edge[np.arange(graph.num_edges), safe[u], safe[v]]
    node_weight = np.where(nodes, 1.0 - graph.rho * graph.degree, 0.0)
    edge_weight = edges.astype(np.float64)

    clamped = int(np.sum(nodes & (node_true < BELIEF_FLOOR)) + np.sum(edges & (edge_true < BELIEF_FLOOR)))
    if clamped:
        CLAMPED_BELIEFS.inc(clamped)
        logger.warning(f"Clamped {clamped} true-label beliefs at {BELIEF_FLOOR}")

    node_terms = -node_weight * np.log(np.maximum(node_true, BELIEF_FLOOR))
    edge_terms = -edge_weight * np.log(np.maximum(edge_true, BELIEF_FLOOR))
    node_weight = np.where(node_true < BELIEF_FLOOR, 0.0, node_weight)
    edge_weight = np.where(edge_true < BELIEF_FLOOR, 0.0, edge_weight)
    return node_terms, edge_terms, node_weight, edge_weight, int(nodes.sum())


def clique_loss(beliefs: Beliefs, labels: np.ndarray, subsample: bool = False) -> float:
    """``-sum_pq log mu_pq(y_p, y_q) - sum_p (1 - rho deg(p)) log mu_p(y_p)``.

    Pixels labelled -1 are void: their node term and every edge touching
    them are skipped. ``subsample`` keeps only nodes at even row and column
    and their right/down edges.

    Raises:
        DataError: Labels outside ``[-1, C)`` or of the wrong shape
    """
    h, w, c = beliefs.node_beliefs.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise DataError(f"labels {labels.shape} do not match beliefs {(h, w)}")
    if labels.max(initial=-1) >= c or labels.min(initial=0) < -1:
        raise DataError(f"labels must lie in [-1, {c})")
    graph = GridGraph(h, w, max(c, 2))
    node_terms, edge_terms, _, _, _ = _loss_terms(graph, beliefs.node_beliefs.reshape(-1, c), beliefs.edge_beliefs,
                                                  labels.ravel().astype(np.int64), subsample)
    return float(node_terms.sum() + edge_terms.sum())


def _group_loss_and_gradient(weights: CrfWeights, group: Sequence[_Prepared], inference: InferenceOptions,
                             subsample: bool) -> Tuple[float, np.ndarray, int]:
    """Summed loss and weight gradient over same-size examples run as one batched graph."""
    c = weights.num_labels
    h, w = group[0].height, group[0].width
    graph = GridGraph(h, w, c, batch=len(group))
    design = np.concatenate([item.design for item in group])
    contrast = np.concatenate([item.contrast_for(weights.beta) for item in group])
    labels = np.concatenate([item.labels for item in group])
    theta_u, tables = potential_tables(weights, design, contrast)

    state = MessageState(graph, theta_u, tables, inference)
    state.run(record=True)
    node_logits, edge_logits = state.log_beliefs()
    node = softmax(node_logits, axis=1)
    e = graph.num_edges
    edge = softmax(edge_logits.reshape(e, c * c), axis=1).reshape(e, c, c)

    node_terms, edge_terms, node_weight, edge_weight, counted = _loss_terms(graph, node, edge, labels, subsample)

    safe = np.where(labels >= 0, labels, 0)
    u, v = graph.endpoints
    g_node = node * node_weight[:, None]
    g_node[np.arange(graph.num_nodes), safe] -= node_weight
    g_edge = edge * edge_weight[:, None, None]
    g_edge[np.arange(e), safe[u], safe[v]] -= edge_weight

    g_theta, g_tables = state.backward(g_node, g_edge)

    # reduce image by image
    upper = np.triu_indices(c, k=1)
    per_node = graph.pixels
    per_edge = graph.edges_per_image
    loss = 0.0
    gradient = np.zeros(CrfWeights.vector_size(c, design.shape[1] - 1))
    for b in range(graph.batch):
        nodes = slice(b * per_node, (b + 1) * per_node)
        edges = slice(b * per_edge, (b + 1) * per_edge)
        loss += float(node_terms[nodes].sum() + edge_terms[edges].sum())
        g_unary = -g_theta[nodes].T @ design[nodes]
        g_potts = np.tensordot(contrast[edges], g_tables[edges], axes=1) if per_edge else np.zeros((c, c))
        gradient += np.concatenate([g_unary.ravel(), g_potts[upper] + g_potts.T[upper]])
    return loss, gradient, counted


def _as_inference(inference: Union[int, InferenceOptions]) -> InferenceOptions:
    return inference if isinstance(inference, InferenceOptions) else InferenceOptions(iterations=int(inference))


def loss_and_gradient(weights: CrfWeights, example: CrfExample,
                      inference_iterations: Union[int, InferenceOptions] = 20,
                      subsample: bool = False) -> Tuple[float, np.ndarray]:
    """Clique loss of one example and its gradient w.r.t. ``weights.to_vector()``.

    The gradient is exact for the unrolled, damped inference run for the
    given number of iterations.
    """
    prepared = _prepare(example, weights.num_labels)
    loss, gradient, _ = _group_loss_and_gradient(weights, [prepared], _as_inference(inference_iterations), subsample)
    return loss, gradient


class CrfDataset:
    """Examples prepared once and grouped by image size for batched inference."""

    def __init__(self, examples: Sequence[CrfExample], num_labels: int, inference: InferenceOptions,
                 subsample: bool = False, workers: int = 1):
        if not examples:
            raise DataError("cannot train a CRF on an empty dataset")
        self.num_labels = num_labels
        self.inference = inference
        self.subsample = subsample
        self.workers = max(1, workers)
        prepared = [_prepare(example, num_labels) for example in examples]
        features = {p.design.shape[1] - 1 for p in prepared}
        if len(features) != 1:
            raise DataError(f"examples disagree on feature count: {sorted(features)}")
        self.num_features = features.pop()
        groups: Dict[Tuple[int, int], List[_Prepared]] = {}
        for item in prepared:
            groups.setdefault((item.height, item.width), []).append(item)
        self.groups = [groups[key] for key in sorted(groups)]
        self.counted_nodes = 0

    def loss_and_gradient(self, weights: CrfWeights) -> Tuple[float, np.ndarray]:
        """Summed loss and gradient, reduced in a fixed group order."""
        def run(group):
            return _group_loss_and_gradient(weights, group, self.inference, self.subsample)

        if self.workers > 1 and len(self.groups) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(run, self.groups))
        else:
            results = [run(group) for group in self.groups]
        loss = 0.0
        gradient = np.zeros(CrfWeights.vector_size(self.num_labels, self.num_features))
        counted = 0
        for group_loss, group_gradient, group_counted in results:
            loss += group_loss
            gradient += group_gradient
            counted += group_counted
        self.counted_nodes = counted
        return loss, gradient


def dataset_loss_and_gradient(weights: CrfWeights, examples: Sequence[CrfExample],
                              inference_iterations: Union[int, InferenceOptions] = 20,
                              subsample: bool = False) -> Tuple[float, np.ndarray]:
    """Sum of per-example losses and gradients."""
    dataset = CrfDataset(examples, weights.num_labels, _as_inference(inference_iterations), subsample)
    return dataset.loss_and_gradient(weights)


def crf_objective(dataset: CrfDataset, l2: float, beta: Optional[float] = None,
                  unary_only: bool = False) -> Callable[[np.ndarray], Tuple[float, np.ndarray]]:
    """``w -> (loss / counted pixels + l2 ||w||^2, gradient)`` for LBFGS.

    With ``unary_only`` the pairwise block of the gradient is zeroed, so
    pairwise weights stay at their starting values.
    """
    frozen = np.zeros(CrfWeights.vector_size(dataset.num_labels, dataset.num_features), dtype=bool)
    if unary_only:
        frozen[dataset.num_labels * (dataset.num_features + 1):] = True
    def objective(vector: np.ndarray) -> Tuple[float, np.ndarray]:
        weights = CrfWeights.from_vector(vector, dataset.num_labels, dataset.num_features, beta)
        loss, gradient = dataset.loss_and_gradient(weights)
        scale = 1.0 / max(dataset.counted_nodes, 1)
        gradient = gradient * scale + 2.0 * l2 * vector
        gradient[frozen] = 0.0
        return loss * scale + l2 * float(vector @ vector), gradient

    return objective


def train_crf(dataset: Sequence[CrfExample], opts: Optional[OptimizerOptions] = None,
              inference_iterations: Union[int, InferenceOptions] = 20, l2: float = 1e-4, *,
              num_labels: Optional[int] = None, beta: Optional[float] = None, subsample: bool = False,
              workers: int = 1, initial: Optional[CrfWeights] = None, unary_only: bool = False) -> CrfWeights:
    """Fit CRF weights by LBFGS on the mean clique loss plus ``l2 ||w||^2``.

    Args:
        dataset: Labeled examples; sizes may differ between examples
        opts: LBFGS options
        inference_iterations: Unrolled TRW iterations, or full inference options
        l2: Ridge coefficient
        num_labels: Class count; defaults to the largest label + 1
        beta: Fixed contrast coefficient, or None for per-image calibration
        subsample: Evaluate the loss on the stride-2 subgrid
        workers: Threads used across image-size groups
        initial: Starting weights (zeros by default)
        unary_only: Keep the pairwise weights at their starting values

    Returns:
        CrfWeights: The final LBFGS iterate
    """
    if l2 < 0:
        raise ConfigError(f"l2 must be >= 0, got {l2}")
    if not dataset:
        raise DataError("cannot train a CRF on an empty dataset")
    if num_labels is None:
        num_labels = max(2, int(max(np.max(example.labels) for example in dataset)) + 1)
    inference = _as_inference(inference_iterations)
    prepared = CrfDataset(dataset, num_labels, inference, subsample, workers)
    start = initial if initial is not None else CrfWeights.zeros(num_labels, prepared.num_features, beta)
    result = lbfgs_minimize(crf_objective(prepared, l2, beta, unary_only), start.to_vector(), opts)
    logger.info(
        f"CRF training on {len(dataset)} images: objective {result.trace[0]:.5f} -> {result.trace[-1]:.5f} "
        f"in {len(result.trace) - 1} iterations (converged={result.converged})"
    )
    return CrfWeights.from_vector(result.argmin, num_labels, prepared.num_features, beta)


def model_chunk(weights: CrfWeights, inference: InferenceOptions) -> Chunk:
    """Container chunk (tag ``CRFW``) for trained weights and their inference settings."""
    return Chunk(
        tag=MODEL_TAG,
        header={
            "num_labels": weights.num_labels,
            "num_features": weights.num_features,
            "beta": weights.beta,
            "iterations": inference.iterations,
            "damping": inference.damping,
            "schedule": inference.schedule,
        },
        arrays={"unary": weights.unary, "pairwise": weights.pairwise},
    )


def model_from_chunk(chunk: Chunk) -> Tuple[CrfWeights, InferenceOptions]:
    """Inverse of :func:`model_chunk`."""
    if chunk.tag != MODEL_TAG:
        raise ContainerError(f"expected a {MODEL_TAG} chunk, got {chunk.tag}")
    h = chunk.header
    weights = CrfWeights(chunk.arrays["unary"], chunk.arrays["pairwise"], h["beta"])
    return weights, InferenceOptions(h["iterations"], h["damping"], h["schedule"])


def save_model(path: Union[str, Path], weights: CrfWeights, inference: InferenceOptions) -> None:
    write_container(path, [model_chunk(weights, inference)])


def load_model(path: Union[str, Path]) -> Tuple[CrfWeights, InferenceOptions]:
    for chunk in read_container(path):
        if chunk.tag == MODEL_TAG:
            return model_from_chunk(chunk)
    raise ContainerError(f"{path} holds no {MODEL_TAG} chunk")
