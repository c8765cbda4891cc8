"""Convolutional Gaussian-Bernoulli RBM layers (L3-L6).

Energy of a layer with filters ``W`` (K, C, k, k), hidden biases ``b``,
visible biases ``c`` and visible scale ``sigma``::

    E(v, h) = sum_p (v_p - c)^2 / (2 sigma^2) - sum_k h_k ((W~_k * v) / sigma^2 + b_k)

where ``W~ * v`` is the correlation of ``v`` with ``W`` at every pixel.
Convolutions are same-size with the symmetric-reflect boundary, so every
layer keeps the input resolution.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

from .container import Chunk, read_container, write_container
from .errors import ConfigError, ContainerError, DataError, NumericalError
from .monitoring import RBM_EPOCHS
from .numerics import conv2d_bank, ensure_finite, rng_from_seed, window_statistics
from .pca_prior import PriorFilterSet

logger = logging.getLogger("gshdl.conv_rbm")

INIT_RMS = 0.01
LAYER_TAG = "CRBM"

# Layer shapes for the full and the reduced desk-scale profiles.
FULL_LAYER_SPECS = ((200, 3), (150, 5), (100, 7), (50, 9))
DESK_LAYER_SPECS = ((32, 3), (24, 5), (16, 7), (8, 9))

Evaluator = Callable[[List[np.ndarray], int], float]


@dataclass(frozen=True)
class LayerSpec:
    """Number and spatial size of a layer's filters."""

    num_filters: int
    filter_size: int

    def __post_init__(self) -> None:
        if self.num_filters < 1:
            raise ConfigError(f"a layer needs at least one filter, got {self.num_filters}")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ConfigError(f"filter size must be odd and positive, got {self.filter_size}")


@dataclass(frozen=True)
class TrainOptions:
    """Contrastive-divergence hyperparameters."""

    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.01
    cd_steps: int = 1
    momentum: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.cd_steps < 1:
            raise ConfigError(f"cd_steps must be >= 1, got {self.cd_steps}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class ConvergenceTrace:
    """Per-epoch mean reconstruction error and wall-clock seconds."""

    reconstruction_errors: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.reconstruction_errors)

    def epochs_to_reach(self, threshold: float) -> Optional[int]:
        """1-based epoch at which the error first drops to ``threshold``, or None."""
        for epoch, error in enumerate(self.reconstruction_errors, start=1):
            if error <= threshold:
                return epoch
        return None


@dataclass
class RbmLayer:
    """Parameters of one convolutional Gaussian-Bernoulli RBM layer.

    ``input_mean``/``input_scale`` hold the per-channel standardization
    fitted on the layer's training inputs; ``selected`` lists the original
    filter indices kept by pruning (None when unpruned).
    """

    filters: np.ndarray
    hidden_biases: np.ndarray
    visible_bias: np.ndarray
    sigma: float = 1.0
    init_mode: str = "random"
    input_mean: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None
    selected: Optional[List[int]] = None
    trace: ConvergenceTrace = field(default_factory=ConvergenceTrace)
    velocity: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.filters.ndim != 4 or self.filters.shape[0] < 1:
            raise ConfigError(f"filters must be (K, C, k, k) with K >= 1, got {self.filters.shape}")

    @property
    def num_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def in_channels(self) -> int:
        return self.filters.shape[1]

    @property
    def filter_size(self) -> int:
        return self.filters.shape[2]

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(self.num_filters, self.filter_size)

    def prepare(self, v: np.ndarray) -> np.ndarray:
        """Standardize a raw input volume with the layer's fitted statistics."""
        v = np.asarray(v, dtype=np.float64)
        if self.input_mean is None or self.input_scale is None:
            return v
        return (v - self.input_mean[:, None, None]) / self.input_scale[:, None, None]

    def encode(self, v: np.ndarray) -> np.ndarray:
        """Hidden probabilities for a raw (unstandardized) input volume."""
        return feature_forward(self, self.prepare(v))


def fit_standardization(volumes: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over a list of ``(C, H, W)`` volumes."""
    if not volumes:
        raise DataError("cannot standardize an empty training set")
    stacked = np.concatenate([np.asarray(v, dtype=np.float64).reshape(v.shape[0], -1) for v in volumes], axis=1)
    mean = stacked.mean(axis=1)
    scale = stacked.std(axis=1)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def random_layer(spec: LayerSpec, in_channels: int, seed: int) -> RbmLayer:
    """Layer with Gaussian(0, 0.01^2) filters and zero biases."""
    rng = rng_from_seed(seed, 0)
    filters = rng.normal(0.0, INIT_RMS, size=(spec.num_filters, in_channels, spec.filter_size, spec.filter_size))
    return RbmLayer(
        filters=filters,
        hidden_biases=np.zeros(spec.num_filters),
        visible_bias=np.zeros(in_channels),
        init_mode="random",
    )


def init_from_priors(priors: PriorFilterSet, spec: LayerSpec, seed: int) -> RbmLayer:
    """Seed a layer's filters with unflagged PCA priors scaled to RMS 0.01.

    Flagged (checkerboard) priors are skipped and replaced by unflagged
    reserve eigenvectors; any filters still missing are drawn from
    Gaussian(0, 0.01^2).

    Raises:
        ConfigError: Prior filter size differs from ``spec.filter_size``
    """
    channels, z1, z2 = priors.filter_shape
    if z1 != spec.filter_size or z2 != spec.filter_size:
        raise ConfigError(
            f"prior filters are {z1}x{z2}, layer expects {spec.filter_size}x{spec.filter_size}"
        )
    layer = random_layer(spec, channels, seed)
    seeds = priors.seeding_filters()[:spec.num_filters]
    rms = np.sqrt(np.mean(seeds.reshape(len(seeds), -1) ** 2, axis=1))
    rms[rms == 0] = 1.0
    layer.filters[:len(seeds)] = seeds * (INIT_RMS / rms)[:, None, None, None]
    layer.init_mode = "prior"
    logger.debug(f"Seeded {len(seeds)} of {spec.num_filters} filters from priors")
    return layer


def _check_volume(layer: RbmLayer, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        v = v[np.newaxis]
    if v.ndim != 3 or v.shape[0] != layer.in_channels:
        raise DataError(f"layer expects {layer.in_channels} input channels, got volume of shape {v.shape}")
    return ensure_finite(v, "visible volume")


def _hidden_input(layer: RbmLayer, v: np.ndarray) -> np.ndarray:
    activation = conv2d_bank(v, layer.filters, correlate=True) / layer.sigma ** 2
    return activation + layer.hidden_biases[:, None, None]


def hidden_given_visible(layer: RbmLayer, v: np.ndarray, rng: Optional[np.random.Generator] = None,
                         seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Hidden probabilities ``logistic((W~ * v) / sigma^2 + b)`` and a Bernoulli sample.

    Raises:
        DataError: Non-finite or wrongly shaped ``v``
    """
    v = _check_volume(layer, v)
    rng = rng or rng_from_seed(seed)
    probabilities = expit(_hidden_input(layer, v))
    sample = (rng.random(probabilities.shape) < probabilities).astype(np.float64)
    return probabilities, sample


def _visible_mean(layer: RbmLayer, h: np.ndarray) -> np.ndarray:
    bank = np.ascontiguousarray(layer.filters.transpose(1, 0, 2, 3))
    return conv2d_bank(h, bank) + layer.visible_bias[:, None, None]


def visible_given_hidden(layer: RbmLayer, h: np.ndarray, rng: Optional[np.random.Generator] = None,
                         seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Visible mean ``c + sum_k W_k * h_k`` and a Gaussian sample with std ``sigma``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3 or h.shape[0] != layer.num_filters:
        raise DataError(f"layer expects {layer.num_filters} hidden maps, got shape {h.shape}")
    rng = rng or rng_from_seed(seed)
    mean = _visible_mean(layer, ensure_finite(h, "hidden maps"))
    return mean, mean + layer.sigma * rng.standard_normal(mean.shape)


def feature_forward(layer: RbmLayer, v: np.ndarray) -> np.ndarray:
    """Deterministic hidden probabilities at full resolution, ``(K, H, W)``."""
    return expit(_hidden_input(layer, _check_volume(layer, v)))


def free_energy(layer: RbmLayer, v: np.ndarray) -> float:
    """``F(v) = sum (v - c)^2 / (2 sigma^2) - sum log(1 + exp(hidden input))``."""
    v = _check_volume(layer, v)
    quadratic = np.sum((v - layer.visible_bias[:, None, None]) ** 2) / (2.0 * layer.sigma ** 2)
    return float(quadratic + np.sum(log_expit(-_hidden_input(layer, v))))


def _statistics(layer: RbmLayer, v: np.ndarray, h: np.ndarray):
    k = layer.filter_size
    grad_w = window_statistics(v, h, k, k) / layer.sigma ** 2
    grad_b = h.sum(axis=(1, 2))
    grad_c = (v - layer.visible_bias[:, None, None]).sum(axis=(1, 2)) / layer.sigma ** 2
    return grad_w, grad_b, grad_c


def cd_k_update(layer: RbmLayer, batch: Sequence[np.ndarray], opts: TrainOptions,
                rng: Optional[np.random.Generator] = None) -> Tuple[RbmLayer, float]:
    """One contrastive-divergence step with momentum on a mini-batch.

    The gradient is averaged over batch items and pixels. The returned error
    is the mean squared difference between the batch and its mean-field
    one-step reconstruction under the parameters before the update.

    Raises:
        DataError: Empty batch
        NumericalError: Non-finite reconstruction error or parameters; the
            update is rejected and ``last_iterate`` holds the input layer
    """
    if not batch:
        raise DataError("cd_k_update needs a nonempty batch")
    rng = rng or rng_from_seed(opts.seed)

    grads = [np.zeros_like(layer.filters), np.zeros_like(layer.hidden_biases), np.zeros_like(layer.visible_bias)]
    squared_error = 0.0
    pixels = 0
    for v0 in batch:
        v0 = _check_volume(layer, v0)
        ph0, h = hidden_given_visible(layer, v0, rng)
        reconstruction = _visible_mean(layer, ph0)
        squared_error += float(np.sum((reconstruction - v0) ** 2))
        pixels += v0.size

        positive = _statistics(layer, v0, ph0)
        vk = v0
        for _ in range(opts.cd_steps):
            _, vk = visible_given_hidden(layer, h, rng)
            phk, h = hidden_given_visible(layer, vk, rng)
        negative = _statistics(layer, vk, phk)
        scale = 1.0 / (len(batch) * v0.shape[1] * v0.shape[2])
        for g, pos, neg in zip(grads, positive, negative):
            g += scale * (pos - neg)

    error = squared_error / pixels
    if not np.isfinite(error):
        raise NumericalError("reconstruction error is not finite; update rejected", last_iterate=layer)

    velocity = layer.velocity or tuple(np.zeros_like(g) for g in grads)
    velocity = tuple(opts.momentum * vel + opts.learning_rate * g for vel, g in zip(velocity, grads))
    params = [layer.filters + velocity[0], layer.hidden_biases + velocity[1], layer.visible_bias + velocity[2]]
    if not all(np.all(np.isfinite(p)) for p in params):
        raise NumericalError("parameters became non-finite; update rejected", last_iterate=layer)

    updated = replace(layer, filters=params[0], hidden_biases=params[1], visible_bias=params[2], velocity=velocity)
    return updated, error


def train_layer(features: Sequence[np.ndarray], spec: LayerSpec, priors: Optional[PriorFilterSet],
                opts: TrainOptions) -> Tuple[RbmLayer, ConvergenceTrace]:
    """Greedy training of one layer by shuffled mini-batch CD.

    Args:
        features: Standardized input volumes ``(C, H, W)``
        spec: Filter count and size
        priors: PCA priors for initialization, or None for random filters
        opts: CD options; training is bit-reproducible from ``opts.seed``

    Returns:
        Tuple[RbmLayer, ConvergenceTrace]: Trained layer and its trace
    """
    if not features:
        raise DataError("cannot train a layer without inputs")
    in_channels = np.asarray(features[0]).shape[0]
    if priors is not None:
        if priors.filter_shape[0] != in_channels:
            raise ConfigError(f"priors have {priors.filter_shape[0]} channels, inputs have {in_channels}")
        layer = init_from_priors(priors, spec, opts.seed)
    else:
        layer = random_layer(spec, in_channels, opts.seed)

    trace = ConvergenceTrace()
    order_rng = rng_from_seed(opts.seed, 1)
    for epoch in range(opts.epochs):
        started = time.perf_counter()
        order = order_rng.permutation(len(features))
        weighted_error = 0.0
        for batch_index, start in enumerate(range(0, len(order), opts.batch_size)):
            batch = [features[i] for i in order[start:start + opts.batch_size]]
            layer, error = cd_k_update(layer, batch, opts, rng_from_seed(opts.seed, 2, epoch, batch_index))
            weighted_error += error * len(batch)
        trace.reconstruction_errors.append(weighted_error / len(features))
        trace.epoch_seconds.append(time.perf_counter() - started)
        RBM_EPOCHS.inc()
        logger.debug(f"{layer.init_mode} layer {spec}: epoch {epoch + 1}/{opts.epochs} "
                     f"error {trace.reconstruction_errors[-1]:.5f}")

    layer = replace(layer, trace=trace, velocity=None)
    if trace.reconstruction_errors:
        logger.info(f"Trained {spec.num_filters} {spec.filter_size}x{spec.filter_size} filters "
                    f"({layer.init_mode} init), final error {trace.reconstruction_errors[-1]:.5f}")
    return layer, trace


def spread_order(filters: np.ndarray) -> List[int]:
    """Filter indices ordered by farthest-point selection on cosine distance.

    Starts from the largest-norm filter and repeatedly adds the filter least
    similar to any already chosen; exact duplicates therefore come last.
    """
    flat = filters.reshape(len(filters), -1)
    norms = np.linalg.norm(flat, axis=1)
    unit = flat / np.where(norms > 0, norms, 1.0)[:, None]
    similarity = np.abs(unit @ unit.T)
    order = [int(np.argmax(norms))]
    closest = similarity[order[0]].copy()
    closest[order[0]] = np.inf
    for _ in range(len(filters) - 1):
        candidate = int(np.argmin(closest))
        order.append(candidate)
        closest = np.maximum(closest, similarity[candidate])
        closest[order] = np.inf
    return order


def select_filters(layer: RbmLayer, subset: Sequence[int]) -> RbmLayer:
    """Layer restricted to ``subset`` (indices into the current filters)."""
    subset = sorted(int(i) for i in subset)
    original = layer.selected if layer.selected is not None else list(range(layer.num_filters))
    return replace(
        layer,
        filters=layer.filters[subset].copy(),
        hidden_biases=layer.hidden_biases[subset].copy(),
        selected=[original[i] for i in subset],
        velocity=None,
    )


def prune_filters(layer: RbmLayer, inputs: Sequence[np.ndarray], evaluator: Evaluator, folds: int = 5,
                  tolerance: float = 0.5, candidates: int = 3, seed: int = 0) -> Tuple[RbmLayer, int]:
    """Remove redundant filters while keeping cross-validated accuracy.

    Subset sizes are searched by bisection between 1 and K. Each size is
    scored by the best of ``candidates`` subsets: the farthest-point spread
    of the filters plus random subsets. The smallest size whose best score
    reaches ``full score - tolerance`` is kept.

    Args:
        layer: Trained layer
        inputs: Standardized input volumes of the labeled training images
        evaluator: ``evaluator(feature_maps, folds) -> PA`` (percent)
        folds: Cross-validation folds passed to the evaluator
        tolerance: Allowed PA loss in points
        candidates: Subsets scored per size
        seed: Seed for the random subsets

    Returns:
        Tuple[RbmLayer, int]: Pruned layer and the selected filter count
    """
    maps = [feature_forward(layer, v) for v in inputs]
    total = layer.num_filters
    full_score = evaluator(maps, folds)
    target = full_score - tolerance
    logger.info(f"Pruning {total} filters: full-set PA {full_score:.2f}, target {target:.2f}")

    spread = spread_order(layer.filters)
    rng = rng_from_seed(seed, 3)
    best_subset = list(range(total))
    lo, hi = 1, total
    while lo < hi:
        size = (lo + hi) // 2
        subsets = [sorted(spread[:size])]
        subsets += [sorted(rng.choice(total, size=size, replace=False).tolist()) for _ in range(candidates - 1)]
        scores = [evaluator([m[s] for m in maps], folds) for s in subsets]
        best = int(np.argmax(scores))
        logger.debug(f"Pruning size {size}: best PA {scores[best]:.2f}")
        if scores[best] >= target:
            hi = size
            best_subset = subsets[best]
        else:
            lo = size + 1

    if hi == total:
        best_subset = list(range(total))
    pruned = select_filters(layer, best_subset)
    logger.info(f"Selected {hi} of {total} filters")
    return pruned, hi


def layer_chunk(layer: RbmLayer, name: str = "") -> Chunk:
    """Container chunk (tag ``CRBM``) for a layer."""
    arrays = {
        "filters": layer.filters,
        "hidden_biases": layer.hidden_biases,
        "visible_bias": layer.visible_bias,
        "trace_errors": np.asarray(layer.trace.reconstruction_errors, dtype=np.float64),
        "trace_seconds": np.asarray(layer.trace.epoch_seconds, dtype=np.float64),
    }
    if layer.input_mean is not None and layer.input_scale is not None:
        arrays["input_mean"] = layer.input_mean
        arrays["input_scale"] = layer.input_scale
    header = {
        "name": name,
        "num_filters": layer.num_filters,
        "filter_size": layer.filter_size,
        "sigma": float(layer.sigma),
        "init_mode": layer.init_mode,
        "selected": None if layer.selected is None else [int(i) for i in layer.selected],
    }
    return Chunk(tag=LAYER_TAG, header=header, arrays=arrays)


def layer_from_chunk(chunk: Chunk) -> RbmLayer:
    """Inverse of :func:`layer_chunk`."""
    if chunk.tag != LAYER_TAG:
        raise ContainerError(f"expected a {LAYER_TAG} chunk, got {chunk.tag}")
    a, h = chunk.arrays, chunk.header
    return RbmLayer(
        filters=a["filters"],
        hidden_biases=a["hidden_biases"],
        visible_bias=a["visible_bias"],
        sigma=h["sigma"],
        init_mode=h["init_mode"],
        input_mean=a.get("input_mean"),
        input_scale=a.get("input_scale"),
        selected=h["selected"],
        trace=ConvergenceTrace(a["trace_errors"].tolist(), a["trace_seconds"].tolist()),
    )


def save_layers(path: Union[str, Path], layers: Sequence[RbmLayer]) -> None:
    """Write layers to a container file, one ``CRBM`` chunk per layer."""
    write_container(path, [layer_chunk(layer, name=f"L{3 + i}") for i, layer in enumerate(layers)])


def load_layers(path: Union[str, Path]) -> List[RbmLayer]:
    """Read every ``CRBM`` chunk of a container file."""
    return [layer_from_chunk(c) for c in read_container(path) if c.tag == LAYER_TAG]
