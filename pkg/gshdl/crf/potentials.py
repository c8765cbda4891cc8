"""Pixel-grid CRF structure: graph, weights and potentials.

Undirected edges of an ``H x W`` grid are numbered horizontal-first (row
major over ``(y, x < W-1)``), then vertical (row major over ``(y < H-1, x)``).
Each edge ``e`` joins ``u < v``; the directed message ``u -> v`` has index
``e`` and ``v -> u`` has index ``e + E``. A graph with ``batch > 1`` is the
disjoint union of ``batch`` identical grids.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from ..errors import ConfigError, DataError, DimensionError
from ..numerics import ensure_finite

logger = logging.getLogger("gshdl.crf")

SCHEDULES = ("sequential", "parallel")


@dataclass(frozen=True)
class GridGraph:
    """4-connected grid (right and down neighbours)."""

    height: int
    width: int
    num_labels: int = 2
    batch: int = 1

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1 or self.batch < 1:
            raise DimensionError(f"invalid grid {self.batch}x{self.height}x{self.width}")
        if self.num_labels < 2:
            raise ConfigError(f"a CRF needs at least 2 labels, got {self.num_labels}")

    @property
    def pixels(self) -> int:
        return self.height * self.width

    @property
    def num_nodes(self) -> int:
        return self.batch * self.pixels

    @property
    def edges_per_image(self) -> int:
        return 2 * self.pixels - self.height - self.width

    @property
    def num_edges(self) -> int:
        return self.batch * self.edges_per_image

    @property
    def rho(self) -> float:
        """Uniform edge-appearance probability ``(HW - 1) / (2HW - H - W)``; 1 without edges."""
        if self.edges_per_image == 0:
            return 1.0
        return (self.pixels - 1) / self.edges_per_image

    @cached_property
    def endpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(u, v)`` node indices of every undirected edge."""
        index = np.arange(self.pixels).reshape(self.height, self.width)
        u = np.concatenate([index[:, :-1].ravel(), index[:-1, :].ravel()])
        v = np.concatenate([index[:, 1:].ravel(), index[1:, :].ravel()])
        offsets = self.pixels * np.arange(self.batch)[:, None]
        return (u[None, :] + offsets).ravel(), (v[None, :] + offsets).ravel()

    @cached_property
    def src(self) -> np.ndarray:
        u, v = self.endpoints
        return np.concatenate([u, v])

    @cached_property
    def dst(self) -> np.ndarray:
        u, v = self.endpoints
        return np.concatenate([v, u])

    @cached_property
    def reverse(self) -> np.ndarray:
        """Index of the opposite directed edge."""
        e = self.num_edges
        return np.concatenate([np.arange(e, 2 * e), np.arange(e)])

    @cached_property
    def incoming(self) -> np.ndarray:
        """``(N, 4)`` directed edges into each node, padded with the index ``2E``."""
        padded = np.full((self.num_nodes, 4), 2 * self.num_edges, dtype=np.int64)
        order = np.argsort(self.dst, kind="stable")
        targets = self.dst[order]
        starts = np.searchsorted(targets, np.arange(self.num_nodes))
        padded[targets, np.arange(len(order)) - starts[targets]] = order
        return padded

    @cached_property
    def degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_nodes)

    @cached_property
    def node_rows(self) -> np.ndarray:
        return np.tile(np.repeat(np.arange(self.height), self.width), self.batch)

    @cached_property
    def node_cols(self) -> np.ndarray:
        return np.tile(np.tile(np.arange(self.width), self.height), self.batch)

    def schedule(self, kind: str = "sequential") -> Tuple[np.ndarray, ...]:
        """Directed-edge groups updated together, in order, per iteration.

        ``sequential`` is a forward raster sweep (messages to right and down
        neighbours) followed by a backward raster sweep (left and up). Nodes
        on one anti-diagonal never exchange messages within a sweep, so each
        anti-diagonal is one group and the result equals the node-by-node
        raster order. ``parallel`` updates every message at once.
        """
        if kind == "parallel":
            return (np.arange(2 * self.num_edges),) if self.num_edges else ()
        if kind != "sequential":
            raise ConfigError(f"unknown message schedule {kind!r}; expected one of {SCHEDULES}")
        return self._raster_schedule

    @cached_property
    def _raster_schedule(self) -> Tuple[np.ndarray, ...]:
        u, v = self.endpoints
        diagonal = self.node_rows + self.node_cols
        diag_u, diag_v = diagonal[u], diagonal[v]
        last = self.height + self.width - 2
        groups = []
        for k in range(last + 1):
            group = np.flatnonzero(diag_u == k)
            if len(group):
                groups.append(group)
        for k in range(last, -1, -1):
            group = np.flatnonzero(diag_v == k)
            if len(group):
                groups.append(group + self.num_edges)
        return tuple(groups)


@dataclass
class CrfWeights:
    """Per-label linear unaries and a symmetric contrast-sensitive Potts matrix.

    ``unary`` is ``(C, D + 1)`` (last column is the bias); ``pairwise`` is a
    symmetric ``(C, C)`` matrix whose diagonal is ignored. ``beta`` None
    calibrates the contrast coefficient per image.
    """

    unary: np.ndarray
    pairwise: np.ndarray
    beta: Optional[float] = None

    def __post_init__(self) -> None:
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.pairwise = np.asarray(self.pairwise, dtype=np.float64)
        c = self.unary.shape[0]
        if self.unary.ndim != 2 or self.pairwise.shape != (c, c):
            raise DimensionError(f"unary {self.unary.shape} and pairwise {self.pairwise.shape} do not agree")
        if not np.allclose(self.pairwise, self.pairwise.T, rtol=0, atol=1e-12):
            raise DataError("pairwise weight matrix must be symmetric")
        if self.beta is not None and not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        ensure_finite(self.unary, "unary weights")
        ensure_finite(self.pairwise, "pairwise weights")

    @property
    def num_labels(self) -> int:
        return self.unary.shape[0]

    @property
    def num_features(self) -> int:
        return self.unary.shape[1] - 1

    @classmethod
    def zeros(cls, num_labels: int, num_features: int, beta: Optional[float] = None) -> "CrfWeights":
        return cls(np.zeros((num_labels, num_features + 1)), np.zeros((num_labels, num_labels)), beta)

    @staticmethod
    def vector_size(num_labels: int, num_features: int) -> int:
        return num_labels * (num_features + 1) + num_labels * (num_labels - 1) // 2

    def to_vector(self) -> np.ndarray:
        """``[unary row-major | pairwise upper triangle]``."""
        upper = np.triu_indices(self.num_labels, k=1)
        return np.concatenate([self.unary.ravel(), self.pairwise[upper]])

    @classmethod
    def from_vector(cls, vector: np.ndarray, num_labels: int, num_features: int,
                    beta: Optional[float] = None) -> "CrfWeights":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (cls.vector_size(num_labels, num_features),):
            raise DimensionError(f"weight vector of shape {vector.shape} does not fit C={num_labels}, D={num_features}")
        split = num_labels * (num_features + 1)
        pairwise = np.zeros((num_labels, num_labels))
        upper = np.triu_indices(num_labels, k=1)
        pairwise[upper] = vector[split:]
        pairwise = pairwise + pairwise.T
        return cls(vector[:split].reshape(num_labels, num_features + 1), pairwise, beta)

    def permuted(self, permutation: np.ndarray) -> "CrfWeights":
        """Weights with label ``permutation[i]`` taking the role of label ``i``."""
        permutation = np.asarray(permutation)
        unary = np.empty_like(self.unary)
        unary[permutation] = self.unary
        pairwise = np.empty_like(self.pairwise)
        pairwise[np.ix_(permutation, permutation)] = self.pairwise
        return CrfWeights(unary, pairwise, self.beta)


@dataclass
class Potentials:
    """Negative log-potentials of one image.

    ``unary`` is ``(H, W, C)``; ``pairwise`` is ``(E, C, C)`` indexed
    ``[edge, label_u, label_v]``; ``contrast`` keeps the per-edge factor
    ``exp(-beta ||image(u) - image(v)||^2)`` used to build ``pairwise``.
    """

    unary: np.ndarray
    pairwise: np.ndarray
    contrast: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        h, w, c = self.unary.shape
        expected = 2 * h * w - h - w
        if self.pairwise.shape != (expected, c, c):
            raise DimensionError(f"pairwise tables {self.pairwise.shape} do not fit a {h}x{w} grid with {c} labels")
        ensure_finite(self.unary, "unary potentials")
        ensure_finite(self.pairwise, "pairwise potentials")

    @property
    def graph(self) -> GridGraph:
        h, w, c = self.unary.shape
        return GridGraph(h, w, c)


def as_feature_volume(features) -> np.ndarray:
    """``(D, H, W)`` float volume from an array or a FeatureStack."""
    volume = features.channels() if hasattr(features, "channels") else features
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim == 2:
        volume = volume[np.newaxis]
    if volume.ndim != 3:
        raise DimensionError(f"features must be (D, H, W), got {volume.shape}")
    return volume


def _image_planes(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[np.newaxis] if image.ndim == 2 else image


def squared_differences(image: np.ndarray) -> np.ndarray:
    """``||image(u) - image(v)||^2`` over channels for every edge, in edge order."""
    planes = _image_planes(image)
    horizontal = np.sum((planes[:, :, 1:] - planes[:, :, :-1]) ** 2, axis=0).ravel()
    vertical = np.sum((planes[:, 1:, :] - planes[:, :-1, :]) ** 2, axis=0).ravel()
    return np.concatenate([horizontal, vertical])


def calibrate_beta(image: np.ndarray) -> float:
    """``1 / (2 * mean squared neighbour difference)``, or 0 for a flat image."""
    diffs = squared_differences(image)
    mean = float(diffs.mean()) if len(diffs) else 0.0
    return 0.0 if mean <= 0 else 1.0 / (2.0 * mean)


def contrast_factors(image: np.ndarray, beta: Optional[float]) -> np.ndarray:
    """Per-edge ``exp(-beta ||image(u) - image(v)||^2)``; ``beta`` None calibrates per image."""
    diffs = squared_differences(ensure_finite(_image_planes(image), "image"))
    if beta is None:
        beta = calibrate_beta(image)
    return np.exp(-beta * diffs)


def unary_design(volume: np.ndarray) -> np.ndarray:
    """``(H*W, D + 1)`` rows ``[features(p); 1]``."""
    d = volume.shape[0]
    flat = volume.reshape(d, -1).T
    return np.hstack([flat, np.ones((flat.shape[0], 1))])


def potential_tables(weights: CrfWeights, design: np.ndarray, contrast: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Flat unary ``(N, C)`` and pairwise ``(E, C, C)`` potentials from precomputed inputs."""
    theta_u = -design @ weights.unary.T
    potts = weights.pairwise * (1.0 - np.eye(weights.num_labels))
    return theta_u, contrast[:, None, None] * potts[None, :, :]


def build_potentials(features, image: np.ndarray, weights: CrfWeights) -> Potentials:
    """Unary and contrast-sensitive Potts potentials of one image.

    ``theta_u(p, l) = -unary[l] . [features(p); 1]`` and, for ``l != l'``,
    ``theta_p(pq, l, l') = pairwise[l, l'] * exp(-beta ||image(p) - image(q)||^2)``.

    Raises:
        DataError: Feature and image sizes differ or feature count does not match the weights
    """
    volume = ensure_finite(as_feature_volume(features), "features")
    planes = _image_planes(image)
    if volume.shape[1:] != planes.shape[1:]:
        raise DataError(f"features are {volume.shape[1:]} but image is {planes.shape[1:]}")
    if volume.shape[0] != weights.num_features:
        raise DataError(f"weights expect {weights.num_features} features, got {volume.shape[0]}")
    h, w = volume.shape[1:]
    contrast = contrast_factors(planes, weights.beta)
    theta_u, pairwise = potential_tables(weights, unary_design(volume), contrast)
    return Potentials(theta_u.reshape(h, w, weights.num_labels), pairwise, contrast)


def labeling_energy(potentials: Potentials, labels: np.ndarray) -> float:
    """``sum_p theta_u(p, y_p) + sum_pq theta_p(pq, y_p, y_q)``."""
    labels = np.asarray(labels).ravel()
    c = potentials.unary.shape[2]
    unary = potentials.unary.reshape(-1, c)
    u, v = potentials.graph.endpoints
    energy = unary[np.arange(len(labels)), labels].sum()
    energy += potentials.pairwise[np.arange(len(u)), labels[u], labels[v]].sum()
    return float(energy)
