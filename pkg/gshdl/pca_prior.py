"""PCA structural priors for the convolutional RBM layers.

Patches are sampled from feature images, each patch has its own mean
removed, and the leading eigenvectors of ``X X^T`` become orthonormal filters.
Filters dominated by Nyquist-frequency alternation (checkerboards) are flagged
so they are never used to seed an RBM.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .container import Chunk, read_container, write_container
from .errors import ConfigError, ContainerError, DataError, DimensionError
from .numerics import ensure_finite, rng_from_seed, sym_eigen

logger = logging.getLogger("gshdl.pca_prior")

CHECKERBOARD_THRESHOLD = 0.5
NYQUIST_BAND = 0.375
PRIOR_TAG = "PRIR"


@dataclass
class PatchMatrix:
    """Mean-removed vectorized patches stored as columns ``(d, n)``.

    Patches are flattened channel-major, i.e. in ``(channels, z1, z2)`` order.
    """

    columns: np.ndarray
    patch_height: int
    patch_width: int
    channels: int

    @property
    def dimension(self) -> int:
        return self.columns.shape[0]

    @property
    def num_patches(self) -> int:
        return self.columns.shape[1]

    @classmethod
    def from_columns(cls, columns: np.ndarray, patch_height: int, patch_width: int, channels: int) -> "PatchMatrix":
        """Build a matrix from raw columns, removing each column's mean."""
        columns = ensure_finite(np.asarray(columns, dtype=np.float64), "patch matrix")
        if columns.ndim != 2 or columns.shape[0] != patch_height * patch_width * channels:
            raise DimensionError(
                f"patch columns of shape {columns.shape} do not match "
                f"{channels}x{patch_height}x{patch_width} patches"
            )
        return cls(columns - columns.mean(axis=0, keepdims=True), patch_height, patch_width, channels)


@dataclass
class PriorFilterSet:
    """Orthonormal PCA filters with checkerboard flags.

    ``reserve_*`` hold the next-ranked eigenvectors after the first ``K``;
    they replace flagged filters when seeding an RBM.
    """

    filters: np.ndarray
    eigenvalues: np.ndarray
    checkerboard_flags: np.ndarray
    checkerboard_scores: np.ndarray
    reserve_filters: np.ndarray = field(default_factory=lambda: np.zeros((0, 1, 1, 1)))
    reserve_eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reserve_flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def num_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def filter_shape(self) -> Tuple[int, int, int]:
        """``(channels, z1, z2)``."""
        return tuple(self.filters.shape[1:])

    def basis(self) -> np.ndarray:
        """Filters flattened to orthonormal columns ``V`` of shape ``(d, K)``."""
        return self.filters.reshape(self.num_filters, -1).T

    def seeding_filters(self) -> np.ndarray:
        """Unflagged filters in rank order, followed by unflagged reserve filters."""
        kept = [self.filters[~self.checkerboard_flags]]
        if len(self.reserve_filters) and self.reserve_filters.shape[1:] == self.filters.shape[1:]:
            kept.append(self.reserve_filters[~self.reserve_flags])
        return np.concatenate(kept, axis=0)


def sample_patches(features: Sequence[np.ndarray], patch_size: int, count: int, seed: int) -> PatchMatrix:
    """Sample ``count`` square patches uniformly over all positions of all images.

    Args:
        features: Feature images, each ``(C, H, W)`` or a FeatureStack
        patch_size: Odd patch side ``z1 = z2``
        count: Number of patches
        seed: 64-bit seed

    Returns:
        PatchMatrix: ``(C * z^2, count)`` matrix with per-patch mean removed

    Raises:
        ConfigError: Even patch size or non-positive count
        DataError: An image smaller than the patch, or inconsistent channels
    """
    if patch_size % 2 == 0 or patch_size < 1:
        raise ConfigError(f"patch size must be odd and positive, got {patch_size}")
    if count < 1:
        raise ConfigError(f"patch count must be positive, got {count}")
    volumes = [np.asarray(f.channels() if hasattr(f, "channels") else f, dtype=np.float64) for f in features]
    if not volumes:
        raise DataError("no feature images to sample from")
    channels = volumes[0].shape[0]
    positions = []
    for i, volume in enumerate(volumes):
        if volume.ndim != 3 or volume.shape[0] != channels:
            raise DataError(f"feature image {i} has shape {volume.shape}, expected {channels} channels")
        height, width = volume.shape[1:]
        if height < patch_size or width < patch_size:
            raise DataError(f"feature image {i} ({height}x{width}) is smaller than the {patch_size}x{patch_size} patch")
        positions.append((height - patch_size + 1) * (width - patch_size + 1))

    dimension = channels * patch_size * patch_size
    if count < dimension:
        logger.warning(f"Sampling {count} patches for a {dimension}-dimensional patch space (rank deficient)")

    rng = rng_from_seed(seed)
    offsets = np.cumsum([0] + positions)
    draws = rng.integers(0, offsets[-1], size=count)
    columns = np.empty((dimension, count))
    for n, draw in enumerate(draws):
        image = int(np.searchsorted(offsets, draw, side="right") - 1)
        local = int(draw - offsets[image])
        cols = volumes[image].shape[2] - patch_size + 1
        y, x = divmod(local, cols)
        columns[:, n] = volumes[image][:, y:y + patch_size, x:x + patch_size].ravel()
    return PatchMatrix.from_columns(columns, patch_size, patch_size, channels)


def detect_checkerboard(kernel: np.ndarray) -> Tuple[bool, float]:
    """Score a filter by its energy near the Nyquist corner of its spectrum.

    The score is the fraction of DFT energy in bins whose row and column
    frequencies both exceed three quarters of Nyquist (0.375 cycles per
    sample). A 3x3 grid has no such bins, so 3x3 filters always score 0.
    Multi-channel filters ``(C, z1, z2)`` pool energy over channels.

    Returns:
        Tuple[bool, float]: ``(score >= 0.5, score)``

    Raises:
        DataError: All-zero or non-finite filter
    """
    kernel = ensure_finite(np.asarray(kernel, dtype=np.float64), "filter")
    if kernel.ndim == 2:
        kernel = kernel[np.newaxis]
    energy = np.abs(np.fft.fft2(kernel, axes=(-2, -1))) ** 2
    total = energy.sum()
    if not total > 0:
        raise DataError("cannot score an all-zero filter")

    rows = np.abs(np.fft.fftfreq(kernel.shape[-2])) > NYQUIST_BAND
    cols = np.abs(np.fft.fftfreq(kernel.shape[-1])) > NYQUIST_BAND
    corner = energy[:, rows][:, :, cols].sum()
    score = float(np.clip(corner / total, 0.0, 1.0))
    return score >= CHECKERBOARD_THRESHOLD, score


def _to_filters(vectors: np.ndarray, x: PatchMatrix) -> np.ndarray:
    return vectors.T.reshape(-1, x.channels, x.patch_height, x.patch_width).copy()


def learn_pca_filters(x: PatchMatrix, num_filters: int, method: str = "lapack") -> PriorFilterSet:
    """Leading ``K`` eigenvectors of ``X X^T`` as orthonormal filters.

    Every filter is scored for checkerboard structure; flagged filters stay in
    the set. Enough next-ranked eigenvectors are kept in reserve to replace
    each flagged filter when the spectrum allows.

    Raises:
        ConfigError: ``K`` exceeds the patch dimension or is not positive
    """
    if not 1 <= num_filters <= x.dimension:
        raise ConfigError(f"cannot learn {num_filters} filters from {x.dimension}-dimensional patches")
    scatter_matrix = x.columns @ x.columns.T
    scatter_matrix = 0.5 * (scatter_matrix + scatter_matrix.T)
    eigenvalues, eigenvectors = sym_eigen(scatter_matrix, method=method)

    filters = _to_filters(eigenvectors[:, :num_filters], x)
    results = [detect_checkerboard(f) for f in filters]
    flags = np.array([flag for flag, _ in results], dtype=bool)
    scores = np.array([score for _, score in results])

    reserve, reserve_values, reserve_flags = [], [], []
    needed = int(flags.sum())
    index = num_filters
    while needed > 0 and index < x.dimension:
        candidate = _to_filters(eigenvectors[:, index:index + 1], x)[0]
        flagged, _ = detect_checkerboard(candidate)
        reserve.append(candidate)
        reserve_values.append(eigenvalues[index])
        reserve_flags.append(flagged)
        if not flagged:
            needed -= 1
        index += 1

    logger.info(
        f"Learned {num_filters} PCA filters of shape {filters.shape[1:]}; "
        f"{int(flags.sum())} flagged as checkerboard, {len(reserve)} reserve"
    )
    shape = (0,) + filters.shape[1:]
    return PriorFilterSet(
        filters=filters,
        eigenvalues=eigenvalues[:num_filters].copy(),
        checkerboard_flags=flags,
        checkerboard_scores=scores,
        reserve_filters=np.stack(reserve) if reserve else np.zeros(shape),
        reserve_eigenvalues=np.array(reserve_values, dtype=np.float64),
        reserve_flags=np.array(reserve_flags, dtype=bool),
    )


def reconstruction_error(x: PatchMatrix, basis: np.ndarray) -> float:
    """``||X - V V^T X||_F^2`` for orthonormal columns ``V``."""
    residual = x.columns - basis @ (basis.T @ x.columns)
    return float(np.sum(residual * residual))


def prior_chunk(priors: PriorFilterSet, name: str = "") -> Chunk:
    """Container chunk (tag ``PRIR``) for a prior set."""
    return Chunk(
        tag=PRIOR_TAG,
        header={"name": name, "num_filters": priors.num_filters, "shape": list(priors.filter_shape)},
        arrays={
            "filters": priors.filters,
            "eigenvalues": priors.eigenvalues,
            "flags": priors.checkerboard_flags.astype(np.uint8),
            "scores": priors.checkerboard_scores,
            "reserve_filters": priors.reserve_filters,
            "reserve_eigenvalues": priors.reserve_eigenvalues,
            "reserve_flags": priors.reserve_flags.astype(np.uint8),
        },
    )


def priors_from_chunk(chunk: Chunk) -> PriorFilterSet:
    """Inverse of :func:`prior_chunk`."""
    if chunk.tag != PRIOR_TAG:
        raise ContainerError(f"expected a {PRIOR_TAG} chunk, got {chunk.tag}")
    a = chunk.arrays
    return PriorFilterSet(
        filters=a["filters"],
        eigenvalues=a["eigenvalues"],
        checkerboard_flags=a["flags"].astype(bool),
        checkerboard_scores=a["scores"],
        reserve_filters=a["reserve_filters"],
        reserve_eigenvalues=a["reserve_eigenvalues"],
        reserve_flags=a["reserve_flags"].astype(bool),
    )


def save_priors(path: Union[str, Path], prior_sets: List[PriorFilterSet]) -> None:
    """Write prior sets to a container file, one ``PRIR`` chunk per layer."""
    write_container(path, [prior_chunk(p, name=f"L{3 + i}") for i, p in enumerate(prior_sets)])


def load_priors(path: Union[str, Path]) -> List[PriorFilterSet]:
    """Read every ``PRIR`` chunk of a container file."""
    return [priors_from_chunk(c) for c in read_container(path) if c.tag == PRIOR_TAG]
