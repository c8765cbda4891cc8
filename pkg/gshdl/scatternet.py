"""Handcrafted scattering front-end (layers L0, L1, L2).

Oriented complex band-pass filters at ``J`` scales and six fixed orientations
are applied to each input channel. Envelopes at the finest scale pass through
a parametric log, everything is smoothed with a Gaussian low-pass at scale
``2**J``, and no decimation is performed so every channel keeps the input's
resolution.

Coordinates follow the image convention: ``x`` is the column index and ``y``
the row index; an orientation ``theta`` is the direction of the wave vector
``(cos theta, sin theta)`` in ``(x, y)``.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .container import Chunk, read_container, write_container
from .errors import ConfigError, DimensionError, PreconditionError
from .numerics import as_grid, conv2d_bank, conv2d_same, ensure_finite

logger = logging.getLogger("gshdl.scatternet")

DEFAULT_ORIENTATIONS = (15.0, 45.0, 75.0, 105.0, 135.0, 165.0)
MAX_SCALES = 3

# Finest band: Gaussian envelope width (pixels) and centre frequency (rad/pixel).
FINEST_SIGMA = 1.2
FINEST_XI = 0.6 * math.pi
SLANT = 0.5


@dataclass(frozen=True)
class ScatterConfig:
    """Scattering front-end options."""

    num_scales: int = 2
    orientations: Tuple[float, ...] = DEFAULT_ORIENTATIONS
    log_k_finest: float = 1.1
    dual_resolution: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "orientations", tuple(float(o) for o in self.orientations))
        if not 1 <= self.num_scales <= MAX_SCALES:
            raise ConfigError(f"num_scales must be in [1, {MAX_SCALES}], got {self.num_scales}")
        if not self.orientations:
            raise ConfigError("at least one orientation is required")
        if not self.log_k_finest > 0:
            raise ConfigError(f"log_k_finest must be > 0, got {self.log_k_finest}")

    @property
    def smoothing_scale(self) -> int:
        """Width of the low-pass window, ``2**J`` pixels."""
        return 2 ** self.num_scales


class ScatterPath(NamedTuple):
    """Provenance of one scattering channel.

    ``scale2``/``orientation2`` are -1 below layer 2, and ``scale1``/
    ``orientation1`` are -1 for layer 0. ``resolution`` is 1 for the native
    image and 2 for the half-resolution pass of the dual-resolution variant.
    """

    layer: int
    input_channel: int
    scale1: int = -1
    orientation1: int = -1
    scale2: int = -1
    orientation2: int = -1
    resolution: int = 1


@dataclass(frozen=True)
class ComplexFilterBank:
    """Band-pass kernels keyed by ``(scale, orientation index)`` plus one low-pass."""

    bandpass: Dict[Tuple[int, int], np.ndarray]
    lowpass: np.ndarray
    num_scales: int
    orientations: Tuple[float, ...]

    def scale_kernels(self, scale: int) -> np.ndarray:
        """Real and imaginary parts of every orientation at ``scale``.

        Returns:
            np.ndarray: ``(2 * R, 1, k, k)`` bank, real/imaginary interleaved
        """
        parts = []
        for r in range(len(self.orientations)):
            kernel = self.bandpass[(scale, r)]
            parts.extend([kernel.real, kernel.imag])
        return np.stack(parts)[:, np.newaxis]

    def fingerprint(self) -> str:
        """Short stable hash of the kernel values (stored in model bundles)."""

        digest = hashlib.sha256()
        for key in sorted(self.bandpass):
            digest.update(np.ascontiguousarray(self.bandpass[key]).tobytes())
        digest.update(np.ascontiguousarray(self.lowpass).tobytes())
        return digest.hexdigest()[:16]


@dataclass
class FeatureStack:
    """Per-pixel scattering features of one image."""

    layer0: np.ndarray
    layer1: np.ndarray
    layer2: np.ndarray
    path_index: Tuple[ScatterPath, ...] = field(default_factory=tuple)

    @property
    def height(self) -> int:
        return self.layer0.shape[1]

    @property
    def width(self) -> int:
        return self.layer0.shape[2]

    @property
    def num_channels(self) -> int:
        return self.layer0.shape[0] + self.layer1.shape[0] + self.layer2.shape[0]

    def channels(self) -> np.ndarray:
        """All channels concatenated in ``path_index`` order, ``(N, H, W)``."""
        return np.concatenate([self.layer0, self.layer1, self.layer2], axis=0)


def kernel_size(scale: int) -> int:
    """Odd spatial support of the band-pass kernel at ``scale`` (15, 31, 63)."""
    return 16 * 2 ** (scale - 1) - 1


def oriented_phase(height: int, width: int, theta_deg: float, xi: float, centre: bool = True) -> np.ndarray:
    """Phase ``xi * (x cos theta + y sin theta)`` on a ``(height, width)`` grid."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    if centre:
        y -= height // 2
        x -= width // 2
    theta = math.radians(theta_deg)
    return xi * (x * math.cos(theta) + y * math.sin(theta))


def _gabor(size: int, sigma: float, theta_deg: float, xi: float, slant: float) -> Tuple[np.ndarray, np.ndarray]:
    theta = math.radians(theta_deg)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) - size // 2
    rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    curvature = rotation @ np.diag([1.0, slant * slant]) @ rotation.T / (2.0 * sigma * sigma)
    quad = curvature[0, 0] * x * x + (curvature[0, 1] + curvature[1, 0]) * x * y + curvature[1, 1] * y * y
    envelope = np.exp(-quad)
    wave = np.exp(1j * oriented_phase(size, size, theta_deg, xi))
    return envelope * wave / (2.0 * math.pi * sigma * sigma / slant), envelope


def morlet_kernel(scale: int, theta_deg: float) -> np.ndarray:
    """Zero-mean oriented complex kernel for ``scale`` (1 = finest)."""
    sigma = FINEST_SIGMA * 2 ** (scale - 1)
    xi = FINEST_XI / 2 ** (scale - 1)
    gabor, envelope = _gabor(kernel_size(scale), sigma, theta_deg, xi, SLANT)
    envelope = envelope / (2.0 * math.pi * sigma * sigma / SLANT)
    correction = gabor.sum() / envelope.sum()
    return gabor - correction * envelope


def gaussian_lowpass(num_scales: int) -> np.ndarray:
    """Nonnegative Gaussian window at scale ``2**J`` summing to one."""
    sigma = FINEST_SIGMA * 2 ** (num_scales - 1)
    radius = int(math.ceil(3.0 * sigma))
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    window = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return window / window.sum()


def build_filter_bank(config: ScatterConfig) -> ComplexFilterBank:
    """Build ``J x len(orientations)`` band-pass kernels and the low-pass.

    Raises:
        ConfigError: Unsupported scale count
    """
    if not 1 <= config.num_scales <= MAX_SCALES:
        raise ConfigError(f"unsupported scale count: {config.num_scales}")
    bandpass = {
        (j, r): morlet_kernel(j, theta)
        for j in range(1, config.num_scales + 1)
        for r, theta in enumerate(config.orientations)
    }
    logger.debug(f"Built filter bank with {len(bandpass)} band-pass kernels")
    return ComplexFilterBank(
        bandpass=bandpass,
        lowpass=gaussian_lowpass(config.num_scales),
        num_scales=config.num_scales,
        orientations=config.orientations,
    )


def modulus_envelope(x: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """``sqrt(|x * psi_a|^2 + |x * psi_b|^2)`` for a complex kernel ``psi = psi_a + i psi_b``."""
    response = conv2d_same(x, np.asarray(psi, dtype=np.complex128))
    return np.hypot(response.real, response.imag)


def parametric_log(u: np.ndarray, k: float) -> np.ndarray:
    """Pointwise ``log(U + k)``.

    Raises:
        ConfigError: ``k <= 0``
        PreconditionError: Negative envelope values
    """
    if not k > 0:
        raise ConfigError(f"log parameter k must be > 0, got {k}")
    u = ensure_finite(np.asarray(u, dtype=np.float64), "envelope")
    if np.any(u < 0):
        raise PreconditionError("parametric_log expects a nonnegative envelope")
    return np.log(u + k)


def _smooth(planes: np.ndarray, lowpass: np.ndarray) -> np.ndarray:
    return np.stack([conv2d_same(plane, lowpass) for plane in planes]) if len(planes) else planes


def _scatter_plane(x: np.ndarray, bank: ComplexFilterBank, config: ScatterConfig):
    """Unsmoothed L0/L1/L2 planes and their paths for one channel."""
    orientations = range(len(bank.orientations))
    first: Dict[Tuple[int, int], np.ndarray] = {}
    for j, r in product(range(1, bank.num_scales + 1), orientations):
        envelope = modulus_envelope(x, bank.bandpass[(j, r)])
        first[(j, r)] = parametric_log(envelope, config.log_k_finest) if j == 1 else envelope

    second: List[np.ndarray] = []
    second_paths: List[Tuple[int, int, int, int]] = []
    for (j1, r1), u1 in first.items():
        for j2 in range(j1 + 1, bank.num_scales + 1):
            response = conv2d_bank(np.abs(u1)[np.newaxis], bank.scale_kernels(j2))
            envelopes = np.hypot(response[0::2], response[1::2])
            for r2 in orientations:
                second.append(envelopes[r2])
                second_paths.append((j1, r1, j2, r2))
    return first, second, second_paths


def _scatter_single_resolution(image: np.ndarray, bank: ComplexFilterBank, config: ScatterConfig, resolution: int):
    layer0, layer1, layer2 = [], [], []
    paths0, paths1, paths2 = [], [], []
    for c, x in enumerate(image):
        first, second, second_paths = _scatter_plane(x, bank, config)
        layer0.append(x)
        paths0.append(ScatterPath(0, c, resolution=resolution))
        for (j, r), u1 in first.items():
            layer1.append(u1)
            paths1.append(ScatterPath(1, c, j, r, resolution=resolution))
        layer2.extend(second)
        paths2.extend(ScatterPath(2, c, j1, r1, j2, r2, resolution) for j1, r1, j2, r2 in second_paths)

    height, width = image.shape[1:]
    empty = np.zeros((0, height, width))
    smoothed = [
        _smooth(np.stack(layer), bank.lowpass) if layer else empty
        for layer in (layer0, layer1, layer2)
    ]
    return smoothed, (paths0, paths1, paths2)


def _resample(planes: np.ndarray, height: int, width: int) -> np.ndarray:
    if len(planes) == 0:
        return np.zeros((0, height, width))
    factors = (height / planes.shape[1], width / planes.shape[2])
    return np.stack([ndimage.zoom(plane, factors, order=1, mode="mirror") for plane in planes])


def expected_channel_count(num_scales: int, num_orientations: int, input_channels: int = 1,
                           dual_resolution: bool = False) -> int:
    """Channel count of :func:`scatter` output given by path enumeration."""
    pairs = num_scales * (num_scales - 1) // 2
    per_channel = 1 + num_orientations * num_scales + num_orientations ** 2 * pairs
    return per_channel * input_channels * (2 if dual_resolution else 1)


def scatter(image: np.ndarray, bank: ComplexFilterBank, config: ScatterConfig) -> FeatureStack:
    """Compute the L0/L1/L2 scattering features of an image.

    Args:
        image: ``(channels, H, W)`` or ``(H, W)`` image; channels are
            scattered independently
        bank: Filter bank built for ``config``
        config: Scattering options

    Returns:
        FeatureStack: Channels at full input resolution

    Raises:
        ConfigError: Bank inconsistent with ``config``
    """
    if bank.num_scales != config.num_scales or tuple(bank.orientations) != tuple(config.orientations):
        raise ConfigError("filter bank does not match the scattering configuration")
    image = as_grid(image)
    height, width = image.shape[1:]

    (l0, l1, l2), (p0, p1, p2) = _scatter_single_resolution(image, bank, config, resolution=1)

    if config.dual_resolution:
        if min(height, width) < 2:
            raise DimensionError("dual-resolution scattering needs images at least 2x2")
        small = np.stack([ndimage.zoom(plane, 0.5, order=1, mode="mirror") for plane in image])
        (s0, s1, s2), (q0, q1, q2) = _scatter_single_resolution(small, bank, config, resolution=2)
        l0 = np.concatenate([l0, _resample(s0, height, width)])
        l1 = np.concatenate([l1, _resample(s1, height, width)])
        l2 = np.concatenate([l2, _resample(s2, height, width)])
        p0, p1, p2 = p0 + q0, p1 + q1, p2 + q2

    return FeatureStack(layer0=l0, layer1=l1, layer2=l2, path_index=tuple(p0 + p1 + p2))


def scatter_many(images: Sequence[np.ndarray], bank: ComplexFilterBank, config: ScatterConfig,
                 workers: Optional[int] = None) -> List[FeatureStack]:
    """Scatter a list of images, optionally on a thread pool; output keeps input order."""
    if workers and workers > 1 and len(images) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda img: scatter(img, bank, config), images))
    return [scatter(img, bank, config) for img in images]


FEATURE_TAG = "FEAT"


def save_features(path, stacks: Sequence[FeatureStack]) -> None:
    """Export feature stacks, one ``FEAT`` chunk per image, planes as little-endian float32."""

    chunks = []
    for index, stack in enumerate(stacks):
        chunks.append(Chunk(
            tag=FEATURE_TAG,
            header={
                "index": index,
                "height": stack.height,
                "width": stack.width,
                "channels": stack.num_channels,
                "layer_sizes": [len(stack.layer0), len(stack.layer1), len(stack.layer2)],
                "path_index": [list(p) for p in stack.path_index],
            },
            arrays={"planes": stack.channels().astype("<f4")},
        ))
    write_container(path, chunks)
    logger.info(f"Exported {len(chunks)} feature stacks to {path}")


def load_features(path) -> List[FeatureStack]:
    """Read feature stacks written by :func:`save_features` (values as float64)."""

    stacks = []
    for chunk in read_container(path):
        if chunk.tag != FEATURE_TAG:
            continue
        planes = chunk.arrays["planes"].astype(np.float64)
        n0, n1, _ = chunk.header["layer_sizes"]
        stacks.append(FeatureStack(
            layer0=planes[:n0],
            layer1=planes[n0:n0 + n1],
            layer2=planes[n0 + n1:],
            path_index=tuple(ScatterPath(*p) for p in chunk.header["path_index"]),
        ))
    return stacks
