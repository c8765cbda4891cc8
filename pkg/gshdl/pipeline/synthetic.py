"""Synthetic texture-segmentation datasets.

Every image is a Voronoi partition of the plane into 3-6 regions; each region
carries a class whose texture is an oriented sinusoid at a class-specific
orientation and frequency, plus Gaussian pixel noise.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..numerics import rng_from_seed
from ..scatternet import DEFAULT_ORIENTATIONS, oriented_phase
from .dataset import ClassInfo, Dataset

logger = logging.getLogger("gshdl.pipeline")

MAX_CLASSES = 6
TEXTURE_FREQUENCIES = (0.6 * math.pi, 0.3 * math.pi)
CLASS_COLORS = (
    (128, 0, 0),
    (0, 128, 0),
    (128, 128, 0),
    (0, 0, 128),
    (128, 0, 128),
    (0, 128, 128),
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Size of a generated dataset."""

    num_images: int
    size: int = 64
    num_classes: int = 4
    seed: int = 0
    noise: float = 0.05

    def __post_init__(self) -> None:
        if self.num_images < 0 or self.size < 4:
            raise ConfigError(f"need num_images >= 0 and size >= 4, got {self.num_images}, {self.size}")
        if not 2 <= self.num_classes <= MAX_CLASSES:
            raise ConfigError(f"num_classes must be in [2, {MAX_CLASSES}], got {self.num_classes}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")


def class_texture(label: int, size: int, phase: float) -> np.ndarray:
    """Sinusoid of class ``label`` on a ``size x size`` grid, values in ``[0.2, 0.8]``."""
    theta = DEFAULT_ORIENTATIONS[label % len(DEFAULT_ORIENTATIONS)]
    xi = TEXTURE_FREQUENCIES[label % len(TEXTURE_FREQUENCIES)]
    return 0.5 + 0.3 * np.sin(oriented_phase(size, size, theta, xi, centre=False) + phase)


def _voronoi_image(spec: SyntheticSpec, rng: np.random.Generator):
    n_seeds = int(rng.integers(3, 7))
    seeds = rng.uniform(0, spec.size, size=(n_seeds, 2))
    classes = rng.integers(0, spec.num_classes, size=n_seeds)
    phases = rng.uniform(0, 2 * math.pi, size=n_seeds)

    y, x = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    distances = (y[None] - seeds[:, 0, None, None]) ** 2 + (x[None] - seeds[:, 1, None, None]) ** 2
    region = np.argmin(distances, axis=0)
    labels = classes[region].astype(np.int64)

    gray = np.empty((spec.size, spec.size))
    for s in range(n_seeds):
        mask = region == s
        gray[mask] = class_texture(int(classes[s]), spec.size, phases[s])[mask]
    image = np.repeat(gray[np.newaxis], 3, axis=0) + spec.noise * rng.standard_normal((3, spec.size, spec.size))
    return np.clip(image, 0.0, 1.0), labels


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic Voronoi texture dataset; image ``i`` uses the RNG stream ``(seed, i)``."""
    images, labels = [], []
    for i in range(spec.num_images):
        image, mask = _voronoi_image(spec, rng_from_seed(spec.seed, i))
        images.append(image)
        labels.append(mask)
    class_map = {c: ClassInfo(f"texture_{c}", CLASS_COLORS[c]) for c in range(spec.num_classes)}
    logger.info(f"Generated {spec.num_images} synthetic {spec.size}x{spec.size} images with {spec.num_classes} classes")
    return Dataset(images, labels, class_map, [f"synth_{i:04d}" for i in range(spec.num_images)])
