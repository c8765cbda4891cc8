"""Class-colour overlays of label grids, written with Pillow."""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from PIL import Image

from ..errors import RenderError
from .dataset import ClassInfo

logger = logging.getLogger("gshdl.pipeline")


def to_pixels(image: np.ndarray) -> np.ndarray:
    """``(H, W, 3)`` uint8 from a ``(3, H, W)`` float image in ``[0, 1]`` or a uint8 array."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image if image.ndim == 3 and image.shape[2] == 3 else np.stack([image] * 3, axis=-1)
    if image.ndim == 2:
        image = image[np.newaxis]
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def blend_overlay(image: np.ndarray, mask: np.ndarray, class_map: Dict[int, ClassInfo], alpha: float) -> np.ndarray:
    """``alpha * colour + (1 - alpha) * image`` per pixel, rounded to 8 bits; void pixels keep the image.

    Raises:
        RenderError: ``alpha`` outside ``[0, 1]``, size mismatch or unknown label
    """
    if not 0.0 <= alpha <= 1.0:
        raise RenderError(f"alpha must lie in [0, 1], got {alpha}")
    pixels = to_pixels(image)
    mask = np.asarray(mask)
    if pixels.shape[:2] != mask.shape:
        raise RenderError(f"image is {pixels.shape[:2]} but mask is {mask.shape}")
    unknown = np.setdiff1d(np.unique(mask[mask >= 0]), list(class_map))
    if unknown.size:
        raise RenderError(f"no colour for label(s) {unknown.tolist()}")

    palette = np.zeros((max(class_map, default=0) + 1, 3), dtype=np.float64)
    for index, info in class_map.items():
        palette[index] = info.color
    colors = palette[np.where(mask >= 0, mask, 0)]
    blended = alpha * colors + (1.0 - alpha) * pixels.astype(np.float64)
    out = np.rint(blended).astype(np.uint8)
    out[mask < 0] = pixels[mask < 0]
    return out


def render_overlay(image: np.ndarray, mask: np.ndarray, class_map: Dict[int, ClassInfo], alpha: float = 0.5,
                   path: Optional[Union[str, Path]] = None) -> np.ndarray:
    """Blend a label grid over an image and optionally write it as PNG.

    Returns:
        np.ndarray: The blended ``(H, W, 3)`` uint8 image
    """
    out = blend_overlay(image, mask, class_map, alpha)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            Image.fromarray(out).save(path)
        except (OSError, ValueError) as e:
            raise RenderError(f"cannot write overlay {path}: {e}") from e
        logger.debug(f"Wrote overlay {path}")
    return out


def save_labels(mask: np.ndarray, class_map: Dict[int, ClassInfo], path: Union[str, Path]) -> None:
    """Write a label grid as an indexed PNG coloured by the class map (void as index 255)."""
    mask = np.asarray(mask)
    if mask.max(initial=-1) >= 255:
        raise RenderError(f"label {int(mask.max())} does not fit an indexed PNG")
    palette = []
    for index in range(256):
        info = class_map.get(index)
        palette.extend(info.color if info else (0, 0, 0))
    image = Image.fromarray(np.where(mask >= 0, mask, 255).astype(np.uint8))
    image.putpalette(palette)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        image.save(path)
    except (OSError, ValueError) as e:
        raise RenderError(f"cannot write label image {path}: {e}") from e
