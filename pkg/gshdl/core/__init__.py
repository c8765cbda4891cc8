"""Compiled numerical kernels for G-SHDL.

The Cython extension ``kernels`` provides the direct convolution used by
:func:`gshdl.numerics.conv2d_same`. When the extension has not been built the
scipy implementation below is used instead; both apply the same
symmetric-reflect boundary.
"""

import logging

import numpy as np
from scipy import ndimage

logger = logging.getLogger("gshdl.core")

try:
    from .kernels import convolve_mirror as _compiled_convolve_mirror

    HAS_CYTHON = True
except ImportError:
    _compiled_convolve_mirror = None
    HAS_CYTHON = False
    logger.debug("Compiled kernels not available, using scipy.ndimage")


def convolve_mirror(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size convolution with symmetric-reflect (mirror) extension.

    Args:
        image: Real plane (height, width)
        kernel: Real odd-sized kernel

    Returns:
        np.ndarray: Convolved plane, same shape as ``image``
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if _compiled_convolve_mirror is not None:
        return np.asarray(_compiled_convolve_mirror(image, kernel))
    return ndimage.convolve(image, kernel, mode="mirror")


__all__ = ["HAS_CYTHON", "convolve_mirror"]
