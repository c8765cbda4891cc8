"""Shared numerical kernels: convolution, symmetric eigendecomposition, LBFGS.

Planes are float64 arrays. A single-channel grid is ``(height, width)``; a
multi-channel grid is ``(channels, height, width)``. Every randomized routine
in the package derives its generator from an explicit 64-bit seed through
:func:`rng_from_seed`.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from .core import convolve_mirror
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    NumericalError,
    PreconditionError,
)

logger = logging.getLogger("gshdl.numerics")

SYMMETRY_TOLERANCE = 1e-12
ARMIJO_C1 = 1e-4

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def rng_from_seed(seed: int, *stream: int) -> np.random.Generator:
    """Create an independent generator for ``seed`` and an optional sub-stream.

    Args:
        seed: Unsigned 64-bit seed
        *stream: Integers naming a sub-stream (layer index, epoch, ...)

    Returns:
        np.random.Generator: PCG64 generator
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(sequence))


def derive_seed(seed: int, *stream: int) -> int:
    """Deterministic 63-bit child seed of ``seed`` for the sub-stream ``stream``."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(s) for s in stream))
    return int(sequence.generate_state(1, np.uint64)[0] >> np.uint64(1))


def ensure_finite(values: np.ndarray, what: str = "input") -> np.ndarray:
    """Raise :class:`DataError` unless every element is finite."""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{what} contains non-finite values")
    return values


def as_grid(values: np.ndarray) -> np.ndarray:
    """Return ``values`` as a finite float64 ``(channels, height, width)`` grid."""
    grid = np.asarray(values, dtype=np.float64)
    if grid.ndim == 2:
        grid = grid[np.newaxis]
    if grid.ndim != 3 or min(grid.shape) < 1:
        raise DimensionError(f"expected a (channels, height, width) grid, got shape {grid.shape}")
    return ensure_finite(grid, "grid")


def _check_kernel(kernel: np.ndarray) -> None:
    if kernel.ndim < 2:
        raise DimensionError(f"kernel must be at least 2-D, got shape {kernel.shape}")
    kh, kw = kernel.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel dimensions must be odd, got {kh}x{kw}")
    ensure_finite(kernel, "kernel")


def conv2d_same(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2-D convolution with symmetric-reflect boundary.

    ``out[p] = sum_q image[p - q] * kernel[q]``, with ``q`` measured from the
    kernel centre and the image mirrored about its edge pixels (the edge pixel
    is not repeated).

    Args:
        image: Single-channel plane (height, width)
        kernel: Odd-sized real or complex kernel

    Returns:
        np.ndarray: Real plane for a real kernel. For a complex kernel a
        complex plane whose real and imaginary parts are the responses to the
        kernel's real and imaginary parts.

    Raises:
        DimensionError: Even-sized kernel or non-2-D image
        DataError: Non-finite image or kernel values
    """
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel)
    if image.ndim != 2:
        raise DimensionError(f"conv2d_same expects a single-channel plane, got shape {image.shape}")
    if kernel.ndim != 2:
        raise DimensionError(f"conv2d_same expects a 2-D kernel, got shape {kernel.shape}")
    _check_kernel(kernel)
    ensure_finite(image, "image")

    if np.iscomplexobj(kernel):
        real = convolve_mirror(image, kernel.real)
        imag = convolve_mirror(image, kernel.imag)
        return real + 1j * imag
    return convolve_mirror(image, kernel.astype(np.float64))


def _mirror_windows(volume: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding (kh, kw) windows over a mirror-padded ``(C, H, W)`` volume."""
    padded = np.pad(volume, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)), mode="reflect")
    return sliding_window_view(padded, (kh, kw), axis=(1, 2))


def conv2d_bank(volume: np.ndarray, kernels: np.ndarray, correlate: bool = False) -> np.ndarray:
    """Multi-channel convolution ``out[k] = sum_c volume[c] * kernels[k, c]``.

    Uses the same symmetric-reflect boundary as :func:`conv2d_same` but
    evaluates all channels at once as a matrix product over extracted windows.

    Args:
        volume: Input grid (C, H, W)
        kernels: Filter bank (K, C, kh, kw) with odd kh, kw
        correlate: If True, apply the spatially flipped kernels (correlation)

    Returns:
        np.ndarray: Output grid (K, H, W)
    """
    volume = np.asarray(volume, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if volume.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(
            f"conv2d_bank expects (C,H,W) and (K,C,kh,kw), got {volume.shape} and {kernels.shape}"
        )
    if kernels.shape[1] != volume.shape[0]:
        raise DimensionError(
            f"kernel bank has {kernels.shape[1]} input channels, volume has {volume.shape[0]}"
        )
    _check_kernel(kernels)

    kh, kw = kernels.shape[2:]
    windows = _mirror_windows(volume, kh, kw)
    taps = kernels if correlate else kernels[:, :, ::-1, ::-1]
    out = np.tensordot(windows, taps, axes=([0, 3, 4], [1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))


def window_statistics(volume: np.ndarray, maps: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Correlate every input channel with every map over (kh, kw) offsets.

    Returns ``g[k, c, u, v] = sum_p maps[k, p] * volume[c, p + (u, v) - centre]``,
    the gradient of ``sum_k <maps[k], conv2d_bank(volume, W, correlate=True)[k]>``
    with respect to ``W``.
    """
    windows = _mirror_windows(np.asarray(volume, dtype=np.float64), kh, kw)
    return np.tensordot(maps, windows, axes=([1, 2], [1, 2]))


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    ensure_finite(m, "matrix")
    asymmetry = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asymmetry > SYMMETRY_TOLERANCE:
        raise PreconditionError(f"matrix is not symmetric (max |m - m^T| = {asymmetry:.3e})")
    return m


def _jacobi_eigen(m: np.ndarray, tolerance: float = 1e-14, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations on a symmetric matrix."""
    a = m.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for sweep in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tolerance * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        logger.warning(f"Jacobi eigendecomposition stopped after {max_sweeps} sweeps")
    return np.diag(a).copy(), v


def sym_eigen(m: np.ndarray, method: str = "lapack") -> Tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Args:
        m: Symmetric (n, n) matrix
        method: ``"lapack"`` (scipy.linalg.eigh) or ``"jacobi"`` (cyclic rotations)

    Returns:
        Tuple[np.ndarray, np.ndarray]: Eigenvalues sorted descending and the
        orthonormal eigenvectors as columns. Each eigenvector is signed so its
        largest-magnitude component is positive.

    Raises:
        PreconditionError: Matrix asymmetric beyond 1e-12
    """
    m = _check_symmetric(m)
    if method == "lapack":
        values, vectors = linalg.eigh(m)
    elif method == "jacobi":
        values, vectors = _jacobi_eigen(m)
    else:
        raise ConfigError(f"unknown eigendecomposition method: {method}")

    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = vectors[:, order]
    if vectors.size:
        pivots = np.argmax(np.abs(vectors), axis=0)
        signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
        signs[signs == 0] = 1.0
        vectors = vectors * signs
    return values, vectors


@dataclass(frozen=True)
class OptimizerOptions:
    """Options for :func:`lbfgs_minimize`."""

    max_iterations: int = 100
    gradient_tolerance: float = 1e-6
    history_size: int = 10
    line_search_max_steps: int = 40

    def __post_init__(self) -> None:
        for name in ("max_iterations", "history_size", "line_search_max_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"OptimizerOptions.{name} must be positive")
        if not self.gradient_tolerance > 0:
            raise ConfigError("OptimizerOptions.gradient_tolerance must be > 0")


class OptimizeResult(NamedTuple):
    """Result of :func:`lbfgs_minimize`."""

    argmin: np.ndarray
    trace: List[float]
    converged: bool


def _two_loop(gradient: np.ndarray, history: List[Tuple[np.ndarray, np.ndarray, float]]) -> np.ndarray:
    q = gradient.copy()
    alphas = []
    for s, y, rho in reversed(history):
        alpha = rho * np.dot(s, q)
        alphas.append(alpha)
        q -= alpha * y
    if history:
        s, y, _ = history[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), alpha in zip(history, reversed(alphas)):
        beta = rho * np.dot(y, q)
        q += (alpha - beta) * s
    return -q


def _evaluate(objective: Objective, x: np.ndarray) -> Tuple[float, np.ndarray]:
    value, gradient = objective(x)
    return float(value), np.asarray(gradient, dtype=np.float64)


def lbfgs_minimize(objective: Objective, start: np.ndarray, opts: Optional[OptimizerOptions] = None) -> OptimizeResult:
    """Minimize a smooth function with limited-memory BFGS.

    Uses the two-loop recursion for the search direction and Armijo
    backtracking (c1 = 1e-4, step halving), so the objective trace is
    non-increasing.

    Args:
        objective: Callable returning ``(value, gradient)``
        start: Starting point
        opts: Optimizer options

    Returns:
        OptimizeResult: Final iterate, per-iteration objective values
        (starting value first) and whether the gradient tolerance was met

    Raises:
        NumericalError: Non-finite objective; ``last_iterate`` holds the last
            finite point
    """
    opts = opts or OptimizerOptions()
    x = np.array(start, dtype=np.float64, copy=True)
    f, g = _evaluate(objective, x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalError("objective is not finite at the starting point", last_iterate=x)

    trace = [f]
    history: List[Tuple[np.ndarray, np.ndarray, float]] = []
    converged = False

    for iteration in range(opts.max_iterations):
        if np.max(np.abs(g), initial=0.0) <= opts.gradient_tolerance:
            converged = True
            break

        direction = _two_loop(g, history)
        slope = float(np.dot(g, direction))
        if not slope < 0:
            history.clear()
            direction = -g
            slope = float(np.dot(g, direction))

        step = 1.0 if history else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-12))
        accepted = False
        for _ in range(opts.line_search_max_steps):
            x_new = x + step * direction
            f_new, g_new = _evaluate(objective, x_new)
            if not np.isfinite(f_new) or not np.all(np.isfinite(g_new)):
                raise NumericalError(
                    f"objective became non-finite at iteration {iteration}", last_iterate=x.copy()
                )
            if f_new <= f + ARMIJO_C1 * step * slope:
                accepted = True
                break
            step *= 0.5

        if not accepted:
            logger.debug(f"Line search failed at iteration {iteration}; stopping")
            break

        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-10 * np.dot(y, y):
            history.append((s, y, 1.0 / sy))
            if len(history) > opts.history_size:
                history.pop(0)

        x, f, g = x_new, f_new, g_new
        trace.append(f)
        logger.debug(f"LBFGS iteration {iteration}: f={f:.6e} |g|inf={np.max(np.abs(g)):.3e}")
    else:
        converged = np.max(np.abs(g), initial=0.0) <= opts.gradient_tolerance

    return OptimizeResult(argmin=x, trace=trace, converged=bool(converged))
