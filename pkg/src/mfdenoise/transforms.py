"""Orthonormal transforms used by the BM3D collaborative filter."""
from __future__ import annotations

import numpy as np
from scipy import fft

SQRT_HALF = np.sqrt(0.5)


def transform_2d(patches, k: int | None = None) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes."""
    patches = np.asarray(patches, dtype=np.float64)
    if k is not None and patches.shape[-2:] != (k, k):
        raise ValueError(f"expected {k}x{k} patches, got {patches.shape[-2:]}")
    return fft.dctn(patches, type=2, axes=(-2, -1), norm="ortho")


def inverse_transform_2d(coeffs, k: int | None = None) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if k is not None and coeffs.shape[-2:] != (k, k):
        raise ValueError(f"expected {k}x{k} coefficients, got {coeffs.shape[-2:]}")
    return fft.idctn(coeffs, type=2, axes=(-2, -1), norm="ortho")


def _check_dyadic(n):
    if n < 1 or n & (n - 1):
        raise ValueError(f"Haar transform needs a power-of-two length, got {n}")


def transform_1d(x, axis: int = 0) -> np.ndarray:
    """Orthonormal Haar transform along ``axis``.

    Output order is coarse to fine: the first entry is the scaled mean
    (``sum / sqrt(n)``), followed by detail bands of increasing resolution.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    n = x.shape[0]
    _check_dyadic(n)
    out = x.copy()
    length = n
    while length > 1:
        half = length // 2
        a = out[0:length:2]
        b = out[1:length:2]
        approx = (a + b) * SQRT_HALF
        detail = (a - b) * SQRT_HALF
        out[:half] = approx
        out[half:length] = detail
        length = half
    return np.moveaxis(out, 0, axis)


def inverse_transform_1d(c, axis: int = 0) -> np.ndarray:
    c = np.moveaxis(np.asarray(c, dtype=np.float64), axis, 0)
    n = c.shape[0]
    _check_dyadic(n)
    out = c.copy()
    length = 2
    while length <= n:
        half = length // 2
        approx = out[:half].copy()
        detail = out[half:length].copy()
        out[0:length:2] = (approx + detail) * SQRT_HALF
        out[1:length:2] = (approx - detail) * SQRT_HALF
        length *= 2
    return np.moveaxis(out, 0, axis)


def haar_matrix(n: int) -> np.ndarray:
    """Dense matrix of :func:`transform_1d`; handy for checks."""
    _check_dyadic(n)
    return transform_1d(np.eye(n), axis=0)


def group_transform(groups) -> np.ndarray:
    """3-D transform of ``(..., n, k, k)`` groups: 2-D DCT then Haar over ``n``."""
    return transform_1d(transform_2d(groups), axis=-3)


def inverse_group_transform(coeffs) -> np.ndarray:
    return inverse_transform_2d(inverse_transform_1d(coeffs, axis=-3))
