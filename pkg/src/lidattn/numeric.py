"""Dense float64 primitives shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. A mask is a
1-D boolean array whose ``True`` entries mark real frames; padding is only ever
at the tail, so every valid mask is a prefix of ones followed by zeros.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = [
    "ShapeError",
    "as_matrix",
    "check_mask",
    "prefix_mask",
    "matmul",
    "masked_row_softmax",
    "masked_mean_std",
    "make_rng",
    "subseed_rng",
    "gaussian_matrix",
    "depthwise_conv1d",
    "depthwise_conv1d_backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def prefix_mask(n_valid, length):
    """Boolean mask with ``n_valid`` leading ones out of ``length`` frames."""
    if not 1 <= n_valid <= length:
        raise ValueError(f"need 1 <= n_valid <= length, got {n_valid}, {length}")
    mask = np.zeros(length, dtype=bool)
    mask[:n_valid] = True
    return mask


def check_mask(mask, length):
    """Validate ``mask`` for a sequence of ``length`` frames.

    ``None`` means fully valid. Returns a boolean array; raises ``ValueError``
    if the mask has the wrong length, no valid frame, or padding that is not
    confined to the tail.
    """
    if mask is None:
        return np.ones(length, dtype=bool)
    mask = np.asarray(mask).astype(bool, copy=False)
    if mask.shape != (length,):
        raise ShapeError(f"mask length {mask.shape} does not match {length}")
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("mask has no valid frame")
    if not mask[:n_valid].all():
        raise ValueError("mask is not prefix-valid (padding must be at the tail)")
    return mask


def matmul(a, b):
    """Matrix product with an explicit shape check.

    Backed by the single-threaded BLAS that numpy links against, which keeps
    results bit-reproducible for a fixed thread count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _softmax_rows_inplace(s, mask=None):
    # s is overwritten with the row softmax; masked columns become exactly 0
    if mask is not None and not mask.all():
        s[:, ~mask] = -np.inf
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def masked_row_softmax(m, mask=None):
    """Row-wise softmax restricted to the columns where ``mask`` is true.

    Each row is shifted by its maximum over unmasked columns before
    exponentiation. Masked columns are exactly zero in the output.
    """
    m = as_matrix(m)
    if mask is not None:
        mask = np.asarray(mask).astype(bool, copy=False)
        if mask.shape != (m.shape[1],):
            raise ShapeError(f"mask length {mask.shape} does not match {m.shape[1]} columns")
        if not mask.any():
            raise ValueError("all columns are masked")
    return _softmax_rows_inplace(m.copy(), mask)


def softmax_backward(grad_out, probs):
    """Gradient through a row softmax given its output ``probs``."""
    return probs * (grad_out - np.sum(grad_out * probs, axis=1, keepdims=True))


def masked_mean_std(m, mask=None, epsilon=1e-8):
    """Per-column mean and ``sqrt(var + epsilon)`` over the valid rows.

    The variance is the population variance (divided by the number of valid
    rows). Values stored in padded rows never reach the result.
    """
    m = as_matrix(m)
    mask = check_mask(mask, m.shape[0])
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    valid = m[mask]
    mean = valid.mean(axis=0)
    var = np.mean((valid - mean) ** 2, axis=0)
    return mean, np.sqrt(var + epsilon)


def make_rng(seed):
    """PCG64 generator; a fixed seed yields the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def subseed_rng(seed, name):
    """Independent generator for the named sub-stream of ``seed``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.PCG64(ss))


def gaussian_matrix(rng, rows, cols):
    if rows < 1 or cols < 1:
        raise ValueError(f"rows and cols must be >= 1, got {rows}, {cols}")
    return rng.standard_normal((rows, cols))


def _check_conv(v, kernel, mask):
    v = as_matrix(v, "v")
    kernel = as_matrix(kernel, "kernel")
    width = kernel.shape[0]
    if width % 2 == 0:
        raise ValueError(f"kernel width must be odd, got {width}")
    if kernel.shape[1] != v.shape[1]:
        raise ShapeError(f"kernel has {kernel.shape[1]} channels, input has {v.shape[1]}")
    mask = check_mask(mask, v.shape[0])
    return v, kernel, mask


def depthwise_conv1d(v, kernel, mask=None):
    """Per-channel temporal cross-correlation with zero "same" padding.

    ``kernel`` has shape (width, channels) and ``out[t, c]`` is
    ``sum_j kernel[j, c] * v[t + j - width // 2, c]``. Padded frames are read
    as zeros and their outputs are set to zero.
    """
    v, kernel, mask = _check_conv(v, kernel, mask)
    n, width = v.shape[0], kernel.shape[0]
    half = width // 2
    padded = np.zeros((n + 2 * half, v.shape[1]))
    padded[half:half + n][mask] = v[mask]
    out = np.zeros_like(v)
    for j in range(width):
        out += kernel[j] * padded[j:j + n]
    out[~mask] = 0.0
    return out


def depthwise_conv1d_backward(grad_out, v, kernel, mask=None):
    """Gradients of :func:`depthwise_conv1d` with respect to ``v`` and ``kernel``."""
    v, kernel, mask = _check_conv(v, kernel, mask)
    n, width = v.shape[0], kernel.shape[0]
    half = width // 2
    g = np.where(mask[:, None], grad_out, 0.0)
    padded = np.zeros((n + 2 * half, v.shape[1]))
    padded[half:half + n][mask] = v[mask]
    grad_kernel = np.empty_like(kernel)
    grad_padded = np.zeros_like(padded)
    for j in range(width):
        grad_kernel[j] = np.sum(g * padded[j:j + n], axis=0)
        grad_padded[j:j + n] += kernel[j] * g
    grad_v = grad_padded[half:half + n]
    grad_v[~mask] = 0.0
    return grad_v, grad_kernel
