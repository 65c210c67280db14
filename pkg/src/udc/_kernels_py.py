"""Pure numpy versions of the compiled kernels (same contracts, same tie rules)."""

from __future__ import annotations

import numpy as np


def residual_quantize(r0: np.ndarray, codebooks: np.ndarray):
    n, dim = r0.shape
    levels = codebooks.shape[0]
    indices = np.empty((n, levels), dtype=np.int64)
    residuals = np.empty((n, levels + 1, dim))
    residuals[:, 0] = r0
    z = np.zeros((n, dim))
    for level in range(levels):
        book = codebooks[level]
        diff = residuals[:, level, None, :] - book[None, :, :]
        # argmin returns the first minimum, i.e. the lowest index on ties
        idx = np.argmin((diff * diff).sum(axis=-1), axis=1)
        indices[:, level] = idx
        residuals[:, level + 1] = residuals[:, level] - book[idx]
        z += book[idx]
    return indices, residuals, z


def ema_scatter(indices: np.ndarray, vectors: np.ndarray, n_codes: int):
    sums = np.zeros((n_codes, vectors.shape[1]))
    np.add.at(sums, indices, vectors)
    counts = np.bincount(indices, minlength=n_codes).astype(np.float64)
    return sums, counts


def topk_indices(scores: np.ndarray, k: int):
    k = min(k, scores.shape[1])
    return np.argsort(-scores, axis=1, kind="stable")[:, :k].astype(np.int64)
