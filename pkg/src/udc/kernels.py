"""Hot-loop kernels, compiled when the extension is built, numpy otherwise.

Set ``UDC_PURE_PYTHON=1`` before import to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from udc import _kernels_py
from udc.errors import ContractError, DimensionError

_compiled = None
if os.environ.get("UDC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from udc import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def residual_quantize(r0: np.ndarray, codebooks: np.ndarray, impl=None):
    """Greedy per-level nearest code on the running residual.

    Returns ``(indices (N, L), residuals (N, L+1, D), z (N, D))`` where
    ``residuals[:, 0]`` is the input and ``z`` sums the chosen codes.
    """
    r0 = np.ascontiguousarray(r0, dtype=np.float64)
    codebooks = np.ascontiguousarray(codebooks, dtype=np.float64)
    if r0.ndim != 2 or codebooks.ndim != 3:
        raise DimensionError("expected r0 (N, D) and codebooks (L, K, D)")
    if codebooks.shape[1] == 0:
        raise ContractError("codebook level has no codes")
    if r0.shape[1] != codebooks.shape[2]:
        raise DimensionError(f"residual width {r0.shape[1]} != code width {codebooks.shape[2]}")
    return (impl or _impl).residual_quantize(r0, codebooks)


def ema_scatter(indices: np.ndarray, vectors: np.ndarray, n_codes: int, impl=None):
    """Per-code vector sums and assignment counts."""
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    vectors = np.ascontiguousarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(indices) != len(vectors):
        raise DimensionError("indices and vectors must align row-wise")
    if len(indices) and (indices.min() < 0 or indices.max() >= n_codes):
        raise ContractError("code index out of range")
    return (impl or _impl).ema_scatter(indices, vectors, n_codes)


def topk_indices(scores: np.ndarray, k: int, impl=None) -> np.ndarray:
    """Row-wise indices of the ``k`` largest scores, descending, ties to the lower id."""
    if k < 1:
        raise ContractError("K must be >= 1")
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    return (impl or _impl).topk_indices(scores, k)


def implementations() -> dict:
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
