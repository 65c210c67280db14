import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udc import _kernels_py, kernels
from udc.errors import ContractError, DimensionError

IMPLS = kernels.implementations()


def brute_force(r0, books):
    n, levels = len(r0), books.shape[0]
    idx = np.zeros((n, levels), dtype=np.int64)
    r = r0.copy()
    for l in range(levels):
        for i in range(n):
            best, arg = np.inf, -1
            for k in range(books.shape[1]):
                d = float(np.sum((r[i] - books[l, k]) ** 2))
                if d < best:
                    best, arg = d, k
            idx[i, l] = arg
            r[i] = r[i] - books[l, arg]
    return idx, r


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_residual_quantize_matches_brute_force(name):
    rng = np.random.default_rng(0)
    r0 = rng.normal(size=(40, 5))
    books = rng.normal(size=(3, 7, 5))
    idx, res, z = kernels.residual_quantize(r0, books, impl=IMPLS[name])
    ref_idx, ref_r = brute_force(r0, books)
    np.testing.assert_array_equal(idx, ref_idx)
    np.testing.assert_allclose(res[:, -1], ref_r, atol=1e-12)
    np.testing.assert_allclose(z + res[:, -1], r0, atol=1e-12)


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_quantize_ties_pick_lowest_index(name):
    books = np.array([[[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]])
    idx, _, _ = kernels.residual_quantize(np.array([[0.0, 0.0], [1.0, 0.0]]), books, impl=IMPLS[name])
    assert idx[:, 0].tolist() == [0, 0]


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_ema_scatter(name):
    idx = np.array([2, 0, 2, 2])
    vec = np.arange(8.0).reshape(4, 2)
    sums, counts = kernels.ema_scatter(idx, vec, 4, impl=IMPLS[name])
    np.testing.assert_array_equal(sums, [[2, 3], [0, 0], [0 + 4 + 6, 1 + 5 + 7], [0, 0]])
    np.testing.assert_array_equal(counts, [1, 0, 3, 0])


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_topk_descending_ties_low_id(name):
    scores = np.array([[0.1, 0.5, 0.5, 0.9], [1.0, 1.0, 1.0, 1.0]])
    out = kernels.topk_indices(scores, 3, impl=IMPLS[name])
    assert out.tolist() == [[3, 1, 2], [0, 1, 2]]
    assert kernels.topk_indices(scores, 10, impl=IMPLS[name]).shape == (2, 4)


def test_kernel_contract_errors():
    with pytest.raises(DimensionError):
        kernels.residual_quantize(np.zeros((2, 3)), np.zeros((1, 2, 4)))
    with pytest.raises(ContractError):
        kernels.residual_quantize(np.zeros((2, 3)), np.zeros((1, 0, 3)))
    with pytest.raises(ContractError):
        kernels.ema_scatter(np.array([5]), np.zeros((1, 2)), 3)
    with pytest.raises(ContractError):
        kernels.topk_indices(np.zeros((1, 3)), 0)


def test_backend_flag():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in IMPLS


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 4), st.integers(1, 9), st.integers(1, 6), st.integers(0, 10_000))
def test_backends_agree(n, levels, codes, dim, seed):
    rng = np.random.default_rng(seed)
    r0 = rng.normal(size=(n, dim))
    books = rng.normal(size=(levels, codes, dim))
    ref = _kernels_py.residual_quantize(r0, books)
    for impl in IMPLS.values():
        out = kernels.residual_quantize(r0, books, impl=impl)
        np.testing.assert_array_equal(out[0], ref[0])
        np.testing.assert_allclose(out[1], ref[1], atol=1e-12)
        scores = rng.normal(size=(n, codes))
        np.testing.assert_array_equal(kernels.topk_indices(scores, 3, impl=impl),
                                      _kernels_py.topk_indices(scores, 3))
