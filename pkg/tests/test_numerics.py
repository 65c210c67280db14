import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from udc.errors import DimensionError, DivergenceError
from udc.numerics import (
    AdamW, AttentionParams, LayerNorm, Linear, MLP, Parameter, Tensor, TransformerBlock,
    adamw_step, backward, multi_head_attention, no_grad, stop_gradient,
)
from udc.numerics import tensor as T
from udc.numerics.gradcheck import check_gradients, max_relative_error, numerical_grad

RNG = np.random.default_rng(7)


def param(*shape, scale=1.0):
    return Parameter(scale * RNG.normal(size=shape))


UNARY = {
    "exp": (T.exp, np.exp),
    "tanh": (T.tanh, np.tanh),
    "sigmoid": (T.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "softplus": (T.softplus, lambda x: np.log1p(np.exp(x))),
    "gelu": (T.gelu, None),
    "relu": (T.relu, lambda x: np.maximum(x, 0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_numpy_and_finite_differences(name):
    op, ref = UNARY[name]
    x = param(3, 4)
    if name == "relu":
        x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)  # stay away from the kink
    if ref is not None:
        np.testing.assert_allclose(op(x).data, ref(x.data), rtol=1e-12, atol=1e-12)
    assert check_gradients(lambda: (op(x) * op(x)).sum(), [x]) < 1e-6


def test_log_sqrt_power_division():
    x = Parameter(RNG.uniform(0.5, 2.0, size=(4, 3)))
    y = Parameter(RNG.uniform(0.5, 2.0, size=(4, 3)))
    assert check_gradients(lambda: (T.log(x) + T.sqrt(y) + x ** 3 / y).sum(), [x, y]) < 1e-6


def test_broadcasting_gradients_reduce_to_operand_shape():
    a = param(4, 3)
    b = param(3)
    c = param(4, 1)
    assert check_gradients(lambda: ((a + b) * c - b / (c * c + 1)).sum(), [a, b, c]) < 1e-6


def test_matmul_batched_and_transposes():
    a = param(2, 3, 4)
    b = param(4, 5)
    np.testing.assert_allclose((a @ b).data, a.data @ b.data)
    assert check_gradients(lambda: ((a @ b).transpose(0, 2, 1) ** 2).sum(), [a, b]) < 1e-6


def test_softmax_and_logsumexp():
    x = param(3, 5)
    s = T.softmax(x, axis=-1).data
    np.testing.assert_allclose(s.sum(-1), 1.0)
    ref = np.log(np.exp(x.data).sum(-1))
    np.testing.assert_allclose(T.logsumexp(x, axis=-1).data, ref, rtol=1e-12)
    w = RNG.normal(size=(3, 5))
    assert check_gradients(lambda: (T.softmax(x, -1) * w).sum() + T.logsumexp(x, 1).sum(), [x]) < 1e-6


def test_logsumexp_is_stable_with_masked_entries():
    x = Tensor(np.array([[1.0, -1e30, 2.0], [1000.0, 1001.0, -1e30]]))
    out = T.logsumexp(x, axis=1).data
    np.testing.assert_allclose(out, [np.log(np.e + np.e ** 2), 1001 + np.log1p(np.exp(-1))])


def test_indexing_concat_stack_where():
    a = param(5, 3)
    b = param(2, 3)
    rows = np.array([0, 2, 2, 4])
    mask = RNG.random((4, 3)) > 0.5

    def fn():
        g = T.getitem(a, rows)
        cat = T.concat([g, b], axis=0)
        st_ = T.stack([cat, cat * 2.0], axis=0)
        return (T.where(mask, g, g * g).sum() + (st_ ** 2).sum())

    assert check_gradients(fn, [a, b]) < 1e-6


def test_reductions_keepdims():
    x = param(2, 3, 4)
    assert check_gradients(lambda: (x.mean(axis=1, keepdims=True) * x).sum() + x.sum(axis=(0, 2)).sum(), [x]) < 1e-6


def test_stop_gradient_blocks_flow():
    x = param(3)
    y = (stop_gradient(x) * x).sum()
    backward(y)
    np.testing.assert_allclose(x.grad, x.data)


def test_no_grad_builds_no_graph():
    x = param(3)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    assert T.grad_enabled()


def test_gradient_accumulates_over_shared_use():
    x = param(2)
    backward((x * 3.0).sum() + (x * x).sum())
    np.testing.assert_allclose(x.grad, 3.0 + 2 * x.data)


def test_check_finite_raises():
    with pytest.raises(DivergenceError):
        T.check_finite(Tensor(np.array([1.0, np.nan])))


def test_numerical_grad_restores_parameter():
    x = param(2, 2)
    before = x.data.copy()
    numerical_grad(lambda: (x ** 2).sum(), x)
    np.testing.assert_array_equal(x.data, before)


def test_max_relative_error_floor():
    assert max_relative_error(np.array([1e-12]), np.array([0.0]), floor=1e-6) < 1e-5


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_softmax_rows_are_distributions(x):
    s = T.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-2, 2)),
       arrays(np.float64, (5, 3), elements=st.floats(-2, 2)))
def test_matmul_gradient_is_outer_product(a, b):
    pa, pb = Parameter(a), Parameter(b)
    backward((pa @ pb).sum())
    np.testing.assert_allclose(pa.grad, np.ones((2, 3)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(pb.grad, a.T @ np.ones((2, 3)), atol=1e-12)


# -- layers ------------------------------------------------------------------

def test_linear_init_modes_and_shape_check():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(Linear(3, 3, rng, init="identity").weight.data, np.eye(3))
    assert not Linear(3, 2, rng, init="zeros").weight.data.any()
    with pytest.raises(DimensionError):
        Linear(3, 2, rng, init="identity")
    with pytest.raises(DimensionError):
        Linear(3, 2, rng)(np.zeros((1, 4)))


def test_layernorm_normalises_and_differentiates():
    ln = LayerNorm(6)
    x = param(4, 6, scale=3.0)
    out = ln(x).data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(-1), 1.0, rtol=1e-4)
    ln.gamma.data = RNG.normal(size=6)
    assert check_gradients(lambda: (ln(x) ** 2).sum(), [x, ln.gamma, ln.beta]) < 1e-5


def test_mlp_gradients():
    mlp = MLP([4, 5, 3], np.random.default_rng(1))
    x = param(2, 4)
    assert check_gradients(lambda: (mlp(x) ** 2).sum(), [x] + mlp.parameters()) < 1e-5


def _attention_reference(q, k, v, n_heads, mask=None):
    d = q.shape[-1] // n_heads
    out = []
    for h in range(n_heads):
        sl = slice(h * d, (h + 1) * d)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        if mask is not None:
            s = np.where(mask[None, :], s, -np.inf)
        w = np.exp(s - s.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        out.append(w @ v[:, sl])
    return np.concatenate(out, axis=1)


def test_parameter_free_attention_matches_loop_oracle():
    q, k, v = RNG.normal(size=(3, 8)), RNG.normal(size=(5, 8)), RNG.normal(size=(5, 8))
    mask = np.array([True, False, True, True, False])
    got = multi_head_attention(q, k, v, n_heads=2, key_mask=mask).data
    np.testing.assert_allclose(got, _attention_reference(q, k, v, 2, mask), rtol=1e-12)


def test_projected_attention_and_block_gradients():
    rng = np.random.default_rng(3)
    params = AttentionParams(4, 8, 4, 2, rng)
    x = param(2, 3, 4)
    mask = np.array([[True, True, False], [True, True, True]])
    assert check_gradients(lambda: (multi_head_attention(x, x, x, params, key_mask=mask) ** 2).sum(),
                           [x] + params.parameters()) < 1e-5
    block = TransformerBlock(4, 2, rng)
    assert check_gradients(lambda: (block(x, mask) ** 2).sum(), [x] + block.parameters()[:4]) < 1e-5


def test_state_dict_round_trip():
    a = MLP([3, 4, 2], np.random.default_rng(0))
    b = MLP([3, 4, 2], np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = RNG.normal(size=(2, 3))
    np.testing.assert_array_equal(a(x).data, b(x).data)


# -- optimisers -----------------------------------------------------------------

def test_adamw_matches_hand_unrolled_two_steps():
    p0 = np.array([1.0, -2.0])
    g1, g2 = np.array([0.5, 0.1]), np.array([-0.2, 0.3])
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
    p = Parameter(p0.copy())
    opt = AdamW([p], lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps)
    for g in (g1, g2):
        p.grad = g.copy()
        opt.step()
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    x1 = p0 * (1 - lr * wd) - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    x2 = x1 * (1 - lr * wd) - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    np.testing.assert_allclose(p.data, x2, rtol=1e-14)


def test_adamw_rejects_non_finite_gradient_and_skips_frozen():
    p = Parameter(np.ones(2), "w")
    q = Parameter(np.ones(2), requires_grad=False)
    opt = AdamW([p, q])
    q.grad = np.ones(2)
    p.grad = np.array([np.inf, 0.0])
    with pytest.raises(DivergenceError):
        opt.step()
    p.grad = np.ones(2)
    opt.step()
    np.testing.assert_array_equal(q.data, np.ones(2))


def test_adamw_step_none_gradient_untouched():
    moments = [(np.zeros(1), np.zeros(1))]
    out = adamw_step([np.ones(1)], [None], 0.1, 0.1, (0.9, 0.999), 1, moments)
    np.testing.assert_array_equal(out[0], np.ones(1))
