"""Parameterised building blocks on top of the autodiff tensor."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from udc.errors import ContractError, DimensionError
from udc.numerics import tensor as T
from udc.numerics.tensor import Parameter, Tensor, as_tensor


class Module:
    """Collects Parameters found in attributes, lists and dicts, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ContractError(f"state is missing keys: {missing[:5]}")
        for key, p in own.items():
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{key}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _walk(prefix: str, value) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield prefix, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{prefix}.{i}", item)
    elif isinstance(value, dict):
        for key in value:
            yield from _walk(f"{prefix}.{key}", value[key])


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "glorot"):
        if init == "identity":
            if d_in != d_out:
                raise DimensionError("identity init needs a square layer")
            w = np.eye(d_in)
        elif init == "zeros":
            w = np.zeros((d_in, d_out))
        else:
            w = _glorot(rng, d_in, d_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects width {self.d_in}, got {x.shape[-1]}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


def mlp_forward(layers: Sequence[tuple], x, activation: str = "gelu",
                final_activation: bool = False) -> Tensor:
    """Affine layers ``(W, b)`` with ``activation`` between them.

    ``W`` is stored (in, out) so rows of ``x`` are mapped by ``x @ W + b``.
    """
    act = T.ACTIVATIONS[activation]
    h = as_tensor(x)
    for i, (w, b) in enumerate(layers):
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(f"layer {i} expects width {w.shape[0]}, got {h.shape[-1]}")
        h = h @ w
        if b is not None:
            h = h + b
        if i < len(layers) - 1 or final_activation:
            h = act(h)
    return h


class MLP(Module):
    def __init__(self, widths: Sequence[int], rng: np.random.Generator, activation: str = "gelu",
                 init: str = "glorot"):
        if len(widths) < 2:
            raise DimensionError("an MLP needs at least input and output widths")
        self.activation = activation
        self.layers = [Linear(a, b, rng, init=init) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].weight.shape[1]

    def __call__(self, x) -> Tensor:
        return mlp_forward([(l.weight, l.bias) for l in self.layers], x, self.activation)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        mu = x.mean(axis=-1, keepdims=True)
        centred = x - mu
        var = (centred * centred).mean(axis=-1, keepdims=True)
        return centred / T.sqrt(var + self.eps) * self.gamma + self.beta


def mean_std(x, axis=None) -> tuple[Tensor, Tensor]:
    """Population mean and standard deviation (keepdims when ``axis`` is given)."""
    x = as_tensor(x)
    if x.size == 0:
        raise ContractError("mean_std of an empty tensor")
    keep = axis is not None
    mu = x.mean(axis=axis, keepdims=keep)
    centred = x - mu
    var = (centred * centred).mean(axis=axis, keepdims=keep)
    return mu, T.sqrt(var)


class AttentionParams(Module):
    """Q/K/V/O projections for :func:`multi_head_attention`."""

    def __init__(self, d_in: int, d_model: int, d_out: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise DimensionError(f"{n_heads} heads do not divide width {d_model}")
        self.n_heads = n_heads
        self.wq = Parameter(_glorot(rng, d_in, d_model))
        self.wk = Parameter(_glorot(rng, d_in, d_model))
        self.wv = Parameter(_glorot(rng, d_in, d_model))
        self.wo = Parameter(_glorot(rng, d_model, d_out))
        self.bo = Parameter(np.zeros(d_out))


_MASKED = -1e30


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def multi_head_attention(query, key, value, params: AttentionParams | None = None,
                         n_heads: int = 1, key_mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q Kᵀ/√d_head) V per head, heads concatenated.

    Accepts (N, d) or (B, N, d) operands. With ``params`` the inputs are
    projected and the output projection is applied; without, the raw feature
    columns are split across heads. ``key_mask`` is boolean (B, Nk) or (Nk,),
    True for keys that may be attended.
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    if key.shape[-2] != value.shape[-2]:
        raise DimensionError(f"key rows {key.shape[-2]} != value rows {value.shape[-2]}")
    if key.shape[-2] == 0:
        raise ContractError("attention over an empty key set")
    squeeze = query.ndim == 2
    if squeeze:
        query, key, value = (t.reshape((1,) + t.shape) for t in (query, key, value))
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    if params is not None:
        n_heads = params.n_heads
        q, k, v = query @ params.wq, key @ params.wk, value @ params.wv
    else:
        if query.shape[-1] != key.shape[-1]:
            raise DimensionError("parameter-free attention needs equal query/key widths")
        q, k, v = query, key, value
    d_model = q.shape[-1]
    if d_model % n_heads or v.shape[-1] % n_heads:
        raise DimensionError(f"{n_heads} heads do not divide width {d_model}")
    d_head = d_model // n_heads
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d_head))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, _MASKED)[:, None, None, :]
        scores = scores + bias
    attn = T.softmax(scores, axis=-1)
    out = attn @ vh  # (B, H, Nq, dv_head)
    b, h, nq, dv = out.shape
    out = out.transpose(0, 2, 1, 3).reshape(b, nq, h * dv)
    if params is not None:
        out = out @ params.wo + params.bo
    return out.reshape(out.shape[1:]) if squeeze else out


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, activation: str = "gelu"):
        self.net = MLP([dim, hidden, dim], rng, activation)

    def __call__(self, x) -> Tensor:
        return self.net(x)


class TransformerBlock(Module):
    """Pre-norm self-attention block with a position-wise feed-forward."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, ff_mult: int = 2,
                 activation: str = "gelu"):
        self.ln1 = LayerNorm(dim)
        self.attn = AttentionParams(dim, dim, dim, n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, rng, activation)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + multi_head_attention(h, h, h, self.attn, key_mask=key_mask)
        return x + self.ff(self.ln2(x))
