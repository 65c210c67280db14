"""Discrete representation learning: two encoders over one shared residual codebook.

The CO branch encodes collaborative disease embeddings, the text branch
encodes text embeddings. Both quantise against the same codebook, are
modulated by a visit-condition vector, decoded back to their own space, and
tied together by contrastive terms, a cross commitment loss and a two-view
EMA codebook update. After training, rare diseases are re-expressed in the
collaborative space through the text path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from udc import kernels
from udc.ehr import PatientRecord, RaritySplit, cooccurrence_index
from udc.errors import ConfigError, ContractError, DimensionError, DivergenceError
from udc.numerics import tensor as T
from udc.numerics.layers import MLP, AttentionParams, Linear, Module, multi_head_attention
from udc.numerics.optim import AdamW
from udc.numerics.tensor import Parameter, Tensor, as_tensor, backward, no_grad, stop_gradient

log = logging.getLogger(__name__)

BRANCHES = ("co", "te")
ABLATIONS = ("NCO", "NT", "NM", "NS", "NCD")
_MASKED = -1e30


@dataclass
class DRLConfig:
    levels: int = 4
    codes_per_level: int = 64
    dim: int = 128
    hidden: int = 128
    activation: str = "gelu"
    alpha: float = 0.25
    kappa: float = 0.99
    eps: float = 1e-5
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    n_heads: int = 4
    condition_encoder: str = "mha"  # or "mlp"
    include_positive_in_denominator: bool = False
    ema_normalizer_mode: str = "count"  # or "literal"
    ema_target: str = "residual"  # or "literal_z"
    ema_z_source: str = "pre"  # literal_z only: quantised sum before or after calibration
    ema_learned_attention: bool = False
    dead_code_threshold: float = 1e-3
    dead_code_reset: bool = True
    negative_replace_prob: float = 0.5
    NCO: bool = False
    NT: bool = False
    NM: bool = False
    NS: bool = False
    NCD: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0 <= self.kappa <= 1:
            raise ConfigError("kappa must lie in [0, 1]")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if min(self.levels, self.codes_per_level, self.dim, self.hidden, self.batch_size) < 1:
            raise ConfigError("levels, codes_per_level, dim, hidden and batch_size must be positive")
        if self.dim % self.n_heads:
            raise ConfigError(f"{self.n_heads} heads do not divide dim {self.dim}")
        choices = {"condition_encoder": ("mha", "mlp"), "ema_normalizer_mode": ("count", "literal"),
                   "ema_target": ("residual", "literal_z"), "ema_z_source": ("pre", "post")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}")
        if not 0 < self.negative_replace_prob <= 1:
            raise ConfigError("negative_replace_prob must lie in (0, 1]")

    def flags(self) -> dict[str, bool]:
        return {f: getattr(self, f) for f in ABLATIONS}


# -- codebook and EMA state ----------------------------------------------------

class Codebook:
    """L x K x dim code vectors. Mutated only by the EMA update, never by gradient."""

    def __init__(self, vectors: np.ndarray):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 3:
            raise DimensionError("codebook must be (levels, codes, dim)")
        self.vectors = vectors

    @property
    def levels(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_codes(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]


@dataclass
class DistillState:
    """EMA numerators ``o`` (L, K, dim) and normalisers ``n`` ((L, K) or (L, K, dim))."""

    o: np.ndarray
    n: np.ndarray
    kappa: float

    @classmethod
    def from_codebook(cls, book: Codebook, kappa: float, mode: str = "count") -> "DistillState":
        # o = c, n = 1 makes c = o / n hold from the start, so kappa = 1 is a fixed point
        n = np.ones(book.vectors.shape[:2]) if mode == "count" else np.ones_like(book.vectors)
        return cls(book.vectors.copy(), n, kappa)


@dataclass
class QuantizationResult:
    indices: np.ndarray  # (N, L)
    residuals: np.ndarray  # (N, L+1, dim); residuals[:, l] is the input to level l+1
    z: np.ndarray  # (N, dim)


def quantize_residual(r0, codebook: Codebook) -> QuantizationResult:
    """Greedy residual quantisation, lowest index on ties."""
    r0 = r0.data if isinstance(r0, Tensor) else np.asarray(r0, dtype=np.float64)
    squeeze = r0.ndim == 1
    if squeeze:
        r0 = r0[None]
    idx, res, z = kernels.residual_quantize(r0, codebook.vectors)
    if squeeze:
        return QuantizationResult(idx[0], res[0], z[0])
    return QuantizationResult(idx, res, z)


def _attend(query: np.ndarray, keys: np.ndarray, params: AttentionParams | None, n_heads: int) -> np.ndarray:
    with no_grad():
        return multi_head_attention(query, keys, keys, params, n_heads=1 if params is None else n_heads).data


def codebook_ema_update(codebook: Codebook, state: DistillState, idx_co: np.ndarray, idx_te: np.ndarray,
                        x_co: np.ndarray, x_te: np.ndarray, mode: str = "count",
                        cross_view: bool = True, eps: float = 1e-5,
                        attention: AttentionParams | None = None, n_heads: int = 1,
                        dead_threshold: float | None = None, reset_pool: np.ndarray | None = None,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """One co-teacher EMA step over a batch; returns the per-level reset mask (L, K).

    ``idx_*`` are (N, L) assignments. ``x_*`` are the vectors pulled into the
    assigned codes, either (N, L, dim) per-level residual inputs or (N, dim)
    shared across levels. With ``cross_view`` each CO-assigned vector x_d is
    averaged with b~_d, the attention read-out of the CO vectors of the batch
    queried by the text vector of d, and symmetrically b_d for text
    assignments. Without it this is the plain pooled EMA.
    """
    idx_co = np.asarray(idx_co, dtype=np.int64)
    idx_te = np.asarray(idx_te, dtype=np.int64)
    x_co = np.asarray(x_co, dtype=np.float64)
    x_te = np.asarray(x_te, dtype=np.float64)
    levels, n_codes, dim = codebook.vectors.shape
    if idx_co.shape != idx_te.shape or idx_co.shape[1] != levels:
        raise DimensionError("assignment arrays must be (N, levels) for both branches")
    if x_co.ndim == 2:
        x_co = np.repeat(x_co[:, None, :], levels, axis=1)
        x_te = np.repeat(x_te[:, None, :], levels, axis=1)
    kappa = state.kappa
    reset = np.zeros((levels, n_codes), dtype=bool)
    for l in range(levels):
        a, b = x_co[:, l], x_te[:, l]
        if cross_view and len(a):
            b_co = _attend(a, b, attention, n_heads)  # query CO, read text: b_d
            b_te = _attend(b, a, attention, n_heads)  # query text, read CO: b~_d
            v_co, v_te = (a + b_te) / 2.0, (b + b_co) / 2.0
        else:
            v_co, v_te = a, b
        s_co, c_co = kernels.ema_scatter(idx_co[:, l], v_co, n_codes)
        s_te, c_te = kernels.ema_scatter(idx_te[:, l], v_te, n_codes)
        state.o[l] = kappa * state.o[l] + (1.0 - kappa) * (s_co + s_te)
        if mode == "count":
            state.n[l] = kappa * state.n[l] + (1.0 - kappa) * (c_co + c_te)
            denom = state.n[l][:, None]
            live = state.n[l] > 0
        else:
            raw_co, _ = kernels.ema_scatter(idx_co[:, l], a, n_codes)
            raw_te, _ = kernels.ema_scatter(idx_te[:, l], b, n_codes)
            state.n[l] = kappa * state.n[l] + (1.0 - kappa) * (raw_co + raw_te)
            denom = np.where(np.abs(state.n[l]) < eps, np.where(state.n[l] < 0, -eps, eps), state.n[l])
            live = np.ones(n_codes, dtype=bool)
        updated = state.o[l] / denom
        codebook.vectors[l][live] = updated[live]
        if dead_threshold is not None and reset_pool is not None and len(reset_pool):
            size = state.n[l] if mode == "count" else np.abs(state.n[l]).mean(axis=1)
            dead = np.flatnonzero(size < dead_threshold)
            if len(dead):
                rng = rng or np.random.default_rng(0)
                pool = reset_pool[:, l] if reset_pool.ndim == 3 else reset_pool
                picks = pool[rng.integers(0, len(pool), size=len(dead))]
                codebook.vectors[l][dead] = picks
                state.o[l][dead] = picks
                state.n[l][dead] = 1.0
                reset[l, dead] = True
    if not (np.all(np.isfinite(codebook.vectors)) and np.all(np.isfinite(state.o))
            and np.all(np.isfinite(state.n))):
        raise DivergenceError("codebook EMA produced non-finite state")
    return reset


# -- condition calibration -----------------------------------------------------

class Calibrator(Module):
    """Visit-condition summary f_d and the scale/shift modulation of a quantised vector."""

    def __init__(self, d_in: int, dim: int, n_heads: int, rng: np.random.Generator,
                 encoder: str = "mha", eps: float = 1e-5):
        self.encoder = encoder
        self.n_heads = n_heads
        if encoder == "mha":
            self.mha_p = AttentionParams(d_in, dim, dim, n_heads, rng)
            self.mha_m = AttentionParams(d_in, dim, dim, n_heads, rng)
        else:
            self.mlp_p = MLP([d_in, dim, dim], rng)
            self.mlp_m = MLP([d_in, dim, dim], rng)
        self.default_p = Parameter(np.zeros(dim), "default_p")
        self.default_m = Parameter(np.zeros(dim), "default_m")
        # gamma starts at zero and beta at identity, so calibration starts as a no-op
        self.gamma = Linear(dim, dim, rng, init="zeros")
        self.beta = Linear(dim, dim, rng, init="identity")
        self.eps = eps
        self.calls = 0

    def _summary(self, kind: str, rows: Tensor, mask: np.ndarray) -> Tensor:
        """Masked row-mean of the self-attended set; empty sets fall back to the default."""
        default = self.default_p if kind == "p" else self.default_m
        counts = mask.sum(axis=1)
        if self.encoder == "mha":
            safe = mask.copy()
            safe[counts == 0, 0] = True  # keeps softmax finite; the row is replaced below
            out = multi_head_attention(rows, rows, rows, self.mha_p if kind == "p" else self.mha_m,
                                       key_mask=safe)
        else:
            out = (self.mlp_p if kind == "p" else self.mlp_m)(rows)
        weights = mask / np.maximum(counts, 1)[:, None]
        pooled = (out * weights[:, :, None]).sum(axis=1)
        empty = (counts == 0).astype(np.float64)[:, None]
        return pooled + default * empty

    def condition(self, proc_rows: Tensor, proc_mask: np.ndarray, med_rows: Tensor,
                  med_mask: np.ndarray) -> Tensor:
        """Batched f_d: (B, Np, d_in) / (B, Nm, d_in) padded sets with boolean masks."""
        return self._summary("p", proc_rows, proc_mask) + self._summary("m", med_rows, med_mask)

    def calibrate(self, z_old, f) -> Tensor:
        """z = gamma(z_old) * (f - mean f) / (std f + eps) + beta(z_old), statistics per row."""
        self.calls += 1
        z_old, f = as_tensor(z_old), as_tensor(f)
        if z_old.shape[-1] != f.shape[-1]:
            raise DimensionError("z and f widths differ")
        mu = f.mean(axis=-1, keepdims=True)
        centred = f - mu
        sd = T.sqrt((centred * centred).mean(axis=-1, keepdims=True))
        return self.gamma(z_old) * (centred / (sd + self.eps)) + self.beta(z_old)


def pad_sets(table: np.ndarray, sets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Gather rows of ``table`` into a (B, Nmax, d) block with a boolean mask."""
    width = max([len(s) for s in sets] + [1])
    out = np.zeros((len(sets), width, table.shape[1]))
    mask = np.zeros((len(sets), width), dtype=bool)
    for i, s in enumerate(sets):
        s = list(s)
        if s:
            out[i, :len(s)] = table[s]
            mask[i, :len(s)] = True
    return out, mask


# -- negatives and targets -----------------------------------------------------

def synthetic_negative(target: Sequence[int], vocab_size: int, rng: np.random.Generator,
                       p: float = 0.5) -> tuple[int, ...]:
    """Replace each element with probability ``p`` by a fresh id outside the set.

    At least one element is always replaced: if the independent draws pick
    none, one position is chosen uniformly. Replacements are distinct.
    """
    target = sorted(set(int(x) for x in target))
    if not target:
        raise ContractError("cannot corrupt an empty target set")
    free = np.setdiff1d(np.arange(vocab_size), target)
    replace = rng.random(len(target)) < p
    if not replace.any():
        replace[rng.integers(len(target))] = True
    k = int(replace.sum())
    if len(free) < k:
        raise ContractError(f"vocabulary of {vocab_size} too small to replace {k} of {len(target)} ids")
    fresh = rng.choice(free, size=k, replace=False)
    out = [t for t, r in zip(target, replace) if not r] + [int(x) for x in fresh]
    return tuple(sorted(out))


def _sum_matrix(sets: Sequence[Sequence[int]], size: int) -> np.ndarray:
    m = np.zeros((len(sets), size))
    for i, s in enumerate(sets):
        for j in s:
            m[i, j] += 1.0
    return m


def contrastive_losses(z: Tensor, zt: Tensor, s: Tensor, st: Tensor, s_neg: Tensor, st_neg: Tensor,
                       W, cfg: DRLConfig, valid: np.ndarray | None = None) -> tuple[Tensor, ...]:
    """(intra CO, inter CO, intra text, inter text) bilinear contrastive terms.

    For anchor z_d, positive target t_d and corrupted target t'_d the term is
    log(exp(t'_d W z_d) + sum_{j != d} exp(t_j W z_d)) - t_d W z_d, averaged
    over anchors. ``NM`` drops the in-batch sum, ``NS`` the synthetic term;
    the positive joins the denominator only when configured. ``valid`` masks
    anchors whose target set was empty.
    """
    zero = Tensor(0.0)
    if cfg.NT:
        return zero, zero, zero, zero
    W = as_tensor(W)
    b = z.shape[0]
    valid = np.ones(b, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    allow = np.zeros((b, b + 1), dtype=bool)
    if not cfg.NM:
        allow[:, :b] = ~np.eye(b, dtype=bool)
        allow[:, :b] &= valid[None, :]  # other anchors' targets only when they exist
    if cfg.include_positive_in_denominator:
        allow[np.arange(b), np.arange(b)] = True
    if not cfg.NS:
        allow[:, b] = True
    rows = np.flatnonzero(valid & allow.any(axis=1))
    if not len(rows):
        return zero, zero, zero, zero
    bias = np.where(allow, 0.0, _MASKED)[rows]

    def term(anchor: Tensor, pos: Tensor, neg: Tensor) -> Tensor:
        q = anchor @ W.T  # q_d = W z_d, so t W z_d = t . q_d
        scores = q @ pos.T  # [d, j] = pos_j W z_d
        synth = (q * neg).sum(axis=1, keepdims=True)
        logits = T.concat([scores, synth], axis=1)
        logits = T.getitem(logits, rows) + bias
        positive = T.getitem(scores, (rows, rows))
        return T.mean(T.logsumexp(logits, axis=1) - positive)

    return term(z, s, s_neg), term(z, st, st_neg), term(zt, st, st_neg), term(zt, s, s_neg)


def commitment_loss(r_co, r_te, z, zt, alpha: float) -> tuple[Tensor, Tensor]:
    """CO and text halves of the cross commitment loss; z, zt are stop-gradient targets."""
    r_co, r_te = as_tensor(r_co), as_tensor(r_te)
    z, zt = stop_gradient(z), stop_gradient(zt)

    def sq(a, b):
        d = a - b
        return T.mean((d * d).sum(axis=-1)) if d.ndim > 1 else (d * d).sum()

    co = sq(r_co, z) * alpha + sq(r_co, zt) * (alpha / 2.0)
    te = sq(r_te, zt) * alpha + sq(r_te, z) * (alpha / 2.0)
    return co, te


def recon_loss(target, recon) -> Tensor:
    d = as_tensor(recon) - as_tensor(target)
    return T.mean((d * d).sum(axis=-1)) if d.ndim > 1 else (d * d).sum()


@dataclass
class LossBreakdown:
    recon_co: float
    recon_te: float
    con_intra_co: float
    con_inter_co: float
    con_intra_te: float
    con_inter_te: float
    com_co: float
    com_te: float
    total: float

    PARTS = ("recon_co", "recon_te", "con_intra_co", "con_inter_co", "con_intra_te",
             "con_inter_te", "com_co", "com_te")

    @property
    def recon(self) -> float:
        return self.recon_co + self.recon_te

    @property
    def con(self) -> float:
        return self.con_intra_co + self.con_inter_co + self.con_intra_te + self.con_inter_te

    @property
    def com(self) -> float:
        return self.com_co + self.com_te

    def parts(self) -> list[float]:
        return [getattr(self, k) for k in self.PARTS]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- the model -------------------------------------------------------------------

@dataclass
class Batch:
    """One DRL step worth of inputs (all entity ids)."""

    diseases: np.ndarray
    procs: list[tuple[int, ...]]
    meds: list[tuple[int, ...]]
    targets: list[tuple[int, ...]]
    negatives: list[tuple[int, ...]]


@dataclass
class Forward:
    loss: Tensor
    breakdown: LossBreakdown
    q_co: QuantizationResult
    q_te: QuantizationResult
    z_co: np.ndarray  # calibrated
    z_te: np.ndarray
    r_co: np.ndarray
    r_te: np.ndarray


class DRL(Module):
    def __init__(self, co_tables: Mapping[str, np.ndarray], text_tables: Mapping[str, np.ndarray],
                 cfg: DRLConfig, target_kind: str = "diagnosis"):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.co = {k: np.array(v, dtype=np.float64) for k, v in co_tables.items()}
        self.te = {k: np.array(v, dtype=np.float64) for k, v in text_tables.items()}
        for k in self.co:
            self.co[k].setflags(write=False)
            self.te[k].setflags(write=False)
        self.target_kind = target_kind
        d_co = self.co["diagnosis"].shape[1]
        d_te = self.te["diagnosis"].shape[1]
        self.enc = {"co": MLP([d_co, cfg.hidden, cfg.dim], rng, cfg.activation),
                    "te": MLP([d_te, cfg.hidden, cfg.dim], rng, cfg.activation)}
        self.dec = {"co": MLP([cfg.dim, cfg.hidden, d_co], rng, cfg.activation),
                    "te": MLP([cfg.dim, cfg.hidden, d_te], rng, cfg.activation)}
        self.cal = {"co": Calibrator(d_co, cfg.dim, cfg.n_heads, rng, cfg.condition_encoder, cfg.eps),
                    "te": Calibrator(d_te, cfg.dim, cfg.n_heads, rng, cfg.condition_encoder, cfg.eps)}
        self.W = Parameter(np.eye(cfg.dim), "W")
        self.ema_attention = (AttentionParams(cfg.dim, cfg.dim, cfg.dim, cfg.n_heads, rng)
                              if cfg.ema_learned_attention else None)
        if self.ema_attention is not None:
            self.ema_attention.set_requires_grad(False)
        self.codebook = Codebook(np.zeros((cfg.levels, cfg.codes_per_level, cfg.dim)))
        self.state = DistillState.from_codebook(self.codebook, cfg.kappa, cfg.ema_normalizer_mode)
        self.recent: np.ndarray | None = None

    # -- branch plumbing -------------------------------------------------------
    def tables(self, branch: str) -> dict[str, np.ndarray]:
        return self.co if branch == "co" else self.te

    def codebook_for(self, branch: str) -> Codebook:
        if branch not in BRANCHES:
            raise ContractError(f"unknown branch {branch!r}")
        return self.codebook

    def encode_branch(self, x, branch: str) -> Tensor:
        enc = self.enc[branch]
        x = as_tensor(x)
        if x.shape[-1] != enc.d_in:
            raise ContractError(f"{branch} encoder expects width {enc.d_in}, got {x.shape[-1]}")
        return enc(x)

    def decode_branch(self, z, branch: str) -> Tensor:
        dec = self.dec[branch]
        z = as_tensor(z)
        if z.shape[-1] != dec.d_in:
            raise ContractError(f"{branch} decoder expects width {dec.d_in}, got {z.shape[-1]}")
        return dec(z)

    def target_representation(self, sets: Sequence[Sequence[int]], branch: str) -> Tensor:
        """Sum of encoded target entities per set (empty sets give a zero row)."""
        table = self.tables(branch)[self.target_kind]
        return T.matmul(_sum_matrix(sets, table.shape[0]), self.encode_branch(table, branch))

    def condition_vector(self, procs: Sequence[Sequence[int]], meds: Sequence[Sequence[int]],
                         branch: str) -> Tensor:
        tables = self.tables(branch)
        p_rows, p_mask = pad_sets(tables["procedure"], procs)
        m_rows, m_mask = pad_sets(tables["medication"], meds)
        return self.cal[branch].condition(Tensor(p_rows), p_mask, Tensor(m_rows), m_mask)

    @property
    def calibrate_calls(self) -> int:
        return sum(c.calls for c in self.cal.values())

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    # -- codebook init -----------------------------------------------------------
    def init_codebook(self, diseases: Sequence[int], rng: np.random.Generator) -> None:
        """Level by level, sample codes from the pooled residuals of both branches."""
        with no_grad():
            pool = np.concatenate([self.encode_branch(self.co["diagnosis"][list(diseases)], "co").data,
                                   self.encode_branch(self.te["diagnosis"][list(diseases)], "te").data])
        residual = pool.copy()
        for l in range(self.cfg.levels):
            k = self.cfg.codes_per_level
            picks = rng.choice(len(residual), size=k, replace=len(residual) < k)
            self.codebook.vectors[l] = residual[picks]
            nearest = kernels.residual_quantize(residual, self.codebook.vectors[l:l + 1])[0][:, 0]
            residual = residual - self.codebook.vectors[l][nearest]
        self.state = DistillState.from_codebook(self.codebook, self.cfg.kappa, self.cfg.ema_normalizer_mode)
        self.recent = pool

    # -- forward ------------------------------------------------------------------
    def forward(self, batch: Batch, quant: tuple[QuantizationResult, QuantizationResult] | None = None) -> Forward:
        """Losses for a batch; ``quant`` pins the code assignments (gradient checks)."""
        cfg = self.cfg
        ids = list(batch.diseases)
        e = {"co": self.co["diagnosis"][ids], "te": self.te["diagnosis"][ids]}
        r0 = {b: self.encode_branch(e[b], b) for b in BRANCHES}
        q = {}
        for i, b in enumerate(BRANCHES):
            q[b] = quant[i] if quant is not None else quantize_residual(r0[b], self.codebook)
        # straight-through: forward value is the code sum, backward is identity into the encoder
        zq = {b: r0[b] + Tensor(q[b].z - r0[b].data) for b in BRANCHES}
        if cfg.NCO:
            z = zq
        else:
            z = {b: self.cal[b].calibrate(zq[b], self.condition_vector(batch.procs, batch.meds, b))
                 for b in BRANCHES}
        rec = {b: recon_loss(e[b], self.decode_branch(z[b], b)) for b in BRANCHES}
        valid = np.array([len(t) > 0 for t in batch.targets])
        if cfg.NT or not valid.any():
            con = (Tensor(0.0),) * 4
        else:
            s = {b: self.target_representation(batch.targets, b) for b in BRANCHES}
            s_neg = {b: self.target_representation(batch.negatives, b) for b in BRANCHES}
            con = contrastive_losses(z["co"], z["te"], s["co"], s["te"], s_neg["co"], s_neg["te"],
                                     self.W, cfg, valid)
        com_co, com_te = commitment_loss(r0["co"], r0["te"], q["co"].z, q["te"].z, cfg.alpha)
        terms = [rec["co"], rec["te"], *con, com_co, com_te]
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        parts = [t.item() for t in terms]
        breakdown = LossBreakdown(*parts, total=total.item())
        return Forward(total, breakdown, q["co"], q["te"], z["co"].data, z["te"].data,
                       r0["co"].data, r0["te"].data)

    def ema_step(self, fw: Forward, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        if cfg.ema_target == "residual":
            x_co, x_te = fw.q_co.residuals[:, :-1], fw.q_te.residuals[:, :-1]
        elif cfg.ema_z_source == "pre":
            x_co, x_te = fw.q_co.z, fw.q_te.z
        else:
            x_co, x_te = fw.z_co, fw.z_te
        self.recent = np.concatenate([fw.r_co, fw.r_te])
        pool = np.concatenate([fw.q_co.residuals[:, :-1], fw.q_te.residuals[:, :-1]])
        return codebook_ema_update(
            self.codebook, self.state, fw.q_co.indices, fw.q_te.indices, x_co, x_te,
            mode=cfg.ema_normalizer_mode, cross_view=not cfg.NCD, eps=cfg.eps,
            attention=self.ema_attention, n_heads=cfg.n_heads,
            dead_threshold=cfg.dead_code_threshold if cfg.dead_code_reset else None,
            reset_pool=pool, rng=rng)

    # -- persistence ------------------------------------------------------------
    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self.state_dict().items()}
        out["codebook"] = self.codebook.vectors.copy()
        out["ema.o"] = self.state.o.copy()
        out["ema.n"] = self.state.n.copy()
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.load_state_dict({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        self.codebook.vectors[...] = arrays["codebook"]
        self.state = DistillState(np.array(arrays["ema.o"]), np.array(arrays["ema.n"]), self.cfg.kappa)


# -- training --------------------------------------------------------------------

@dataclass
class DRLHistory:
    initial_recon: float = float("nan")
    epochs: list[dict] = field(default_factory=list)
    skipped_targets: int = 0
    resets: int = 0

    @property
    def final_recon(self) -> float:
        return self.epochs[-1]["recon"] if self.epochs else float("nan")

    def cosine(self) -> list[float]:
        return [e["cosine"] for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)


def disease_targets(record: PatientRecord, visit: int, task: str) -> tuple[int, ...]:
    """S_d for a disease seen at ``visit``: next-visit diagnoses or same-visit medications."""
    if task == "diag":
        if visit + 1 >= len(record.visits):
            return ()
        return tuple(record.visits[visit + 1].diagnoses)
    if task == "med":
        return tuple(record.visits[visit].medications)
    raise ContractError(f"unknown task {task!r}")


def make_batch(model: DRL, diseases: Sequence[int], records: Sequence[PatientRecord],
               index: list[list[tuple]], task: str, rng: np.random.Generator) -> tuple[Batch, int]:
    """One uniformly drawn visit occurrence per disease, plus corrupted targets."""
    procs, meds, targets, negatives = [], [], [], []
    vocab = model.tables("co")[model.target_kind].shape[0]
    skipped = 0
    for d in diseases:
        occ = index[d]
        if not occ:
            procs.append(())
            meds.append(())
            targets.append(())
            negatives.append(())
            skipped += 1
            continue
        ri, vi = occ[int(rng.integers(len(occ)))]
        visit = records[ri].visits[vi]
        procs.append(visit.procedures)
        meds.append(visit.medications)
        target = disease_targets(records[ri], vi, task)
        if target and len(target) < vocab:
            targets.append(target)
            negatives.append(synthetic_negative(target, vocab, rng, model.cfg.negative_replace_prob))
        else:
            targets.append(())
            negatives.append(())
            skipped += 1
    return Batch(np.asarray(diseases, dtype=np.int64), procs, meds, targets, negatives), skipped


def encode_all(model: DRL, diseases: Sequence[int]) -> tuple[QuantizationResult, QuantizationResult]:
    with no_grad():
        ids = list(diseases)
        r_co = model.encode_branch(model.co["diagnosis"][ids], "co").data
        r_te = model.encode_branch(model.te["diagnosis"][ids], "te").data
    return quantize_residual(r_co, model.codebook), quantize_residual(r_te, model.codebook)


def _utilization(indices: np.ndarray, n_codes: int) -> list[float]:
    return [len(np.unique(indices[:, l])) / n_codes for l in range(indices.shape[1])]


def train_drl(model: DRL, records: Sequence[PatientRecord], common: Sequence[int], task: str,
              index: list[list[tuple]] | None = None, on_epoch=None) -> DRLHistory:
    """Stage 2 on common diseases only; the input tables are never touched."""
    cfg = model.cfg
    common = sorted(int(d) for d in common)
    if not common:
        raise ConfigError("no common diseases to train on")
    n_d = model.co["diagnosis"].shape[0]
    index = index if index is not None else cooccurrence_index(records, n_d)
    rng = np.random.default_rng(cfg.seed)
    model.init_codebook(common, rng)
    opt = AdamW(model.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = DRLHistory()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(common))
        sums = dict.fromkeys(LossBreakdown.PARTS + ("total",), 0.0)
        seen_co, seen_te = [], []
        for start in range(0, len(common), cfg.batch_size):
            diseases = [common[i] for i in order[start:start + cfg.batch_size]]
            batch, skipped = make_batch(model, diseases, records, index, task, rng)
            hist.skipped_targets += skipped
            opt.zero_grad()
            fw = model.forward(batch)
            T.check_finite(fw.loss, f"DRL loss (epoch {epoch})")
            if math.isnan(hist.initial_recon):
                hist.initial_recon = fw.breakdown.recon
            backward(fw.loss)
            opt.step()
            hist.resets += int(model.ema_step(fw, rng).sum())
            for k, v in fw.breakdown.to_dict().items():
                sums[k] += v * len(diseases)
            seen_co.append(fw.q_co.indices)
            seen_te.append(fw.q_te.indices)
        q_co, q_te = encode_all(model, common)
        record = {k: v / len(common) for k, v in sums.items()}
        record.update(epoch=epoch, recon=record["recon_co"] + record["recon_te"],
                      con=sum(record[k] for k in LossBreakdown.PARTS[2:6]),
                      com=record["com_co"] + record["com_te"],
                      utilization=_utilization(np.concatenate(seen_co + seen_te), cfg.codes_per_level),
                      cosine=_cosine(q_co.z, q_te.z))
        hist.epochs.append(record)
        if on_epoch:
            on_epoch(record)
        log.debug("drl epoch %d %s", epoch, record)
    return hist


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    num = (a * b).sum(axis=1)
    den = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-12)
    return float(np.mean(num / den))


# -- substitution ------------------------------------------------------------------

def mean_conditions(model: DRL, records: Sequence[PatientRecord], index: list[list[tuple]],
                    branch: str = "co", chunk: int = 512) -> np.ndarray:
    """Per disease, the mean condition vector over its training visits; the learned default if none."""
    visits = sorted({occ for occs in index for occ in occs})
    pos = {v: i for i, v in enumerate(visits)}
    n_d = len(index)
    out = np.zeros((n_d, model.cfg.dim))
    with no_grad():
        f_all = np.zeros((len(visits), model.cfg.dim))
        for start in range(0, len(visits), chunk):
            part = visits[start:start + chunk]
            vs = [records[ri].visits[vi] for ri, vi in part]
            f_all[start:start + len(part)] = model.condition_vector(
                [v.procedures for v in vs], [v.medications for v in vs], branch).data
        default = model.condition_vector([()], [()], branch).data[0]
    for d in range(n_d):
        out[d] = f_all[[pos[o] for o in index[d]]].mean(axis=0) if index[d] else default
    return out


def substitute_table(model: DRL, rarity: RaritySplit, conditions: np.ndarray) -> np.ndarray:
    """Rows for every disease: text path for rare ids, collaborative path for common ids."""
    n_d = model.co["diagnosis"].shape[0]
    if conditions.shape != (n_d, model.cfg.dim):
        raise DimensionError("one condition vector per disease required")
    rare = np.array([rarity.is_rare(d) for d in range(n_d)])
    with no_grad():
        r = np.where(rare[:, None],
                     model.encode_branch(model.te["diagnosis"], "te").data,
                     model.encode_branch(model.co["diagnosis"], "co").data)
        z = quantize_residual(r, model.codebook).z
        if not model.cfg.NCO:
            z = model.cal["co"].calibrate(Tensor(z), Tensor(conditions)).data
        return model.decode_branch(z, "co").data


def substitute_embedding(disease: int, rarity: RaritySplit, model: DRL, conditions: np.ndarray) -> np.ndarray:
    n_d = model.co["diagnosis"].shape[0]
    if not 0 <= disease < n_d:
        raise ContractError(f"unknown disease id {disease}")
    branch = "te" if rarity.is_rare(disease) else "co"
    with no_grad():
        r = model.encode_branch(model.tables(branch)["diagnosis"][disease][None], branch).data
        z = quantize_residual(r, model.codebook).z
        if not model.cfg.NCO:
            z = model.cal["co"].calibrate(Tensor(z), Tensor(conditions[disease][None])).data
        return model.decode_branch(z, "co").data[0]
