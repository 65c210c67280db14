"""Collaborative sequence model: embedding tables, visit pooling, temporal attention, task heads.

Stage 1 trains everything with BCE. Stage 3 swaps the disease table for a
fixed substituted matrix and tunes the remaining parameters.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from udc.ehr import KINDS, PatientRecord, Visit, extract_targets, multi_hot
from udc.errors import ConfigError, ContractError, DimensionError
from udc.numerics import tensor as T
from udc.numerics.layers import LayerNorm, Linear, Module, TransformerBlock
from udc.numerics.optim import AdamW
from udc.numerics.tensor import Parameter, Tensor, as_tensor, backward, no_grad

log = logging.getLogger(__name__)

TARGET_KIND = {"diag": "diagnosis", "med": "medication"}


@dataclass
class PCMConfig:
    dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 2
    activation: str = "gelu"
    max_positions: int = 16
    init_scale: float = 0.1
    # score targets against the (possibly substituted) target-class table instead of a free head
    tie_head: bool = True

    def validate(self) -> None:
        if self.dim < 1 or self.n_layers < 0 or self.max_positions < 1:
            raise ConfigError("pcm dim/max_positions must be positive and n_layers >= 0")
        if self.dim % self.n_heads:
            raise ConfigError(f"{self.n_heads} heads do not divide dim {self.dim}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and lr >= 0 required")


@dataclass(frozen=True)
class Sample:
    """One prediction instance. ``extra`` is the (d, p) pseudo-visit for medication targets."""

    history: tuple[Visit, ...]
    target: frozenset[int]
    extra: Visit | None = None
    patient: int = -1
    t: int = 0

    @property
    def sequence(self) -> tuple[Visit, ...]:
        return self.history + ((self.extra,) if self.extra is not None else ())


@dataclass
class PredictorOutput:
    logits: Tensor

    @property
    def probabilities(self) -> np.ndarray:
        return T._sigmoid(self.logits.data)


def build_samples(records: Sequence[PatientRecord], task: str) -> list[Sample]:
    """Every valid (patient, t) pair; samples with an empty target are dropped."""
    out = []
    for k, rec in enumerate(records):
        n = len(rec.visits)
        if task == "diag":
            for t in range(1, n):
                target = extract_targets(rec, t, "diag")
                if target:
                    out.append(Sample(rec.visits[:t], target, None, k, t))
        elif task == "med":
            for t in range(n):
                target = extract_targets(rec, t, "med")
                nxt = rec.visits[t]
                if target:
                    out.append(Sample(rec.visits[:t], target, Visit.of(nxt.diagnoses, nxt.procedures), k, t))
        else:
            raise ContractError(f"unknown task {task!r}")
    return out


class PCM(Module):
    def __init__(self, sizes: Mapping[str, int], cfg: PCMConfig, seed: int = 0):
        cfg.validate()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.sizes = dict(sizes)
        self.emb = {k: Parameter(cfg.init_scale * rng.normal(size=(self.sizes[k], cfg.dim)), f"E_{k}")
                    for k in KINDS}
        self.pos = Parameter(cfg.init_scale * rng.normal(size=(cfg.max_positions, cfg.dim)), "pos")
        self.blocks = [TransformerBlock(cfg.dim, cfg.n_heads, rng, cfg.ff_mult, cfg.activation)
                       for _ in range(cfg.n_layers)]
        self.norm = LayerNorm(cfg.dim)
        self.heads = {}
        for task, kind in TARGET_KIND.items():
            if cfg.tie_head:
                self.heads[task] = {"proj": Linear(cfg.dim, cfg.dim, rng),
                                    "bias": Parameter(np.zeros(self.sizes[kind]), f"bias_{task}")}
            else:
                self.heads[task] = {"out": Linear(cfg.dim, self.sizes[kind], rng)}

    # -- tables ----------------------------------------------------------
    def tables(self, disease_table=None) -> dict[str, Tensor]:
        out = dict(self.emb)
        if disease_table is not None:
            table = as_tensor(disease_table)
            if table.shape != self.emb["diagnosis"].shape:
                raise ContractError(f"substituted disease table has shape {table.shape}, "
                                    f"expected {self.emb['diagnosis'].shape}")
            out["diagnosis"] = table
        return out

    def encoder_parameters(self) -> list[Parameter]:
        """Everything except the embedding tables."""
        skip = {id(p) for p in self.emb.values()}
        return [p for p in self.parameters() if id(p) not in skip]

    # -- forward ---------------------------------------------------------
    def pooling(self, sequences: Sequence[Sequence[Visit]]) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
        """Per-class pooling matrices (B*T, V), key mask (B, T) and recency positions (B, T)."""
        b = len(sequences)
        t_max = max(len(s) for s in sequences)
        mats = {k: np.zeros((b * t_max, self.sizes[k])) for k in KINDS}
        mask = np.zeros((b, t_max), dtype=bool)
        pos = np.zeros((b, t_max), dtype=np.int64)
        for i, seq in enumerate(sequences):
            n = len(seq)
            mask[i, :n] = True
            pos[i, :n] = np.minimum(np.arange(n)[::-1], self.cfg.max_positions - 1)
            for j, visit in enumerate(seq):
                for k in KINDS:
                    ids = visit.ids(k)
                    if ids:
                        if ids[-1] >= self.sizes[k] or ids[0] < 0:
                            raise ContractError(f"{k} id out of range in visit {visit}")
                        mats[k][i * t_max + j, list(ids)] = 1.0 / len(ids)
        return mats, mask, pos

    def encode(self, sequences: Sequence[Sequence[Visit]], tables: Mapping[str, Tensor]) -> Tensor:
        """Final hidden state (B, dim) at each sequence's last real position."""
        if not sequences or any(len(s) == 0 for s in sequences):
            raise ContractError("prediction needs a nonempty visit history")
        mats, mask, pos = self.pooling(sequences)
        b, t_max = mask.shape
        x = None
        for k in KINDS:
            part = T.matmul(mats[k], tables[k])
            x = part if x is None else x + part
        x = x.reshape(b, t_max, self.cfg.dim) + T.getitem(self.pos, pos)
        for block in self.blocks:
            x = block(x, key_mask=mask)
        last = mask.sum(axis=1) - 1
        h = T.getitem(x, (np.arange(b), last))
        return self.norm(h)

    def head(self, h: Tensor, task: str, tables: Mapping[str, Tensor]) -> Tensor:
        head = self.heads[task]
        if "out" in head:
            return head["out"](h)
        return head["proj"](h) @ tables[TARGET_KIND[task]].T + head["bias"]

    def logits(self, samples: Sequence[Sample], task: str, disease_table=None) -> Tensor:
        tables = self.tables(disease_table)
        return self.head(self.encode([s.sequence for s in samples], tables), task, tables)


def embed_entities(model: PCM, visit: Visit, disease_table=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gathered rows for a visit's diagnoses, procedures and medications."""
    tables = model.tables(disease_table)
    out = []
    for k in KINDS:
        ids = list(visit.ids(k))
        if any(i < 0 or i >= model.sizes[k] for i in ids):
            raise ContractError(f"{k} id out of range: {ids}")
        out.append(tables[k].data[ids])
    return tuple(out)


def forward_predict(model: PCM, history: Sequence[Visit], task: str, extra: Visit | None = None,
                    disease_table=None) -> PredictorOutput:
    if task == "med" and extra is None:
        raise ContractError("medication prediction needs the next visit's diagnoses and procedures")
    seq = tuple(history) + ((extra,) if extra is not None else ())
    if not seq:
        raise ContractError("prediction needs a nonempty visit history")
    sample = Sample(tuple(history), frozenset(), extra)
    logits = model.logits([sample], task, disease_table)
    return PredictorOutput(logits.reshape(logits.shape[-1]))


def bce_loss(logits, targets) -> Tensor:
    """Mean logistic cross-entropy from logits: softplus(x) - y x."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"targets shape {y.shape} != logits shape {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("targets must be 0/1")
    return T.mean(T.softplus(logits) - logits * y)


def target_matrix(samples: Sequence[Sample], size: int) -> np.ndarray:
    return np.stack([multi_hot(s.target, size) for s in samples]) if samples else np.zeros((0, size))


# -- training ------------------------------------------------------------

@dataclass
class TrainHistory:
    initial_train_loss: float = float("nan")
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)  # index 0 is before any update
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_loss(model: PCM, samples: Sequence[Sample], task: str, batch_size: int = 256,
                  disease_table=None) -> float:
    if not samples:
        return float("nan")
    size = model.sizes[TARGET_KIND[task]]
    total = 0.0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            loss = bce_loss(model.logits(chunk, task, disease_table), target_matrix(chunk, size))
            total += loss.item() * len(chunk)
    return total / len(samples)


def predict_proba(model: PCM, samples: Sequence[Sample], task: str, batch_size: int = 256,
                  disease_table=None) -> np.ndarray:
    size = model.sizes[TARGET_KIND[task]]
    out = np.zeros((len(samples), size))
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            out[start:start + len(chunk)] = T._sigmoid(model.logits(chunk, task, disease_table).data)
    return out


def _fit(model: PCM, params: list[Parameter], train: Sequence[Sample], val: Sequence[Sample],
         task: str, cfg: TrainConfig, disease_table=None,
         on_epoch: Callable[[int, float, float], None] | None = None) -> TrainHistory:
    cfg.validate()
    if not train:
        raise ContractError("training set is empty")
    size = model.sizes[TARGET_KIND[task]]
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = TrainHistory(initial_train_loss=evaluate_loss(model, train, task, disease_table=disease_table))
    monitor = val if val else train
    best = evaluate_loss(model, monitor, task, disease_table=disease_table)
    hist.val_loss.append(best)
    best_state = model.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            opt.zero_grad()
            loss = bce_loss(model.logits(batch, task, disease_table), target_matrix(batch, size))
            T.check_finite(loss, f"training loss (epoch {epoch})")
            backward(loss)
            opt.step()
            total += loss.item() * len(batch)
        hist.train_loss.append(total / len(train))
        current = evaluate_loss(model, monitor, task, disease_table=disease_table)
        hist.val_loss.append(current)
        if current < best:
            best, best_state, hist.best_epoch = current, model.state_dict(), epoch
        if on_epoch:
            on_epoch(epoch, hist.train_loss[-1], current)
        log.debug("epoch %d train %.5f val %.5f", epoch, hist.train_loss[-1], current)
    model.load_state_dict(best_state)
    return hist


def pretrain(model: PCM, train: Sequence[Sample], val: Sequence[Sample], task: str,
             cfg: TrainConfig, **kwargs) -> TrainHistory:
    """Stage 1: AdamW on BCE over all trainable parameters; the best validation state is kept."""
    params = [p for p in model.parameters() if p.requires_grad]
    return _fit(model, params, train, val, task, cfg, **kwargs)


def finetune(model: PCM, train: Sequence[Sample], val: Sequence[Sample], task: str,
             disease_table: np.ndarray, cfg: TrainConfig, **kwargs) -> TrainHistory:
    """Stage 3: the disease table is replaced by a fixed matrix; E_D is frozen."""
    table = np.asarray(disease_table, dtype=np.float64)
    if table.shape != model.emb["diagnosis"].shape:
        raise ContractError(f"substituted disease table has shape {table.shape}, "
                            f"expected {model.emb['diagnosis'].shape}")
    model.emb["diagnosis"].requires_grad = False
    params = [p for p in model.parameters() if p.requires_grad]
    return _fit(model, params, train, val, task, cfg, disease_table=Tensor(table), **kwargs)


def clone(model: PCM) -> PCM:
    return copy.deepcopy(model)
