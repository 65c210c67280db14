"""Ranking and set metrics, prevalence-group analysis, codebook diagnostics, report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from udc import kernels
from udc.errors import ContractError

N_GROUPS = 5


# -- per-sample metrics ----------------------------------------------------

def topk_metrics(scores: Sequence[float], truth: Iterable[int], k: int) -> tuple[float, float] | None:
    """(acc@K, pres@K) with acc = hits / min(K, |truth|); None when the truth set is empty."""
    if k < 1:
        raise ContractError("K must be >= 1")
    truth = set(truth)
    if not truth:
        return None
    top = kernels.topk_indices(np.asarray(scores, dtype=np.float64)[None, :], k)[0]
    hits = sum(1 for i in top if int(i) in truth)
    return hits / min(k, len(truth)), hits / k


def set_metrics(predicted: Iterable[int], truth: Iterable[int]) -> tuple[float, float] | None:
    """(Jaccard, F1); None when both sets are empty."""
    predicted, truth = set(predicted), set(truth)
    tp = len(predicted & truth)
    fp = len(predicted - truth)
    fn = len(truth - predicted)
    if tp + fp + fn == 0:
        return None
    return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn)


def set_metrics_from_counts(tp: int, fn: int, fp: int) -> tuple[float, float]:
    if tp + fp + fn == 0:
        raise ContractError("confusion counts are all zero")
    return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn)


def ranking_curves(scores, truth) -> tuple[float | None, float | None]:
    """Micro AUROC (Mann-Whitney, ties count one half) and AUPRC (step-wise average precision)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in size")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None, None
    ranks = rankdata(s)
    auroc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # one precision/recall point per distinct threshold
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    auprc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return float(auroc), auprc


# -- batch summary ---------------------------------------------------------

@dataclass
class MetricsReport:
    task: str
    acc_at_k: dict[int, float]
    pres_at_k: dict[int, float]
    auroc: float | None
    auprc: float | None
    jaccard: float | None
    f1: float | None
    n_samples: int
    n_excluded: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["acc_at_k"] = {str(k): v for k, v in self.acc_at_k.items()}
        out["pres_at_k"] = {str(k): v for k, v in self.pres_at_k.items()}
        return out

    def flat(self) -> dict[str, float | None]:
        out = {f"acc@{k}": v for k, v in self.acc_at_k.items()}
        out.update({f"pres@{k}": v for k, v in self.pres_at_k.items()})
        out.update(auroc=self.auroc, auprc=self.auprc, jaccard=self.jaccard, f1=self.f1)
        return out


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def evaluate(probs: np.ndarray, truths: Sequence[Iterable[int]], task: str,
             ks: Sequence[int] = (20,), threshold: float = 0.5) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    truths = [frozenset(t) for t in truths]
    if len(truths) != len(probs):
        raise ContractError("one truth set per score row required")
    keep = [i for i, t in enumerate(truths) if t]
    acc, pres = {}, {}
    for k in ks:
        if k < 1:
            raise ContractError("K must be >= 1")
        top = kernels.topk_indices(probs[keep], k) if keep else np.zeros((0, k), dtype=np.int64)
        a, p = [], []
        for row, i in zip(top, keep):
            hits = sum(1 for j in row if int(j) in truths[i])
            a.append(hits / min(k, len(truths[i])))
            p.append(hits / k)
        acc[k], pres[k] = _mean(a), _mean(p)
    labels = np.zeros_like(probs)
    for i, t in enumerate(truths):
        labels[i, list(t)] = 1.0
    auroc, auprc = ranking_curves(probs, labels)
    jac, f1 = [], []
    for i, t in enumerate(truths):
        m = set_metrics(np.flatnonzero(probs[i] >= threshold), t)
        if m is not None:
            jac.append(m[0])
            f1.append(m[1])
    return MetricsReport(task, acc, pres, auroc, auprc, _mean(jac), _mean(f1),
                         len(keep), len(truths) - len(keep))


# -- prevalence groups -----------------------------------------------------

def prevalence_groups(counts: Sequence[int], n_groups: int = N_GROUPS) -> np.ndarray:
    """Group index per disease, 0 = rarest quintile.

    Diseases are ranked by ascending count; among equal counts the higher id
    ranks as rarer, mirroring the rarity split where ties favour the lower id
    as common.
    """
    counts = np.asarray(counts)
    n = len(counts)
    order = sorted(range(n), key=lambda d: (counts[d], -d))
    groups = np.empty(n, dtype=np.int64)
    for rank, d in enumerate(order):
        groups[d] = rank * n_groups // n
    return groups


@dataclass
class GroupReport:
    task: str
    metric: str
    values: list[float | None]
    support: list[int]
    extra: dict[str, list[float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"task": self.task, "metric": self.metric, "groups": {}}
        for g in range(len(self.values)):
            entry = {self.metric: self.values[g], "support": self.support[g]}
            entry.update({k: v[g] for k, v in self.extra.items()})
            out["groups"][f"G{g + 1}"] = entry
        return out


def group_analysis(probs: np.ndarray, truths: Sequence[Iterable[int]], counts: Sequence[int],
                   task: str, k: int = 20, visible: Sequence[Iterable[int]] | None = None,
                   threshold: float = 0.5) -> GroupReport:
    """Bucket metrics by disease prevalence quintile (G1 rarest).

    ``diag``: recall@K of each disease over the samples where it is a target,
    averaged over the diseases of a group; support counts those diseases.
    ``med``: per-sample Jaccard (plus F1 and acc@K) bucketed by the quintile
    of the rarest disease in ``visible`` (history plus the current visit).
    """
    probs = np.asarray(probs, dtype=np.float64)
    truths = [frozenset(t) for t in truths]
    groups = prevalence_groups(counts)
    if task == "diag":
        n_d = len(counts)
        hits = np.zeros(n_d)
        pos = np.zeros(n_d)
        top = kernels.topk_indices(probs, k) if len(probs) else np.zeros((0, k), dtype=np.int64)
        for row, t in zip(top, truths):
            chosen = set(int(j) for j in row)
            for d in t:
                pos[d] += 1
                hits[d] += d in chosen
        values, support, positives = [], [], []
        for g in range(N_GROUPS):
            ds = [d for d in range(n_d) if groups[d] == g and pos[d] > 0]
            values.append(float(np.mean([hits[d] / pos[d] for d in ds])) if ds else None)
            support.append(len(ds))
            positives.append(float(pos[groups == g].sum()))
        return GroupReport(task, f"acc@{k}", values, support, {"positives": positives})
    if task == "med":
        if visible is None:
            raise ContractError("medication group analysis needs each sample's visible diseases")
        buckets: list[list[tuple]] = [[] for _ in range(N_GROUPS)]
        rank_key = lambda d: (counts[d], -d)
        for i, (t, vis) in enumerate(zip(truths, visible)):
            vis = list(vis)
            if not vis or not t:
                continue
            g = int(groups[min(vis, key=rank_key)])
            sm = set_metrics(np.flatnonzero(probs[i] >= threshold), t)
            tk = topk_metrics(probs[i], t, k)
            buckets[g].append((sm[0], sm[1], tk[0]))
        values = [float(np.mean([b[0] for b in bs])) if bs else None for bs in buckets]
        extra = {"f1": [float(np.mean([b[1] for b in bs])) if bs else None for bs in buckets],
                 f"acc@{k}": [float(np.mean([b[2] for b in bs])) if bs else None for bs in buckets]}
        return GroupReport(task, "jaccard", values, [len(bs) for bs in buckets], extra)
    raise ContractError(f"unknown task {task!r}")


# -- codebook diagnostics --------------------------------------------------

def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) if len(p) else 0.0


def codebook_diagnostics(idx_co: np.ndarray, idx_te: np.ndarray, n_codes: int,
                         z_co: np.ndarray | None = None, z_te: np.ndarray | None = None) -> dict:
    """Utilisation, usage entropy and cross-branch agreement per level, plus mean cos(z, z~).

    Rows of ``idx_co`` and ``idx_te`` are the same diseases under the two
    branches. Utilisation and entropy pool both branches' assignments.
    """
    idx_co = np.asarray(idx_co, dtype=np.int64)
    idx_te = np.asarray(idx_te, dtype=np.int64)
    if idx_co.shape != idx_te.shape:
        raise ContractError("branch index arrays must align")
    levels = idx_co.shape[1]
    util, entropy, util_co, util_te, agree = [], [], [], [], []
    for l in range(levels):
        pooled = np.bincount(np.r_[idx_co[:, l], idx_te[:, l]], minlength=n_codes)
        util.append(float(np.count_nonzero(pooled)) / n_codes)
        entropy.append(_entropy(pooled.astype(np.float64)))
        util_co.append(float(len(np.unique(idx_co[:, l]))) / n_codes)
        util_te.append(float(len(np.unique(idx_te[:, l]))) / n_codes)
        agree.append(float(np.mean(idx_co[:, l] == idx_te[:, l])) if len(idx_co) else 0.0)
    out = {"utilization": util, "entropy": entropy, "utilization_co": util_co,
           "utilization_te": util_te, "agreement": agree,
           "tuple_agreement": float(np.mean(np.all(idx_co == idx_te, axis=1))) if len(idx_co) else 0.0}
    if z_co is not None and z_te is not None:
        out["mean_cosine"] = mean_cosine(z_co, z_te)
    return out


def mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.maximum(na * nb, 1e-12)
    return float(np.mean((a * b).sum(axis=1) / denom))


# -- report files ----------------------------------------------------------

def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return _clean(x.item())
    return x


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_reports(directory, metrics: Mapping[str, MetricsReport],
                  groups: Mapping[str, GroupReport]) -> dict[str, Path]:
    """metrics.json/csv (model x metric) and groups.json/csv (model x group x metric)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {name: directory / name for name in ("metrics.json", "metrics.csv", "groups.json", "groups.csv")}
    write_json(paths["metrics.json"], {name: rep.to_dict() for name, rep in metrics.items()})
    with open(paths["metrics.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "value"])
        for name, rep in metrics.items():
            for metric, value in rep.flat().items():
                w.writerow([name, metric, "" if value is None else repr(float(value))])
    write_json(paths["groups.json"], {name: rep.to_dict() for name, rep in groups.items()})
    with open(paths["groups.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "group", "metric", "value", "support"])
        for name, rep in groups.items():
            for g, entry in rep.to_dict()["groups"].items():
                for metric, value in entry.items():
                    if metric == "support":
                        continue
                    w.writerow([name, g, metric, "" if value is None else repr(float(value)),
                                entry["support"]])
    return paths
