import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udc import evaluation as E
from udc.errors import ContractError


# -- set and ranking metrics ------------------------------------------------------

@pytest.mark.parametrize("tp,fn,fp,jac,f1", [(9, 3, 1, 0.6923, 0.8181), (9, 3, 3, 0.6000, 0.7500)])
def test_worked_confusion_examples(tp, fn, fp, jac, f1):
    got = E.set_metrics_from_counts(tp, fn, fp)
    assert abs(got[0] - jac) < 1e-4 and abs(got[1] - f1) < 1e-4
    truth = set(range(tp + fn))
    pred = set(range(tp)) | set(range(100, 100 + fp))
    assert E.set_metrics(pred, truth) == pytest.approx(got)


def test_set_metric_edges():
    assert E.set_metrics([], []) is None
    assert E.set_metrics([1], []) == (0.0, 0.0)
    assert E.set_metrics([1, 2], [1, 2]) == (1.0, 1.0)
    with pytest.raises(ContractError):
        E.set_metrics_from_counts(0, 0, 0)


def test_topk_uses_min_k_truth():
    scores = [0.9, 0.8, 0.1, 0.7]
    assert E.topk_metrics(scores, {0}, 2) == (1.0, 0.5)
    assert E.topk_metrics(scores, {0, 2, 3}, 2) == (0.5, 0.5)
    assert E.topk_metrics(scores, set(), 2) is None
    with pytest.raises(ContractError):
        E.topk_metrics(scores, {0}, 0)


def _auroc_pairs(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def _auprc_thresholds(s, y):
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s), reverse=True):
        sel = s >= t
        tp = (y[sel] == 1).sum()
        recall = tp / y.sum()
        ap += (recall - prev_recall) * tp / sel.sum()
        prev_recall = recall
    return ap


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_ranking_curves_against_brute_force(pairs):
    s = np.array([p[0] / 6 for p in pairs])  # coarse values force ties
    y = np.array([float(p[1]) for p in pairs])
    auroc, auprc = E.ranking_curves(s, y)
    if y.sum() in (0, len(y)):
        assert auroc is None and auprc is None
        return
    assert auroc == pytest.approx(_auroc_pairs(s, y), abs=1e-12)
    assert auprc == pytest.approx(_auprc_thresholds(s, y), abs=1e-12)


def test_ranking_curves_perfect_and_shape_check():
    assert E.ranking_curves([0.9, 0.8, 0.1], [1, 1, 0]) == (1.0, 1.0)
    with pytest.raises(ContractError):
        E.ranking_curves([0.1], [1, 0])


# -- batch report -------------------------------------------------------------------

def test_evaluate_excludes_empty_truths_and_thresholds():
    probs = np.array([[0.9, 0.2, 0.6], [0.1, 0.1, 0.1], [0.3, 0.8, 0.1]])
    rep = E.evaluate(probs, [{0}, set(), {1, 2}], "med", ks=(1, 2))
    assert rep.n_samples == 2 and rep.n_excluded == 1
    assert rep.acc_at_k[1] == pytest.approx((1.0 + 1.0) / 2)
    assert rep.acc_at_k[2] == pytest.approx((1.0 + 0.5) / 2)
    # sample 1 has empty truth and empty prediction, so it is skipped for set metrics
    assert rep.jaccard == pytest.approx((1 / 2 + 1 / 2) / 2)
    d = rep.to_dict()
    assert d["acc_at_k"]["1"] == rep.acc_at_k[1] and "acc@2" in rep.flat()
    with pytest.raises(ContractError):
        E.evaluate(probs, [{0}], "med")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 30))
def test_acc_at_k_is_nested(seed, n):
    rng = np.random.default_rng(seed)
    probs = rng.random((n, 50))
    # per-sample nesting holds whenever no truth set is larger than the smallest K
    truths = [set(rng.choice(50, size=rng.integers(1, 6), replace=False).tolist()) for _ in range(n)]
    rep = E.evaluate(probs, truths, "diag", ks=(5, 10, 20, 40))
    acc = [rep.acc_at_k[k] for k in (5, 10, 20, 40)]
    assert all(a <= b + 1e-12 for a, b in zip(acc, acc[1:]))


def test_acc_at_k_can_drop_when_truth_exceeds_k():
    # five of ten true ids in the top 5, none in ranks 6..10: 5/5 then 5/10
    scores = np.r_[np.linspace(1.0, 0.9, 5), np.linspace(0.8, 0.7, 5), np.zeros(10)]
    truth = set(range(5)) | set(range(10, 15))
    assert E.topk_metrics(scores, truth, 5)[0] == 1.0
    assert E.topk_metrics(scores, truth, 10)[0] == 0.5


# -- prevalence groups ---------------------------------------------------------------

def test_prevalence_groups_order_and_ties():
    counts = [5, 1, 1, 9, 3, 3, 7, 0, 2, 8]
    g = E.prevalence_groups(counts)
    assert g[7] == 0 and g[3] == 4
    # ascending (count, -id): 7, 2, 1, 8, 5, 4, ... so id 2 ranks rarer than id 1
    assert g[2] == 0 and g[1] == 1 and g[8] == 1
    assert g[5] == 2 and g[4] == 2
    assert np.bincount(g).tolist() == [2] * 5


def test_diag_groups_are_per_disease_recall():
    counts = np.arange(10)  # disease 0 is rarest
    probs = np.zeros((2, 10))
    probs[0, [0, 9]] = 1.0
    probs[1, [2, 9]] = 1.0
    rep = E.group_analysis(probs, [{0, 1}, {0, 9}], counts, "diag", k=2)
    # G1 = diseases {0, 1}: disease 0 hit once in two, disease 1 never
    assert rep.values[0] == pytest.approx((0.5 + 0.0) / 2)
    assert rep.values[4] == pytest.approx(1.0)
    assert rep.support[:2] == [2, 0] and rep.values[1] is None
    assert rep.extra["positives"][0] == 3


def test_med_groups_bucket_by_rarest_visible_disease():
    counts = np.arange(10)
    probs = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    rep = E.group_analysis(probs, [{0}, {0}], counts, "med", k=1, visible=[{0, 9}, {9, 8}])
    assert rep.values[0] == 1.0 and rep.support[0] == 1
    assert rep.values[4] == 0.5 and rep.extra["f1"][4] == pytest.approx(2 / 3)
    with pytest.raises(ContractError):
        E.group_analysis(probs, [{0}, {0}], counts, "med")
    with pytest.raises(ContractError):
        E.group_analysis(probs, [{0}, {0}], counts, "labs", visible=[{0}, {0}])


# -- codebook diagnostics and files -----------------------------------------------------

def test_codebook_diagnostics():
    co = np.array([[0, 1], [0, 2], [3, 1]])
    te = np.array([[0, 1], [1, 2], [3, 3]])
    out = E.codebook_diagnostics(co, te, 4, np.eye(3), np.eye(3))
    assert out["utilization"] == [3 / 4, 3 / 4]
    assert out["agreement"] == pytest.approx([2 / 3, 2 / 3])
    assert out["tuple_agreement"] == pytest.approx(1 / 3)
    assert out["mean_cosine"] == pytest.approx(1.0)
    with pytest.raises(ContractError):
        E.codebook_diagnostics(co, te[:2], 4)


def test_write_reports(tmp_path):
    rep = E.evaluate(np.array([[0.9, 0.1]]), [{0}], "diag", ks=(1,))
    grp = E.group_analysis(np.array([[0.9, 0.1]]), [{0}], [3, 1], "diag", k=1)
    paths = E.write_reports(tmp_path, {"stage1": rep}, {"stage1": grp})
    data = json.loads(paths["metrics.json"].read_text())
    assert data["stage1"]["acc_at_k"]["1"] == 1.0
    rows = list(csv.DictReader(open(paths["groups.csv"])))
    assert {r["group"] for r in rows} == {f"G{i}" for i in range(1, 6)}
    E.write_json(tmp_path / "x.json", {"a": float("nan"), "b": np.float64(2.0)})
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": None, "b": 2.0}
