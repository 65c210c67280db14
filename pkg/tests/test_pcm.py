import numpy as np
import pytest

from udc import pcm as P
from udc.ehr import PatientRecord, Visit
from udc.errors import ConfigError, ContractError, DimensionError
from udc.numerics.gradcheck import check_gradients

SIZES = {"diagnosis": 9, "procedure": 4, "medication": 6}


def rec(pid, *visits):
    return PatientRecord(pid, tuple(Visit.of(*v) for v in visits))


def toy_records(n=30, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        visits = []
        for _ in range(int(rng.integers(1, 4))):
            d = sorted(set(rng.integers(0, 9, 2).tolist()))
            p = sorted(set(rng.integers(0, 4, 1).tolist()))
            m = sorted({x % 6 for x in d})  # medications follow diagnoses
            visits.append((d, p, m))
        out.append(rec(f"p{i}", *visits))
    return out


def model(tie=True, layers=1, seed=0):
    return P.PCM(SIZES, P.PCMConfig(dim=8, n_layers=layers, n_heads=2, tie_head=tie), seed=seed)


def test_build_samples_diag_and_med():
    r = rec("a", ([1], [0], [2]), ([3], [], [4]), ([5], [1], [0, 1]))
    diag = P.build_samples([r], "diag")
    assert [(len(s.history), set(s.target)) for s in diag] == [(1, {3}), (2, {5})]
    med = P.build_samples([r], "med")
    assert [set(s.target) for s in med] == [{2}, {4}, {0, 1}]
    assert med[1].extra.diagnoses == (3,) and med[1].extra.medications == ()
    assert len(med[0].sequence) == 1 and len(med[2].sequence) == 3
    with pytest.raises(ContractError):
        P.build_samples([r], "labs")


def test_samples_with_empty_targets_are_dropped():
    r = rec("a", ([1], [], []), ([2], [], [3]))
    assert len(P.build_samples([r], "med")) == 1


@pytest.mark.parametrize("tie", [True, False])
@pytest.mark.parametrize("task", ["diag", "med"])
def test_forward_shapes(task, tie):
    m = model(tie)
    samples = P.build_samples(toy_records(), task)[:5]
    logits = m.logits(samples, task)
    assert logits.shape == (5, SIZES[P.TARGET_KIND[task]])
    probs = P.predict_proba(m, samples, task)
    assert np.all((probs > 0) & (probs < 1))


def test_forward_predict_contract():
    m = model()
    h = (Visit.of([1], [0], [2]),)
    out = P.forward_predict(m, h, "diag")
    assert out.probabilities.shape == (9,)
    with pytest.raises(ContractError):
        P.forward_predict(m, h, "med")
    with pytest.raises(ContractError):
        P.forward_predict(m, (), "diag")
    with pytest.raises(ContractError):
        P.forward_predict(m, (Visit.of([20], [], []),), "diag")


def test_padding_does_not_change_predictions():
    m = model(layers=2)
    samples = P.build_samples(toy_records(), "diag")
    short = min(samples, key=lambda s: len(s.history))
    long_ = max(samples, key=lambda s: len(s.history))
    alone = P.predict_proba(m, [short], "diag")
    together = P.predict_proba(m, [short, long_], "diag")
    np.testing.assert_allclose(together[0], alone[0], atol=1e-12)


def test_tied_head_scores_against_the_substituted_table():
    m = model()
    samples = P.build_samples(toy_records(), "diag")[:4]
    table = np.random.default_rng(1).normal(size=(9, 8))
    a = P.predict_proba(m, samples, "diag")
    b = P.predict_proba(m, samples, "diag", disease_table=table)
    assert not np.allclose(a, b)
    with pytest.raises(ContractError):
        m.tables(np.zeros((3, 8)))


def test_embed_entities():
    m = model()
    d, p, me = P.embed_entities(m, Visit.of([1, 2], [], [0]))
    assert d.shape == (2, 8) and p.shape == (0, 8) and me.shape == (1, 8)
    np.testing.assert_array_equal(d, m.emb["diagnosis"].data[[1, 2]])


def test_bce_matches_closed_form_and_checks_inputs():
    x = np.array([[0.3, -2.0], [5.0, 0.0]])
    y = np.array([[1, 0], [0, 1]])
    ref = np.mean(-(y * np.log(1 / (1 + np.exp(-x))) + (1 - y) * np.log(1 - 1 / (1 + np.exp(-x)))))
    np.testing.assert_allclose(P.bce_loss(x, y).item(), ref, rtol=1e-12)
    assert np.isfinite(P.bce_loss(np.array([[800.0, -800.0]]), np.array([[0, 1]])).item())
    with pytest.raises(DimensionError):
        P.bce_loss(x, y[:1])
    with pytest.raises(ContractError):
        P.bce_loss(x, y * 2)


def test_whole_model_gradient():
    m = model(layers=1)
    samples = P.build_samples(toy_records(), "med")[:3]
    y = P.target_matrix(samples, 6)
    params = [m.emb["medication"], m.heads["med"]["bias"], m.norm.gamma, m.blocks[0].parameters()[0]]
    assert check_gradients(lambda: P.bce_loss(m.logits(samples, "med"), y), params) < 1e-4


def test_pretrain_reduces_loss_and_keeps_best_state():
    m = model()
    samples = P.build_samples(toy_records(80), "med")
    train, val = samples[:150], samples[150:]
    hist = P.pretrain(m, train, val, "med", P.TrainConfig(lr=0.01, epochs=5, seed=0))
    assert len(hist.val_loss) == 6
    assert min(hist.val_loss) < hist.val_loss[0]
    assert P.evaluate_loss(m, val, "med") == pytest.approx(hist.val_loss[hist.best_epoch])
    with pytest.raises(ContractError):
        P.pretrain(m, [], val, "med", P.TrainConfig())


def test_finetune_freezes_disease_table_only():
    m = model()
    samples = P.build_samples(toy_records(40), "diag")
    P.pretrain(m, samples, [], "diag", P.TrainConfig(lr=0.01, epochs=1))
    before = {k: v.data.copy() for k, v in m.emb.items()}
    table = m.emb["diagnosis"].data + 0.05
    P.finetune(m, samples, [], "diag", table, P.TrainConfig(lr=0.01, epochs=2))
    np.testing.assert_array_equal(m.emb["diagnosis"].data, before["diagnosis"])
    assert not np.array_equal(m.emb["procedure"].data, before["procedure"])
    assert not m.emb["diagnosis"].requires_grad
    with pytest.raises(ContractError):
        P.finetune(m, samples, [], "diag", table[:2], P.TrainConfig())


def test_training_is_deterministic():
    samples = P.build_samples(toy_records(30), "diag")
    outs = []
    for _ in range(2):
        m = model(seed=3)
        P.pretrain(m, samples, [], "diag", P.TrainConfig(epochs=2, seed=4))
        outs.append(m.state_dict())
    for k in outs[0]:
        np.testing.assert_array_equal(outs[0][k], outs[1][k])


def test_clone_is_independent():
    m = model()
    c = P.clone(m)
    c.emb["diagnosis"].data[0, 0] += 1.0
    assert m.emb["diagnosis"].data[0, 0] != c.emb["diagnosis"].data[0, 0]


@pytest.mark.parametrize("bad", [dict(dim=6, n_heads=4), dict(activation="swish"), dict(max_positions=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        P.PCMConfig(**bad).validate()
    with pytest.raises(ConfigError):
        P.TrainConfig(batch_size=0).validate()
