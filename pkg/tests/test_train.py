import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sfrulstm.dataio import SyntheticSpec, synth_generate
from sfrulstm.model import Model, ModelConfig
from sfrulstm.numerics import ParamStore, cross_entropy
from sfrulstm.rulstm import StepPrediction
from sfrulstm.slowfast import build_clock, single_clock
from sfrulstm.train import (Hyper, RandomLogitModel, SGDMomentum, Samples, anticipation_loss,
                            assemble_fusion, attention_trace, evaluate, finetune_fusion,
                            loss_and_grad, sgd_momentum_step, topk_hit, train_branch)


def step(logits):
    return StepPrediction(1, 1.0, np.asarray(logits, float))


def test_anticipation_loss(rng):
    assert anticipation_loss([step(np.zeros(8))], 3) == pytest.approx(math.log(8), abs=1e-12)
    v = rng.normal(size=5)
    assert anticipation_loss([step(v)] * 4, 2) == pytest.approx(cross_entropy(v, 2), abs=1e-14)
    vs = rng.normal(size=(3, 5))
    assert anticipation_loss([step(x) for x in vs], 1) == pytest.approx(
        sum(cross_entropy(x, 1) for x in vs) / 3, abs=1e-14)
    with pytest.raises(ValueError):
        anticipation_loss([], 0)


def _store(values, grads):
    s = ParamStore()
    s.add("p", np.array(values, float))
    s.grads["p"][...] = grads
    return s


def test_sgd_plain_and_zero_grad():
    s = _store([1.0, 2.0], [0.5, -1.0])
    sgd_momentum_step(s, 0.1, 0.0)
    np.testing.assert_allclose(s["p"], [0.95, 2.1], atol=1e-15)
    s = _store([1.0, 2.0], [0.0, 0.0])
    sgd_momentum_step(s, 0.1, 0.9)
    np.testing.assert_array_equal(s["p"], [1.0, 2.0])


def test_sgd_two_step_recurrence():
    s = _store([1.0], [2.0])
    opt = SGDMomentum(s, lr=0.1, momentum=0.5)
    opt.step()               # v = 2, p = 1 - 0.2
    s.grads["p"][...] = -1.0
    opt.step()               # v = 0.5*2 - 1 = 0, p unchanged
    assert s["p"][0] == pytest.approx(0.8, abs=1e-15)
    s.grads["p"][...] = 1.0
    opt.step()               # v = 1, p = 0.8 - 0.1
    assert s["p"][0] == pytest.approx(0.7, abs=1e-15)


def test_sgd_frozen_names_and_shape_drift():
    s = _store([1.0], [1.0])
    SGDMomentum(s, 0.1, 0.9, lr_mults={}).step()
    assert s["p"][0] == 1.0
    opt = SGDMomentum(s, 0.1, 0.9)
    s.grads["p"] = np.zeros(3)
    with pytest.raises(ValueError, match="shape drift"):
        opt.step()


# ---------------------------------------------------------------- training

def separable(seed, n=64, T=6, D=3):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, size=n)
    x = r.normal(scale=0.3, size=(n, T, D))
    x[:, :, 0] += np.where(y == 1, 1.0, -1.0)[:, None]
    return Samples({"rgb": x}, y)


def branch_model(seed=0, keep=1.0, C=2, D=3, alpha=0.5):
    return Model(ModelConfig(("rgb",), (D,), 6, C, single_clock(alpha, 1.0, 2.0),
                             scheme="single", keep=keep, seed=seed))


def test_lr_zero_leaves_parameters_bitwise():
    m = branch_model()
    before = m.store.copy()
    train_branch(separable(0), m, Hyper(lr=0.0, epochs=2, batch_size=16))
    assert all(m.store[n].tobytes() == before[n].tobytes() for n in m.store)


def test_one_sample_one_epoch_is_one_manual_step():
    data = separable(1, n=1)
    m = branch_model(seed=3)
    ref = m.copy()
    train_branch(data, m, Hyper(lr=0.05, momentum=0.9, epochs=1, batch_size=1))
    ref.store.zero_grad()
    loss_and_grad(ref, data.features, data.labels, train=True, rng=np.random.default_rng(0))
    for n in ref.store:
        expect = ref.store[n] - 0.05 * ref.store.grads[n]
        assert m.store[n].tobytes() == expect.tobytes(), n


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_on_separable_data(seed):
    m = branch_model(seed=seed)
    res = train_branch(separable(seed), m, Hyper(lr=0.1, momentum=0.9, epochs=5, batch_size=16,
                                                  seed=seed))
    assert all(b < a for a, b in zip(res.losses, res.losses[1:])), res.losses


def test_training_is_deterministic():
    a, b = branch_model(seed=1, keep=0.5), branch_model(seed=1, keep=0.5)
    h = Hyper(lr=0.1, epochs=2, batch_size=8, seed=4)
    ra, rb = train_branch(separable(0), a, h), train_branch(separable(0), b, h)
    assert ra.losses == rb.losses
    assert all(a.store[n].tobytes() == b.store[n].tobytes() for n in a.store)


def test_best_validation_epoch_restored():
    m = branch_model(seed=2)
    res = train_branch(separable(0), m, Hyper(lr=0.1, epochs=4, batch_size=16), separable(9))
    assert res.best_epoch == int(np.argmax(res.val_top1))
    from sfrulstm.train import top1
    assert top1(m, separable(9)).mean() == pytest.approx(max(res.val_top1))


def test_short_videos_listed():
    data = synth_generate(SyntheticSpec(classes=2, per_class=3, dim=4))
    m = Model(ModelConfig(("rgb",), (4,), 4, 2, single_clock(0.5, 14.0, 2.0), scheme="single"))
    with pytest.raises(ValueError, match="shorter than") as e:
        train_branch(data, m, Hyper(epochs=1))
    assert "v000_00000" in str(e.value)


# ---------------------------------------------------------------- fusion

CLOCK = build_clock(0.5, 0.25, 1.0, 1.0)


def pair(seed=0, C=3):
    return [Model(ModelConfig(("rgb",), (3,), 5, C, single_clock(a, 1.0, 1.0), scheme="single",
                              keep=1.0, seed=seed + i)) for i, a in enumerate((0.5, 0.25))]


def fused_samples(seed=0, n=20, C=3):
    r = np.random.default_rng(seed)
    return Samples({"rgb": r.normal(size=(n, CLOCK.T, 3))}, r.integers(0, C, size=n))


def test_clock_mismatch_rejected():
    a = Model(ModelConfig(("rgb",), (3,), 5, 3, single_clock(0.5, 1.0, 1.0), scheme="single"))
    b = Model(ModelConfig(("rgb",), (3,), 5, 3, single_clock(0.25, 1.5, 1.0), scheme="single"))
    with pytest.raises(ValueError, match="clock mismatch"):
        assemble_fusion([a, b])


def test_all_frozen_equals_ensemble():
    data = fused_samples()
    att = assemble_fusion(pair(), "attention", head_hidden=4)
    ens = assemble_fusion(pair(), "ensemble")
    finetune_fusion(att, data, Hyper(lr=0.5, epochs=2, batch_size=5, freeze_branches=True,
                                     freeze_heads=True))
    np.testing.assert_array_equal(att.forward(data.features).logits,
                                  ens.forward(data.features).logits)


def test_finetune_lr_zero_unchanged():
    data = fused_samples()
    m = assemble_fusion(pair(), "attention", head_hidden=4)
    before = m.store.copy()
    finetune_fusion(m, data, Hyper(lr=0.0, epochs=1, batch_size=5))
    assert all(m.store[n].tobytes() == before[n].tobytes() for n in m.store)


def test_finetune_branch_rate_multiplier():
    data = fused_samples(n=5)
    m = assemble_fusion(pair(), "attention", head_hidden=4)
    m.randomize_heads(1)
    ref = m.copy()
    finetune_fusion(m, data, Hyper(lr=0.1, momentum=0.0, epochs=1, batch_size=5))
    ref.store.zero_grad()
    loss_and_grad(ref, data.features, data.labels, train=True)
    heads = set(ref.head_names())
    for n in ref.store:
        mult = 1.0 if n in heads else 0.1
        np.testing.assert_allclose(m.store[n], ref.store[n] - 0.1 * mult * ref.store.grads[n],
                                   rtol=0, atol=1e-15)


# ---------------------------------------------------------------- evaluation

def test_topk_examples():
    assert topk_hit([0.1, 0.5, 0.2, 0.9], 1, 2)
    assert topk_hit(np.zeros(8), 4, 5)
    assert not topk_hit(np.zeros(8), 6, 5)
    with pytest.raises(ValueError):
        topk_hit(np.zeros(3), 0, 4)


@given(st.lists(st.integers(-3, 3), min_size=2, max_size=9), st.data())
def test_topk_monotone_in_k(scores, data):
    C = len(scores)
    y = data.draw(st.integers(0, C - 1))
    hits = [topk_hit(scores, y, k) for k in range(1, C + 1)]
    assert hits[-1] and hits == sorted(hits)
    assert sum(not h for h in hits) == sum(s > scores[y] for s in scores) + \
        sum(s == scores[y] for s in scores[:y])


class Oracle:
    """Scores the true label highest (a perfectly memorising model)."""

    def __init__(self, labels, taus, C):
        self.labels, self.taus, self.classes = labels, taus, C

    def predict(self, features):
        out = np.zeros((len(self.labels), len(self.taus), self.classes))
        out[np.arange(len(self.labels)), :, self.labels] = 1.0
        return out


def test_evaluate_perfect_and_empty():
    data = fused_samples(C=5)
    model = Oracle(data.labels, [2.0, 1.0], 5)
    t = evaluate(model, data, [2.0, 1.0], (1, 5))
    assert [r.accuracy for r in t.rows] == [1.0] * 4
    assert evaluate(model, data, [], (1,)).rows == []
    with pytest.raises(ValueError, match="available: 2, 1"):
        evaluate(model, data, [0.3], (1,))


def test_random_logits_binomial():
    n, p = 4000, 5 / 8
    data = Samples({"rgb": np.zeros((n, 1, 1))}, np.random.default_rng(0).integers(0, 8, n))
    acc = evaluate(RandomLogitModel(8, [1.0], seed=3), data, [1.0], (5,)).rows[0].accuracy
    assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_evaluate_csv_deterministic(tmp_path):
    data = fused_samples()
    m = assemble_fusion(pair(), "attention", head_hidden=4)
    a = evaluate(m, data, list(m.clock.fused_taus), (1, 2)).to_csv(tmp_path / "a.csv")
    b = evaluate(m, data, list(m.clock.fused_taus), (1, 2), threads=3, batch_size=7).to_csv()
    assert a == b == (tmp_path / "a.csv").read_text()
    assert a.splitlines()[0] == "model,scheme,modalities,alphas,tau_a,k,accuracy,n"
    assert len(a.splitlines()) == 1 + 2 * 2


def test_attention_trace():
    data = fused_samples(n=3)
    m = assemble_fusion(pair(), "attention", head_hidden=4)
    tr = attention_trace(m, data)
    assert len(tr.rows) == 3 * len(m.clock.fused_steps)
    assert all(r[3] == 0.5 and r[4] == 0.5 for r in tr.rows)
    assert tr.to_csv().splitlines()[0] == "sample_id,t,tau_a,w_slow,w_fast"
    with pytest.raises(ValueError):
        attention_trace(assemble_fusion(pair(), "ensemble"), data)
