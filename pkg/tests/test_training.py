import math

import mpmath
import numpy as np
import pytest

from chronor.data import build_filter_index, build_vocab, encode_dataset, generate_synthetic_kg
from chronor.gradcheck import check_gradients
from chronor.params import ModelConfig, ModelParams, init_model
from chronor.training import (AdaGrad, TrainConfig, TrainingError, batch_loss, fit, grad_step,
                              loss_and_grad, reg_n4, reg_temporal, softmax_nll)


def micro(k=2, n=4, seed=0, std=0.5, chain=None):
    cfg = ModelConfig(n=n, k=k, n_r=1, n_tau=n - 1, num_entities=5, num_relations=4,
                      num_timestamps=4, init_std=std, seed=seed, num_dated_timestamps=chain)
    return cfg, init_model(cfg)


BATCH = np.array([[0, 1, 2, 0], [3, 0, 1, 2], [2, 3, 4, 3], [0, 1, 4, 1], [4, 2, 0, 0]])


# -- independent reference implementation ------------------------------------

def plane_rotation(v):
    """Scaled rotation taking e1 to v, built from the angle in the (e1, v) plane."""
    k = len(v)
    s = np.linalg.norm(v)
    u = v / s
    e1 = np.eye(k)[0]
    w = u - u[0] * e1
    sin = np.linalg.norm(w)
    if sin < 1e-15:
        return s * np.eye(k) * np.sign(u[0])
    w /= sin
    cos = u[0]
    R = np.eye(k) + sin * (np.outer(w, e1) - np.outer(e1, w)) + (cos - 1) * (np.outer(e1, e1) + np.outer(w, w))
    return s * R


def ref_transform(h, rt, r2):
    rows = []
    for i in range(len(h)):
        z = plane_rotation(rt[i]) @ h[i]
        rows.append(plane_rotation(r2[i]) @ z)
    return np.array(rows)


def ref_loss(batch, p: ModelParams, cfg: ModelConfig, lam1, lam2, power=4):
    nll = 0.0
    reg = 0.0
    for h, r, t, tau in batch:
        rt = np.concatenate([p.relation[r], p.time[tau]])
        q = ref_transform(p.entity[h], rt, p.static[r])
        scores = [float(np.sum(q * p.entity[e])) for e in range(cfg.num_entities)]
        nll += -math.log(math.exp(scores[t]) / sum(math.exp(s) for s in scores))
        for m in (p.entity[h], p.static[r], rt, p.entity[t]):
            reg += sum(abs(x) ** power for x in m.ravel())
    chain = cfg.time_chain
    temporal = 0.0
    for i in range(chain - 1):
        temporal += sum(abs(x) ** power for x in (p.time[i + 1] - p.time[i]).ravel())
    temporal = temporal / (chain - 1) if chain > 1 else 0.0
    B = len(batch)
    return nll / B + lam1 * reg / B + lam2 * temporal


# -- softmax ------------------------------------------------------------------

def test_softmax_two_equal_scores():
    assert softmax_nll([3.0, 3.0], 0) == pytest.approx(math.log(2), abs=1e-15)
    assert softmax_nll([3.0, 3.0], 1) == pytest.approx(0.6931471805599453, abs=1e-15)


def test_softmax_saturation():
    assert softmax_nll([60.0, 1.0, 9.0, -4.0], 0) < 1e-20


def test_softmax_matches_extended_precision():
    rng = np.random.default_rng(0)
    mpmath.mp.dps = 50
    for _ in range(20):
        s = rng.normal(scale=5, size=10)
        t = int(rng.integers(10))
        exact = -mpmath.log(mpmath.exp(s[t]) / mpmath.fsum(mpmath.exp(x) for x in s))
        assert abs(softmax_nll(s, t) - float(exact)) < 1e-12


def test_softmax_rejects_non_finite():
    with pytest.raises(TrainingError):
        softmax_nll([1.0, np.nan], 0)


# -- regularizers -------------------------------------------------------------

def test_reg_n4_zero_and_single_entry():
    cfg, p = micro(std=0.0)
    assert reg_n4(BATCH[:1], p) == 0.0
    p.entity[0, 0, 0] = 2.0
    # entity 0 is only the head of the first quad
    assert reg_n4(np.array([[0, 1, 2, 0]]), p) == 16.0


def test_reg_n4_scalar_oracle_and_scaling():
    cfg, p = micro(k=3, seed=4)
    expect = 0.0
    for h, r, t, tau in BATCH:
        for m in (p.entity[h], p.static[r], p.relation[r], p.time[tau], p.entity[t]):
            expect += sum(x ** 4 for x in m.ravel())
    expect /= len(BATCH)
    assert reg_n4(BATCH, p) == pytest.approx(expect, rel=1e-12)
    doubled = ModelParams(*(2 * t for t in p.tables().values()))
    assert reg_n4(BATCH, doubled) == 16 * reg_n4(BATCH, p)
    assert reg_n4(BATCH, p, p=3) > 0


def test_reg_temporal_cases():
    assert reg_temporal(np.ones((4, 2, 2))) == 0.0
    table = np.zeros((2, 1, 2))
    table[1, 0, 1] = 1.0
    assert reg_temporal(table) == 1.0
    assert reg_temporal(np.ones((1, 3, 2))) == 0.0
    rng = np.random.default_rng(2)
    table = rng.normal(size=(5, 3, 2))
    expect = sum(sum(x ** 4 for x in (table[i + 1] - table[i]).ravel()) for i in range(4)) / 4
    assert reg_temporal(table) == pytest.approx(expect, rel=1e-12)
    # a trailing untimed row stays out of the chain
    assert reg_temporal(np.concatenate([table, 100 * np.ones((1, 3, 2))]), chain=5) == pytest.approx(expect)


@pytest.mark.parametrize("seed", range(5))
def test_regularizers_nonnegative(seed):
    cfg, p = micro(seed=seed)
    assert reg_n4(BATCH, p) > 0 and reg_temporal(p.time) > 0


# -- batch loss ---------------------------------------------------------------

def test_total_equals_nll_without_penalties():
    cfg, p = micro()
    b = batch_loss(BATCH, p, cfg, TrainConfig(lambda1=0, lambda2=0))
    assert b.total == b.nll


def test_breakdown_is_consistent():
    cfg, p = micro(k=3)
    tc = TrainConfig(lambda1=0.3, lambda2=0.7)
    b = batch_loss(BATCH, p, cfg, tc)
    assert b.total == pytest.approx(b.nll + 0.3 * b.reg_n4 + 0.7 * b.reg_temporal, rel=1e-10)


def test_uniform_at_zero_init():
    cfg, p = micro(std=0.0)
    assert abs(batch_loss(BATCH, p, cfg, TrainConfig()).nll - math.log(5)) < 1e-12
    cfg, p = micro(std=0.3)
    p.entity[:] = 0.0
    assert abs(batch_loss(BATCH, p, cfg, TrainConfig()).nll - math.log(5)) < 1e-12


@pytest.mark.parametrize("k", [2, 3])
@pytest.mark.parametrize("chain", [None, 3])
def test_batch_loss_matches_reference(k, chain):
    cfg, p = micro(k=k, seed=11, chain=chain)
    got = batch_loss(BATCH, p, cfg, TrainConfig(lambda1=0.2, lambda2=0.05)).total
    assert got == pytest.approx(ref_loss(BATCH, p, cfg, 0.2, 0.05), rel=1e-11)


# -- gradients and AdaGrad ----------------------------------------------------

@pytest.mark.parametrize("k", [2, 3])
@pytest.mark.parametrize("lam", [(0.0, 0.0), (0.1, 0.1)])
def test_gradients_match_finite_differences(k, lam):
    cfg, p = micro(k=k, seed=3, chain=3)
    errs = check_gradients(BATCH, p, cfg, TrainConfig(lambda1=lam[0], lambda2=lam[1]))
    assert max(errs.values()) <= 1e-4, errs


def test_untouched_rows_are_unchanged():
    cfg, p = micro(seed=2)
    before = p.copy()
    batch = np.array([[0, 1, 2, 0]])
    opt = AdaGrad(p)
    grad_step(batch, p, opt, cfg, TrainConfig(lambda2=0.0))
    assert np.array_equal(p.relation[[0, 2, 3]], before.relation[[0, 2, 3]])
    assert np.array_equal(p.static[[0, 2, 3]], before.static[[0, 2, 3]])
    assert np.array_equal(p.time[1:], before.time[1:])
    assert not np.array_equal(p.relation[1], before.relation[1])


def test_temporal_penalty_moves_every_chain_row():
    cfg, p = micro(seed=2)
    before = p.copy()
    grad_step(np.array([[0, 1, 2, 0]]), p, AdaGrad(p), cfg, TrainConfig(lambda1=0, lambda2=1.0))
    assert all(not np.array_equal(p.time[i], before.time[i]) for i in range(4))


def test_zero_gradient_leaves_params():
    cfg, p = micro(std=0.0)
    before = p.copy()
    grads = {name: np.zeros_like(t) for name, t in p.tables().items()}
    AdaGrad(p).step(p, grads)
    for name in p.tables():
        assert np.array_equal(getattr(p, name), getattr(before, name))


def test_adagrad_closed_form():
    x = np.array([1.5])
    holder = type("P", (), {})()
    holder.w = x
    holder.tables = lambda: {"w": holder.w}
    opt = AdaGrad(holder, lr=0.1, eps=1e-10)
    g = np.array([0.8])
    opt.step(holder, {"w": g})
    assert holder.w[0] == pytest.approx(1.5 - 0.1 * 0.8 / math.sqrt(0.8 ** 2 + 1e-10), abs=1e-15)
    opt.step(holder, {"w": g})
    assert opt.accum["w"][0] == pytest.approx(2 * 0.64)


def test_non_finite_gradient_names_table():
    cfg, p = micro()
    grads = {name: np.zeros_like(t) for name, t in p.tables().items()}
    grads["time"][0, 0, 0] = np.inf
    with pytest.raises(TrainingError, match="time"):
        AdaGrad(p).step(p, grads)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    cfg, p = micro()
    p.entity[0, 0, 0] = 1e300
    p.static[1, 0, 0] = 1e300
    with pytest.raises(TrainingError):
        loss_and_grad(BATCH, p, cfg, TrainConfig())


# -- fit ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def memorization_kg():
    facts = generate_synthetic_kg(50, 5, 10, 500, seed=1)
    vocab = build_vocab(facts)
    train = encode_dataset(facts, vocab, "train")
    forward = encode_dataset(facts, vocab, "valid")
    index = build_filter_index([train], vocab.num_base_relations)
    cfg = ModelConfig.from_ratio(32, 2, 0.5, num_entities=len(vocab.entities),
                                 num_relations=len(vocab.relations),
                                 num_timestamps=len(vocab.timestamps))
    return train.quads, forward.quads, index, cfg


def test_fit_zero_epochs_returns_init(memorization_kg):
    train, _, _, cfg = memorization_kg
    res = fit(train, cfg, TrainConfig(epochs=0))
    init = init_model(cfg)
    assert all(np.array_equal(getattr(res.params, n), getattr(init, n)) for n in init.tables())
    assert res.history == []


def test_fit_loss_decreases(memorization_kg):
    train, _, _, cfg = memorization_kg
    res = fit(train, cfg, TrainConfig(epochs=10, batch_size=500))
    assert res.history[-1]["total"] < res.history[0]["total"]


def test_fit_is_deterministic(memorization_kg):
    train, valid, index, cfg = memorization_kg
    tc = TrainConfig(epochs=4, batch_size=300, valid_every=2, seed=5)
    a = fit(train, cfg, tc, valid=valid, filter_index=index)
    b = fit(train, cfg, tc, valid=valid, filter_index=index)
    assert a.history == b.history


def test_fit_keeps_best_and_calls_back(memorization_kg):
    train, valid, index, cfg = memorization_kg
    seen = []
    res = fit(train, cfg, TrainConfig(epochs=6, batch_size=500, valid_every=2),
              valid=valid, filter_index=index, callbacks=[seen.append])
    assert [r["epoch"] for r in seen] == [1, 2, 3, 4, 5, 6]
    checks = [r["valid_mrr"] for r in seen if "valid_mrr" in r]
    assert len(checks) == 3 and res.best_valid_mrr == max(checks)


def test_fit_early_stops():
    facts = generate_synthetic_kg(10, 2, 3, 30, seed=0)
    vocab = build_vocab(facts)
    train = encode_dataset(facts, vocab, "train")
    index = build_filter_index([train], vocab.num_base_relations)
    cfg = ModelConfig.from_ratio(4, 2, 1.0, num_entities=len(vocab.entities),
                                 num_relations=len(vocab.relations),
                                 num_timestamps=len(vocab.timestamps))
    # zero learning rate: validation MRR can never improve after the first check
    res = fit(train.quads, cfg, TrainConfig(epochs=50, learning_rate=0.0, valid_every=1, patience=2),
              valid=encode_dataset(facts, vocab, "valid").quads, filter_index=index)
    assert len(res.history) == 3 and res.best_epoch == 1
