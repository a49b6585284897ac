import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from mtkd import losses as L
from mtkd.data import DatasetSpec, generate_dataset
from mtkd.errors import ContractError, DataError
from mtkd.evaluation import evaluate
from mtkd.metrics import (
    MetricsAccumulator,
    MomentAccumulator,
    au_macro_f1,
    ccc_metric,
    macro_f1,
)
from mtkd.model import ModelConfig, init_model


def hand_f1(truth, pred, n):
    # per-class F1 from precision and recall, computed by counting
    scores = []
    for c in range(n):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        if tp == 0:
            scores.append(0.0)
            continue
        prec, rec = tp / (tp + fp), tp / (tp + fn)
        scores.append(2 * prec * rec / (prec + rec))
    return sum(scores) / n


def test_small_confusion_case():
    # class 0: tp 1, fp 1, fn 0 -> 2/3; class 1: tp 1, fp 0, fn 1 -> 2/3
    assert macro_f1([0, 1, 1], [0, 1, 0], 2) == pytest.approx(2 / 3, abs=1e-15)
    assert macro_f1([0, 1, 1], [0, 1, 0], 2) == pytest.approx(hand_f1([0, 1, 1], [0, 1, 0], 2), abs=1e-15)


def test_perfect_predictions():
    y = np.arange(8).repeat(3)
    assert macro_f1(y, y, 8) == 1.0


def test_single_class_prediction_bound():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 8, 400)
    pred = np.full(400, 3)
    value = macro_f1(y, pred, 8)
    only = hand_f1(y, pred, 8) * 8
    assert value == pytest.approx(only / 8)
    assert value <= 1 / 8


def test_absent_class_counts_as_zero():
    assert macro_f1([0, 0], [0, 0], 2) == 0.5


def test_macro_f1_errors():
    with pytest.raises(DataError):
        macro_f1([], [], 8)
    with pytest.raises(ContractError):
        macro_f1([0, 9], [0, 1], 8)


def _positive_f1(t, p):
    tp = sum(1 for a, b in zip(t, p) if a and b)
    fp = sum(1 for a, b in zip(t, p) if not a and b)
    fn = sum(1 for a, b in zip(t, p) if a and not b)
    if tp == 0:
        return 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 2 * prec * rec / (prec + rec)


def test_au_macro_f1_matches_per_unit_hand_count():
    rng = np.random.default_rng(1)
    t = rng.integers(0, 2, size=(50, 12)).astype(bool)
    p = rng.integers(0, 2, size=(50, 12)).astype(bool)
    want = sum(_positive_f1(t[:, k].tolist(), p[:, k].tolist()) for k in range(12)) / 12
    assert au_macro_f1(t, p) == pytest.approx(want, abs=1e-12)


def test_ccc_metric_agrees_with_loss():
    rng = np.random.default_rng(2)
    for _ in range(20):
        y, yh = rng.normal(size=30), rng.normal(size=30)
        assert abs(ccc_metric(y, yh) - float(L.ccc(y, yh).data)) < 1e-12
        assert abs(ccc_metric(y, yh) - oracles.ccc(list(y), list(yh))) < 1e-12


def test_exact_moments_match_float_ccc():
    rng = np.random.default_rng(3)
    y, yh = rng.normal(size=100), rng.normal(size=100)
    acc = MomentAccumulator()
    acc.update(y, yh)
    assert acc.ccc() == pytest.approx(ccc_metric(y, yh), abs=1e-12)


def _acc(seed, n=40):
    rng = np.random.default_rng(seed)
    acc = MetricsAccumulator()
    acc.add_va(np.tanh(rng.normal(size=(n, 2))), np.tanh(rng.normal(size=(n, 2))))
    acc.add_expr(rng.integers(0, 8, n), rng.integers(0, 8, n))
    acc.add_au(rng.integers(0, 2, (n, 12)), rng.integers(0, 2, (n, 12)).astype(bool))
    return acc


def test_merge_is_order_independent():
    shards = [_acc(s) for s in range(5)]
    forward = shards[0]
    for s in shards[1:]:
        forward = forward.merge(s)
    backward = shards[-1]
    for s in reversed(shards[:-1]):
        backward = s.merge(backward)
    assert forward.report() == backward.report()


def test_report_decomposition_and_text():
    rep = _acc(7).report()
    assert rep.mtl_score == rep.va_score + rep.expr_macro_f1 + rep.au_macro_f1
    assert rep.va_score == (rep.ccc_valence + rep.ccc_arousal) / 2
    lines = dict(line.split(": ", 1) for line in rep.to_text().strip().splitlines())
    assert float(lines["mtl_score"]) == rep.mtl_score


def test_report_needs_every_group():
    acc = MetricsAccumulator()
    acc.add_expr(np.array([0, 1]), np.array([0, 1]))
    with pytest.raises(DataError):
        acc.report()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=60), st.randoms(use_true_random=False))
def test_macro_f1_permutation_invariant(truth, rnd):
    pred = [(t + rnd.randint(0, 2)) % 8 for t in truth]
    order = list(range(len(truth)))
    rnd.shuffle(order)
    assert macro_f1(truth, pred, 8) == macro_f1([truth[i] for i in order], [pred[i] for i in order], 8)
    assert macro_f1(truth, pred, 8) == pytest.approx(hand_f1(truth, pred, 8), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-1, 1)), arrays(np.float64, 8, elements=st.floats(-1, 1)))
def test_ccc_duplication_invariant(y, yh):
    a = MomentAccumulator()
    a.update(y, yh)
    b = MomentAccumulator()
    b.update(np.concatenate([y, y]), np.concatenate([yh, yh]))
    assert a.ccc() == b.ccc()


# -- evaluation ----------------------------------------------------------------

def small_data(**kw):
    spec = dict(n_img=2, d_img=6, d_snd=5, d_z=6, train_va=16, train_expr=16, train_au=16, train_mtl=16,
                val_va=60, val_expr=60, val_au=60, val_mtl=60)
    spec.update(kw)
    return generate_dataset(DatasetSpec(**spec))


def test_evaluate_is_deterministic_and_decomposes():
    ds = small_data()
    model = init_model(ModelConfig(n_img=2, d_img=6, d_snd=5, d_feat=8))
    a, b = evaluate(model, ds), evaluate(model, ds)
    assert a == b
    assert a.mtl_score == a.va_score + a.expr_macro_f1 + a.au_macro_f1
    assert a.n_va == 120 and a.n_expr == 120


def test_evaluate_duplicated_split_identical():
    ds = small_data()
    model = init_model(ModelConfig(n_img=2, d_img=6, d_snd=5, d_feat=8))
    doubled = small_data()
    for key, part in doubled.parts.items():
        idx = np.concatenate([np.arange(len(part)), np.arange(len(part))])
        doubled.parts[key] = part.select(idx)
    a, b = evaluate(model, ds), evaluate(model, doubled)
    for field in ("ccc_valence", "ccc_arousal", "expr_macro_f1", "au_macro_f1"):
        assert getattr(a, field) == getattr(b, field)


def test_untrained_model_expr_near_chance():
    ds = small_data(val_expr=2000, val_mtl=0, val_va=100, val_au=100, d_z=16)
    scores = [evaluate(init_model(ModelConfig(n_img=2, d_img=6, d_snd=5, d_feat=32, seed=s)), ds).expr_macro_f1
              for s in range(5)]
    assert abs(np.mean(scores) - 0.125) < 0.05


def test_evaluate_empty_split():
    ds = small_data(val_va=0, val_expr=0, val_au=0, val_mtl=0)
    with pytest.raises(DataError):
        evaluate(init_model(ModelConfig(n_img=2, d_img=6, d_snd=5, d_feat=8)), ds)
