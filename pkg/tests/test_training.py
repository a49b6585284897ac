import math

import numpy as np
import pytest

from mtkd.autodiff import Tensor
from mtkd.checkpoint import (
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from mtkd.data import DatasetSpec, generate_dataset
from mtkd.errors import ContractError, HeaderError, NumericError, ShapeError, TruncatedError, VersionError
from mtkd.losses import LossWeights
from mtkd.model import ModelConfig, init_model
from mtkd.optim import AdamState, adam_step
from mtkd.training import Trainer, TrainConfig, TrainReport, train_student, train_teacher

DIMS = dict(n_img=2, d_img=6, d_snd=5)


def tiny_data(seed=0, **kw):
    spec = dict(train_va=24, train_expr=24, train_au=24, train_mtl=24, val_va=16, val_expr=16, val_au=16,
                val_mtl=16, d_z=4, seed=seed, **DIMS)
    spec.update(kw)
    return generate_dataset(DatasetSpec(**spec))


def tiny_model(seed=0, **kw):
    return ModelConfig(d_feat=8, seed=seed, **DIMS, **kw)


def tc(**kw):
    base = dict(epochs=3, patience=5, batch_size=8, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- Adam -----------------------------------------------------------------------

def reference_adam(x0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = list(x0), [0.0] * len(x0), [0.0] * len(x0)
    for t, g in enumerate(grads, start=1):
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            x[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return x


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=3) for _ in range(25)]
    p = {"w": Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)}
    state = AdamState(lr=0.01)
    for g in grads:
        adam_step(p, {"w": g}, state)
    want = reference_adam([0.5, -1.0, 2.0], [list(g) for g in grads], 0.01)
    np.testing.assert_allclose(p["w"].data, want, rtol=0, atol=1e-14)
    assert state.step == 25


def test_adam_first_step_is_lr_times_sign():
    p = {"w": Tensor(np.array([0.0, 0.0]), requires_grad=True)}
    adam_step(p, {"w": np.array([3.0, -0.2])}, AdamState(lr=1e-4))
    np.testing.assert_allclose(p["w"].data, [-1e-4, 1e-4], rtol=1e-6)


def test_adam_skips_missing_gradients():
    p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
    state = AdamState()
    adam_step(p, {"a": np.ones(2), "b": None}, state)
    assert (p["b"].data == 1).all() and "b" not in state.m


def test_adam_rejects_nonfinite_gradient():
    p = {"w": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(NumericError, match="w"):
        adam_step(p, {"w": np.array([1.0, np.nan])}, AdamState())
    assert (p["w"].data == 1).all()


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_forward_bitwise(tmp_path):
    model = init_model(tiny_model(3)).eval()
    ckpt = Checkpoint.from_model(model, {"phase": "teacher"})
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = restore_model(load_checkpoint(tmp_path / "m.ckpt")).eval()
    x = np.random.default_rng(0).normal(size=(4, 2, 6))
    s = np.random.default_rng(1).normal(size=(4, 5))
    a, b = model.forward(x, s), back.forward(x, s)
    for name in ("va", "expr_logits", "au_logits", "task_logits"):
        assert getattr(a, name).data.tobytes() == getattr(b, name).data.tobytes()


def test_checkpoint_wrong_config_is_shape_error():
    ckpt = Checkpoint.from_model(init_model(tiny_model()))
    ckpt.config["model"]["d_feat"] = 9
    with pytest.raises(ShapeError):
        decode_checkpoint(encode_checkpoint(ckpt))
    other = init_model(ModelConfig(d_feat=9, **DIMS))
    good = Checkpoint.from_model(init_model(tiny_model()))
    with pytest.raises(ShapeError):
        other.load_arrays(good.params, good.buffers)


def test_checkpoint_corruption_errors():
    raw = encode_checkpoint(Checkpoint.from_model(init_model(tiny_model())))
    with pytest.raises(HeaderError):
        decode_checkpoint(b"NOPE" + raw[4:])
    with pytest.raises(VersionError):
        decode_checkpoint(raw[:4] + b"\x07\x00" + raw[6:])
    with pytest.raises(TruncatedError):
        decode_checkpoint(raw[:-20])


# -- training loop ---------------------------------------------------------------

def test_teacher_run_reports_and_decreases_loss():
    ds = tiny_data()
    best, report = train_teacher(ds, tiny_model(dropout_p=0.0), train_cfg=tc(epochs=6))
    assert report.stop_reason == "max_epochs"
    assert len(report.epochs) == 6
    scores = [e.metrics["mtl_score"] for e in report.epochs]
    assert report.best_epoch == int(np.argmax(scores))
    assert best.extra["metrics"]["mtl_score"] == max(scores)
    assert report.epochs[-1].train_loss["MTL"] < report.epochs[0].train_loss["MTL"]


def test_early_stopping_never_runs_past_patience():
    ds = tiny_data()
    _, report = train_teacher(ds, tiny_model(), train_cfg=tc(epochs=30, patience=2, lr=1e-6))
    scores = [e.metrics["mtl_score"] for e in report.epochs]
    assert report.best_epoch == int(np.argmax(scores))
    assert len(report.epochs) - 1 - report.best_epoch <= 2
    if report.stop_reason == "early_stop":
        assert len(report.epochs) - 1 - report.best_epoch == 2


def test_zero_epochs_returns_initial_model():
    ds = tiny_data()
    best, report = train_teacher(ds, tiny_model(), train_cfg=tc(epochs=0))
    assert report.stop_reason == "zero_epochs" and report.epochs == []
    fresh = init_model(tiny_model())
    for k, v in fresh.params.items():
        np.testing.assert_array_equal(best.params[k], v.data)


def test_full_run_is_deterministic():
    ds = tiny_data(withhold=0.5)
    t1, r1 = train_teacher(ds, tiny_model(), train_cfg=tc())
    t2, r2 = train_teacher(ds, tiny_model(), train_cfg=tc())
    assert r1.to_jsonl() == r2.to_jsonl() and r1.iteration_losses == r2.iteration_losses
    s1, q1 = train_student(ds, t1, tiny_model(1), train_cfg=tc())
    s2, q2 = train_student(ds, t2, tiny_model(1), train_cfg=tc())
    assert q1.to_dict() == q2.to_dict()
    assert encode_checkpoint(s1) == encode_checkpoint(s2)


@pytest.mark.parametrize("phase", ["teacher", "student"])
def test_resume_matches_uninterrupted_run(tmp_path, phase):
    ds = tiny_data(withhold=0.5)
    teacher = None
    if phase == "student":
        teacher, _ = train_teacher(ds, tiny_model(), train_cfg=tc(epochs=2))
    weights = LossWeights(delta_mode="linear_ramp")
    full = Trainer(phase, ds, tiny_model(2), weights, tc(epochs=4), teacher=teacher)
    best_full, rep_full = full.run()

    part = Trainer(phase, ds, tiny_model(2), weights, tc(epochs=4), teacher=teacher)
    part.run(max_epochs=2)
    save_checkpoint(part.checkpoint(), tmp_path / "state.ckpt")
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "state.ckpt"), ds, teacher=teacher)
    best_res, rep_res = resumed.run()
    assert rep_res.to_dict() == rep_full.to_dict()
    assert encode_checkpoint(best_res) == encode_checkpoint(best_full)


def test_report_jsonl_has_one_record_per_epoch():
    _, report = train_teacher(tiny_data(), tiny_model(), train_cfg=tc(epochs=2))
    lines = report.to_jsonl().splitlines()
    assert len(lines) == 2
    assert TrainReport.from_dict(report.to_dict()) == report


def test_gamma_counts_follow_validation():
    _, report = train_student(tiny_data(withhold=0.5), train_teacher(tiny_data(withhold=0.5), tiny_model(),
                                                                     train_cfg=tc(epochs=1))[0],
                              tiny_model(1), train_cfg=tc(epochs=3))
    best = {}
    counts = {t: 0 for t in ("VA", "EXPR", "AU", "MTL")}
    for rec in report.epochs:
        scores = {"VA": rec.metrics["va_score"], "EXPR": rec.metrics["expr_macro_f1"],
                  "AU": rec.metrics["au_macro_f1"], "MTL": rec.metrics["mtl_score"]}
        for t, s in scores.items():
            improved = s > best.get(t, -math.inf)
            if improved:
                best[t] = s
            counts[t] = 0 if improved else counts[t] + 1
        assert rec.gamma_counts == counts


def test_student_needs_teacher_and_compatible_shapes():
    ds = tiny_data()
    with pytest.raises(ContractError):
        train_student(ds, None, tiny_model())
    with pytest.raises(ShapeError):
        train_teacher(ds, ModelConfig(n_img=3, d_img=6, d_snd=5, d_feat=8))


def test_linear_ramp_reaches_one_on_last_epoch():
    _, report = train_teacher(tiny_data(), tiny_model(), LossWeights(delta_mode="linear_ramp"),
                              train_cfg=tc(epochs=3))
    assert [e.delta for e in report.epochs] == [0.0, 0.5, 1.0]
