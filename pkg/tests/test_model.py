import numpy as np
import pytest

from mtkd.autodiff import Tensor
from mtkd.errors import ParameterError, ShapeError
from mtkd.gradsuite import random_batch, small_config
from mtkd.losses import task_classification_loss, teacher_total_loss
from mtkd.model import ModelConfig, buffer_shapes, init_model, param_shapes, temporal_aggregate
from mtkd.optim import AdamState, adam_step
from mtkd.tasks import AU, EXPR


def test_output_shapes_full_size():
    cfg = ModelConfig()
    model = init_model(cfg).eval()
    rng = np.random.default_rng(0)
    out = model.forward(rng.normal(size=(3, 6, 512)), rng.normal(size=(3, 1000)))
    assert out.va.shape == (3, 2)
    assert out.expr_logits.shape == (3, 8)
    assert out.au_logits.shape == (3, 12)
    assert out.task_logits.shape == (3, 3)
    assert out.feature.shape == (3, 512)
    assert np.abs(out.va.data).max() <= 1.0


def test_init_is_deterministic_per_seed():
    a, b, c = (init_model(ModelConfig(seed=s, d_img=4, d_snd=3, d_feat=5)) for s in (7, 7, 8))
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_init_scheme():
    model = init_model(ModelConfig(d_img=40, d_snd=24, d_feat=64))
    w = model.params["ext0.w"].data
    bound = np.sqrt(6.0 / w.shape[0])
    assert np.abs(w).max() <= bound
    assert abs(w.var() - 2.0 / w.shape[0]) < 0.2 * 2.0 / w.shape[0]
    assert (model.params["ext0.b"].data == 0).all()
    assert (model.params["ext0.bn_gamma"].data == 1).all()
    assert (model.buffers["ext0.bn_var"] == 1).all()


def test_param_names_cover_heads_and_extractor():
    names = set(param_shapes(ModelConfig(extractor_layers=3)))
    for head in ("va", "expr", "au", "disc"):
        assert f"head_{head}.w" in names
    assert "ext2.bn_gamma" in names
    assert set(buffer_shapes(ModelConfig(extractor_layers=1))) == {"ext0.bn_mean", "ext0.bn_var"}


def test_eval_forward_is_deterministic_and_does_not_touch_buffers():
    cfg = small_config(0)
    model = init_model(cfg).eval()
    img, snd, _ = random_batch(np.random.default_rng(1), cfg)
    before = {k: v.copy() for k, v in model.buffers.items()}
    a = model.forward(img, snd)
    b = model.forward(img, snd)
    np.testing.assert_array_equal(a.va.data, b.va.data)
    for k in before:
        np.testing.assert_array_equal(before[k], model.buffers[k])


def test_train_forward_uses_dropout():
    cfg = small_config(0, d_feat=50)
    model = init_model(cfg).train()
    img, snd, _ = random_batch(np.random.default_rng(1), cfg)
    a = model.forward(img, snd).feature.data
    assert (a == 0).mean() > 0.2


def test_shape_mismatch_raises():
    model = init_model(small_config(0))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((2, 3, 5)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((2, 3, 4)), np.zeros((3, 3)))


def test_bad_mode_raises():
    with pytest.raises(ParameterError):
        init_model(small_config(0)).set_mode("predict")


def test_load_arrays_wrong_config_raises():
    small = init_model(small_config(0))
    other = init_model(small_config(0, d_feat=7))
    params, buffers = small.state_arrays()
    with pytest.raises(ShapeError):
        other.load_arrays(params, buffers)


def test_mean_aggregator():
    seq = np.arange(24.0).reshape(2, 3, 4)
    np.testing.assert_array_equal(temporal_aggregate(Tensor(seq)).data, seq.mean(axis=1))


def test_recurrent_aggregator_runs():
    cfg = ModelConfig(n_img=3, d_img=4, d_snd=2, d_feat=5, aggregator="recurrent")
    model = init_model(cfg).eval()
    out = model.forward(np.ones((2, 3, 4)), np.ones((2, 2)))
    assert out.va.shape == (2, 2)


def test_grl_forward_bitwise_identical_to_plain():
    cfg_on, cfg_off = small_config(4, use_grl=True), small_config(4, use_grl=False)
    a, b = init_model(cfg_on).eval(), init_model(cfg_off).eval()
    img, snd, _ = random_batch(np.random.default_rng(2), cfg_on)
    np.testing.assert_array_equal(a.forward(img, snd).task_logits.data, b.forward(img, snd).task_logits.data)


def test_grl_reverses_extractor_gradient_exactly():
    cfg_on, cfg_off = small_config(5, use_grl=True), small_config(5, use_grl=False)
    img, snd, _ = random_batch(np.random.default_rng(3), cfg_on)
    grads = []
    for cfg in (cfg_on, cfg_off):
        model = init_model(cfg).train()
        model.rng = np.random.default_rng(11)
        task_classification_loss(model.forward(img, snd).task_logits, EXPR).backward()
        grads.append({k: p.grad for k, p in model.params.items()})
    on, off = grads
    for k in on:
        if k.startswith("ext"):
            np.testing.assert_allclose(on[k], -off[k], rtol=0, atol=1e-12)
        elif k.startswith("head_disc"):
            np.testing.assert_array_equal(on[k], off[k])


def _frozen_loss(model, img, snd, labels, task, delta):
    # same dropout mask and untouched running statistics on every call
    model.rng = np.random.default_rng(99)
    saved = {k: v.copy() for k, v in model.buffers.items()}
    value = teacher_total_loss(task, model.forward(img, snd), labels, delta)
    model.buffers.update(saved)
    return value


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("task", [EXPR, AU])
@pytest.mark.parametrize("use_grl,delta", [(False, 1.0), (True, 0.0)])
def test_tiny_step_decreases_teacher_loss(seed, task, use_grl, delta):
    # With the reversal active and delta > 0 the extractor deliberately climbs the
    # discriminator loss, so a descent guarantee only exists for these two settings.
    cfg = small_config(seed, use_grl=use_grl)
    model = init_model(cfg).train()
    img, snd, labels = random_batch(np.random.default_rng(seed), cfg, n=16)
    before = _frozen_loss(model, img, snd, labels, task, delta)
    model.zero_grad()
    before.backward()
    adam_step(model.params, {k: p.grad for k, p in model.params.items()}, AdamState(lr=1e-6))
    after = _frozen_loss(model, img, snd, labels, task, delta)
    assert after.data < before.data
