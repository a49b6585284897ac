"""Finite-difference checks for every primitive and every loss through a small model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .model import ModelConfig, MultiTaskModel, init_model, temporal_aggregate
from .tasks import AU, EXPR, MTL, VA, Labels

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _primitive_checks(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 4))
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    gamma = rng.normal(size=4)
    beta = rng.normal(size=4)
    run_mean, run_var = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
    mask_seed = int(rng.integers(2**31))
    v = rng.normal(size=7)
    positive = rng.uniform(0.2, 3.0, size=(5, 4))
    probs = L.ad.softmax_with_temperature(Tensor(rng.normal(size=(5, 4)))).data
    flags = rng.uniform(size=(5, 4))

    def bn_train(x, g, be):
        return (ad.batchnorm(x, g, be, True, np.zeros(4), np.ones(4)) * w).sum()

    def bn_eval(x, g, be):
        return (ad.batchnorm(x, g, be, False, run_mean, run_var) * w).sum()

    def drop(x):
        return (ad.dropout(x, 0.5, True, np.random.default_rng(mask_seed)) * w).sum()

    def moments(v):
        mu, sd = ad.batch_moments(v)
        return mu + 2.0 * sd

    return {
        "affine": (lambda x, W, b: (ad.affine(x, W, b) ** 2).sum(), [x, W, b]),
        "matmul": (lambda x, W: (ad.matmul(x, W) * rng_fixed(5, 3)).sum(), [x, W]),
        "swish": (lambda x: (ad.swish(x) * w).sum(), [x]),
        "sigmoid": (lambda x: (ad.sigmoid(x) * w).sum(), [x]),
        "tanh": (lambda x: (ad.tanh(x) * w).sum(), [x]),
        "exp": (lambda x: (ad.exp(x) * w).sum(), [x]),
        "log_clamped": (lambda x: (ad.log_clamped(x) * w).sum(), [positive]),
        "sqrt": (lambda x: (ad.sqrt(x) * w).sum(), [positive]),
        "div": (lambda a, c: (a / c * w).sum(), [x, positive]),
        "softmax_t2.5": (lambda x: (ad.softmax_with_temperature(x, 2.5) * w).sum(), [x]),
        "batchnorm_train": (bn_train, [x, gamma, beta]),
        "batchnorm_eval": (bn_eval, [x, gamma, beta]),
        "dropout_frozen_mask": (drop, [x]),
        "concat": (lambda a, c: (ad.concat(a, c) ** 2).sum(), [x, w]),
        "grl_reversed": (lambda x: (ad.grl(x) * w).sum(), [x]),
        "batch_moments": (moments, [v]),
        "mean_axis": (lambda x: (x.mean(axis=0) ** 2).sum(), [x]),
        "ccc": (lambda a: L.ccc(v, a), [rng.normal(size=7)]),
        "cross_entropy": (lambda q: L.cross_entropy(probs, ad.softmax_with_temperature(q)), [x]),
        "binary_cross_entropy": (lambda q: L.binary_cross_entropy(flags, ad.sigmoid(q)), [x]),
    }


def rng_fixed(*shape) -> np.ndarray:
    return np.linspace(-1.0, 1.0, int(np.prod(shape))).reshape(shape)


def small_config(seed: int, **overrides) -> ModelConfig:
    base = dict(n_img=3, d_img=4, d_snd=3, d_feat=5, extractor_layers=2, dropout_p=0.5, seed=seed)
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(rng: np.random.Generator, cfg: ModelConfig, n: int = 8):
    img = rng.normal(size=(n, cfg.n_img, cfg.d_img))
    snd = rng.normal(size=(n, cfg.d_snd))
    labels = Labels(
        va=np.tanh(rng.normal(size=(n, 2))),
        expr=rng.integers(0, 8, size=n),
        au=rng.integers(0, 2, size=(n, 12)).astype(np.uint8),
    )
    return img, snd, labels


def model_function(model: MultiTaskModel, img, snd, loss_fn, names, mask_seed: int) -> Callable[..., Tensor]:
    """Wrap ``loss_fn(forward_output)`` as a function of the named parameters.

    The dropout generator is reseeded on every call so the mask is frozen.
    """
    def f(*tensors):
        for name, t in zip(names, tensors):
            model.params[name] = t
        model.rng = np.random.default_rng(mask_seed)
        return loss_fn(model.forward(img, snd))

    return f


def _loss_catalogue(rng: np.random.Generator, labels: Labels, n: int) -> dict[str, Callable]:
    soft = L.SoftLabels(
        va=np.tanh(rng.normal(size=(n, 2))),
        expr_logits=rng.normal(size=(n, 8)),
        au_logits=rng.normal(size=(n, 12)),
    )
    weights = L.LossWeights()
    gstate = L.TaskWeightState({VA: 1, EXPR: 0, AU: 2, MTL: 0})
    return {
        "supervision_VA": lambda o: L.supervision_loss(VA, o, labels),
        "supervision_EXPR": lambda o: L.supervision_loss(EXPR, o, labels),
        "supervision_AU": lambda o: L.supervision_loss(AU, o, labels),
        "supervision_MTL": lambda o: L.supervision_loss(MTL, o, labels),
        "distillation_VA": lambda o: L.distillation_loss(VA, o, soft, 2.5),
        "distillation_EXPR": lambda o: L.distillation_loss(EXPR, o, soft, 2.5),
        "distillation_AU": lambda o: L.distillation_loss(AU, o, soft, 2.5),
        "task_classification": lambda o: L.task_classification_loss(o.task_logits, EXPR),
        "teacher_total_AU": lambda o: L.teacher_total_loss(AU, o, labels, 0.5),
        "student_total_VA": lambda o: L.student_total_loss(VA, o, labels, soft, weights, gstate, 1.0),
    }


def run_gradient_suite(seeds: Iterable[int] = range(10), eps: float = 1e-5) -> list[CheckResult]:
    results: list[CheckResult] = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (f, inputs) in _primitive_checks(rng).items():
            scale = -1.0 if name == "grl_reversed" else 1.0
            results.append(CheckResult(name, seed, ad.gradcheck(f, inputs, eps, numeric_scale=scale)))

        # end-to-end, reversal off so the extractor path is an ordinary gradient
        cfg = small_config(seed, use_grl=False)
        model = init_model(cfg).train()
        names = list(model.params)
        img, snd, labels = random_batch(rng, cfg)
        base = [model.params[k].data.copy() for k in names]
        mask_seed = int(rng.integers(2**31))
        for loss_name, loss_fn in _loss_catalogue(rng, labels, len(img)).items():
            f = model_function(model, img, snd, loss_fn, names, mask_seed)
            results.append(CheckResult(f"model/{loss_name}", seed, ad.gradcheck(f, base, eps)))

        # reversal on: extractor gradients of the task loss are the negated finite differences
        cfg = small_config(seed, use_grl=True)
        model = init_model(cfg).train()
        ext = [k for k in model.params if k.startswith("ext")]
        f = model_function(model, img, snd, lambda o: L.task_classification_loss(o.task_logits, AU), ext, mask_seed)
        err = ad.gradcheck(f, [model.params[k].data.copy() for k in ext], eps, numeric_scale=-1.0)
        results.append(CheckResult("model/grl_extractor_reversed", seed, err))

        # recurrent aggregator on a 2 x 3 x 4 sequence
        rcfg = ModelConfig(n_img=3, d_img=4, d_snd=1, d_feat=2, aggregator="recurrent", seed=seed)
        rmodel = init_model(rcfg)
        agg = [k for k in rmodel.params if k.startswith("agg")]
        seq = rng.normal(size=(2, 3, 4))
        weights_out = rng.normal(size=(2, 4))

        def rec(*tensors):
            params = dict(zip(agg, tensors))
            return (temporal_aggregate(Tensor(seq), "recurrent", params) * weights_out).sum()

        def rec_input(s):
            params = {k: rmodel.params[k] for k in agg}
            return (temporal_aggregate(s, "recurrent", params) * weights_out).sum()

        results.append(CheckResult("recurrent_params", seed, ad.gradcheck(rec, [rmodel.params[k].data for k in agg], eps)))
        results.append(CheckResult("recurrent_input", seed, ad.gradcheck(rec_input, [seq], eps)))
    return results


def summarize(results: list[CheckResult]) -> tuple[float, list[CheckResult]]:
    worst = max((r.error for r in results), default=0.0)
    return worst, [r for r in results if not r.passed]
