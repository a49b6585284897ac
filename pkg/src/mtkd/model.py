"""Multi-task network: shared dense extractor, three task heads and a task discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError, ShapeError

VA_DIM = 2
EXPR_CLASSES = 8
AU_COUNT = 12
N_SOURCE_TASKS = 3

AGGREGATORS = ("mean", "recurrent")


@dataclass
class ModelConfig:
    n_img: int = 6
    d_img: int = 512
    d_snd: int = 1000
    d_feat: int = 512
    extractor_layers: int = 2
    dropout_p: float = 0.5
    aggregator: str = "mean"
    use_grl: bool = True
    grl_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_img", "d_img", "d_snd", "d_feat", "extractor_layers"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.aggregator not in AGGREGATORS:
            raise ParameterError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ForwardOutput:
    va: Tensor
    expr_logits: Tensor
    au_logits: Tensor
    task_logits: Tensor
    feature: Tensor

    def select(self, rows) -> "ForwardOutput":
        return ForwardOutput(
            va=self.va[rows],
            expr_logits=self.expr_logits[rows],
            au_logits=self.au_logits[rows],
            task_logits=self.task_logits[rows],
            feature=self.feature[rows],
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every trainable tensor, in a fixed order."""
    shapes: dict[str, tuple] = {}
    if cfg.aggregator == "recurrent":
        d = cfg.d_img
        for gate in ("z", "h"):
            shapes[f"agg.w{gate}"] = (d, d)
            shapes[f"agg.u{gate}"] = (d, d)
            shapes[f"agg.b{gate}"] = (d,)
    d_in = cfg.d_img + cfg.d_snd
    for k in range(cfg.extractor_layers):
        shapes[f"ext{k}.w"] = (d_in, cfg.d_feat)
        shapes[f"ext{k}.b"] = (cfg.d_feat,)
        shapes[f"ext{k}.bn_gamma"] = (cfg.d_feat,)
        shapes[f"ext{k}.bn_beta"] = (cfg.d_feat,)
        d_in = cfg.d_feat
    for head, width in (("va", VA_DIM), ("expr", EXPR_CLASSES), ("au", AU_COUNT), ("disc", N_SOURCE_TASKS)):
        shapes[f"head_{head}.w"] = (cfg.d_feat, width)
        shapes[f"head_{head}.b"] = (width,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    for k in range(cfg.extractor_layers):
        shapes[f"ext{k}.bn_mean"] = (cfg.d_feat,)
        shapes[f"ext{k}.bn_var"] = (cfg.d_feat,)
    return shapes


def temporal_aggregate(img_seq: Tensor, mode: str = "mean", params: Optional[dict] = None) -> Tensor:
    """Collapse ``N x n_img x d_img`` frame features to ``N x d_img``.

    ``mean`` averages frames. ``recurrent`` runs a single update-gate cell over
    the frame axis and returns its final state; it reads ``agg.*`` from ``params``.
    """
    img_seq = img_seq if isinstance(img_seq, Tensor) else Tensor(img_seq)
    if img_seq.ndim != 3 or img_seq.shape[1] < 1:
        raise ShapeError(f"expected N x n_img x d_img with n_img >= 1, got {img_seq.shape}")
    if mode == "mean":
        return img_seq.mean(axis=1)
    if mode != "recurrent":
        raise ParameterError(f"unknown aggregator {mode!r}")
    if params is None:
        raise ContractError("recurrent aggregation needs agg.* parameters")
    n, steps, d = img_seq.shape
    h = Tensor(np.zeros((n, d)))
    for t in range(steps):
        x_t = img_seq[:, t, :]
        z = ad.sigmoid(ad.affine(x_t, params["agg.wz"], params["agg.bz"]) + h @ params["agg.uz"])
        cand = ad.tanh(ad.affine(x_t, params["agg.wh"], params["agg.bh"]) + h @ params["agg.uh"])
        h = (1.0 - z) * h + z * cand
    return h


class MultiTaskModel:
    """Parameters, batchnorm running statistics and train/eval mode of the network."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.training = True
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    # -- mode ------------------------------------------------------------
    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.training = mode == "train"

    def train(self) -> "MultiTaskModel":
        self.set_mode("train")
        return self

    def eval(self) -> "MultiTaskModel":
        self.set_mode("eval")
        return self

    # -- parameters ------------------------------------------------------
    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Copies of the parameter and buffer arrays."""
        return (
            {k: p.data.copy() for k, p in self.params.items()},
            {k: b.copy() for k, b in self.buffers.items()},
        )

    def load_arrays(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
        expected = param_shapes(self.cfg)
        expected_buf = buffer_shapes(self.cfg)
        if set(params) != set(expected) or set(buffers) != set(expected_buf):
            raise ShapeError("parameter names do not match the model configuration")
        for name, shape in {**expected, **expected_buf}.items():
            got = (params.get(name) if name in params else buffers[name]).shape
            if tuple(got) != tuple(shape):
                raise ShapeError(f"{name}: stored shape {tuple(got)} but config expects {tuple(shape)}")
        for name in expected:
            self.params[name] = Tensor(np.array(params[name], dtype=np.float64), requires_grad=True)
        for name in expected_buf:
            self.buffers[name] = np.array(buffers[name], dtype=np.float64)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward ---------------------------------------------------------
    def __call__(self, img_seq, snd) -> ForwardOutput:
        return self.forward(img_seq, snd)

    def forward(self, img_seq, snd) -> ForwardOutput:
        cfg = self.cfg
        img_seq = img_seq if isinstance(img_seq, Tensor) else Tensor(img_seq)
        snd = snd if isinstance(snd, Tensor) else Tensor(snd)
        if img_seq.shape[1:] != (cfg.n_img, cfg.d_img) or snd.ndim != 2 or snd.shape[1] != cfg.d_snd:
            raise ShapeError(
                f"batch shapes img {img_seq.shape}, snd {snd.shape} do not match "
                f"n_img={cfg.n_img}, d_img={cfg.d_img}, d_snd={cfg.d_snd}"
            )
        if img_seq.shape[0] != snd.shape[0]:
            raise ShapeError(f"image batch {img_seq.shape[0]} != sound batch {snd.shape[0]}")
        p = self.params
        h = ad.concat(temporal_aggregate(img_seq, cfg.aggregator, p), snd)
        for k in range(cfg.extractor_layers):
            h = ad.swish(ad.affine(h, p[f"ext{k}.w"], p[f"ext{k}.b"]))
            h = ad.batchnorm(
                h, p[f"ext{k}.bn_gamma"], p[f"ext{k}.bn_beta"], self.training,
                self.buffers[f"ext{k}.bn_mean"], self.buffers[f"ext{k}.bn_var"],
            )
            h = ad.dropout(h, cfg.dropout_p, self.training, self.rng)
        feature = h
        disc_in = ad.grl(feature, cfg.grl_lambda) if cfg.use_grl else feature
        return ForwardOutput(
            va=ad.tanh(ad.affine(feature, p["head_va.w"], p["head_va.b"])),
            expr_logits=ad.affine(feature, p["head_expr.w"], p["head_expr.b"]),
            au_logits=ad.affine(feature, p["head_au.w"], p["head_au.b"]),
            task_logits=ad.affine(disc_in, p["head_disc.w"], p["head_disc.b"]),
            feature=feature,
        )


def init_model(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> MultiTaskModel:
    """Fan-in scaled uniform weights (variance 2/fan_in), zero biases, identity batchnorm."""
    init_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if rng is None:
        rng = np.random.default_rng(init_seq)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("bn_gamma"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True)
    buffers = {
        name: (np.ones(shape) if name.endswith("bn_var") else np.zeros(shape))
        for name, shape in buffer_shapes(cfg).items()
    }
    return MultiTaskModel(cfg, params, buffers, rng=np.random.default_rng(dropout_seq))
