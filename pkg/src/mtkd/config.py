"""Flat ``key=value`` run configuration.

Every key has a default. A config file overrides the defaults and command-line
flags override the file. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

from .data import DatasetSpec
from .errors import ConfigError, MTKDError
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    # model
    n_img: int = 6
    d_img: int = 512
    d_snd: int = 1000
    d_feat: int = 512
    extractor_layers: int = 2
    dropout_p: float = 0.5
    aggregator: str = "mean"
    use_grl: bool = True
    grl_lambda: float = 1.0
    # loss weights
    alpha: float = 10.0
    beta: float = 0.9
    delta_mode: str = "fixed"
    delta: float = 1.0
    temperature: float = 2.5
    # optimisation
    epochs: int = 20
    patience: int = 5
    batch_size: int = 64
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # synthetic data
    train_va: int = 2000
    train_expr: int = 2000
    train_au: int = 2000
    train_mtl: int = 2000
    val_va: int = 500
    val_expr: int = 500
    val_au: int = 500
    val_mtl: int = 500
    d_z: int = 16
    noise: float = 0.1
    withhold: float = 0.0
    # paths
    data: str = ""
    teacher: str = ""
    report: str = ""

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def key_type(cls, key: str) -> type:
        return type(getattr(cls(), key))

    def model_config(self, seed_offset: int = 0) -> ModelConfig:
        return ModelConfig(
            n_img=self.n_img, d_img=self.d_img, d_snd=self.d_snd, d_feat=self.d_feat,
            extractor_layers=self.extractor_layers, dropout_p=self.dropout_p,
            aggregator=self.aggregator, use_grl=self.use_grl, grl_lambda=self.grl_lambda,
            seed=self.seed + seed_offset,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, delta_mode=self.delta_mode,
                           delta=self.delta, temperature=self.temperature)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, patience=self.patience, batch_size=self.batch_size,
                           lr=self.lr, beta1=self.adam_beta1, beta2=self.adam_beta2,
                           eps=self.adam_eps, seed=self.seed)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            train_va=self.train_va, train_expr=self.train_expr, train_au=self.train_au,
            train_mtl=self.train_mtl, val_va=self.val_va, val_expr=self.val_expr,
            val_au=self.val_au, val_mtl=self.val_mtl, d_z=self.d_z, noise=self.noise,
            seed=self.seed, n_img=self.n_img, d_img=self.d_img, d_snd=self.d_snd,
            withhold=self.withhold,
        )

    def validate(self) -> "RunConfig":
        """Build every component config once so bad values fail early."""
        try:
            self.model_config()
            self.loss_weights()
            self.dataset_spec()
        except MTKDError as exc:
            raise ConfigError(str(exc)) from exc
        if self.epochs < 0 or self.patience < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs >= 0, patience >= 1, batch_size >= 1 and lr > 0 are required")
        return self

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in asdict(self).items())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def convert_value(key: str, raw: str):
    """Parse ``raw`` as the type of ``key``'s default."""
    kind = RunConfig.key_type(key)
    text = raw.strip()
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_overrides(text: str) -> dict:
    """Key/value pairs of a config document, typed; errors cite the line number."""
    known = set(RunConfig.keys())
    values: dict = {}
    unknown: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            unknown.append(f"{key} (line {lineno})")
            continue
        try:
            values[key] = convert_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    return values


def parse_config(text: str, flags: Optional[dict] = None) -> RunConfig:
    """Defaults, overlaid by ``text``, overlaid by ``flags`` (already typed or strings)."""
    values = parse_overrides(text)
    for key, value in (flags or {}).items():
        if key not in RunConfig.keys():
            raise ConfigError(f"unknown config keys: {key}")
        if isinstance(value, str) and RunConfig.key_type(key) is not str:
            try:
                value = convert_value(key, value)
            except ValueError as exc:
                raise ConfigError(f"flag --{key}: {exc}") from exc
        values[key] = value
    return RunConfig(**values).validate()
