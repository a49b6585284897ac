"""Two-phase training: a supervised teacher, then a student distilled from it.

Each iteration visits the tasks in the order VA, EXPR, AU, MTL and takes one
Adam step per task batch. After every epoch the model is scored on the
validation split; the per-task counters behind the gamma weights are updated
and training stops once the MTL score has not improved for ``patience``
epochs. The returned checkpoint is the one from the best epoch.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .checkpoint import Checkpoint, load_into, restore_model
from .data import Batch, Dataset, epoch_iterator
from .errors import ContractError, NumericError, ShapeError
from .evaluation import evaluate
from .losses import (
    LossWeights,
    SoftLabels,
    TaskWeightState,
    delta_schedule,
    gamma_update,
    student_total_loss,
    supervision_loss,
    teacher_total_loss,
)
from .model import ModelConfig, MultiTaskModel, init_model
from .optim import AdamState, adam_step
from .tasks import MTL, TASKS

logger = logging.getLogger(__name__)

PHASES = ("teacher", "student")


@dataclass
class TrainConfig:
    epochs: int = 20
    patience: int = 5
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    delta: float
    train_loss: dict
    metrics: dict
    gamma_counts: dict
    improved: bool


@dataclass
class TrainReport:
    phase: str
    epochs: list = field(default_factory=list)
    iteration_losses: list = field(default_factory=list)  # [epoch, iteration, task, loss]
    stop_reason: str = "running"
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(
            phase=d["phase"],
            epochs=[EpochRecord(**e) for e in d["epochs"]],
            iteration_losses=[list(x) for x in d["iteration_losses"]],
            stop_reason=d["stop_reason"],
            best_epoch=d["best_epoch"],
        )

    def to_jsonl(self) -> str:
        """One UTF-8 JSON record per epoch, fields in declaration order."""
        lines = []
        for rec in self.epochs:
            row = asdict(rec)
            row["best_epoch"] = self.best_epoch
            row["stop_reason"] = self.stop_reason
            lines.append(json.dumps(row))
        return "".join(line + "\n" for line in lines)

    def epoch_mean_loss(self, epoch_index: int, task: str) -> float:
        return self.epochs[epoch_index].train_loss[task]


def teacher_soft_labels(teacher: Union[Checkpoint, MultiTaskModel], batch: Batch) -> SoftLabels:
    """Eval-mode teacher outputs for ``batch``."""
    model = restore_model(teacher) if isinstance(teacher, Checkpoint) else teacher
    was_training = model.training
    model.eval()
    try:
        out = model.forward(batch.img, batch.snd)
    finally:
        model.training = was_training
    return SoftLabels(out.va.data, out.expr_logits.data, out.au_logits.data)


def _check_compatible(cfg: ModelConfig, ds: Dataset) -> None:
    spec = ds.spec
    if (cfg.n_img, cfg.d_img, cfg.d_snd) != (spec.n_img, spec.d_img, spec.d_snd):
        raise ShapeError(
            f"model expects n_img={cfg.n_img}, d_img={cfg.d_img}, d_snd={cfg.d_snd}; "
            f"dataset has {spec.n_img}, {spec.d_img}, {spec.d_snd}"
        )


class Trainer:
    def __init__(
        self,
        phase: str,
        dataset: Dataset,
        model_cfg: ModelConfig,
        weights: Optional[LossWeights] = None,
        train_cfg: Optional[TrainConfig] = None,
        teacher: Optional[Checkpoint] = None,
    ):
        if phase not in PHASES:
            raise ContractError(f"phase must be one of {PHASES}, got {phase!r}")
        if phase == "student" and teacher is None:
            raise ContractError("student training needs a teacher checkpoint")
        _check_compatible(model_cfg, dataset)
        self.phase = phase
        self.weights = weights or LossWeights()
        self.train_cfg = train_cfg or TrainConfig()
        # the teacher only ever sees annotated samples
        self.data = dataset.labeled_only() if phase == "teacher" else dataset
        self.model = init_model(model_cfg)
        tc = self.train_cfg
        self.opt = AdamState(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
        self.gamma = TaskWeightState()
        self.next_epoch = 0
        self.best: Optional[Checkpoint] = None
        self.best_score = -math.inf
        self.stale = 0
        self.task_best = {t: -math.inf for t in TASKS}
        self.report = TrainReport(phase)
        self.teacher_ckpt = teacher
        self.teacher_model = None
        if teacher is not None:
            _check_compatible(teacher.model_config, dataset)
            self.teacher_model = restore_model(teacher).eval()

    # -- configuration ---------------------------------------------------
    def config_dict(self) -> dict:
        return {
            "phase": self.phase,
            "model": self.model.cfg.to_dict(),
            "weights": asdict(self.weights),
            "train": asdict(self.train_cfg),
        }

    @property
    def finished(self) -> bool:
        return self.report.stop_reason != "running"

    # -- losses ------------------------------------------------------------
    def batch_loss(self, task: str, batch: Batch, delta: float):
        out = self.model.forward(batch.img, batch.snd)
        if task == MTL:
            return supervision_loss(MTL, out, batch.labels)
        if self.phase == "teacher":
            return teacher_total_loss(task, out, batch.labels, delta)
        soft = teacher_soft_labels(self.teacher_model, batch)
        labeled = batch.labeled
        labels = batch.labels if labeled.any() else None
        return student_total_loss(
            task, out, labels, soft, self.weights, self.gamma, delta,
            labeled=None if labeled.all() else labeled,
        )

    def step(self, task: str, batch: Batch, delta: float) -> float:
        self.model.train()
        loss = self.batch_loss(task, batch, delta)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"{self.phase} loss became non-finite on a {task} batch")
        self.model.zero_grad()
        loss.backward()
        adam_step(self.model.params, {n: p.grad for n, p in self.model.params.items()}, self.opt)
        return value

    # -- loop --------------------------------------------------------------
    def delta_for(self, epoch: int) -> float:
        w = self.weights
        # the ramp reaches 1 on the last scheduled epoch
        return delta_schedule(w.delta_mode, epoch, max(self.train_cfg.epochs - 1, 0), w.delta)

    def run_epoch(self) -> EpochRecord:
        epoch = self.next_epoch
        tc = self.train_cfg
        delta = self.delta_for(epoch)
        sums = {t: 0.0 for t in TASKS}
        counts = {t: 0 for t in TASKS}
        for i, (task, batch) in enumerate(epoch_iterator(self.data, tc.batch_size, tc.seed, epoch)):
            if len(batch) < 2:
                logger.warning("skipping a %s batch of size %d (batchnorm needs 2)", task, len(batch))
                continue
            value = self.step(task, batch, delta)
            self.report.iteration_losses.append([epoch, i // len(TASKS), task, value])
            sums[task] += value
            counts[task] += 1
        metrics = evaluate(self.model, self.data, "val")
        scores = metrics.task_scores()
        for task in TASKS:
            better = scores[task] > self.task_best[task]
            if better:
                self.task_best[task] = scores[task]
            self.gamma = gamma_update(self.gamma, task, better)
        improved = metrics.mtl_score > self.best_score
        record = EpochRecord(
            epoch=epoch,
            phase=self.phase,
            delta=delta,
            train_loss={t: (sums[t] / counts[t] if counts[t] else float("nan")) for t in TASKS},
            metrics=metrics.to_dict(),
            gamma_counts=dict(self.gamma.counts),
            improved=improved,
        )
        self.report.epochs.append(record)
        self.next_epoch = epoch + 1
        if improved:
            self.best_score = metrics.mtl_score
            self.report.best_epoch = epoch
            self.stale = 0
            self.best = self.snapshot(extra={"metrics": metrics.to_dict()})
        else:
            self.stale += 1
        logger.info("%s epoch %d: mtl %.4f (best %.4f at %d)", self.phase, epoch, metrics.mtl_score,
                    self.best_score, self.report.best_epoch)
        if self.stale >= tc.patience:
            self.report.stop_reason = "early_stop"
        elif self.next_epoch >= tc.epochs:
            self.report.stop_reason = "max_epochs"
        return record

    def run(self, max_epochs: Optional[int] = None) -> tuple[Checkpoint, TrainReport]:
        """Train until finished, or for at most ``max_epochs`` more epochs."""
        budget = math.inf if max_epochs is None else max_epochs
        if self.train_cfg.epochs <= 0 and not self.finished:
            self.report.stop_reason = "zero_epochs"
            self.best = self.snapshot()
        done = 0
        while not self.finished and done < budget:
            self.run_epoch()
            done += 1
        return self.best, self.report

    # -- state -------------------------------------------------------------
    def snapshot(self, extra: Optional[dict] = None) -> Checkpoint:
        return Checkpoint.from_model(
            self.model,
            self.config_dict(),
            optimizer=copy.deepcopy(self.opt),
            gamma_counts=dict(self.gamma.counts),
            epoch=self.next_epoch - 1,
            extra=extra or {},
        )

    def checkpoint(self) -> Checkpoint:
        """Full resumable state, including the best snapshot so far."""
        ckpt = self.snapshot(extra={
            "best_score": self.best_score,
            "stale": self.stale,
            "task_best": self.task_best,
            "report": self.report.to_dict(),
        })
        ckpt.best = self.best
        return ckpt

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: Dataset,
                        teacher: Optional[Checkpoint] = None) -> "Trainer":
        cfg = ckpt.config
        if "report" not in ckpt.extra:
            raise ContractError("checkpoint holds a model snapshot, not a resumable training state")
        trainer = cls(
            cfg["phase"],
            dataset,
            ModelConfig.from_dict(cfg["model"]),
            LossWeights(**cfg["weights"]),
            TrainConfig(**cfg["train"]),
            teacher=teacher,
        )
        load_into(trainer.model, ckpt)
        trainer.opt = copy.deepcopy(ckpt.optimizer)
        trainer.gamma = TaskWeightState(dict(ckpt.gamma_counts))
        trainer.next_epoch = ckpt.epoch + 1
        trainer.best = ckpt.best
        trainer.best_score = ckpt.extra["best_score"]
        trainer.stale = ckpt.extra["stale"]
        trainer.task_best = dict(ckpt.extra["task_best"])
        trainer.report = TrainReport.from_dict(ckpt.extra["report"])
        return trainer


def _train_cfg(train_cfg: Optional[TrainConfig], epochs: Optional[int], patience: Optional[int]) -> TrainConfig:
    tc = copy.copy(train_cfg) if train_cfg is not None else TrainConfig()
    if epochs is not None:
        tc.epochs = epochs
    if patience is not None:
        tc.patience = patience
    return tc


def train_teacher(dataset: Dataset, cfg: ModelConfig, weights: Optional[LossWeights] = None,
                  epochs: Optional[int] = None, patience: Optional[int] = None,
                  train_cfg: Optional[TrainConfig] = None) -> tuple[Checkpoint, TrainReport]:
    trainer = Trainer("teacher", dataset, cfg, weights, _train_cfg(train_cfg, epochs, patience))
    return trainer.run()


def train_student(dataset: Dataset, teacher: Optional[Checkpoint], cfg: ModelConfig,
                  weights: Optional[LossWeights] = None, epochs: Optional[int] = None,
                  patience: Optional[int] = None,
                  train_cfg: Optional[TrainConfig] = None) -> tuple[Checkpoint, TrainReport]:
    if teacher is None:
        raise ContractError("train_student needs a teacher checkpoint")
    trainer = Trainer("student", dataset, cfg, weights, _train_cfg(train_cfg, epochs, patience), teacher=teacher)
    return trainer.run()
