"""Supervision, distillation and task-classification losses and their weighting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, LabelError, ParameterError
from .model import EXPR_CLASSES, ForwardOutput, N_SOURCE_TASKS
from .tasks import AU, EXPR, MTL, SOURCE_TASKS, TASKS, VA, Labels, check_task, task_index

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DELTA_MODES = ("fixed", "linear_ramp")


@dataclass
class LossWeights:
    alpha: float = 10.0
    beta: float = 0.9
    delta_mode: str = "fixed"
    delta: float = 1.0  # used when delta_mode == "fixed"
    temperature: float = 2.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be non-negative")
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.delta_mode not in DELTA_MODES:
            raise ParameterError(f"delta_mode must be one of {DELTA_MODES}, got {self.delta_mode!r}")
        if not 0.0 <= self.delta <= 1.0:
            raise ParameterError(f"fixed delta must lie in [0, 1], got {self.delta}")


@dataclass
class TaskWeightState:
    """Consecutive non-improving validation epochs per task."""

    counts: dict = field(default_factory=lambda: {t: 0 for t in TASKS})

    def gamma(self, task: str) -> float:
        return math.exp(0.5 * self.counts[check_task(task)])

    def gammas(self) -> dict:
        return {t: self.gamma(t) for t in TASKS}


def gamma_update(state: TaskWeightState, task: str, improved: bool) -> TaskWeightState:
    counts = dict(state.counts)
    counts[check_task(task)] = 0 if improved else counts[task] + 1
    return TaskWeightState(counts)


def delta_schedule(mode: str, epoch: int, total_epochs: int, value: float = 1.0) -> float:
    if mode == "fixed":
        return float(value)
    if mode != "linear_ramp":
        raise ParameterError(f"unknown delta mode {mode!r}")
    if not 0 <= epoch <= max(total_epochs, 0):
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs}]")
    if total_epochs <= 0:
        return 1.0
    return epoch / total_epochs


# ---------------------------------------------------------------------------
# base criteria
# ---------------------------------------------------------------------------


def _vec(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    return t.reshape(-1) if t.ndim != 1 else t


def ccc(y, yhat) -> Tensor:
    """Concordance correlation coefficient with population moments.

    The correlation term is formed as a covariance so zero-variance inputs are
    safe. Two constant, equal sequences give 1 (the continuous extension).
    """
    y, yhat = _vec(y), _vec(yhat)
    if y.shape != yhat.shape or y.shape[0] < 2:
        raise ContractError(f"ccc needs two equal-length vectors with N >= 2, got {y.shape}, {yhat.shape}")
    mu_y, mu_h = y.mean(), yhat.mean()
    dy, dh = y - mu_y, yhat - mu_h
    cov = (dy * dh).mean()
    var_y = (dy * dy).mean()
    var_h = (dh * dh).mean()
    gap = mu_y - mu_h
    denom = var_y + var_h + gap * gap
    if denom.data == 0.0:
        logger.warning("ccc: both sequences constant and equal; returning 1")
        return Tensor(1.0)
    return 2.0 * cov / denom


def ccc_value(y, yhat) -> float:
    """Plain-number CCC; same arithmetic as :func:`ccc`."""
    return float(ccc(np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)).data)


def _check_distribution(name: str, x: np.ndarray) -> None:
    if x.ndim != 2:
        raise ContractError(f"{name} must be N x C, got shape {x.shape}")
    if (x < 0).any() or np.abs(x.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
        raise ContractError(f"{name} rows must be probability distributions")


def cross_entropy(target_dist, pred_dist) -> Tensor:
    """Batch mean of ``-sum_c target * log(pred)``; pred is floored at 1e-12."""
    target = target_dist if isinstance(target_dist, Tensor) else Tensor(target_dist)
    pred = pred_dist if isinstance(pred_dist, Tensor) else Tensor(pred_dist)
    if target.shape != pred.shape:
        raise ContractError(f"cross_entropy shape mismatch {target.shape} vs {pred.shape}")
    _check_distribution("target", target.data)
    _check_distribution("prediction", pred.data)
    return -(target * ad.log_clamped(pred, PROB_FLOOR)).sum(axis=1).mean()


def binary_cross_entropy(target, pred) -> Tensor:
    """Mean over all entries of ``-[y log p + (1 - y) log(1 - p)]``."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if target.shape != pred.shape:
        raise ContractError(f"binary_cross_entropy shape mismatch {target.shape} vs {pred.shape}")
    for name, x in (("target", target.data), ("prediction", pred.data)):
        if (x < 0).any() or (x > 1).any():
            raise ContractError(f"binary_cross_entropy {name} outside [0, 1]")
    pos = target * ad.log_clamped(pred, PROB_FLOOR)
    neg = (1.0 - target) * ad.log_clamped(1.0 - pred, PROB_FLOOR)
    return -(pos + neg).mean()


def one_hot(ids, n_classes: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
        raise ContractError(f"class id outside 0..{n_classes - 1}")
    out = np.zeros((ids.shape[0], n_classes))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


def _va_loss(pred: Tensor, target) -> Tensor:
    # mean over valence and arousal of (1 - CCC)
    target = target if isinstance(target, Tensor) else Tensor(target)
    losses = [1.0 - ccc(target[:, k], pred[:, k]) for k in range(pred.shape[1])]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total / float(len(losses))


# ---------------------------------------------------------------------------
# task losses
# ---------------------------------------------------------------------------


def supervision_loss(task: str, output: ForwardOutput, labels: Labels) -> Tensor:
    check_task(task)
    if labels is None or not labels.has(task):
        raise LabelError(f"batch carries no {task} labels")
    if task == VA:
        return _va_loss(output.va, labels.va)
    if task == EXPR:
        return cross_entropy(one_hot(labels.expr, EXPR_CLASSES), ad.softmax_with_temperature(output.expr_logits, 1.0))
    if task == AU:
        return binary_cross_entropy(np.asarray(labels.au, dtype=np.float64), ad.sigmoid(output.au_logits))
    return (
        supervision_loss(VA, output, labels)
        + supervision_loss(EXPR, output, labels)
        + supervision_loss(AU, output, labels)
    )


@dataclass
class SoftLabels:
    """Teacher outputs for one batch (plain arrays, no gradient)."""

    va: np.ndarray
    expr_logits: np.ndarray
    au_logits: np.ndarray

    def select(self, rows) -> "SoftLabels":
        return SoftLabels(self.va[rows], self.expr_logits[rows], self.au_logits[rows])


def distillation_loss(task: str, student: ForwardOutput, teacher: SoftLabels, t: float) -> Tensor:
    if task == MTL:
        raise ContractError("no distillation loss is defined for MTL batches")
    check_task(task, allow_mtl=False)
    if teacher is None:
        raise ContractError("distillation needs teacher outputs")
    if task == VA:
        return _va_loss(student.va, np.asarray(teacher.va))
    if task == EXPR:
        soft = ad.softmax_with_temperature(Tensor(teacher.expr_logits), t).data
        return cross_entropy(soft, ad.softmax_with_temperature(student.expr_logits, t))
    soft = ad.sigmoid(Tensor(np.asarray(teacher.au_logits) / t)).data
    return binary_cross_entropy(soft, ad.sigmoid(student.au_logits / t))


def task_classification_loss(task_logits: Tensor, source_task: str) -> Tensor:
    k = task_index(source_task)
    n = task_logits.shape[0]
    target = one_hot(np.full(n, k), N_SOURCE_TASKS)
    return cross_entropy(target, ad.softmax_with_temperature(task_logits, 1.0))


def teacher_total_loss(task: str, output: ForwardOutput, labels: Labels, delta: float) -> Tensor:
    """Supervision plus ``delta`` times task classification; MTL batches use supervision only."""
    check_task(task)
    sup = supervision_loss(task, output, labels)
    if task == MTL or delta == 0:
        return sup
    return sup + delta * task_classification_loss(output.task_logits, task)


def student_total_loss(
    task: str,
    output: ForwardOutput,
    labels: Optional[Labels],
    teacher: Optional[SoftLabels],
    weights: LossWeights,
    gamma_state: TaskWeightState,
    delta: float,
    labeled: Optional[np.ndarray] = None,
) -> Tensor:
    """``g_i (alpha L_i^S + L_i^D) + delta L^T + sum_{j != i} beta g_j L_j^D``.

    ``labels`` may be ``None`` for a distillation-only batch. ``labeled`` is an
    optional boolean row mask; supervision then runs on those rows only.
    """
    if task == MTL:
        raise ContractError("MTL batches are trained on supervision loss alone")
    check_task(task, allow_mtl=False)
    if teacher is None:
        raise ContractError("student loss needs teacher outputs for every task")
    g = gamma_state.gamma
    own = distillation_loss(task, output, teacher, weights.temperature)
    sup = _masked_supervision(task, output, labels, labeled)
    if sup is not None:
        own = weights.alpha * sup + own
    total = g(task) * own
    if delta != 0:
        total = total + delta * task_classification_loss(output.task_logits, task)
    if weights.beta != 0:
        for other in SOURCE_TASKS:
            if other != task:
                total = total + (weights.beta * g(other)) * distillation_loss(other, output, teacher, weights.temperature)
    return total


def _masked_supervision(task, output, labels, labeled) -> Optional[Tensor]:
    if labels is None:
        return None
    if labeled is None:
        return supervision_loss(task, output, labels)
    rows = np.flatnonzero(labeled)
    if rows.size < (2 if task == VA else 1):
        return None
    if rows.size == output.va.shape[0]:
        return supervision_loss(task, output, labels)
    return supervision_loss(task, output.select(rows), labels.select(rows))

