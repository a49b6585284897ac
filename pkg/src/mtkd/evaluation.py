from __future__ import annotations

from typing import Union

import numpy as np

from .checkpoint import Checkpoint, restore_model
from .data import Dataset, TaskPart
from .errors import DataError
from .metrics import MetricsAccumulator, MetricsReport
from .model import MultiTaskModel
from .tasks import TASKS


def predict(model: MultiTaskModel, part: TaskPart, batch_size: int = 512) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode VA values, EXPR class ids and AU flags for every row of ``part``."""
    was_training = model.training
    model.eval()
    va, expr, au = [], [], []
    try:
        for start in range(0, len(part), batch_size):
            rows = slice(start, start + batch_size)
            out = model.forward(part.img[rows], part.snd[rows])
            va.append(out.va.data)
            expr.append(np.argmax(out.expr_logits.data, axis=1))
            au.append(out.au_logits.data > 0.0)  # sigmoid(logit) > 0.5
    finally:
        model.training = was_training
    if not va:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros((0, 12), dtype=bool)
    return np.concatenate(va), np.concatenate(expr), np.concatenate(au)


def accumulate(model: MultiTaskModel, part: TaskPart, acc: MetricsAccumulator, batch_size: int = 512) -> None:
    va, expr, au = predict(model, part, batch_size)
    rows = part.labeled
    if part.va is not None:
        acc.add_va(part.va[rows], va[rows])
    if part.expr is not None:
        acc.add_expr(part.expr[rows], expr[rows])
    if part.au is not None:
        acc.add_au(part.au[rows], au[rows])


def evaluate(model: Union[MultiTaskModel, Checkpoint], ds: Dataset, split: str = "val") -> MetricsReport:
    """Metrics over every labeled sample of ``split``, pooling task parts that carry each label."""
    if isinstance(model, Checkpoint):
        model = restore_model(model)
    if sum(len(ds.part(split, t)) for t in TASKS) == 0:
        raise DataError(f"split {split!r} is empty")
    acc = MetricsAccumulator()
    for task in TASKS:
        accumulate(model, ds.part(split, task), acc)
    return acc.report()
