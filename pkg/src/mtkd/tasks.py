"""Task identifiers and the per-batch label container."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError

VA, EXPR, AU, MTL = "VA", "EXPR", "AU", "MTL"
TASKS = (VA, EXPR, AU, MTL)
SOURCE_TASKS = (VA, EXPR, AU)


def check_task(task: str, allow_mtl: bool = True) -> str:
    allowed = TASKS if allow_mtl else SOURCE_TASKS
    if task not in allowed:
        raise ContractError(f"task must be one of {allowed}, got {task!r}")
    return task


def task_index(task: str) -> int:
    """Discriminator class of a source task."""
    return SOURCE_TASKS.index(check_task(task, allow_mtl=False))


@dataclass
class Labels:
    """Ground truth carried by a batch; a group is ``None`` when not annotated."""

    va: Optional[np.ndarray] = None  # N x 2, values in [-1, 1]
    expr: Optional[np.ndarray] = None  # N class ids in 0..7
    au: Optional[np.ndarray] = None  # N x 12 binary flags

    def has(self, task: str) -> bool:
        if task == MTL:
            return self.va is not None and self.expr is not None and self.au is not None
        return {VA: self.va, EXPR: self.expr, AU: self.au}[check_task(task)] is not None

    def select(self, rows) -> "Labels":
        return Labels(
            va=None if self.va is None else self.va[rows],
            expr=None if self.expr is None else self.expr[rows],
            au=None if self.au is None else self.au[rows],
        )
