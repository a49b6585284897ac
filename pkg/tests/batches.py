"""Random small batches shared by the loss tests and the acceptance run."""

import numpy as np

from mtkd.autodiff import Tensor
from mtkd.losses import SoftLabels
from mtkd.model import ForwardOutput
from mtkd.tasks import Labels


def random_case(seed: int, n: int = 6):
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.3, 3.0)
    va = np.tanh(rng.normal(size=(n, 2)) * scale)
    expr = rng.normal(size=(n, 8)) * scale
    au = rng.normal(size=(n, 12)) * scale
    task = rng.normal(size=(n, 3))
    out = ForwardOutput(va=Tensor(va), expr_logits=Tensor(expr), au_logits=Tensor(au),
                        task_logits=Tensor(task), feature=Tensor(np.zeros((n, 1))))
    labels = Labels(va=np.tanh(rng.normal(size=(n, 2))), expr=rng.integers(0, 8, size=n),
                    au=rng.integers(0, 2, size=(n, 12)).astype(np.uint8))
    soft = SoftLabels(va=np.tanh(rng.normal(size=(n, 2))), expr_logits=rng.normal(size=(n, 8)) * 2,
                      au_logits=rng.normal(size=(n, 12)) * 2)
    plain_out = {"va": va, "expr": expr, "au": au, "task": task}
    plain_labels = {"va": labels.va, "expr": labels.expr, "au": labels.au}
    plain_soft = {"va": soft.va, "expr": soft.expr_logits, "au": soft.au_logits}
    extras = {
        "delta": float(rng.uniform(0, 1)),
        "alpha": float(rng.uniform(0, 12)),
        "beta": float(rng.uniform(0, 1)),
        "t": float(rng.uniform(0.5, 4)),
        "counts": {k: int(rng.integers(0, 4)) for k in ("VA", "EXPR", "AU", "MTL")},
    }
    return out, labels, soft, plain_out, plain_labels, plain_soft, extras
