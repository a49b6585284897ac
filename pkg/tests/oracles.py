"""Straightforward loop implementations of the loss formulas.

Nothing here touches the autodiff engine or vectorised numpy; every value is
built from Python floats so it can serve as an independent reference.
"""

import math

FLOOR = 1e-12
SOURCE = ("VA", "EXPR", "AU")


def rows(a):
    return [[float(v) for v in row] for row in a]


def column(a, k):
    return [float(row[k]) for row in a]


def ccc(y, yhat):
    n = len(y)
    my = sum(y) / n
    mh = sum(yhat) / n
    vy = sum((a - my) ** 2 for a in y) / n
    vh = sum((b - mh) ** 2 for b in yhat) / n
    cov = sum((a - my) * (b - mh) for a, b in zip(y, yhat)) / n
    denom = vy + vh + (my - mh) ** 2
    if denom == 0.0:
        return 1.0
    return 2.0 * cov / denom


def softmax(row, t=1.0):
    top = max(row)
    e = [math.exp((v - top) / t) for v in row]
    s = sum(e)
    return [v / s for v in e]


def sigmoid(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def cross_entropy(target, pred):
    total = 0.0
    for t_row, p_row in zip(target, pred):
        total += -sum(t * math.log(max(p, FLOOR)) for t, p in zip(t_row, p_row))
    return total / len(target)


def binary_cross_entropy(target, pred):
    total, count = 0.0, 0
    for t_row, p_row in zip(target, pred):
        for y, p in zip(t_row, p_row):
            total += -(y * math.log(max(p, FLOOR)) + (1 - y) * math.log(max(1 - p, FLOOR)))
            count += 1
    return total / count


def one_hot(ids, n):
    return [[1.0 if c == int(i) else 0.0 for c in range(n)] for i in ids]


def va_loss(pred, target):
    return sum(1.0 - ccc(column(target, k), column(pred, k)) for k in range(2)) / 2.0


def supervision(task, out, labels):
    if task == "VA":
        return va_loss(rows(out["va"]), rows(labels["va"]))
    if task == "EXPR":
        probs = [softmax(r) for r in rows(out["expr"])]
        return cross_entropy(one_hot(labels["expr"], 8), probs)
    if task == "AU":
        probs = [[sigmoid(v) for v in r] for r in rows(out["au"])]
        return binary_cross_entropy(rows(labels["au"]), probs)
    return sum(supervision(t, out, labels) for t in SOURCE)


def distillation(task, out, teacher, t):
    if task == "VA":
        return va_loss(rows(out["va"]), rows(teacher["va"]))
    if task == "EXPR":
        soft = [softmax(r, t) for r in rows(teacher["expr"])]
        pred = [softmax(r, t) for r in rows(out["expr"])]
        return cross_entropy(soft, pred)
    soft = [[sigmoid(v / t) for v in r] for r in rows(teacher["au"])]
    pred = [[sigmoid(v / t) for v in r] for r in rows(out["au"])]
    return binary_cross_entropy(soft, pred)


def task_classification(task_logits, task):
    k = SOURCE.index(task)
    probs = [softmax(r) for r in rows(task_logits)]
    return cross_entropy(one_hot([k] * len(probs), 3), probs)


def teacher_total(task, out, labels, delta):
    loss = supervision(task, out, labels)
    if task == "MTL":
        return loss
    return loss + delta * task_classification(out["task"], task)


def student_total(task, out, labels, teacher, alpha, beta, gammas, delta, t):
    own = distillation(task, out, teacher, t)
    if labels is not None:
        own += alpha * supervision(task, out, labels)
    total = gammas[task] * own + delta * task_classification(out["task"], task)
    for other in SOURCE:
        if other != task:
            total += beta * gammas[other] * distillation(other, out, teacher, t)
    return total


def gamma_trace(improvements):
    """Gamma after each epoch for one task, from its improve/no-improve sequence."""
    n, trace = 0, []
    for improved in improvements:
        n = 0 if improved else n + 1
        trace.append(math.exp(0.5 * n))
    return trace
