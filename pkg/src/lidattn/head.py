"""Statistics pooling, the linear softmax classifier, and LID metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numeric import as_matrix, check_mask, masked_mean_std

DEFAULT_EPSILON = 1e-8


@dataclass
class PooledStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def concatenated(self):
        return np.concatenate([self.mu, self.sigma])


@dataclass
class ClassifierWeights:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, rng, d_in, n_classes):
        return cls(rng.standard_normal((d_in, n_classes)) / np.sqrt(d_in), np.zeros(n_classes))

    @property
    def n_classes(self):
        return self.W.shape[1]


def stat_pool(c, mask=None, epsilon=DEFAULT_EPSILON):
    """Mean and standard deviation of the context over its valid rows."""
    mu, sigma = masked_mean_std(c, mask, epsilon)
    return PooledStats(mu, sigma)


def stat_pool_backward(grad_mu, grad_sigma, c, mask, stats):
    """Gradient of the pooled statistics with respect to the context rows."""
    c = as_matrix(c)
    mask = check_mask(mask, c.shape[0])
    n_valid = mask.sum()
    grad_var = grad_sigma / (2.0 * stats.sigma)
    grad = (grad_mu + 2.0 * grad_var * (c - stats.mu)) / n_valid
    grad[~mask] = 0.0
    return grad


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def classify(stats, w):
    """Logits ``stats @ W + b`` and their softmax.

    ``stats`` may be a :class:`PooledStats` or an already concatenated vector.
    """
    z = stats.concatenated if isinstance(stats, PooledStats) else np.asarray(stats, dtype=np.float64)
    if z.shape != (w.W.shape[0],):
        raise ValueError(f"pooled vector of length {z.shape} does not match W {w.W.shape}")
    logits = z @ w.W + w.b
    return logits, softmax(logits)


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class_f1: np.ndarray
    confusion: np.ndarray
    scored_classes: list

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": [float(f) for f in self.per_class_f1],
            "confusion": self.confusion.tolist(),
            "scored_classes": list(self.scored_classes),
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d):
        return cls(
            accuracy=float(d["accuracy"]),
            macro_f1=float(d["macro_f1"]),
            per_class_f1=np.asarray(d["per_class_f1"], dtype=np.float64),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            scored_classes=list(d.get("scored_classes", [])),
        )


def evaluate(predictions, truths, n_classes):
    """Accuracy, per-class F1 and macro-F1 from label lists.

    A class that never occurs in ``truths`` and is never predicted is left out
    of the macro average (its per-class entry is reported as 0). Every other
    class counts, with F1 = 0 when precision + recall = 0.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predictions and truths must be 1-D and of equal length")
    if pred.size == 0:
        raise ValueError("cannot evaluate an empty label list")
    for name, labels in (("predictions", pred), ("truths", true)):
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ValueError(f"{name} contain labels outside [0, {n_classes})")

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    denom = support + predicted
    per_class = np.divide(2.0 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    scored = np.flatnonzero(denom > 0)
    return EvalReport(
        accuracy=float(tp.sum() / pred.size),
        macro_f1=float(per_class[scored].mean()),
        per_class_f1=per_class,
        confusion=confusion,
        scored_classes=[int(c) for c in scored],
    )
