"""Class-wise pseudo-label selection and the clustering-head loss.

The number of pseudo-labels taken for class ``c`` is the floored sum of the
``floor(B/C)`` largest class-``c`` probabilities in the batch, so each class
gets a budget that tracks how confident the (calibrated) model is about it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import as_matrix, log_softmax_rows, softmax_rows

# sums of probabilities that are integers in exact arithmetic can land a few
# ulps below; do not let that cost a whole sample
BUDGET_SLACK = 1e-9


@dataclass
class PseudoLabelSet:
    indices: np.ndarray  # sample indices within the batch, ascending
    labels: np.ndarray
    confidences: np.ndarray  # probability of the assigned label
    budgets: np.ndarray  # per-class budget (dynamic) or per-class count (fixed threshold)

    def __len__(self) -> int:
        return int(self.indices.size)

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.indices] = True
        return m

    def label_vector(self, n: int, fill: int = -1) -> np.ndarray:
        y = np.full(n, fill, dtype=np.int64)
        y[self.indices] = self.labels
        return y


def _rank(p: np.ndarray, c: int) -> np.ndarray:
    # descending by class-c probability, lower index first on ties
    return np.argsort(-p[:, c], kind="stable")


def class_budgets(p_w_cal, b: int | None = None, c: int | None = None) -> np.ndarray:
    p = as_matrix(p_w_cal, "p_w_cal")
    b = p.shape[0] if b is None else b
    c = p.shape[1] if c is None else c
    if p.shape != (b, c):
        raise InvalidInputError(f"class_budgets: expected shape {(b, c)}, got {p.shape}")
    if b < c:
        raise InvalidInputError(f"class_budgets: batch size {b} smaller than class count {c}")
    top = b // c
    budgets = np.empty(c, dtype=np.int64)
    for j in range(c):
        s = float(p[_rank(p, j)[:top], j].sum())
        budgets[j] = min(int(np.floor(s + BUDGET_SLACK)), top)
    return budgets


def select_pseudo(p_w_cal, budgets) -> PseudoLabelSet:
    """Take the top ``budgets[c]`` samples per class.

    A sample claimed by several classes goes to the claimant where its
    probability is highest; if that claimant is not the sample's argmax the
    sample is dropped, so every stored label is the row argmax.
    """
    p = as_matrix(p_w_cal, "p_w_cal")
    n, c = p.shape
    budgets = np.asarray(budgets, dtype=np.int64)
    best_class = np.full(n, -1)
    best_prob = np.full(n, -np.inf)
    for j in range(c):
        for i in _rank(p, j)[: budgets[j]]:
            # strict > keeps the lower class index on probability ties
            if p[i, j] > best_prob[i]:
                best_prob[i], best_class[i] = p[i, j], j
    argmax = np.argmax(p, axis=1)
    keep = (best_class >= 0) & (best_class == argmax)
    idx = np.flatnonzero(keep)
    return PseudoLabelSet(idx, best_class[idx], p[idx, best_class[idx]], budgets)


def select_fixed_threshold(p_w_cal, tau: float) -> PseudoLabelSet:
    """Baseline rule: keep every sample whose max probability reaches ``tau``."""
    p = as_matrix(p_w_cal, "p_w_cal")
    conf = p.max(axis=1)
    lab = np.argmax(p, axis=1)
    idx = np.flatnonzero(conf >= tau)
    counts = np.bincount(lab[idx], minlength=p.shape[1])
    return PseudoLabelSet(idx, lab[idx], conf[idx], counts)


def clu_loss(logits, labels):
    """Mean cross-entropy with hard labels.

    ``labels`` is a per-row vector where -1 marks rows outside the pseudo-label
    set. Returns ``(loss, dlogits)``, or ``None`` when no row is selected
    (the caller skips the update).
    """
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise InvalidInputError("clu_loss: one label per logits row required")
    sel = np.flatnonzero(labels >= 0)
    if sel.size == 0:
        return None
    logp = log_softmax_rows(logits[sel])
    y = labels[sel]
    loss = float(-np.mean(logp[np.arange(sel.size), y]))
    g = softmax_rows(logits[sel])
    g[np.arange(sel.size), y] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[sel] = g / sel.size
    return loss, dlogits
