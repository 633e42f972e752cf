"""Mini-cluster targets and the calibration-head loss.

Each batch is split into K mini-clusters in embedding space. The target for
every member of a mini-cluster is the mean clustering-head prediction over
that mini-cluster. Where the members agree on the class the mean keeps their
confidence; where they disagree it is pulled toward uniform, which is the
only place the calibration head gets penalised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import as_matrix, softmax_rows

LOG_GUARD = 1e-12


@dataclass
class MiniClusterPartition:
    assignment: np.ndarray  # (B,) mini-cluster index per sample
    targets: np.ndarray  # (K, C)
    member_counts: np.ndarray  # (K,)

    def region_tags(self, p_clu) -> np.ndarray:
        """True for reliable mini-clusters (all members share one argmax)."""
        return reliable_regions(p_clu, self.assignment, len(self.member_counts))


def partition_targets(p_clu, assignment, k: int) -> MiniClusterPartition:
    p = as_matrix(p_clu, "p_clu")
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (p.shape[0],):
        raise InvalidInputError("partition_targets: one assignment per row required")
    if assignment.size and (assignment.min() < 0 or assignment.max() >= k):
        raise InvalidInputError(f"partition_targets: assignment index outside [0, {k})")
    counts = np.bincount(assignment, minlength=k)
    if np.any(counts == 0):
        # the kmeans module repairs empty clusters, so this is a caller bug
        raise RuntimeError(f"partition_targets: empty mini-clusters {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((k, p.shape[1]))
    np.add.at(sums, assignment, p)
    return MiniClusterPartition(assignment, sums / counts[:, None], counts)


def reliable_regions(p_clu, assignment, k: int) -> np.ndarray:
    top = np.argmax(np.asarray(p_clu), axis=1)
    tags = np.ones(k, dtype=bool)
    first = np.full(k, -1)
    for a, t in zip(assignment, top):
        if first[a] < 0:
            first[a] = t
        elif first[a] != t:
            tags[a] = False
    return tags


def entropy_balance(p_cal) -> float:
    """Negative entropy of the batch-mean prediction, scaled by 1/C."""
    p = as_matrix(p_cal, "p_cal")
    mean = p.mean(axis=0)
    return float(np.sum(mean * np.log(mean + LOG_GUARD)) / p.shape[1])


def calibration_loss(logits, part: MiniClusterPartition, assignment, w_en: float = 1.0):
    """Cross-entropy against mini-cluster targets plus ``w_en`` times the balance term.

    ``assignment`` gives the mini-cluster of each row of ``logits`` (the rows
    may be any subset of the batch the partition was built on). Returns
    ``(loss, dlogits)``; the gradient is with respect to the calibration
    logits only.
    """
    logits = as_matrix(logits, "logits")
    b, c = logits.shape
    if b < 1:
        raise InvalidInputError("calibration_loss: empty batch")
    if w_en < 0:
        raise InvalidInputError("calibration_loss: w_en must be >= 0")
    p = softmax_rows(logits)
    q = part.targets[np.asarray(assignment, dtype=np.int64)]

    guarded = p + LOG_GUARD
    l_cal = float(-np.sum(q * np.log(guarded)) / b)
    dp = -q / guarded / b

    mean = p.mean(axis=0)
    l_en = float(np.sum(mean * np.log(mean + LOG_GUARD)) / c)
    dmean = (np.log(mean + LOG_GUARD) + mean / (mean + LOG_GUARD)) / c
    dp += w_en * dmean[None, :] / b

    # softmax Jacobian-vector product, row by row
    dlogits = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    return l_cal + w_en * l_en, dlogits
