"""Clustering, calibration and failure-rejection metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .errors import InvalidInputError, UndefinedMetricError


def _labels(a, name) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D")
    return a.astype(np.int64)


def _paired(pred, truth, min_len: int = 1):
    pred, truth = _labels(pred, "pred"), _labels(truth, "truth")
    if pred.shape != truth.shape:
        raise InvalidInputError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size < min_len:
        raise InvalidInputError(f"need at least {min_len} samples")
    return pred, truth


def contingency(pred, truth) -> np.ndarray:
    """Counts table, rows = predicted clusters, columns = true classes (compacted)."""
    _, p = np.unique(pred, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return table


def hungarian_acc(pred, truth) -> tuple[float, dict[int, int]]:
    """Best one-to-one cluster -> class matching accuracy.

    Returns ``(acc, mapping)``; clusters left unmatched when there are more
    clusters than classes are absent from ``mapping`` and count as errors.
    """
    pred, truth = _paired(pred, truth)
    clusters = np.unique(pred)
    classes = np.unique(truth)
    table = contingency(pred, truth)
    k = max(table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    mapping = {}
    hits = 0
    for r, c in zip(rows, cols):
        if r < len(clusters) and c < len(classes):
            mapping[int(clusters[r])] = int(classes[c])
            hits += int(padded[r, c])
    return hits / pred.size, mapping


def remap(pred, mapping: dict[int, int], fill: int = -1) -> np.ndarray:
    return np.array([mapping.get(int(p), fill) for p in pred], dtype=np.int64)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Returns 0 when either labelling has zero entropy.
    """
    pred, truth = _paired(pred, truth)
    n = pred.size
    table = contingency(pred, truth)
    a, b = table.sum(axis=1), table.sum(axis=0)
    ha, hb = _entropy(a, n), _entropy(b, n)
    if ha == 0.0 or hb == 0.0:
        return 0.0
    nz = table > 0
    outer = np.outer(a, b)
    mi = float(np.sum(table[nz] / n * np.log(table[nz] * n / outer[nz])))
    return max(mi / ((ha + hb) / 2.0), 0.0)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def ari(pred, truth) -> float:
    """Adjusted Rand index. Identical trivial partitions score 1."""
    pred, truth = _paired(pred, truth, min_len=2)
    table = contingency(pred, truth)
    index = float(_comb2(table).sum())
    sa = float(_comb2(table.sum(axis=1)).sum())
    sb = float(_comb2(table.sum(axis=0)).sum())
    total = float(_comb2(pred.size))
    expected = sa * sb / total
    max_index = (sa + sb) / 2.0
    if max_index == expected:
        return 1.0
    return (index - expected) / (max_index - expected)


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    accuracy: float
    confidence: float


def bin_edges(bins: int) -> np.ndarray:
    return np.arange(bins + 1, dtype=np.float64) / bins


def ece(confidences, correct, bins: int = 15) -> tuple[float, list[ReliabilityBin]]:
    """Equal-width expected calibration error.

    Bins are ``[i/l, (i+1)/l)`` except the last, which also takes 1.0. Empty
    bins report zero accuracy and confidence and contribute nothing.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    ok = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != ok.shape:
        raise InvalidInputError("ece: confidences and correct flags differ in length")
    if bins < 1:
        raise InvalidInputError("ece: bins must be >= 1")
    if np.any(~np.isfinite(conf)) or np.any(conf < 0.0) or np.any(conf > 1.0):
        raise InvalidInputError("ece: confidences must lie in [0, 1]")
    edges = bin_edges(bins)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, bins - 1)
    n = conf.size
    table = []
    total = 0.0
    for i in range(bins):
        members = idx == i
        cnt = int(members.sum())
        if cnt:
            acc = float(ok[members].mean())
            avg = float(conf[members].mean())
            total += cnt / n * abs(acc - avg)
        else:
            acc = avg = 0.0
        table.append(ReliabilityBin(float(edges[i]), float(edges[i + 1]), cnt, acc, avg))
    return total, table


def _two_class(scores, flags, what):
    s = np.asarray(scores, dtype=np.float64).ravel()
    f = np.asarray(flags, dtype=bool).ravel()
    if s.shape != f.shape:
        raise InvalidInputError(f"{what}: scores and flags differ in length")
    if f.all() or not f.any():
        raise UndefinedMetricError(f"{what}: needs at least one positive and one negative")
    return s, f


def auroc(scores, positives) -> float:
    """P(random positive outscores random negative), ties counted 1/2."""
    s, f = _two_class(scores, positives, "auroc")
    ranks = rankdata(s)  # average ranks for ties
    n_pos = int(f.sum())
    n_neg = f.size - n_pos
    return float((ranks[f].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def risk_coverage(scores, correct) -> np.ndarray:
    """Selective risk at coverage i/N for i = 1..N (descending score, ties by index)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    ok = np.asarray(correct, dtype=bool).ravel()
    if s.shape != ok.shape:
        raise InvalidInputError("risk_coverage: scores and flags differ in length")
    if s.size == 0:
        raise InvalidInputError("risk_coverage: empty input")
    order = np.argsort(-s, kind="stable")
    errors = np.cumsum(~ok[order])
    return errors / np.arange(1, s.size + 1)


def aurc(scores, correct) -> float:
    return float(np.mean(risk_coverage(scores, correct)))


def fpr_at_95_tpr(scores, correct, target: float = 0.95) -> float:
    """FPR at the highest threshold whose TPR (score >= threshold) reaches ``target``."""
    s, ok = _two_class(scores, correct, "fpr_at_95_tpr")
    n_pos = int(ok.sum())
    n_neg = ok.size - n_pos
    thresholds = np.unique(s)[::-1]
    for t in thresholds:
        admitted = s >= t
        if int((admitted & ok).sum()) / n_pos >= target:
            return int((admitted & ~ok).sum()) / n_neg
    return 1.0  # unreachable: the lowest threshold admits everything


@dataclass
class CalibrationReport:
    bins: list[ReliabilityBin]
    ece: float
    acc: float
    nmi: float
    ari: float
    auroc: float
    aurc: float
    fpr95: float
    coverage: list[tuple[float, float]] = field(default_factory=list)
    extra: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        out = {k: getattr(self, k) for k in ("acc", "nmi", "ari", "ece", "auroc", "aurc", "fpr95")}
        out.update(self.extra)
        return out


def _or_nan(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedMetricError:
        return math.nan


def calibration_report(probs, truth, bins: int = 15, coverage_points: int = 20) -> CalibrationReport:
    """Score a probability matrix against ground-truth labels.

    Predictions are the row argmax, confidence is the max softmax probability,
    and correctness is judged after Hungarian matching of clusters to classes.
    Failure-rejection metrics are NaN when every (or no) prediction is correct.
    """
    probs = np.asarray(probs, dtype=np.float64)
    truth = _labels(truth, "truth")
    pred = np.argmax(probs, axis=1)
    conf = np.clip(probs.max(axis=1), 0.0, 1.0)
    acc, mapping = hungarian_acc(pred, truth)
    correct = remap(pred, mapping) == truth
    e, table = ece(conf, correct, bins)
    risks = risk_coverage(conf, correct)
    n = risks.size
    cov = []
    for j in range(1, coverage_points + 1):
        k = max(1, int(round(j * n / coverage_points)))
        cov.append((k / n, float(risks[k - 1])))
    return CalibrationReport(
        bins=table, ece=e, acc=acc,
        nmi=nmi(pred, truth), ari=ari(pred, truth) if n >= 2 else math.nan,
        auroc=_or_nan(auroc, conf, correct), aurc=aurc(conf, correct),
        fpr95=_or_nan(fpr_at_95_tpr, conf, correct), coverage=cov,
    )


REPORT_HEADER = ["kind", "name", "lower", "upper", "count", "accuracy", "mean_confidence", "value"]


def write_report_csv(path, report: CalibrationReport) -> None:
    """One ``bin`` row per reliability bin, ``coverage`` rows for the risk curve, then one ``metric`` row each."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for i, b in enumerate(report.bins):
            w.writerow(["bin", i, repr(b.lower), repr(b.upper), b.count, repr(b.accuracy), repr(b.confidence), ""])
        for i, (c, r) in enumerate(report.coverage):
            w.writerow(["coverage", i, "", repr(c), "", "", "", repr(r)])
        for name, value in report.summary().items():
            w.writerow(["metric", name, "", "", "", "", "", repr(float(value))])


def read_report_csv(path) -> CalibrationReport:
    bins, cov, metrics = [], [], {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise InvalidInputError(f"{path}: not a calibration report (header {reader.fieldnames})")
        for row in reader:
            kind = row["kind"]
            if kind == "bin":
                bins.append(ReliabilityBin(float(row["lower"]), float(row["upper"]), int(row["count"]),
                                           float(row["accuracy"]), float(row["mean_confidence"])))
            elif kind == "coverage":
                cov.append((float(row["upper"]), float(row["value"])))
            elif kind == "metric":
                metrics[row["name"]] = float(row["value"])
            else:
                raise InvalidInputError(f"{path}: unknown row kind {kind!r}")
    core = ("acc", "nmi", "ari", "ece", "auroc", "aurc", "fpr95")
    missing = [k for k in core if k not in metrics]
    if missing:
        raise InvalidInputError(f"{path}: missing metrics {missing}")
    extra = {k: v for k, v in metrics.items() if k not in core}
    return CalibrationReport(bins=bins, coverage=cov, extra=extra, **{k: metrics[k] for k in core})
