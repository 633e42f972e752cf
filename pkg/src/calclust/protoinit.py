"""Prototype-based initialisation of a head.

The first layer's rows are K-means prototypes of the (L2-normalised) input
features, the second layer's rows are K-means prototypes of the resulting
hidden activations. With unit-norm features and prototypes, the largest
first-layer response of a sample is exactly its nearest prototype, so the
head starts out reproducing the feature-space clustering.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateInputError, InvalidInputError
from .heads import BN_EPS, HeadParams, head_forward, hidden_activations, neutral_head
from .kmeans import KMeansResult, assign_nearest, kmeans
from .metrics import hungarian_acc
from .numerics import Rng, as_matrix, l2_normalize_rows

log = logging.getLogger(__name__)


class OrthogonalizationSkipped(UserWarning):
    pass


def orthogonalize_rows(w) -> np.ndarray:
    """Modified Gram-Schmidt over the rows, each row keeping its original norm.

    When there are more rows than columns the rows cannot all be orthogonal;
    the input is returned unchanged and an ``OrthogonalizationSkipped``
    warning is emitted.
    """
    w = as_matrix(w, "w")
    rows, cols = w.shape
    if rows > cols:
        warnings.warn(
            f"orthogonalize_rows: {rows} rows > {cols} columns, skipped",
            OrthogonalizationSkipped, stacklevel=2,
        )
        return w.copy()
    norms = np.linalg.norm(w, axis=1)
    basis = np.zeros_like(w)
    out = np.zeros_like(w)
    for i in range(rows):
        v = w[i].copy()
        for j in range(i):
            v -= (v @ basis[j]) * basis[j]
        nv = np.linalg.norm(v)
        if nv <= 1e-12 * max(norms[i], 1.0):
            # linearly dependent row; leave a dead unit rather than noise
            continue
        basis[i] = v / nv
        out[i] = basis[i] * norms[i]
    return out


@dataclass
class ProtoInit:
    head: HeadParams
    w1_prototypes: np.ndarray  # unit rows, before orthogonalisation
    w2_prototypes: np.ndarray
    feature_kmeans: KMeansResult  # K-means over the normalised features (H clusters)


def _check_prototypes(centers: np.ndarray, what: str) -> None:
    if np.any(np.linalg.norm(centers, axis=1) == 0.0):
        raise DegenerateInputError(f"{what}: zero prototype")
    if np.unique(centers, axis=0).shape[0] < centers.shape[0]:
        raise DegenerateInputError(f"{what}: duplicate prototypes")


def match_batchnorm(head: HeadParams, z) -> None:
    """Make BN a pass-through for ``z`` in both modes.

    Running statistics are set to the pre-activation moments of ``z`` and
    the affine parameters undo the standardisation, so eval mode is an exact
    identity and train mode on a batch drawn from ``z`` is close to one.
    """
    a = as_matrix(z, "z") @ head.w1.T + head.b1
    mean, var = a.mean(axis=0), a.var(axis=0)
    head.bn_running_mean = mean
    head.bn_running_var = np.maximum(var, BN_EPS)
    head.bn_gamma = np.sqrt(head.bn_running_var + BN_EPS)
    head.bn_beta = mean.copy()


def prototype_init(z, h_units: int, c: int, rng: Rng, orthogonalize: bool = True,
                   max_iters: int = 100, tol: float = 1e-6, restarts: int = 1,
                   match_bn: bool = False) -> ProtoInit:
    """Build a head from K-means prototypes of ``z`` and of its hidden activations.

    ``restarts`` applies to the second-layer K-means only (C clusters, cheap);
    the H first-layer prototypes are a fine partition where local optima
    matter little. ``match_bn`` sets batch-norm to a data-matched identity
    (see ``match_batchnorm``) instead of the neutral (0, 1) statistics.
    """
    z = as_matrix(z, "z")
    n = z.shape[0]
    if h_units > n or c > n:
        raise InvalidInputError(f"prototype_init: need H <= N and C <= N (H={h_units}, C={c}, N={n})")
    if n == 0 or np.all(z == z[0]):
        raise DegenerateInputError("prototype_init: all feature rows are identical")

    zn, _ = l2_normalize_rows(z)
    km1 = kmeans(zn, h_units, rng, max_iters, tol)
    _check_prototypes(km1.centers, "first-layer prototypes")
    w1, _ = l2_normalize_rows(km1.centers)
    _check_prototypes(w1, "first-layer prototypes")

    head = neutral_head(w1, np.zeros((c, h_units)))
    if match_bn:
        match_batchnorm(head, z)
    h = hidden_activations(head, z)
    km2 = kmeans(h, c, rng, max_iters, tol, n_init=restarts)
    w2 = km2.centers.copy()
    head.w2 = w2.copy()

    if orthogonalize:
        # w1 changes here, so BN is re-matched to the new pre-activations
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", OrthogonalizationSkipped)
            head.w1 = orthogonalize_rows(head.w1)
            head.w2 = orthogonalize_rows(head.w2)
        for wmsg in caught:
            log.info("%s", wmsg.message)
        if match_bn:
            match_batchnorm(head, z)
    return ProtoInit(head, w1, w2, km1)


def init_head(z, h_units: int, c: int, rng: Rng, orthogonalize: bool = True, **kw) -> HeadParams:
    return prototype_init(z, h_units, c, rng, orthogonalize, **kw).head


def align_outputs(reference: HeadParams, other: HeadParams, z) -> np.ndarray:
    """Permute ``other``'s output units (in place) to agree with ``reference`` on ``z``.

    Independently initialised heads number their clusters arbitrarily; the
    permutation maximising argmax agreement is found by Hungarian matching.
    Returns ``perm`` with new row ``i`` = old row ``perm[i]``.
    """
    c = reference.w2.shape[0]
    if other.w2.shape[0] != c:
        raise InvalidInputError("align_outputs: heads have different class counts")
    a = np.argmax(head_forward(reference, z, "eval")[0], axis=1)
    b = np.argmax(head_forward(other, z, "eval")[0], axis=1)
    counts = np.zeros((c, c))
    np.add.at(counts, (a, b), 1.0)
    rows, cols = linear_sum_assignment(-counts)
    perm = cols[np.argsort(rows)]
    other.w2 = other.w2[perm].copy()
    other.b2 = other.b2[perm].copy()
    return perm


@dataclass
class InitReport:
    kmeans_acc_features: float
    head_acc_post_init: float
    alignment_rate: float

    def as_dict(self) -> dict:
        return dict(vars(self))


def alignment_rate(prototypes: np.ndarray, z, assignment=None) -> float:
    """Share of samples whose largest ``prototypes @ z`` response is their assigned prototype.

    The default assignment is the nearest prototype to the L2-normalised
    sample. The raw K-means assignment can differ on a few boundary samples,
    since K-means measures distance to the unnormalised centers.
    """
    z = as_matrix(z, "z")
    if assignment is None:
        assignment = assign_nearest(l2_normalize_rows(z)[0], prototypes)
    top = np.argmax(z @ prototypes.T, axis=1)
    return float(np.mean(top == np.asarray(assignment)))


def init_report(init: ProtoInit, z, labels, c: int, rng: Rng, restarts: int = 10) -> InitReport:
    z = as_matrix(z, "z")
    labels = np.asarray(labels)
    km_acc, _ = hungarian_acc(kmeans(z, c, rng, n_init=restarts).assignment, labels)
    logits, _ = head_forward(init.head, z, "eval")
    head_acc, _ = hungarian_acc(np.argmax(logits, axis=1), labels)
    align = alignment_rate(init.w1_prototypes, z)
    return InitReport(km_acc, head_acc, align)
