"""Joint training of the clustering and calibration heads.

Per batch, in order:

1. calibration-head predictions on weakly augmented inputs (no gradient)
2. pseudo-label selection from those predictions
3. embeddings and clustering-head predictions on clean inputs (no gradient)
4. K-means on the embeddings -> mini-clusters
5. mini-cluster targets, fixed for the rest of the batch
6. per sub-batch: a clustering update (encoder + clustering head, strong
   augmentation, pseudo-labelled rows only) followed by a calibration update
   (calibration head only, clean inputs, every row)
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .calibration import calibration_loss, partition_targets
from .errors import InvalidInputError
from .heads import (
    AdamState, EncoderParams, HeadParams, adam_step, encoder_backward, encoder_forward,
    head_backward, head_forward, random_head,
)
from .kmeans import kmeans
from .metrics import calibration_report
from .numerics import Rng, as_matrix, softmax_rows
from .protoinit import align_outputs, prototype_init
from .selection import class_budgets, clu_loss, select_fixed_threshold, select_pseudo

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1000
    sub_batch: int = 256
    mini_clusters: int = 100
    n_classes: int = 10
    hidden: int = 512
    encoder: str = "adapter"
    lr_encoder: float = 5e-5
    lr_head: float = 1e-4
    w_en: float = 1.0
    weak_noise: float = 0.05
    strong_noise: float = 0.2
    strong_dropout: float = 0.1
    seed: int = 0
    ece_bins: int = 15
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-6
    init_restarts: int = 10
    normalize_inputs: bool = True
    orthogonalize: bool = True
    match_bn: bool = False
    # ablations
    no_init: bool = False
    fixed_threshold: float | None = None
    single_head: bool = False
    stop_gradient: bool = True

    def validate(self, n: int | None = None) -> None:
        if self.n_classes < 2:
            raise InvalidInputError("n_classes must be >= 2")
        if not 1 <= self.sub_batch <= self.batch_size:
            raise InvalidInputError("need 1 <= sub_batch <= batch_size")
        if self.sub_batch < 2:
            raise InvalidInputError("sub_batch must be >= 2 for batch-norm statistics")
        if not 1 <= self.mini_clusters <= self.batch_size:
            raise InvalidInputError("need 1 <= mini_clusters <= batch_size")
        if self.batch_size < self.n_classes:
            raise InvalidInputError("batch_size must be >= n_classes")
        if n is not None and self.batch_size > n:
            raise InvalidInputError(f"batch_size {self.batch_size} exceeds sample count {n}")
        rates = ("lr_encoder", "lr_head", "w_en", "weak_noise", "strong_noise", "strong_dropout")
        for name in rates:
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if self.strong_dropout >= 1:
            raise InvalidInputError("strong_dropout must be < 1")
        if self.encoder not in ("identity", "adapter"):
            raise InvalidInputError(f"unknown encoder mode {self.encoder!r}")
        if self.init_restarts < 1:
            raise InvalidInputError("init_restarts must be >= 1")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class TrainState:
    encoder: EncoderParams
    clu: HeadParams
    cal: HeadParams
    enc_opt: AdamState
    clu_opt: AdamState
    cal_opt: AdamState
    rng: Rng
    epoch: int = 0
    config_digest: bytes = b"\0" * 32
    predict_head: str = "cal"


def augment(x, kind: str, rng: Rng, weak_noise: float = 0.05, strong_noise: float = 0.2,
            dropout: float = 0.1) -> np.ndarray:
    """Feature-space stand-ins for image augmentations.

    ``weak`` adds isotropic Gaussian noise; ``strong`` adds larger noise and
    then drops coordinates with probability ``dropout`` (inverted scaling).
    Random draws are made even at zero strength so the generator advances
    identically whatever the settings.
    """
    x = as_matrix(x, "x")
    if kind == "none":
        return x
    if kind == "weak":
        return x + rng.normal(x.shape, weak_noise)
    if kind == "strong":
        noisy = x + rng.normal(x.shape, strong_noise)
        keep = rng.uniform(x.shape) >= dropout
        return np.where(keep, noisy / (1.0 - dropout), 0.0)
    raise InvalidInputError(f"unknown augmentation {kind!r}")


def initialize(features, config: TrainConfig, return_inits: bool = False):
    """Fresh state: identity encoder, both heads initialised, Adam moments zero.

    With ``return_inits`` the per-head ``ProtoInit`` records (clustering head
    first; ``None`` under ``no_init``) are returned alongside the state.
    """
    x = as_matrix(features, "features")
    config.validate(x.shape[0])
    rng = Rng(config.seed)
    d = x.shape[1]
    if config.encoder == "adapter":
        encoder = EncoderParams.identity_adapter(d, config.normalize_inputs)
    else:
        encoder = EncoderParams(normalize=config.normalize_inputs)
    z = encoder_forward(encoder, x)
    heads, inits = [], []
    for _ in range(2):
        if config.no_init:
            heads.append(random_head(d, config.hidden, config.n_classes, rng))
            inits.append(None)
        else:
            init = prototype_init(z, config.hidden, config.n_classes, rng, config.orthogonalize,
                                  max_iters=config.kmeans_iters, tol=config.kmeans_tol,
                                  restarts=config.init_restarts, match_bn=config.match_bn)
            heads.append(init.head)
            inits.append(init)
    clu, cal = heads
    # pseudo-labels flow cal -> clu and targets clu -> cal, so both heads must
    # number their clusters the same way
    align_outputs(clu, cal, z)
    state = TrainState(
        encoder=encoder, clu=clu, cal=cal,
        enc_opt=AdamState.for_params(encoder.trainable(), config.lr_encoder),
        clu_opt=AdamState.for_params(clu.trainable(), config.lr_head),
        cal_opt=AdamState.for_params(cal.trainable(), config.lr_head),
        rng=rng, epoch=0, config_digest=config.digest(),
        predict_head="clu" if config.single_head else "cal",
    )
    return (state, inits) if return_inits else state


def head_probs(state: TrainState, x, head: str = "cal") -> np.ndarray:
    z = encoder_forward(state.encoder, x)
    p = state.cal if head == "cal" else state.clu
    return softmax_rows(head_forward(p, z, "eval")[0])


def predict(state: TrainState, x) -> np.ndarray:
    """Eval-mode probabilities of the prediction head (the calibration head unless single-head)."""
    x = as_matrix(x, "x")
    d = state.clu.w1.shape[1]
    if x.shape[1] != d:
        raise InvalidInputError(f"predict: features have {x.shape[1]} columns, model expects {d}")
    return head_probs(state, x, state.predict_head)


@dataclass
class StepInfo:
    selected: int
    clu_updates: int
    cal_updates: int
    clu_loss: float
    cal_loss: float


def _apply_encoder_grad(state: TrainState, x_in, dz) -> None:
    if state.encoder.mode == "identity":
        return
    adam_step(state.encoder.trainable(), encoder_backward(state.encoder, x_in, dz), state.enc_opt)


def train_step(state: TrainState, batch_idx, features, config: TrainConfig,
               confidence_source: Callable[[np.ndarray], np.ndarray] | None = None,
               update_calibration: bool = True,
               monitor: Callable[[str, TrainState], None] | None = None) -> StepInfo:
    """One batch of joint training; mutates ``state`` in place.

    ``confidence_source(batch_idx)`` replaces the weak-view confidences used
    for selection. ``monitor(kind, state)`` is called after each clustering
    (``"clu"``) and calibration (``"cal"``) update.
    """
    x = as_matrix(features, "features")[np.asarray(batch_idx)]
    b = x.shape[0]
    if config.mini_clusters > b:
        raise InvalidInputError(f"mini_clusters {config.mini_clusters} exceeds batch size {b}")
    rng = state.rng

    # 1-2: selection from weak-view confidences
    x_weak = augment(x, "weak", rng, config.weak_noise)
    p_weak = head_probs(state, x_weak, "clu" if config.single_head else "cal")
    if confidence_source is not None:
        p_weak = as_matrix(confidence_source(np.asarray(batch_idx)))
    if config.fixed_threshold is not None:
        pseudo = select_fixed_threshold(p_weak, config.fixed_threshold)
    else:
        pseudo = select_pseudo(p_weak, class_budgets(p_weak))
    labels = pseudo.label_vector(b)

    # 3-5: mini-cluster targets from the clean view
    z = encoder_forward(state.encoder, x)
    p_clu = softmax_rows(head_forward(state.clu, z, "eval")[0])
    km = kmeans(z, config.mini_clusters, rng, config.kmeans_iters, config.kmeans_tol)
    part = partition_targets(p_clu, km.assignment, config.mini_clusters)

    # 6: sub-batches
    order = rng.permutation(b)
    chunks = np.array_split(order, max(b // config.sub_batch, 1))
    info = StepInfo(len(pseudo), 0, 0, 0.0, 0.0)
    for sub in chunks:
        x_strong = augment(x[sub], "strong", rng, strong_noise=config.strong_noise,
                           dropout=config.strong_dropout)
        if np.any(labels[sub] >= 0):
            z_s = encoder_forward(state.encoder, x_strong)
            logits, cache = head_forward(state.clu, z_s, "train")
            loss, dlogits = clu_loss(logits, labels[sub])
            grads = head_backward(state.clu, cache, dlogits)
            dz = grads.pop("input")
            _apply_encoder_grad(state, x_strong, dz)
            adam_step(state.clu.trainable(), grads, state.clu_opt)
            info.clu_updates += 1
            info.clu_loss += loss
            if monitor:
                monitor("clu", state)

        if update_calibration and not config.single_head:
            z_c = encoder_forward(state.encoder, x[sub])
            logits, cache = head_forward(state.cal, z_c, "train")
            loss, dlogits = calibration_loss(logits, part, km.assignment[sub], config.w_en)
            grads = head_backward(state.cal, cache, dlogits)
            dz = grads.pop("input")
            adam_step(state.cal.trainable(), grads, state.cal_opt)
            if not config.stop_gradient:
                _apply_encoder_grad(state, x[sub], dz)
            info.cal_updates += 1
            info.cal_loss += loss
            if monitor:
                monitor("cal", state)
    if info.clu_updates:
        info.clu_loss /= info.clu_updates
    if info.cal_updates:
        info.cal_loss /= info.cal_updates
    return info


def epoch_metrics(state: TrainState, features, labels, bins: int = 15) -> dict:
    out = {"epoch": state.epoch}
    for head in ("cal", "clu"):
        rep = calibration_report(head_probs(state, features, head), labels, bins)
        for k, v in rep.summary().items():
            out[f"{k}_{head}"] = v
    return out


def train(features, config: TrainConfig, labels=None, state: TrainState | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[TrainState, list[dict]]:
    """Run ``config.epochs`` epochs (on top of ``state`` if given).

    Each epoch shuffles the data and visits ``floor(N / B)`` batches and
    yields one history row (also passed to ``on_epoch``) with the epoch and
    mean selected count per batch. With ``labels`` the row also carries the
    metrics of both heads, computed from the same eval-mode predictions
    ``predict`` gives.
    """
    x = as_matrix(features, "features")
    n = x.shape[0]
    config.validate(n)
    if state is None:
        state = initialize(x, config)
    history = []
    n_batches = n // config.batch_size
    for _ in range(config.epochs):
        perm = state.rng.permutation(n)
        selected = 0
        for bi in range(n_batches):
            idx = perm[bi * config.batch_size:(bi + 1) * config.batch_size]
            selected += train_step(state, idx, x, config).selected
        state.epoch += 1
        row = {"epoch": state.epoch}
        if labels is not None:
            row = epoch_metrics(state, x, labels, config.ece_bins)
        row["selected"] = selected / max(n_batches, 1)
        history.append(row)
        if labels is not None:
            log.info("epoch %d acc_cal=%.4f ece_cal=%.4f ece_clu=%.4f selected=%.1f", state.epoch,
                     row["acc_cal"], row["ece_cal"], row["ece_clu"], row["selected"])
        else:
            log.info("epoch %d selected=%.1f", state.epoch, row["selected"])
        if on_epoch:
            on_epoch(row)
    return state, history
