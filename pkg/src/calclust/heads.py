"""Linear -> BatchNorm -> ReLU -> Linear head, with hand-derived gradients.

Also holds the optional affine encoder adapter that sits between the input
features and both heads, and a plain Adam optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .numerics import Rng, as_matrix, l2_normalize_rows

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

HEAD_PARAM_NAMES = ("w1", "b1", "bn_gamma", "bn_beta", "w2", "b2")


@dataclass
class HeadParams:
    w1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    w2: np.ndarray  # (C, H)
    b2: np.ndarray  # (C,)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(D, H, C)."""
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in HEAD_PARAM_NAMES}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in vars(self).items()})

    def validate(self) -> None:
        d, h, c = self.dims
        shapes = {
            "b1": (h,), "bn_gamma": (h,), "bn_beta": (h,),
            "bn_running_mean": (h,), "bn_running_var": (h,),
            "w2": (c, h), "b2": (c,),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise InvalidInputError(f"HeadParams.{name} has shape {getattr(self, name).shape}, expected {shape}")
        if np.any(self.bn_running_var <= 0):
            raise InvalidInputError("HeadParams.bn_running_var must be positive")


def neutral_head(w1: np.ndarray, w2: np.ndarray) -> HeadParams:
    """Head with zero biases, identity BN affine and running stats (0, 1)."""
    h, c = w1.shape[0], w2.shape[0]
    return HeadParams(
        w1=np.array(w1, dtype=np.float64), b1=np.zeros(h),
        bn_gamma=np.ones(h), bn_beta=np.zeros(h),
        bn_running_mean=np.zeros(h), bn_running_var=np.ones(h),
        w2=np.array(w2, dtype=np.float64), b2=np.zeros(c),
    )


def random_head(d: int, h: int, c: int, rng: Rng) -> HeadParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    b_1 = 1.0 / np.sqrt(d)
    b_2 = 1.0 / np.sqrt(h)
    p = neutral_head((rng.uniform((h, d)) * 2 - 1) * b_1, (rng.uniform((c, h)) * 2 - 1) * b_2)
    p.b1 = (rng.uniform(h) * 2 - 1) * b_1
    p.b2 = (rng.uniform(c) * 2 - 1) * b_2
    return p


@dataclass
class ForwardCache:
    z: np.ndarray
    pre_bn: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    inv_std: np.ndarray
    xhat: np.ndarray
    post_bn: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    train: bool


def head_forward(p: HeadParams, z, mode: str = "eval", update_stats: bool = True):
    """Return ``(logits, cache)``.

    In ``train`` mode BN uses the batch statistics (biased variance) and, if
    ``update_stats``, folds them into the running averages. ``eval`` mode uses
    the running averages and never mutates ``p``.
    """
    z = as_matrix(z, "z")
    if z.shape[1] != p.w1.shape[1]:
        raise InvalidInputError(f"head_forward: input has {z.shape[1]} columns, head expects {p.w1.shape[1]}")
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"head_forward: unknown mode {mode!r}")
    train = mode == "train"
    n = z.shape[0]
    if train and n < 2:
        raise InvalidInputError("head_forward: train mode needs a batch of at least 2")

    a = z @ p.w1.T + p.b1
    if train:
        mean = a.mean(axis=0)
        var = a.var(axis=0)
        if update_stats:
            p.bn_running_mean *= 1.0 - BN_MOMENTUM
            p.bn_running_mean += BN_MOMENTUM * mean
            p.bn_running_var *= 1.0 - BN_MOMENTUM
            p.bn_running_var += BN_MOMENTUM * var * (n / (n - 1))
    else:
        mean = p.bn_running_mean.copy()
        var = p.bn_running_var.copy()
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (a - mean) * inv_std
    y = p.bn_gamma * xhat + p.bn_beta
    hidden = np.maximum(y, 0.0)
    logits = hidden @ p.w2.T + p.b2
    return logits, ForwardCache(z, a, mean, var, inv_std, xhat, y, hidden, logits, train)


def hidden_activations(p: HeadParams, z) -> np.ndarray:
    """Eval-mode post-ReLU activations."""
    return head_forward(p, z, "eval")[1].hidden


def head_backward(p: HeadParams, cache: ForwardCache, dlogits) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable field and the input.

    The returned dict has one entry per name in ``HEAD_PARAM_NAMES`` plus
    ``"input"`` (the gradient w.r.t. ``z``). In train mode the BN backward
    runs through the batch mean and variance.
    """
    dlogits = as_matrix(dlogits, "dlogits")
    if dlogits.shape != cache.logits.shape:
        raise InvalidInputError(f"head_backward: dlogits shape {dlogits.shape} != logits shape {cache.logits.shape}")
    n = dlogits.shape[0]
    g = {}
    g["w2"] = dlogits.T @ cache.hidden
    g["b2"] = dlogits.sum(axis=0)
    dh = dlogits @ p.w2
    dy = dh * (cache.post_bn > 0.0)
    g["bn_gamma"] = (dy * cache.xhat).sum(axis=0)
    g["bn_beta"] = dy.sum(axis=0)
    dxhat = dy * p.bn_gamma
    if cache.train:
        da = (cache.inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0)
        )
    else:
        da = dxhat * cache.inv_std
    g["w1"] = da.T @ cache.z
    g["b1"] = da.sum(axis=0)
    g["input"] = da @ p.w1
    return g


# --- encoder ---------------------------------------------------------------


@dataclass
class EncoderParams:
    """Feature stage in front of both heads.

    Rows are optionally L2-normalised first (contrastive embeddings live on
    the unit sphere), then passed through either nothing (``identity``) or a
    trainable affine map (``adapter``).
    """

    mode: str = "identity"  # "identity" | "adapter"
    weight: np.ndarray | None = None  # (D, D)
    bias: np.ndarray | None = None  # (D,)
    normalize: bool = False

    def __post_init__(self):
        if self.mode not in ("identity", "adapter"):
            raise InvalidInputError(f"unknown encoder mode {self.mode!r}")
        if self.mode == "identity" and (self.weight is not None or self.bias is not None):
            raise InvalidInputError("identity encoder carries no weights")
        if self.mode == "adapter" and (self.weight is None or self.bias is None):
            raise InvalidInputError("adapter encoder needs weight and bias")

    @classmethod
    def identity_adapter(cls, d: int, normalize: bool = False) -> "EncoderParams":
        return cls("adapter", np.eye(d), np.zeros(d), normalize)

    def trainable(self) -> dict[str, np.ndarray]:
        if self.mode == "identity":
            return {}
        return {"weight": self.weight, "bias": self.bias}

    def copy(self) -> "EncoderParams":
        if self.mode == "identity":
            return EncoderParams(normalize=self.normalize)
        return EncoderParams("adapter", self.weight.copy(), self.bias.copy(), self.normalize)


def _encoder_input(e: EncoderParams, x) -> np.ndarray:
    x = as_matrix(x, "x")
    return l2_normalize_rows(x)[0] if e.normalize else x


def encoder_forward(e: EncoderParams, x) -> np.ndarray:
    x = _encoder_input(e, x)
    if e.mode == "identity":
        return x
    if x.shape[1] != e.weight.shape[1]:
        raise InvalidInputError(f"encoder_forward: input has {x.shape[1]} columns, adapter expects {e.weight.shape[1]}")
    return x @ e.weight.T + e.bias


def encoder_backward(e: EncoderParams, x, dout) -> dict[str, np.ndarray]:
    if e.mode == "identity":
        return {}
    x = _encoder_input(e, x)
    return {"weight": dout.T @ x, "bias": dout.sum(axis=0)}


# --- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            **kw,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            self.lr, self.beta1, self.beta2, self.eps, self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], s: AdamState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for k, p in params.items():
        if p.shape != grads[k].shape or s.m[k].shape != p.shape:
            raise InvalidInputError(f"adam_step: shape mismatch for {k!r}")
    s.step += 1
    c1 = 1.0 - s.beta1 ** s.step
    c2 = 1.0 - s.beta2 ** s.step
    for k, p in params.items():
        g = grads[k]
        m, v = s.m[k], s.v[k]
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * g * g
        p -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
