"""Binary feature/label/checkpoint files and the synthetic mixture generator.

File layouts (all integers little-endian):

``CDCF`` features
    magic, u32 version (=1), u64 N, u64 D, N*D float32 row-major
``CDCL`` labels
    magic, u64 N, N int32
``CDCK`` checkpoint
    magic, u32 version (=1), 32-byte config digest, then a stream of
    64-bit integers and float64 arrays (see ``save_checkpoint``)
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .heads import HEAD_PARAM_NAMES, AdamState, EncoderParams, HeadParams
from .numerics import Rng, as_matrix

FEATURE_MAGIC = b"CDCF"
LABEL_MAGIC = b"CDCL"
CHECKPOINT_MAGIC = b"CDCK"
FEATURE_VERSION = 1
CHECKPOINT_VERSION = 1


class _Reader:
    """Sequential reader that reports the byte offset of any short read."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.what}: truncated while reading {field}: expected {n} bytes, "
                f"{len(self.data) - self.pos} available",
                self.pos,
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))[0]

    def magic(self, expected: bytes) -> None:
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}", 0)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} unexpected trailing bytes", self.pos)


# --- features / labels -------------------------------------------------------


def write_features(path, m) -> None:
    x = as_matrix(m, "features")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("write_features: matrix contains non-finite values")
    n, d = x.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQQ", FEATURE_VERSION, n, d))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), f"feature file {path}")
    r.magic(FEATURE_MAGIC)
    version = r.unpack("<I", "version")
    if version != FEATURE_VERSION:
        raise FormatError(f"feature file {path}: unsupported version {version}", 4)
    n = r.unpack("<Q", "row count")
    d = r.unpack("<Q", "column count")
    payload = r.take(n * d * 4, f"{n}x{d} float32 payload")
    r.finish()
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, d)


def write_labels(path, labels) -> None:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise InvalidInputError("write_labels: labels must be 1-D")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<Q", y.size))
        fh.write(y.astype("<i4").tobytes())


def read_labels(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), f"label file {path}")
    r.magic(LABEL_MAGIC)
    n = r.unpack("<Q", "label count")
    payload = r.take(n * 4, f"{n} int32 labels")
    r.finish()
    return np.frombuffer(payload, dtype="<i4").astype(np.int64)


def check_companion(features: np.ndarray, labels: np.ndarray) -> None:
    if labels.shape[0] != features.shape[0]:
        raise InvalidInputError(
            f"label count {labels.shape[0]} does not match feature row count {features.shape[0]}"
        )


def read_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Features from a CSV with header ``d0,...,dD-1`` and an optional ``label`` column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    has_label = bool(header) and header[-1] == "label"
    dims = header[:-1] if has_label else header
    if dims != [f"d{i}" for i in range(len(dims))]:
        raise FormatError(f"{path}: header must be d0,...,dD-1[,label], got {','.join(header)}")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data.size == 0:
        data = data.reshape(0, len(header))
    if data.shape[1] != len(header):
        raise FormatError(f"{path}: rows have {data.shape[1]} fields, header has {len(header)}")
    if has_label:
        return data[:, :-1], data[:, -1].astype(np.int64)
    return data, None


# --- synthetic mixture -------------------------------------------------------


@dataclass
class MixtureSpec:
    n: int
    d: int
    c: int
    separation: float
    seed: int = 0

    def validate(self) -> None:
        if not self.n >= self.c >= 2:
            raise InvalidInputError("MixtureSpec needs n >= c >= 2")
        if self.separation < 0:
            raise InvalidInputError("MixtureSpec separation must be >= 0")
        if self.d < 1:
            raise InvalidInputError("MixtureSpec d must be >= 1")


def mixture_centers(spec: MixtureSpec, rng: Rng) -> np.ndarray:
    g = rng.normal((spec.d, spec.c))
    if spec.d >= spec.c:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))  # fixed sign convention
        directions = q.T
    else:
        # too few dimensions for orthogonal centers; distances are approximate
        directions = (g / np.linalg.norm(g, axis=0)).T
    return directions * (spec.separation / np.sqrt(2.0))


def gen_mixture(spec: MixtureSpec, return_centers: bool = False):
    """Balanced isotropic unit-variance Gaussian mixture.

    Centers sit on mutually orthogonal directions at pairwise distance
    ``separation`` (exact when ``d >= c``).
    """
    spec.validate()
    rng = Rng(spec.seed)
    centers = mixture_centers(spec, rng)
    labels = np.arange(spec.n) % spec.c
    labels = labels[rng.permutation(spec.n)]
    x = centers[labels] + rng.normal((spec.n, spec.d))
    if return_centers:
        return x, labels, centers
    return x, labels


def bayes_accuracy(spec: MixtureSpec, n_mc: int = 200_000, seed: int = 12345) -> float:
    """Monte-Carlo accuracy of the Bayes rule (nearest true center) on the mixture."""
    spec.validate()
    centers = mixture_centers(spec, Rng(spec.seed))
    rng = Rng(seed)
    labels = rng.integers(spec.c, size=n_mc)
    correct = 0
    for start in range(0, n_mc, 50_000):
        y = labels[start:start + 50_000]
        x = centers[y] + rng.normal((y.size, spec.d))
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        correct += int(np.sum(np.argmin(d2, axis=1) == y))
    return correct / n_mc


# --- checkpoints -------------------------------------------------------------

_ADAM_ORDER = {"enc_opt": ("weight", "bias"), "clu_opt": HEAD_PARAM_NAMES, "cal_opt": HEAD_PARAM_NAMES}
_HEAD_FIELDS = HEAD_PARAM_NAMES + ("bn_running_mean", "bn_running_var")


def _w_int(buf, v: int) -> None:
    buf.write(struct.pack("<q", int(v)))


def _w_uint(buf, v: int) -> None:
    buf.write(struct.pack("<Q", int(v)))


def _w_float(buf, v: float) -> None:
    buf.write(struct.pack("<d", float(v)))


def _w_array(buf, a: np.ndarray) -> None:
    _w_int(buf, a.ndim)
    for s in a.shape:
        _w_int(buf, s)
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _r_array(r: _Reader, field: str) -> np.ndarray:
    ndim = r.unpack("<q", f"{field} rank")
    if not 0 <= ndim <= 2:
        raise FormatError(f"{r.what}: {field} has invalid rank {ndim}", r.pos - 8)
    shape = tuple(r.unpack("<q", f"{field} shape") for _ in range(ndim))
    if any(s < 0 for s in shape):
        raise FormatError(f"{r.what}: {field} has negative shape {shape}", r.pos)
    count = int(np.prod(shape)) if shape else 1
    return np.frombuffer(r.take(8 * count, f"{field} data"), dtype="<f8").astype(np.float64).reshape(shape)


def checkpoint_bytes(state) -> bytes:
    """Serialise a ``TrainState``.

    After the header: epoch, prediction head (0 = calibration, 1 = clustering),
    encoder flags (bit 0: adapter, bit 1: L2-normalised input), RNG seed and 13 RNG words; the
    encoder arrays (adapter only); the eight clustering-head arrays and the
    eight calibration-head arrays; then three Adam blocks (encoder,
    clustering, calibration), each step, lr, beta1, beta2, eps, parameter
    count and the first/second moment arrays. Arrays are written as rank,
    shape, float64 data.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    if len(state.config_digest) != 32:
        raise InvalidInputError("config digest must be 32 bytes")
    buf.write(state.config_digest)
    _w_int(buf, state.epoch)
    _w_int(buf, 0 if state.predict_head == "cal" else 1)
    _w_int(buf, (0 if state.encoder.mode == "identity" else 1) | (2 if state.encoder.normalize else 0))
    _w_uint(buf, state.rng.seed)
    for w in state.rng.state_words():
        _w_uint(buf, w)
    for a in state.encoder.trainable().values():
        _w_array(buf, a)
    for head in (state.clu, state.cal):
        for name in _HEAD_FIELDS:
            _w_array(buf, getattr(head, name))
    for attr, names in _ADAM_ORDER.items():
        opt: AdamState = getattr(state, attr)
        names = [k for k in names if k in opt.m]
        _w_int(buf, opt.step)
        for v in (opt.lr, opt.beta1, opt.beta2, opt.eps):
            _w_float(buf, v)
        _w_int(buf, len(names))
        for k in names:
            _w_array(buf, opt.m[k])
            _w_array(buf, opt.v[k])
    return buf.getvalue()


def save_checkpoint(path, state) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path):
    from .trainer import TrainState

    r = _Reader(Path(path).read_bytes(), f"checkpoint {path}")
    r.magic(CHECKPOINT_MAGIC)
    version = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint {path}: unsupported version {version}", 4)
    digest = r.take(32, "config digest")
    epoch = r.unpack("<q", "epoch")
    predict_head = "cal" if r.unpack("<q", "prediction head") == 0 else "clu"
    enc_flags = r.unpack("<q", "encoder mode")
    if enc_flags not in (0, 1, 2, 3):
        raise FormatError(f"checkpoint {path}: invalid encoder mode {enc_flags}", r.pos - 8)
    enc_mode, normalize = enc_flags & 1, bool(enc_flags & 2)
    seed = r.unpack("<Q", "rng seed")
    words = [r.unpack("<Q", "rng state") for _ in range(Rng.STATE_WORDS)]
    if enc_mode == 1:
        encoder = EncoderParams("adapter", _r_array(r, "encoder weight"), _r_array(r, "encoder bias"), normalize)
    else:
        encoder = EncoderParams(normalize=normalize)
    heads = []
    for which in ("clustering", "calibration"):
        heads.append(HeadParams(**{name: _r_array(r, f"{which} {name}") for name in _HEAD_FIELDS}))
    opts = {}
    for attr, names in _ADAM_ORDER.items():
        step = r.unpack("<q", f"{attr} step")
        lr, b1, b2, eps = (r.unpack("<d", f"{attr} hyperparameters") for _ in range(4))
        count = r.unpack("<q", f"{attr} parameter count")
        expected = [k for k in names if enc_mode == 1 or attr != "enc_opt"]
        if count != len(expected):
            raise FormatError(f"checkpoint {path}: {attr} has {count} parameters, expected {len(expected)}", r.pos - 8)
        m, v = {}, {}
        for k in expected:
            m[k] = _r_array(r, f"{attr} m[{k}]")
            v[k] = _r_array(r, f"{attr} v[{k}]")
        opts[attr] = AdamState(lr, b1, b2, eps, step, m, v)
    r.finish()
    for h in heads:
        h.validate()
    return TrainState(
        encoder=encoder, clu=heads[0], cal=heads[1], rng=Rng.from_state_words(seed, words),
        epoch=epoch, config_digest=digest, predict_head=predict_head, **opts,
    )
