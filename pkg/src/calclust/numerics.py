"""Probability primitives and the seeded random generator used everywhere else.

All arrays are float64. Matrices are plain 2-D ``numpy.ndarray`` objects.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction."""
    x = as_matrix(logits, "logits")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("softmax_rows: logits contain non-finite values")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def argmax_tiebreak(v) -> int:
    """Index of the maximum; ties go to the lowest index."""
    a = np.asarray(v, dtype=np.float64).ravel()
    if a.size == 0:
        raise InvalidInputError("argmax_tiebreak: empty input")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("argmax_tiebreak: non-finite input")
    # np.argmax returns the first occurrence of the maximum
    return int(np.argmax(a))


def argmax_rows(m: np.ndarray) -> np.ndarray:
    return np.argmax(m, axis=1)


def l2_normalize_rows(m) -> tuple[np.ndarray, np.ndarray]:
    """Scale every nonzero row to unit Euclidean norm.

    Returns ``(normalized, degenerate)`` where ``degenerate`` flags the zero
    rows, which are passed through unchanged.
    """
    x = as_matrix(m)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    return x / safe[:, None], degenerate


class Rng:
    """Seeded counter-based generator (Philox) with a serialisable state.

    The whole state packs into 13 unsigned 64-bit integers, which is what the
    checkpoint format stores.
    """

    STATE_WORDS = 13

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(self.seed)
        self.gen = np.random.Generator(self._bitgen)

    # draws -------------------------------------------------------------
    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def integers(self, high: int, size=None):
        return self.gen.integers(0, high, size=size)

    # state -------------------------------------------------------------
    def state_words(self) -> list[int]:
        st = self._bitgen.state
        words = [int(w) for w in st["state"]["counter"]]
        words += [int(w) for w in st["state"]["key"]]
        words += [int(w) for w in st["buffer"]]
        words += [int(st["buffer_pos"]), int(st["has_uint32"]), int(st["uinteger"])]
        return words

    @classmethod
    def from_state_words(cls, seed: int, words) -> "Rng":
        words = [int(w) for w in words]
        if len(words) != cls.STATE_WORDS:
            raise InvalidInputError(f"expected {cls.STATE_WORDS} RNG state words, got {len(words)}")
        r = cls(seed)
        st = r._bitgen.state
        st["state"]["counter"] = np.array(words[0:4], dtype=np.uint64)
        st["state"]["key"] = np.array(words[4:6], dtype=np.uint64)
        st["buffer"] = np.array(words[6:10], dtype=np.uint64)
        st["buffer_pos"] = words[10]
        st["has_uint32"] = words[11]
        st["uinteger"] = words[12]
        r._bitgen.state = st
        return r

    def copy(self) -> "Rng":
        return Rng.from_state_words(self.seed, self.state_words())
