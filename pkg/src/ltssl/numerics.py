"""Probability helpers and deterministic random streams.

Everything here works in float64. Distributions are plain 1-D (or row-wise
2-D) numpy arrays; there is no wrapper type.
"""

import hashlib
import logging

import numpy as np

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what}: non-finite input {x!r}")


def softmax(logits):
    """Numerically stable softmax over the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    _check_finite(x, "softmax")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def normalize(v):
    """Divide by the sum along the last axis.

    Rows that sum to zero come back uniform (and are logged), so a collapsed
    reweighting never kills a training run.
    """
    x = np.asarray(v, dtype=np.float64)
    _check_finite(x, "normalize")
    if np.any(x < 0):
        raise ValueError(f"normalize: negative entry in {x!r}")
    total = x.sum(axis=-1, keepdims=True)
    zero = total == 0
    if np.any(zero):
        log.warning("normalize: zero-sum input, falling back to uniform")
        x = np.where(zero, 1.0, x)
        total = x.sum(axis=-1, keepdims=True)
    return x / total


def cross_entropy(target, predicted):
    """-sum(target * log(predicted)), predicted clamped to LOG_EPS.

    ``target`` is either a class index or a distribution of the same length
    as ``predicted``.
    """
    p = np.asarray(predicted, dtype=np.float64)
    if np.ndim(target) == 0 and isinstance(target, (int, np.integer)):
        if not 0 <= target < p.shape[-1]:
            raise ValueError(f"cross_entropy: class {target} outside 0..{p.shape[-1] - 1}")
        return float(-np.log(max(p[target], LOG_EPS)))
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"cross_entropy: shape mismatch {t.shape} vs {p.shape}")
    return float(-np.sum(t * np.log(np.maximum(p, LOG_EPS))))


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity: shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        log.warning("cosine_similarity: zero-norm vector, similarity set to 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def argmax_first(x):
    """Argmax along the last axis; ties go to the smallest index."""
    # np.argmax already returns the first occurrence of the maximum.
    return np.argmax(np.asarray(x), axis=-1)


class RandomStream:
    """Counter-based generator (Philox) keyed by ``(seed, label)``.

    Each consumer in the program owns its own label, so adding a new
    consumer never shifts the draws of an existing one.
    """

    def __init__(self, seed, label):
        self.seed = int(seed)
        self.label = str(label)
        digest = hashlib.sha256(f"{self.seed}:{self.label}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64).copy()
        self._bitgen = np.random.Philox(key=key)
        self.gen = np.random.Generator(self._bitgen)

    def child(self, label):
        return RandomStream(self.seed, f"{self.label}/{label}")

    def get_state(self):
        state = self._bitgen.state
        return {
            "seed": self.seed,
            "label": self.label,
            "counter": [int(v) for v in state["state"]["counter"]],
            "key": [int(v) for v in state["state"]["key"]],
            "buffer": [int(v) for v in state["buffer"]],
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    def set_state(self, s):
        if s["seed"] != self.seed or s["label"] != self.label:
            raise ValueError(f"stream state for {s['label']!r} applied to {self.label!r}")
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(s["counter"], dtype=np.uint64),
                "key": np.array(s["key"], dtype=np.uint64),
            },
            "buffer": np.array(s["buffer"], dtype=np.uint64),
            "buffer_pos": s["buffer_pos"],
            "has_uint32": s["has_uint32"],
            "uinteger": s["uinteger"],
        }

    @classmethod
    def from_state(cls, s):
        stream = cls(s["seed"], s["label"])
        stream.set_state(s)
        return stream
