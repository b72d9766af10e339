"""Memory bank, merged prototypes and merged semantic pseudo-labels.

For each unlabeled sample the classes are ordered by weak-view confidence;
the top-K queues are pooled into one super-class and the remaining classes
keep their own prototypes, giving N = C - K + 1 centers. Cosine similarity
to those centers (divided by a temperature) gives the semantic logits.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import argmax_first

log = logging.getLogger(__name__)


class MemoryBank:
    """Per-class FIFO queues of projected features, stored as ring buffers."""

    def __init__(self, num_classes, dim, maxsize=128):
        if maxsize < 1:
            raise ValueError("maxsize must be >= 1")
        self.num_classes = num_classes
        self.dim = dim
        self.maxsize = maxsize
        self._data = np.zeros((num_classes, maxsize, dim))
        self._count = np.zeros(num_classes, dtype=np.int64)
        # next write slot per class
        self._pos = np.zeros(num_classes, dtype=np.int64)

    def __len__(self):
        return int(self._count.sum())

    def queue(self, c):
        """Contents of class c, oldest first."""
        n = self._count[c]
        if n < self.maxsize:
            return self._data[c, :n].copy()
        p = self._pos[c]
        return np.concatenate([self._data[c, p:], self._data[c, :p]])

    def queue_len(self, c):
        return int(self._count[c])

    def push(self, z, y):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y))
        if z.shape[0] != y.shape[0]:
            raise ValueError("bank push: features and labels not aligned")
        if z.shape[1] != self.dim:
            raise ValueError(f"bank push: expected dim {self.dim}, got {z.shape[1]}")
        if np.any((y < 0) | (y >= self.num_classes)):
            raise ValueError(f"bank push: label out of range in {y}")
        for row, c in zip(z, y):
            p = self._pos[c]
            self._data[c, p] = row
            self._pos[c] = (p + 1) % self.maxsize
            self._count[c] = min(self._count[c] + 1, self.maxsize)
        return self

    def copy(self):
        out = MemoryBank(self.num_classes, self.dim, self.maxsize)
        out._data = self._data.copy()
        out._count = self._count.copy()
        out._pos = self._pos.copy()
        return out

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "maxsize": self.maxsize,
            "data": self._data.tolist(),
            "count": self._count.tolist(),
            "pos": self._pos.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        out = cls(d["num_classes"], d["dim"], d["maxsize"])
        out._data = np.array(d["data"], dtype=np.float64).reshape(out._data.shape)
        out._count = np.array(d["count"], dtype=np.int64)
        out._pos = np.array(d["pos"], dtype=np.int64)
        return out


def bank_push(bank, z, y):
    return bank.push(z, y)


@dataclass
class PrototypeSet:
    vectors: np.ndarray
    valid: np.ndarray
    sums: np.ndarray
    counts: np.ndarray


def prototypes(bank):
    """Mean of each queue; an empty queue gives an invalid (zero) prototype."""
    counts = bank._count.astype(np.float64)
    sums = np.zeros((bank.num_classes, bank.dim))
    for c in range(bank.num_classes):
        n = bank._count[c]
        if n:
            sums[c] = bank._data[c, :n].sum(axis=0)
    valid = counts > 0
    vectors = np.zeros_like(sums)
    vectors[valid] = sums[valid] / counts[valid, None]
    return PrototypeSet(vectors=vectors, valid=valid, sums=sums, counts=counts)


def topk_order(p_weak_row, k=None):
    """Classes by descending confidence, smaller index first on ties."""
    p = np.asarray(p_weak_row, dtype=np.float64)
    if k is not None and not 1 <= k <= p.shape[0]:
        raise ValueError(f"merge count {k} outside 1..{p.shape[0]}")
    return np.lexsort((np.arange(p.shape[0]), -p))


@dataclass
class MergedView:
    order: np.ndarray
    k: int
    centers: np.ndarray
    valid: np.ndarray
    class_to_super: np.ndarray

    @property
    def n_super(self):
        return self.centers.shape[0]

    @property
    def usable(self):
        return bool(self.valid.any())


def merged_view(protos, order, k):
    """Super-class 0 pools the top-k queues (content-weighted); the rest follow ``order``."""
    if isinstance(protos, MemoryBank):
        protos = prototypes(protos)
    order = np.asarray(order)
    C = order.shape[0]
    if not 1 <= k <= C:
        raise ValueError(f"merge count {k} outside 1..{C}")
    top = order[:k]
    rest = order[k:]
    n_top = protos.counts[top].sum()
    centers = np.zeros((C - k + 1, protos.vectors.shape[1]))
    valid = np.zeros(C - k + 1, dtype=bool)
    if n_top > 0:
        centers[0] = protos.sums[top].sum(axis=0) / n_top
        valid[0] = True
    else:
        log.debug("merged_view: every top-%d queue is empty", k)
    centers[1:] = protos.vectors[rest]
    valid[1:] = protos.valid[rest]
    class_to_super = np.empty(C, dtype=np.int64)
    class_to_super[top] = 0
    class_to_super[rest] = np.arange(1, C - k + 1)
    return MergedView(order=order, k=k, centers=centers, valid=valid, class_to_super=class_to_super)


def semantic_logits(z_row, view, t_proto=1.0):
    """cos(z, center_i) / t_proto over the valid centers.

    Returns ``(q, index)`` where ``index`` lists the super-class id of each
    entry of ``q``; invalid centers are left out.
    """
    if t_proto <= 0:
        raise ValueError("t_proto must be > 0")
    index = np.flatnonzero(view.valid)
    if index.size == 0:
        raise ValueError("semantic_logits: no valid prototype in view")
    centers = view.centers[index]
    return _cosine_rows(z_row, centers) / t_proto, index


def _cosine_rows(z, centers):
    z = np.asarray(z, dtype=np.float64)
    nz = np.linalg.norm(z)
    nc = np.linalg.norm(centers, axis=1)
    if nz == 0:
        log.warning("semantic_logits: zero-norm feature, logits set to 0")
        return np.zeros(centers.shape[0])
    out = np.zeros(centers.shape[0])
    ok = nc > 0
    out[ok] = centers[ok] @ z / (nc[ok] * nz)
    return out


def semantic_logits_backward(z_row, centers, t_proto, dq):
    """d(loss)/dz given d(loss)/dq for q_i = cos(z, c_i) / t_proto."""
    z = np.asarray(z_row, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz == 0:
        return np.zeros_like(z)
    nc = np.linalg.norm(centers, axis=1)
    ok = nc > 0
    c_hat = np.zeros_like(centers)
    c_hat[ok] = centers[ok] / nc[ok, None]
    z_hat = z / nz
    cos = c_hat @ z_hat
    # d cos_i / dz = (c_hat_i - cos_i * z_hat) / |z|
    jac = (c_hat - cos[:, None] * z_hat[None, :]) / nz
    return (dq / t_proto) @ jac


def semantic_pseudo_label(q_weak):
    return int(argmax_first(q_weak))
