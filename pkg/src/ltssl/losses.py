"""Supervised, unsupervised and contrastive loss terms with their gradients.

Each term returns its value and the gradient with respect to its direct
inputs (logits, or semantic logits). Pseudo-label targets are constants:
nothing flows back into the weak branch.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import LOG_EPS, softmax


@dataclass
class LossWeights:
    lambda_un: float = 0.1
    lambda_ctr: float = 0.1
    tau: float = 0.95
    t_proto: float = 1.0
    m_temperature: float = 1.0
    dist_smoothing: float = 0.999
    ema_momentum: float = 0.999
    merge_k: int = 5

    def validate(self, num_classes=None):
        if self.lambda_un < 0 or self.lambda_ctr < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.t_proto <= 0 or self.m_temperature <= 0:
            raise ValueError("temperatures must be > 0")
        if not 0 <= self.dist_smoothing < 1:
            raise ValueError("dist_smoothing must lie in [0, 1)")
        if not 0 < self.ema_momentum < 1:
            raise ValueError("ema_momentum must lie in (0, 1)")
        if self.merge_k < 1 or (num_classes is not None and self.merge_k > num_classes):
            raise ValueError("merge_k must lie in 1..num_classes")


@dataclass
class LossReport:
    l_sup: float
    l_un: float
    l_ctr: float
    l_total: float
    masked_in_fraction: float

    def to_dict(self):
        return asdict(self)


def _onehot_ce(probs, labels):
    rows = np.arange(labels.shape[0])
    return -np.log(np.maximum(probs[rows, labels], LOG_EPS))


def _onehot(labels, C):
    out = np.zeros((labels.shape[0], C))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def sup_loss(probs, labels):
    """Mean cross-entropy against the true labels; gradient w.r.t. logits."""
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64)
    B = probs.shape[0]
    value = float(_onehot_ce(probs, labels).sum() / B)
    dlogits = (probs - _onehot(labels, probs.shape[1])) / B
    return value, dlogits


def unsup_loss(pseudo, probs_strong):
    """Masked cross-entropy of strong-view predictions against pseudo-labels.

    The sum runs over masked-in rows but the divisor is the full batch size.
    """
    probs = np.atleast_2d(probs_strong)
    n = probs.shape[0]
    if pseudo.labels.shape[0] != n:
        raise ValueError("unsup_loss: pseudo-labels and strong predictions not aligned")
    mask = pseudo.mask.astype(np.float64)
    value = float((mask * _onehot_ce(probs, pseudo.labels)).sum() / n)
    dlogits = mask[:, None] * (probs - _onehot(pseudo.labels, probs.shape[1])) / n
    return value, dlogits


def ctr_loss(semantic_labels, q_strong, n_rows=None):
    """Cross-entropy of softmax(q_strong) against the semantic pseudo-labels.

    ``semantic_labels[b]`` is None for rows without a usable merged view;
    they add nothing but still count in the divisor. Returns the value and a
    list of gradients w.r.t. each row's ``q_strong`` (None where skipped).
    """
    n = len(semantic_labels) if n_rows is None else n_rows
    total = 0.0
    grads = []
    for label, q in zip(semantic_labels, q_strong):
        if label is None:
            grads.append(None)
            continue
        p = softmax(q)
        total += -np.log(max(p[label], LOG_EPS))
        g = p.copy()
        g[label] -= 1.0
        grads.append(g / n)
    return float(total / n), grads


def total_loss(l_sup, l_un, l_ctr, weights, masked_in_fraction=0.0):
    total = l_sup + weights.lambda_un * l_un + weights.lambda_ctr * l_ctr
    return LossReport(
        l_sup=float(l_sup),
        l_un=float(l_un),
        l_ctr=float(l_ctr),
        l_total=float(total),
        masked_in_fraction=float(masked_in_fraction),
    )
