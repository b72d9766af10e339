"""Class-rebalancing pseudo-labels.

A running estimate of the class distribution predicted on labeled data is
mapped through a decreasing function to a reweighting vector; weak-view
confidences are multiplied by it, renormalized, then thresholded.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import argmax_first, normalize

log = logging.getLogger(__name__)


class DistributionTracker:
    def __init__(self, num_classes, smoothing=0.999):
        if not 0 <= smoothing <= 1:
            raise ValueError("smoothing must lie in [0, 1]")
        self.num_classes = num_classes
        self.smoothing = smoothing
        self.t = 0
        self.p = np.full(num_classes, 1.0 / num_classes)

    def copy(self):
        out = DistributionTracker(self.num_classes, self.smoothing)
        out.t = self.t
        out.p = self.p.copy()
        return out


def update_distribution(tracker, labeled_probs):
    """Uniform at t = 0, then p <- lam * p + (1 - lam) * batch mean."""
    probs = np.asarray(labeled_probs, dtype=np.float64)
    if probs.size == 0:
        log.warning("update_distribution: empty batch, tracker unchanged")
        return tracker
    out = tracker.copy()
    if tracker.t == 0:
        out.p = np.full(tracker.num_classes, 1.0 / tracker.num_classes)
    else:
        lam = tracker.smoothing
        out.p = lam * tracker.p + (1.0 - lam) * probs.mean(axis=0)
    out.t = tracker.t + 1
    return out


def linear_decreasing(temperature):
    """M(x) = 1 - x / T."""
    return lambda x: 1.0 - x / temperature


@dataclass
class ReweightFactor:
    beta: np.ndarray
    temperature: float


def reweight_factor(tracker, temperature=1.0, mapping=None):
    """beta = normalize(max(0, M(p_tilde))); uniform if every entry clamps to 0."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    m = (mapping or linear_decreasing(temperature))(tracker.p)
    m = np.maximum(m, 0.0)
    if not np.any(m > 0):
        log.warning("reweight_factor: mapping clamped every class to 0, using uniform beta")
    return ReweightFactor(beta=normalize(m), temperature=temperature)


def rebalance(p_weak, beta):
    """p' = normalize(p_weak * beta) row-wise."""
    p_weak = np.asarray(p_weak, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if p_weak.shape[-1] != beta.shape[-1]:
        raise ValueError(f"rebalance: {p_weak.shape[-1]} classes vs beta of {beta.shape[-1]}")
    return normalize(p_weak * beta)


@dataclass
class PseudoLabelBatch:
    labels: np.ndarray
    mask: np.ndarray
    confidences: np.ndarray

    @property
    def mask_rate(self):
        return float(self.mask.mean()) if self.mask.size else 0.0


def pseudo_labels(p_prime, tau):
    """argmax label per row, masked in when the max confidence is >= tau."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    p_prime = np.atleast_2d(np.asarray(p_prime, dtype=np.float64))
    return PseudoLabelBatch(
        labels=argmax_first(p_prime),
        mask=p_prime.max(axis=1) >= tau,
        confidences=p_prime,
    )
