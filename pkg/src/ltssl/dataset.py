"""Synthetic long-tailed splits over a Gaussian mixture, plus augmentations.

Per-class counts follow ``n_k = head * gamma ** (-(k - 1) / (C - 1))`` for
classes k = 1..C, so class 0 is the head and class C-1 the tail.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

UNLABELED = -1


@dataclass
class LongTailSpec:
    num_classes: int = 6
    n1: int = 100
    m1: int = 1000
    gamma_l: float = 10.0
    # float >= 1, or the string "unknown"
    gamma_u: object = 10.0
    rounding: str = "round"
    test_per_class: int = 200

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.n1 < 1 or self.m1 < 1:
            raise ValueError("head counts must be >= 1")
        if self.gamma_l < 1:
            raise ValueError("gamma_l must be >= 1")
        if self.gamma_u != "unknown" and float(self.gamma_u) < 1:
            raise ValueError("gamma_u must be >= 1 or 'unknown'")
        if self.rounding not in ("floor", "round"):
            raise ValueError("rounding must be 'floor' or 'round'")
        if self.test_per_class < 1:
            raise ValueError("test_per_class must be >= 1")


@dataclass
class AugmentConfig:
    weak_sigma: float = 0.0
    strong_swaps: int = 2
    strong_sigma: float = 0.1

    def validate(self):
        if self.weak_sigma < 0 or self.strong_sigma < 0:
            raise ValueError("augmentation noise must be >= 0")
        if self.strong_sigma < self.weak_sigma or self.strong_swaps < 1:
            raise ValueError(
                "strong augmentation must dominate weak: strong_sigma >= weak_sigma and strong_swaps >= 1"
            )


@dataclass
class Mixture:
    means: np.ndarray
    spread: float = 1.0

    @property
    def num_classes(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def sample(self, counts, rng):
        """Draw ``counts[k]`` points from component k; returns (x, y) class-sorted."""
        xs, ys = [], []
        for k, n in enumerate(counts):
            xs.append(self.means[k] + self.spread * rng.gen.standard_normal((int(n), self.dim)))
            ys.append(np.full(int(n), k, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)


@dataclass
class SampleSet:
    """Feature rows with optional visible labels.

    Unlabeled sets keep their true classes in ``_hidden_labels``; only
    :func:`reveal_hidden_labels` (used by telemetry) reads them.
    """

    features: np.ndarray
    labels: object = None
    _hidden_labels: object = field(default=None, repr=False)

    def __len__(self):
        return self.features.shape[0]


def reveal_hidden_labels(samples):
    """Ground truth of an unlabeled set. Telemetry only; trainers never call this."""
    if samples._hidden_labels is None:
        raise ValueError("sample set carries no hidden labels")
    return samples._hidden_labels


def longtail_counts(spec, head, gamma):
    """Per-class counts, head first, never below 1."""
    C = spec.num_classes
    if head < 1 or gamma < 1:
        raise ValueError(f"longtail_counts needs head >= 1 and gamma >= 1, got {head}, {gamma}")
    counts = []
    for k in range(C):
        raw = head * gamma ** (-k / (C - 1))
        # the small offset keeps exact endpoints (500 / 100 = 5) from flooring to 4
        n = math.floor(raw + 1e-9) if spec.rounding == "floor" else math.floor(raw + 0.5)
        if n < 1:
            log.warning("longtail_counts: class %d count %.3f clamped to 1", k, raw)
            n = 1
        counts.append(n)
    return counts


def generate_mixture(num_classes, dim, separation, rng):
    """Component means at ``separation`` along randomly rotated basis axes.

    With C <= dim every pair of means is ``separation * sqrt(2)`` apart. When
    C > dim the means are random directions of length ``separation``.
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("generate_mixture needs num_classes >= 2 and dim >= 2")
    q, r = np.linalg.qr(rng.gen.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if num_classes <= dim:
        means = separation * q[:num_classes]
    else:
        d = rng.gen.standard_normal((num_classes, dim))
        means = separation * d / np.linalg.norm(d, axis=1, keepdims=True)
    return Mixture(means=np.ascontiguousarray(means))


def unlabeled_counts(spec, rng):
    if spec.gamma_u != "unknown":
        return longtail_counts(spec, spec.m1, float(spec.gamma_u))
    # unknown distribution: a random imbalance ratio over a random class order
    gamma = float(np.exp(rng.gen.uniform(0.0, np.log(100.0))))
    base = longtail_counts(spec, spec.m1, gamma)
    perm = rng.gen.permutation(spec.num_classes)
    return [base[perm[k]] for k in range(spec.num_classes)]


def build_splits(spec, mixture, rng):
    """Labeled, unlabeled (hidden labels kept) and balanced test sets."""
    spec.validate()
    if mixture.num_classes != spec.num_classes:
        raise ValueError("mixture/spec class count mismatch")
    lab_counts = longtail_counts(spec, spec.n1, spec.gamma_l)
    unl_counts = unlabeled_counts(spec, rng.child("unlabeled-counts"))

    def draw(counts, label):
        x, y = mixture.sample(counts, rng.child(label))
        perm = rng.child(label + "-order").gen.permutation(len(y))
        return x[perm], y[perm]

    xl, yl = draw(lab_counts, "labeled")
    xu, yu = draw(unl_counts, "unlabeled")
    xt, yt = draw([spec.test_per_class] * spec.num_classes, "test")
    return (
        SampleSet(xl, yl),
        SampleSet(xu, None, yu),
        SampleSet(xt, yt),
    )


def swap_coordinates(x, pairs):
    """Swap coordinate pairs in place order; ``pairs`` is a list of (i, j)."""
    out = np.array(x, dtype=np.float64, copy=True)
    for i, j in pairs:
        out[..., [i, j]] = out[..., [j, i]]
    return out


def weak_augment(x, cfg, rng):
    x = np.asarray(x, dtype=np.float64)
    if cfg.weak_sigma == 0:
        return x.copy()
    return x + cfg.weak_sigma * rng.gen.standard_normal(x.shape)


def strong_augment(x, cfg, rng):
    """Random coordinate-pair swaps followed by Gaussian noise, row-wise."""
    x = np.array(x, dtype=np.float64, copy=True)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    n, d = x.shape
    if d < 2:
        raise ValueError("strong_augment needs at least 2 coordinates")
    rows = np.arange(n)
    for _ in range(cfg.strong_swaps):
        i = rng.gen.integers(0, d, size=n)
        j = (i + rng.gen.integers(1, d, size=n)) % d
        xi = x[rows, i].copy()
        x[rows, i] = x[rows, j]
        x[rows, j] = xi
    if cfg.strong_sigma > 0:
        x = x + cfg.strong_sigma * rng.gen.standard_normal(x.shape)
    return x[0] if squeeze else x


def sample_batches(labeled, unlabeled, batch_size, mu, rng):
    """Index arrays for one labeled batch of B and one unlabeled batch of floor(mu*B).

    Sampling is uniform with replacement. ``unlabeled`` may be None, in which
    case no unlabeled draw is made.
    """
    if batch_size < 1 or mu <= 0:
        raise ValueError("sample_batches needs batch_size >= 1 and mu > 0")
    li = rng.gen.integers(0, len(labeled), size=batch_size)
    if unlabeled is None:
        return li, None
    ui = rng.gen.integers(0, len(unlabeled), size=unlabeled_batch_size(batch_size, mu))
    return li, ui


def unlabeled_batch_size(batch_size, mu):
    return max(1, int(math.floor(mu * batch_size + 1e-9)))


# -- bundle files -----------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def _write_tsv(path, features, labels):
    with open(path, "w") as fh:
        for row, y in zip(features, labels):
            fh.write("\t".join([_fmt(v) for v in row] + [str(int(y))]) + "\n")


def _read_tsv(path, dim):
    rows = []
    labels = []
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != dim + 1:
                raise ValueError(f"{path}: expected {dim + 1} columns, got {len(parts)}")
            rows.append([float(v) for v in parts[:dim]])
            labels.append(int(parts[dim]))
    return np.array(rows, dtype=np.float64).reshape(-1, dim), np.array(labels, dtype=np.int64)


def write_bundle(directory, spec, mixture, labeled, unlabeled, test, extra=None):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "version": 1,
        "spec": asdict(spec),
        "dim": mixture.dim,
        "means": [[_fmt(v) for v in row] for row in mixture.means],
        "counts": {
            "labeled": np.bincount(labeled.labels, minlength=spec.num_classes).tolist(),
            "unlabeled": np.bincount(
                reveal_hidden_labels(unlabeled), minlength=spec.num_classes
            ).tolist(),
            "test": np.bincount(test.labels, minlength=spec.num_classes).tolist(),
        },
    }
    if extra:
        meta.update(extra)
    with open(os.path.join(directory, "dataset.meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_tsv(os.path.join(directory, "labeled.tsv"), labeled.features, labeled.labels)
    _write_tsv(
        os.path.join(directory, "unlabeled.tsv"),
        unlabeled.features,
        np.full(len(unlabeled), UNLABELED),
    )
    with open(os.path.join(directory, "unlabeled.hidden.tsv"), "w") as fh:
        for y in reveal_hidden_labels(unlabeled):
            fh.write(f"{int(y)}\n")
    _write_tsv(os.path.join(directory, "test.tsv"), test.features, test.labels)


def read_bundle(directory):
    """Returns (spec, mixture, labeled, unlabeled, test)."""
    with open(os.path.join(directory, "dataset.meta.json")) as fh:
        meta = json.load(fh)
    spec = LongTailSpec(**meta["spec"])
    dim = meta["dim"]
    mixture = Mixture(means=np.array([[float(v) for v in row] for row in meta["means"]]))
    xl, yl = _read_tsv(os.path.join(directory, "labeled.tsv"), dim)
    xu, _ = _read_tsv(os.path.join(directory, "unlabeled.tsv"), dim)
    with open(os.path.join(directory, "unlabeled.hidden.tsv")) as fh:
        hidden = np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
    xt, yt = _read_tsv(os.path.join(directory, "test.tsv"), dim)
    return spec, mixture, SampleSet(xl, yl), SampleSet(xu, None, hidden), SampleSet(xt, yt)
