"""Per-class evaluation and pseudo-label telemetry."""

from dataclasses import dataclass

import numpy as np

from .dataset import reveal_hidden_labels
from .model import forward


def confusion_matrix(y_true, y_pred, num_classes):
    """Rows are true classes, columns predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    # classes with no support and no predictions
    empty: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_f1: float
    accuracy: float


def class_report(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    total = cm.sum()
    acc = float(tp.sum() / total) if total else 0.0
    # single-label: micro precision == micro recall == accuracy
    micro_p = float(tp.sum() / predicted.sum()) if predicted.sum() else 0.0
    micro_r = float(tp.sum() / support.sum()) if support.sum() else 0.0
    micro_f1 = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
    return ClassReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support.astype(np.int64),
        empty=(support == 0) & (predicted == 0),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        micro_f1=float(micro_f1),
        accuracy=acc,
    )


def predict(params, x):
    return np.argmax(forward(params, x).probs, axis=1)


def evaluate(params, test):
    """Argmax predictions of ``params`` (the EMA shadow in practice) on a labeled set."""
    if test.labels is None:
        raise ValueError("evaluate needs a set with visible labels")
    cm = confusion_matrix(test.labels, predict(params, test.features), params.num_classes)
    return class_report(cm), cm


def head_tail_split(labeled_counts):
    """Head = the most populated half of the classes (ties by index), tail = the rest."""
    counts = np.asarray(labeled_counts)
    C = counts.shape[0]
    rank = np.lexsort((np.arange(C), -counts))
    head = np.sort(rank[: C // 2])
    tail = np.sort(rank[C // 2 :])
    return head, tail


@dataclass
class PseudoLabelReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    mask_in_rate: float
    n_rows: int
    n_masked: int
    head_precision: float
    head_recall: float
    head_f1: float
    tail_precision: float
    tail_recall: float
    tail_f1: float


def _quality_from_counts(cm, n_rows, head, tail):
    C = cm.shape[0]
    n_masked = int(cm.sum())
    if n_masked == 0:
        z = np.zeros(C)
        return PseudoLabelReport(z, z.copy(), z.copy(), 0.0, n_rows, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    rep = class_report(cm)

    def group(v, idx):
        return float(v[idx].mean()) if len(idx) else 0.0

    return PseudoLabelReport(
        precision=rep.precision,
        recall=rep.recall,
        f1=rep.f1,
        mask_in_rate=n_masked / n_rows if n_rows else 0.0,
        n_rows=n_rows,
        n_masked=n_masked,
        head_precision=group(rep.precision, head),
        head_recall=group(rep.recall, head),
        head_f1=group(rep.f1, head),
        tail_precision=group(rep.precision, tail),
        tail_recall=group(rep.recall, tail),
        tail_f1=group(rep.f1, tail),
    )


def pseudo_label_quality(pseudo, hidden_labels, num_classes, head, tail):
    """P/R/F1 of masked-in pseudo-labels against the true classes of the same rows."""
    hidden = np.asarray(hidden_labels, dtype=np.int64)
    if hidden.shape[0] != pseudo.labels.shape[0]:
        raise ValueError("pseudo_label_quality: rows not aligned")
    m = pseudo.mask
    cm = confusion_matrix(hidden[m], pseudo.labels[m], num_classes)
    return _quality_from_counts(cm, int(hidden.shape[0]), head, tail)


class PseudoLabelMonitor:
    """Accumulates pseudo-label quality over training from unlabeled batch indices.

    This is the only reader of the unlabeled set's hidden labels; nothing it
    computes is fed back to the trainer's updates.
    """

    def __init__(self, unlabeled, num_classes, head, tail):
        self._hidden = reveal_hidden_labels(unlabeled)
        self.num_classes = num_classes
        self.head = np.asarray(head)
        self.tail = np.asarray(tail)
        self.cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.n_rows = 0

    def observe(self, indices, pseudo):
        hidden = self._hidden[indices]
        m = pseudo.mask
        np.add.at(self.cm, (hidden[m], pseudo.labels[m]), 1)
        self.n_rows += int(len(indices))
        return pseudo_label_quality(pseudo, hidden, self.num_classes, self.head, self.tail)

    def report(self):
        return _quality_from_counts(self.cm, self.n_rows, self.head, self.tail)

    def to_dict(self):
        return {"cm": self.cm.tolist(), "n_rows": self.n_rows}

    def load_dict(self, d):
        self.cm = np.array(d["cm"], dtype=np.int64).reshape(self.num_classes, self.num_classes)
        self.n_rows = int(d["n_rows"])


def dump_unlabeled_features(path, z, unlabeled):
    """Write projected features of the unlabeled set with their true classes (for t-SNE)."""
    hidden = reveal_hidden_labels(unlabeled)
    with open(path, "w") as fh:
        for row, y in zip(z, hidden):
            fh.write("\t".join([str(int(y))] + [repr(float(v)) for v in row]) + "\n")
