"""Clustering/classification metrics, OOD scoring, and SVG scatter plots."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import Graph, Tensor, backward, frozen
from .errors import ContractViolation


@dataclass
class EvalReport:
    nmi: float | None = None
    cluster_accuracy: float | None = None
    direct_accuracy: float | None = None
    linear_probe_accuracy: float | None = None
    ood_auroc: dict = field(default_factory=dict)
    confusion: list | None = None
    notes: dict = field(default_factory=lambda: {"nmi_normalization": "arithmetic-mean"})

    def to_dict(self) -> dict:
        return {
            "nmi": self.nmi,
            "cluster_accuracy": self.cluster_accuracy,
            "direct_accuracy": self.direct_accuracy,
            "linear_probe_accuracy": self.linear_probe_accuracy,
            "ood_auroc": self.ood_auroc,
            "confusion": self.confusion,
            "notes": self.notes,
        }


def contingency_table(assignments: np.ndarray, labels: np.ndarray) -> np.ndarray:
    a = np.asarray(assignments, dtype=np.int64)
    b = np.asarray(labels, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ContractViolation("assignments and labels must be equal-length nonempty vectors")
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignments, labels) -> float:
    """Mutual information normalized by the arithmetic mean of entropies.

    Empty cells contribute 0 * log 0 = 0. If both partitions are trivial
    (single cluster and single label) the score is 1.
    """
    table = contingency_table(assignments, labels)
    n = table.sum()
    h_a = _entropy(table.sum(axis=1))
    h_l = _entropy(table.sum(axis=0))
    if h_a + h_l == 0.0:
        return 1.0
    pa = table.sum(axis=1) / n
    pl = table.sum(axis=0) / n
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            if table[i, j] > 0:
                pij = table[i, j] / n
                mi += pij * np.log(pij / (pa[i] * pl[j]))
    return float(max(0.0, mi) / ((h_a + h_l) / 2.0))


def cluster_accuracy(assignments, labels) -> float:
    """Best-case accuracy under optimal cluster-to-label matching.

    The Hungarian algorithm runs on the negated contingency table; when
    there are more clusters than labels (or vice versa) the rectangular
    table is handled as if padded with zero-count entries.
    """
    table = contingency_table(assignments, labels)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / table.sum())


def direct_accuracy(predictions, labels) -> float:
    """Exact-match rate; class identities are taken at face value."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ContractViolation("predictions and labels must be equal-length nonempty vectors")
    return float((predictions == labels).mean())


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 100
    seed: int = 0


def linear_probe(features: np.ndarray, labels: np.ndarray, test_features: np.ndarray, test_labels: np.ndarray, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Train a softmax layer on frozen features with momentum SGD; report
    held-out accuracy."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ContractViolation("linear probe needs at least two classes")
    num_classes = int(labels.max()) + 1
    n, d = features.shape
    rng = np.random.default_rng(cfg.seed)
    weights = np.zeros((d, num_classes))
    bias = np.zeros(num_classes)
    vel_w = np.zeros_like(weights)
    vel_b = np.zeros_like(bias)
    onehot = np.eye(num_classes)[labels]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y = features[idx], onehot[idx]
            logits = x @ weights + bias
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            grad_logits = (p - y) / len(idx)
            grad_w = x.T @ grad_logits
            grad_b = grad_logits.sum(axis=0)
            vel_w = cfg.momentum * vel_w - cfg.lr * grad_w
            vel_b = cfg.momentum * vel_b - cfg.lr * grad_b
            weights += vel_w
            bias += vel_b
    preds = (np.asarray(test_features) @ weights + bias).argmax(axis=1)
    return float((preds == np.asarray(test_labels)).mean())


def ood_score(model, x: np.ndarray) -> np.ndarray:
    """Per-sample s(x) = -||d f / d x||_2; higher means more in-distribution."""
    x = np.asarray(x, dtype=np.float64)
    with frozen(model.parameters()):
        t = Tensor(x, requires_grad=True)
        with Graph() as g:
            total = model.energy_logdensity(t).sum()
        backward(g, total)
    grad = t.grad if t.grad is not None else np.zeros_like(x)
    return -np.linalg.norm(grad, axis=1)


def auroc(in_scores, out_scores) -> float:
    """Mann-Whitney statistic: P(in > out) + 0.5 P(in = out)."""
    a = np.asarray(in_scores, dtype=np.float64)
    b = np.asarray(out_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractViolation("both score sets must be nonempty")
    greater = (a[:, None] > b[None, :]).sum()
    ties = (a[:, None] == b[None, :]).sum()
    return float((greater + 0.5 * ties) / (a.size * b.size))


# -- SVG scatter plots ---------------------------------------------------------------

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def scatter_plot(points: np.ndarray, assignments: np.ndarray, path: str, size: int = 480) -> None:
    """Write a deterministic standalone SVG, one color per cluster."""
    points = np.asarray(points, dtype=np.float64)
    assignments = np.asarray(assignments, dtype=np.int64)
    if points.size and points.shape[1] != 2:
        raise ContractViolation("scatter_plot requires 2-D points")
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if points.size:
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        margin = 0.06 * size
        scale = (size - 2 * margin) / span
        for (x, y), c in zip(points, assignments):
            px = margin + (x - lo[0]) * scale[0]
            py = size - margin - (y - lo[1]) * scale[1]
            color = PALETTE[int(c) % len(PALETTE)]
            lines.append(f'<circle cx="{px:.3f}" cy="{py:.3f}" r="3" fill="{color}"/>')
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
