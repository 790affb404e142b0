"""Diagnostic metrics on feature geometry and attention diversity."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DimensionError, ValidationError


def _as_array(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _class_groups(features, labels, num_classes=None):
    f = _as_array(features)
    y = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels).astype(np.int64)
    if f.ndim != 2 or f.shape[0] != y.shape[0]:
        raise DimensionError(f"features {f.shape} do not match {y.shape[0]} labels")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    groups = []
    for c in range(k):
        members = f[y == c]
        if len(members) == 0:
            raise ValidationError(f"class {c} has no samples")
        groups.append(members)
    return groups


def class_centroids(features, labels, num_classes=None):
    return np.stack([g.mean(0) for g in _class_groups(features, labels, num_classes)])


def intra_class_dispersion(features, labels, num_classes=None):
    """Per class: mean Euclidean distance of members to their centroid."""
    return np.array([np.linalg.norm(g - g.mean(0), axis=1).mean()
                     for g in _class_groups(features, labels, num_classes)])


def inter_class_nn_center_distance(features, labels, num_classes=None):
    """Per class: distance from its centroid to the nearest other centroid."""
    cents = class_centroids(features, labels, num_classes)
    if len(cents) < 2:
        raise ValidationError("need at least two classes")
    d = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min(1)


def _vectorize_sets(sets):
    if isinstance(sets, (list, tuple)):
        if not sets:
            raise ValidationError("need at least one attention set")
        shapes = {tuple(np.shape(s)) for s in sets}
        if len(shapes) != 1:
            raise DimensionError(f"attention sets have mixed shapes {sorted(shapes)}")
        arr = np.stack([_as_array(s).reshape(-1) for s in sets])
    else:
        arr = _as_array(sets)
        if arr.shape[0] == 0:
            raise ValidationError("need at least one attention set")
        arr = arr.reshape(arr.shape[0], -1)
    return arr


def attention_diversity(sets):
    """Trace of the biased covariance of the vectorized attention sets."""
    a = _vectorize_sets(sets)
    centered = a - a.mean(0)
    return float((centered ** 2).sum() / a.shape[0])


def pairwise_dispersion(sets):
    """``(1 / 2N^2) * sum_{i,j} |A_i - A_j|^2``; equals :func:`attention_diversity`."""
    a = _vectorize_sets(sets)
    n = a.shape[0]
    sq = ((a[:, None, :] - a[None, :, :]) ** 2).sum(-1)
    return float(sq.sum() / (2.0 * n * n))


def export_projection(features):
    """Centered 2-component principal projection.

    Returns ``(coords (N, 2), degenerate)``. Axis signs are fixed so the
    largest-magnitude loading of each axis is positive. Rank-0 input yields
    all-zero coordinates with ``degenerate=True``.
    """
    f = _as_array(features)
    if f.ndim != 2 or f.shape[0] < 3:
        raise ValidationError("projection needs at least 3 samples as an (N, D) array")
    centered = f - f.mean(0)
    scale = np.abs(centered).max()
    if scale == 0.0 or not np.isfinite(scale):
        return np.zeros((f.shape[0], 2)), True
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, scale):
        return np.zeros((f.shape[0], 2)), True
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], f.shape[1]))])
    for r in range(axes.shape[0]):
        j = np.argmax(np.abs(axes[r]))
        if axes[r, j] < 0:
            axes[r] = -axes[r]
    return centered @ axes.T, False


def format_projection(coords, labels):
    lines = ["# index label pc1 pc2"]
    lab = np.asarray(labels)
    for i, (c, y) in enumerate(zip(coords, lab)):
        lines.append(f"{i} {int(y)} {c[0]:.8f} {c[1]:.8f}")
    return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    intra_dispersion: np.ndarray
    nn_center_distance: np.ndarray
    attention_trace: np.ndarray
    student_top1: float | None = None
    extra: dict = field(default_factory=dict)

    def means(self):
        return {
            "intra_dispersion": float(np.mean(self.intra_dispersion)),
            "nn_center_distance": float(np.mean(self.nn_center_distance)),
            "attention_trace": float(np.mean(self.attention_trace)),
        }

    def to_text(self):
        lines = []
        if self.student_top1 is not None:
            lines.append(f"# student_top1 = {self.student_top1:.6f}")
        lines.append("# class_id dispersion nn_distance attention_trace")
        for k, (d, n, t) in enumerate(zip(self.intra_dispersion, self.nn_center_distance, self.attention_trace)):
            lines.append(f"{k} {d:.8f} {n:.8f} {t:.8f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        top1 = None
        rows = []
        for line in text.splitlines():
            if line.startswith("# student_top1"):
                top1 = float(line.split("=", 1)[1])
            elif line and not line.startswith("#"):
                rows.append([float(v) for v in line.split()[1:]])
        arr = np.array(rows).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], top1)


@torch.no_grad()
def distilled_signals(teacher, distilled):
    """Teacher representations ``z`` and attention sets for every distilled image."""
    images, labels = distilled.flat()
    out = teacher.model.eval()(images)
    return out.z, out.attn, labels


def distilled_metrics(teacher, distilled, student_top1=None):
    z, attn, labels = distilled_signals(teacher, distilled)
    k = distilled.num_classes
    traces = np.array([attention_diversity(attn[labels == c]) for c in range(k)])
    return MetricsReport(
        intra_dispersion=intra_class_dispersion(z, labels, k),
        nn_center_distance=inter_class_nn_center_distance(z, labels, k),
        attention_trace=traces,
        student_top1=student_top1,
    )
