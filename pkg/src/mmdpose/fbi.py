"""Forward/backward bone status (FBI) labels.

Each of the m bones gets one of three statuses: 0 forward (child nearer the
camera), 1 backward (child farther away), 2 possibly parallel to the image
plane. A label matrix is stored as m integer class indices; ``one_hot``
expands it to the m x 3 form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import DEFAULT_TOPOLOGY, DimensionError, SkeletonTopology, bone_vectors

FORWARD, BACKWARD, PARALLEL = 0, 1, 2
NUM_STATUSES = 3


@dataclass(frozen=True)
class FbiLabelConfig:
    parallel_fraction: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.parallel_fraction < 1.0:
            raise ValueError("parallel_fraction must lie in [0, 1)")


def label_fbi(pose, topo: SkeletonTopology = DEFAULT_TOPOLOGY,
              cfg: FbiLabelConfig = FbiLabelConfig()) -> np.ndarray:
    """Class index per bone for pose(s) of shape (..., J, 3); returns (..., m) ints."""
    pose = np.asarray(pose, dtype=float)
    if np.isnan(pose).any():
        raise ValueError("pose contains NaN coordinates")
    b = bone_vectors(pose, topo)
    length = np.linalg.norm(b, axis=-1)
    dz = b[..., 2]
    labels = np.where(dz < 0, FORWARD, BACKWARD)
    parallel = (length == 0) | (np.abs(dz) <= cfg.parallel_fraction * length)
    return np.where(parallel, PARALLEL, labels).astype(np.int64)


def one_hot(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_STATUSES):
        raise ValueError("FBI class indices must be 0, 1 or 2")
    return np.eye(NUM_STATUSES)[labels]


def from_one_hot(matrix) -> np.ndarray:
    """Inverse of ``one_hot``; rejects rows that are not exactly one-hot."""
    m = np.asarray(matrix, dtype=float)
    if m.shape[-1] != NUM_STATUSES:
        raise DimensionError("FBI rows must have 3 entries")
    if not (np.all((m == 0) | (m == 1)) and np.all(m.sum(axis=-1) == 1)):
        raise ValueError("FBI rows must be one-hot")
    return m.argmax(axis=-1)


def fbi_accuracy(pred, gt) -> float:
    """Fraction of bones whose predicted class matches the truth.

    ``pred`` may be class indices (..., m) or scores/probabilities
    (..., m, 3); ``gt`` may be indices or one-hot. ``np.argmax`` breaks
    ties toward the lowest index.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if gt.ndim and gt.shape[-1] == NUM_STATUSES and gt.dtype.kind == "f":
        gt = from_one_hot(gt)
    if pred.ndim == gt.ndim + 1:
        if pred.shape[-1] != NUM_STATUSES:
            raise DimensionError("class scores must have 3 entries per bone")
        pred = pred.argmax(axis=-1)
    if pred.shape != gt.shape:
        raise DimensionError(f"bone counts differ: {pred.shape} vs {gt.shape}")
    return float(np.mean(pred == gt))
