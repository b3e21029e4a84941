"""Skeleton topology, pose containers and the MPJPE metric.

Camera frame convention: x right, y down, z pointing away from the camera.
All 3D coordinates are millimetres.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

JOINT_NAMES = (
    "pelvis",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
)
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)

# limbs first, then torso chain, then the clavicles
FBI_BONES = (
    (1, 2), (2, 3), (4, 5), (5, 6),
    (14, 15), (15, 16), (11, 12), (12, 13),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (8, 14),
)


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple[str, ...] = JOINT_NAMES
    parent_index: tuple[int, ...] = PARENTS
    fbi_bones: tuple[tuple[int, int], ...] = FBI_BONES
    root_joint: int = 0

    def __post_init__(self):
        J = len(self.joint_names)
        if len(self.parent_index) != J:
            raise ValueError("parent_index length must equal number of joints")
        if not 0 <= self.root_joint < J or self.parent_index[self.root_joint] != -1:
            raise ValueError("root joint must exist and have no parent")
        for j, p in enumerate(self.parent_index):
            if j != self.root_joint and not 0 <= p < J:
                raise ValueError(f"joint {j} has invalid parent {p}")
        # every joint must reach the root without cycles
        for j in range(J):
            seen, k = set(), j
            while k != self.root_joint:
                if k in seen or k == -1:
                    raise ValueError(f"joint {j} is not connected to the root")
                seen.add(k)
                k = self.parent_index[k]
        for p, c in self.fbi_bones:
            if p == c or not (0 <= p < J and 0 <= c < J):
                raise ValueError(f"invalid FBI bone ({p}, {c})")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_bones(self) -> int:
        return len(self.fbi_bones)

    @property
    def links(self) -> list[tuple[int, int]]:
        """All (parent, child) skeleton links, in child order."""
        return [(p, j) for j, p in enumerate(self.parent_index) if p >= 0]

    def topological_order(self) -> list[int]:
        order, frontier = [], [self.root_joint]
        while frontier:
            j = frontier.pop(0)
            order.append(j)
            frontier.extend(c for c, p in enumerate(self.parent_index) if p == j)
        return order

    def to_json(self) -> dict:
        return {
            "joints": list(self.joint_names),
            "parents": list(self.parent_index),
            "fbi_bones": [list(b) for b in self.fbi_bones],
            "root": self.root_joint,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SkeletonTopology":
        return cls(
            joint_names=tuple(obj["joints"]),
            parent_index=tuple(int(p) if p is not None else -1 for p in obj["parents"]),
            fbi_bones=tuple((int(p), int(c)) for p, c in obj["fbi_bones"]),
            root_joint=int(obj["root"]),
        )

    @classmethod
    def load(cls, path) -> "SkeletonTopology":
        return cls.from_json(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


DEFAULT_TOPOLOGY = SkeletonTopology()


@dataclass(frozen=True)
class Pose3D:
    """J x 3 joint positions in camera space (mm)."""

    coords: np.ndarray
    root_relative: bool = field(default=False)

    def __post_init__(self):
        c = np.array(self.coords, dtype=float)
        if c.ndim != 2 or c.shape[1] != 3:
            raise DimensionError(f"expected (J, 3) coordinates, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("pose coordinates must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    def __array__(self, dtype=None, copy=None):
        return self.coords if dtype is None else self.coords.astype(dtype)


@dataclass(frozen=True)
class Pose2D:
    """J x 2 image-plane joint positions (pixels)."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=float)
        if c.ndim != 2 or c.shape[1] != 2:
            raise DimensionError(f"expected (J, 2) coordinates, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("pose coordinates must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    def __array__(self, dtype=None, copy=None):
        return self.coords if dtype is None else self.coords.astype(dtype)


def root_relative(pose, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
    """Translate pose(s) of shape (..., J, 3) so the root joint sits at the origin."""
    p = np.asarray(pose, dtype=float)
    out = p - p[..., topo.root_joint : topo.root_joint + 1, :]
    # exact zero even when the subtraction would leave -0.0
    out[..., topo.root_joint, :] = 0.0
    return out


def per_joint_error(pred, gt, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise DimensionError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    if pred.shape[-1] != 3:
        raise DimensionError("poses must have 3 coordinates per joint")
    return np.linalg.norm(root_relative(pred, topo) - root_relative(gt, topo), axis=-1)


def mpjpe(pred, gt, topo: SkeletonTopology = DEFAULT_TOPOLOGY):
    """Mean per-joint position error in mm after root alignment.

    Accepts single poses (J, 3) or batches (N, J, 3); a batch returns one
    value per pose.
    """
    return per_joint_error(pred, gt, topo).mean(axis=-1)


def bone_vector(pose, topo: SkeletonTopology, i: int) -> np.ndarray:
    if not 0 <= i < topo.num_bones:
        raise IndexError(f"bone index {i} out of range [0, {topo.num_bones})")
    p, c = topo.fbi_bones[i]
    pose = np.asarray(pose, dtype=float)
    return pose[..., c, :] - pose[..., p, :]


def bone_vectors(pose, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
    """All FBI bone vectors, shape (..., m, 3)."""
    pose = np.asarray(pose, dtype=float)
    parents = [p for p, _ in topo.fbi_bones]
    children = [c for _, c in topo.fbi_bones]
    return pose[..., children, :] - pose[..., parents, :]


def link_lengths(pose, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
    """Lengths of every parent-child link, shape (..., J - 1)."""
    pose = np.asarray(pose, dtype=float)
    links = topo.links
    parents = [p for p, _ in links]
    children = [c for _, c in links]
    return np.linalg.norm(pose[..., children, :] - pose[..., parents, :], axis=-1)
