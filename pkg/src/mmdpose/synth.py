"""Synthetic paired data: forward kinematics, pinhole projection, corruption.

Every sample index derives its own random streams from ``(seed, index)``, so
datasets are reproducible regardless of generation order.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from . import fbi
from .skeleton import DEFAULT_TOPOLOGY, SkeletonTopology, root_relative

NUM_ACTIONS = 15
_POSE_STREAM, _NOISE_STREAM, _SPLIT_STREAM = 0, 1, 2


def load_defaults() -> dict:
    text = resources.files("mmdpose").joinpath("data/synth_defaults.json").read_text()
    return json.loads(text)


class ProjectionError(ValueError):
    def __init__(self, joint: int, depth: float):
        super().__init__(f"joint {joint} lies at or behind the camera plane (depth {depth:.3f} mm)")
        self.joint = joint


@dataclass(frozen=True)
class CameraModel:
    focal_length: float = 1000.0
    principal_point: tuple[float, float] = (500.0, 500.0)
    subject_distance: float = 5000.0

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ValueError("focal_length must be positive")
        if not self.subject_distance > 0:
            raise ValueError("subject_distance must be positive")
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @classmethod
    def default(cls) -> "CameraModel":
        c = load_defaults()["camera"]
        return cls(c["focal_length"], tuple(c["principal_point"]), c["subject_distance"])


def _ranges_array(ranges: dict, topo: SkeletonTopology) -> np.ndarray:
    out = np.zeros((topo.num_joints, 3, 2))
    for name, r in ranges.items():
        out[topo.joint_names.index(name)] = r
    return out


@dataclass
class SynthConfig:
    bone_lengths: dict = field(default_factory=dict)
    joint_angle_ranges: dict = field(default_factory=dict)
    noise_2d_std: float = 3.0
    coarse_z_noise_std: float = 30.0
    fbi_flip_prob: float = 0.05
    seed: int = 0
    count: int = 20000
    train_fraction: float = 0.8
    rest_directions: dict = field(default_factory=dict)
    action_presets: list = field(default_factory=list)
    out_of_domain_preset: dict | None = None
    parallel_fraction: float = 0.15

    def __post_init__(self):
        if self.noise_2d_std < 0 or self.coarse_z_noise_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0.0 <= self.fbi_flip_prob <= 1.0:
            raise ValueError("fbi_flip_prob must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        for name, r in self.joint_angle_ranges.items():
            r = np.asarray(r, dtype=float)
            if r.shape != (3, 2) or np.any(r[:, 0] > r[:, 1]):
                raise ValueError(f"angle ranges for {name!r} must be three [min, max] pairs with min <= max")

    @classmethod
    def default(cls, **overrides) -> "SynthConfig":
        d = load_defaults()
        kw = dict(
            bone_lengths=d["bone_lengths"],
            joint_angle_ranges=d["joint_angle_ranges"],
            rest_directions=d["rest_directions"],
            action_presets=d["action_presets"],
            out_of_domain_preset=d["out_of_domain_preset"],
            noise_2d_std=d["noise_2d_std"],
            coarse_z_noise_std=d["coarse_z_noise_std"],
            fbi_flip_prob=d["fbi_flip_prob"],
        )
        kw.update(overrides)
        return cls(**kw)

    def to_json(self) -> dict:
        return {
            "bone_lengths": self.bone_lengths,
            "joint_angle_ranges": self.joint_angle_ranges,
            "noise_2d_std": self.noise_2d_std,
            "coarse_z_noise_std": self.coarse_z_noise_std,
            "fbi_flip_prob": self.fbi_flip_prob,
            "seed": self.seed,
            "count": self.count,
            "train_fraction": self.train_fraction,
            "rest_directions": self.rest_directions,
            "action_presets": self.action_presets,
            "out_of_domain_preset": self.out_of_domain_preset,
            "parallel_fraction": self.parallel_fraction,
        }

    def angle_ranges(self, action: int | None = None, topo: SkeletonTopology = DEFAULT_TOPOLOGY,
                     out_of_domain: bool = False) -> np.ndarray:
        """(J, 3, 2) angle ranges for one action preset (or the base ranges)."""
        r = _ranges_array(self.joint_angle_ranges, topo)
        preset = None
        if out_of_domain:
            preset = self.out_of_domain_preset
        elif action is not None and self.action_presets:
            preset = self.action_presets[action]
        if preset:
            for name, xr in preset.get("x_ranges", {}).items():
                r[topo.joint_names.index(name), 0] = xr
        return r

    def lengths_array(self, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
        """Per-joint length of the link ending at that joint (root entry is 0)."""
        out = np.zeros(topo.num_joints)
        for name, length in self.bone_lengths.items():
            out[topo.joint_names.index(name)] = length
        return out

    def reference_link_lengths(self, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
        lengths = self.lengths_array(topo)
        return np.array([lengths[c] for _, c in topo.links])

    def rest_array(self, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
        out = np.zeros((topo.num_joints, 3))
        for name, d in self.rest_directions.items():
            d = np.asarray(d, dtype=float)
            out[topo.joint_names.index(name)] = d / np.linalg.norm(d)
        return out


def _rotations(angles: np.ndarray) -> np.ndarray:
    """Rz(c) @ Ry(b) @ Rx(a) for angles (..., 3) -> (..., 3, 3)."""
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    one, zero = np.ones_like(a), np.zeros_like(a)
    rx = np.stack([one, zero, zero, zero, ca, -sa, zero, sa, ca], -1).reshape(a.shape + (3, 3))
    ry = np.stack([cb, zero, sb, zero, one, zero, -sb, zero, cb], -1).reshape(a.shape + (3, 3))
    rz = np.stack([cc, -sc, zero, sc, cc, zero, zero, zero, one], -1).reshape(a.shape + (3, 3))
    return rz @ ry @ rx


def forward_kinematics(angles, cfg: SynthConfig, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> np.ndarray:
    """Joint positions (..., J, 3) from per-joint local angles (..., J, 3), root at origin.

    The root angles set the global body orientation; every other joint's
    angles rotate the link that ends at it, relative to its parent's frame.
    """
    angles = np.asarray(angles, dtype=float)
    local = _rotations(angles)
    offsets = cfg.rest_array(topo) * cfg.lengths_array(topo)[:, None]
    frames = np.empty_like(local)
    pos = np.zeros(angles.shape)
    for j in topo.topological_order():
        p = topo.parent_index[j]
        if p < 0:
            frames[..., j, :, :] = local[..., j, :, :]
            continue
        frames[..., j, :, :] = frames[..., p, :, :] @ local[..., j, :, :]
        pos[..., j, :] = pos[..., p, :] + frames[..., j, :, :] @ offsets[j]
    return pos


def _draw_angles(ranges: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo, hi = ranges[..., 0], ranges[..., 1]
    return lo + (hi - lo) * rng.random(lo.shape)


def sample_rng(seed: int, index: int, stream: int = _POSE_STREAM) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index), stream])


def sample_pose(cfg: SynthConfig, rng: np.random.Generator, action: int | None = None,
                topo: SkeletonTopology = DEFAULT_TOPOLOGY, out_of_domain: bool = False) -> np.ndarray:
    """One root-relative pose (J, 3) in mm."""
    angles = _draw_angles(cfg.angle_ranges(action, topo, out_of_domain), rng)
    return root_relative(forward_kinematics(angles, cfg, topo), topo)


def project(pose, cam: CameraModel) -> np.ndarray:
    """Pinhole projection of root-relative pose(s) placed at ``subject_distance``.

    Returns pixel coordinates (..., J, 2).
    """
    pose = np.asarray(pose, dtype=float)
    depth = pose[..., 2] + cam.subject_distance
    bad = np.argwhere(~(depth > 0))
    if bad.size:
        idx = tuple(bad[0])
        raise ProjectionError(int(idx[-1]), float(depth[idx]))
    u0, v0 = cam.principal_point
    u = cam.focal_length * pose[..., 0] / depth + u0
    v = cam.focal_length * pose[..., 1] / depth + v0
    return np.stack([u, v], axis=-1)


def unproject(pose2d, z, cam: CameraModel) -> np.ndarray:
    """Inverse of ``project`` given root-relative depths z (..., J); returns (..., J, 3)."""
    pose2d = np.asarray(pose2d, dtype=float)
    z = np.asarray(z, dtype=float)
    depth = z + cam.subject_distance
    bad = np.argwhere(~(depth > 0))
    if bad.size:
        idx = tuple(bad[0])
        raise ProjectionError(int(idx[-1]), float(depth[idx]))
    u0, v0 = cam.principal_point
    x = (pose2d[..., 0] - u0) * depth / cam.focal_length
    y = (pose2d[..., 1] - v0) * depth / cam.focal_length
    return np.stack([x, y, z], axis=-1)


@dataclass(frozen=True)
class Sample:
    id: int
    action: int
    pose3d_gt: np.ndarray
    pose2d: np.ndarray
    pose2d_noisy: np.ndarray
    coarse_z_gt: np.ndarray
    coarse_z_noisy: np.ndarray
    fbi_gt: np.ndarray
    fbi_noisy: np.ndarray


def corrupt(sample: Sample, cfg: SynthConfig, rng: np.random.Generator) -> Sample:
    """Noisy copies of the 2D joints, coarse depth and FBI labels.

    Each FBI row is resampled uniformly over the three classes with
    probability ``fbi_flip_prob`` (the draw may return the original class).
    """
    pose2d = np.asarray(sample.pose2d, dtype=float)
    z = np.asarray(sample.coarse_z_gt, dtype=float)
    labels = np.asarray(sample.fbi_gt, dtype=np.int64)
    noise2d = rng.normal(0.0, 1.0, pose2d.shape) * cfg.noise_2d_std
    noisez = rng.normal(0.0, 1.0, z.shape) * cfg.coarse_z_noise_std
    flip = rng.random(labels.shape) < cfg.fbi_flip_prob
    resampled = rng.integers(0, fbi.NUM_STATUSES, labels.shape)
    return replace(
        sample,
        pose2d_noisy=pose2d + noise2d,
        coarse_z_noisy=z + noisez,
        fbi_noisy=np.where(flip, resampled, labels),
    )


@dataclass
class Dataset:
    """Column-oriented sample store with a fixed train/test split."""

    ids: np.ndarray
    action: np.ndarray
    pose3d_gt: np.ndarray
    pose2d: np.ndarray
    pose2d_noisy: np.ndarray
    coarse_z_gt: np.ndarray
    coarse_z_noisy: np.ndarray
    fbi_gt: np.ndarray
    fbi_noisy: np.ndarray
    is_train: np.ndarray

    FIELDS = ("ids", "action", "pose3d_gt", "pose2d", "pose2d_noisy", "coarse_z_gt",
              "coarse_z_noisy", "fbi_gt", "fbi_noisy", "is_train")

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> Sample:
        return Sample(int(self.ids[i]), int(self.action[i]), self.pose3d_gt[i], self.pose2d[i],
                      self.pose2d_noisy[i], self.coarse_z_gt[i], self.coarse_z_noisy[i],
                      self.fbi_gt[i], self.fbi_noisy[i])

    def subset(self, mask_or_index) -> "Dataset":
        return Dataset(**{f: getattr(self, f)[mask_or_index] for f in self.FIELDS})

    @property
    def train(self) -> "Dataset":
        return self.subset(self.is_train)

    @property
    def test(self) -> "Dataset":
        return self.subset(~self.is_train)


def _build(poses: np.ndarray, actions: np.ndarray, cfg: SynthConfig, cam: CameraModel,
           topo: SkeletonTopology, noise_index_offset: int = 0) -> Dataset:
    n = len(poses)
    pose2d = project(poses, cam)
    z = poses[..., 2].copy()
    labels = fbi.label_fbi(poses, topo, fbi.FbiLabelConfig(cfg.parallel_fraction))
    noisy2d = np.empty_like(pose2d)
    noisyz = np.empty_like(z)
    noisyf = np.empty_like(labels)
    for i in range(n):
        s = Sample(i, int(actions[i]), poses[i], pose2d[i], pose2d[i], z[i], z[i], labels[i], labels[i])
        c = corrupt(s, cfg, sample_rng(cfg.seed, noise_index_offset + i, _NOISE_STREAM))
        noisy2d[i], noisyz[i], noisyf[i] = c.pose2d_noisy, c.coarse_z_noisy, c.fbi_noisy
    return Dataset(np.arange(n), actions.astype(np.int64), poses, pose2d, noisy2d, z, noisyz,
                   labels, noisyf, np.zeros(n, dtype=bool))


def make_dataset(cfg: SynthConfig, cam: CameraModel | None = None,
                 topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> Dataset:
    """``cfg.count`` samples; action tags cycle over the presets; split by seed."""
    if cfg.count < 2:
        raise ValueError("count must be at least 2")
    cam = cam or CameraModel.default()
    n_actions = max(len(cfg.action_presets), 1)
    actions = np.arange(cfg.count) % n_actions
    ranges = np.stack([cfg.angle_ranges(a if cfg.action_presets else None, topo) for a in range(n_actions)])
    angles = np.empty((cfg.count, topo.num_joints, 3))
    for i in range(cfg.count):
        angles[i] = _draw_angles(ranges[actions[i]], sample_rng(cfg.seed, i))
    poses = root_relative(forward_kinematics(angles, cfg, topo), topo)
    ds = _build(poses, actions, cfg, cam, topo)
    n_train = int(round(cfg.count * cfg.train_fraction))
    n_train = min(max(n_train, 1), cfg.count - 1)
    perm = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, _SPLIT_STREAM, 0]).permutation(cfg.count)
    ds.is_train[perm[:n_train]] = True
    return ds


def make_out_of_domain(cfg: SynthConfig, cam: CameraModel | None = None, count: int = 1000,
                       topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> Dataset:
    """Evaluation poses drawn from the out-of-domain preset (all marked test)."""
    if cfg.out_of_domain_preset is None:
        raise ValueError("config has no out-of-domain preset")
    cam = cam or CameraModel.default()
    ranges = cfg.angle_ranges(topo=topo, out_of_domain=True)
    offset = 1 << 40
    angles = np.stack([_draw_angles(ranges, sample_rng(cfg.seed, offset + i)) for i in range(count)])
    poses = root_relative(forward_kinematics(angles, cfg, topo), topo)
    return _build(poses, np.full(count, -1), cfg, cam, topo, noise_index_offset=offset)


def clean_copy(cfg: SynthConfig) -> SynthConfig:
    """Same config with every corruption switched off."""
    return replace(copy.deepcopy(cfg), noise_2d_std=0.0, coarse_z_noise_std=0.0, fbi_flip_prob=0.0)
