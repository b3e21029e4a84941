"""Final 3D pose regression from 2D joints plus depth channels.

``final`` mode consumes standardised 2D joints, standardised coarse depth and
one-hot FBI labels (2J + J + 3m inputs); ``base`` mode sees the 2D joints
only. The output is a standardised 3J vector, returned to callers as a
root-relative pose in mm.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fbi, net
from .generator import GeneratorModel, predict_fbi_probs, predict_z
from .loss import (Normalizer, WeightedLossConfig, alpha_from_mean, l0, l2_loss, pose_loss)
from .skeleton import DEFAULT_TOPOLOGY, SkeletonTopology, mpjpe, root_relative
from .synth import NUM_ACTIONS, Dataset
from .training import (DROPOUT_STREAM, SHUFFLE_STREAM, TrainConfig, check_finite, init_seed,
                       minibatches, stream)

log = logging.getLogger(__name__)

MODES = ("base", "final")
SOURCES = ("corrupted", "generator")


@dataclass
class LossPolicy:
    """How the regression loss is configured during training.

    ``alpha_policy`` is "per_epoch" (re-estimated from the current model at
    the start of every epoch) or "fixed" (``alpha`` is used throughout).
    ``l2_path`` switches to the dedicated plain-MSE code path.
    """

    epsilon: float = 0.001
    alpha_policy: str = "per_epoch"
    alpha: float = 0.5
    l2_path: bool = False

    def __post_init__(self):
        if self.alpha_policy not in ("per_epoch", "fixed"):
            raise ValueError("alpha_policy must be 'per_epoch' or 'fixed'")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RefinerModel:
    net: net.MlpModel
    input_mode: str
    norm_2d: Normalizer
    norm_z: Normalizer
    norm_3d: Normalizer
    input_source: str = "corrupted"
    topo: SkeletonTopology = field(default=DEFAULT_TOPOLOGY)
    optim: net.OptimState | None = None

    def __post_init__(self):
        if self.input_mode not in MODES:
            raise ValueError(f"input_mode must be one of {MODES}")
        if self.input_source not in SOURCES:
            raise ValueError(f"input_source must be one of {SOURCES}")
        if self.net.spec.input_dim != input_dim(self.input_mode, self.topo):
            raise ValueError("network input size does not match the input mode")

    def copy(self) -> "RefinerModel":
        return RefinerModel(self.net.copy(), self.input_mode, self.norm_2d, self.norm_z, self.norm_3d,
                            self.input_source, self.topo)


def input_dim(mode: str, topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> int:
    J, m = topo.num_joints, topo.num_bones
    return 2 * J if mode == "base" else 2 * J + J + 3 * m


def refiner_spec(mode: str, topo: SkeletonTopology = DEFAULT_TOPOLOGY, **kw) -> net.MlpSpec:
    return net.MlpSpec(input_dim(mode, topo), 3 * topo.num_joints, **kw)


def new_refiner_net(spec: net.MlpSpec, seed: int) -> net.MlpModel:
    """He-initialised hidden layers with a zero output layer.

    The untrained refiner then predicts the training-mean pose, so the first
    alpha estimate sees L0 near 1 instead of the much larger error of a
    random projection, which the exponential weighting cannot recover from.
    """
    model = net.init(spec, seed)
    model.params["out.W"][:] = 0.0
    return model


def build_inputs(model: RefinerModel, pose2d, z=None, fbi_labels=None) -> np.ndarray:
    """Network input rows for pixel joints (N, J, 2), depths (N, J) in mm and FBI indices (N, m)."""
    parts = [model.norm_2d.standardize(pose2d)]
    if model.input_mode == "final":
        if z is None or fbi_labels is None:
            raise ValueError("final mode needs coarse depth and FBI inputs")
        labels = np.asarray(fbi_labels)
        parts.append(model.norm_z.standardize(z))
        parts.append(fbi.one_hot(labels).reshape(len(labels), -1))
    elif z is not None or fbi_labels is not None:
        raise ValueError("base mode takes 2D joints only")
    return np.concatenate(parts, axis=1)


def channels(ds: Dataset, mode: str, source: str = "corrupted", generator: GeneratorModel | None = None):
    """(pose2d, z, fbi) inputs for ``ds`` as the refiner will consume them."""
    if mode == "base":
        return ds.pose2d_noisy, None, None
    if source == "corrupted":
        return ds.pose2d_noisy, ds.coarse_z_noisy, ds.fbi_noisy
    if generator is None:
        raise ValueError("generator-fed inputs need a generator")
    z = predict_z(generator, ds.pose2d_noisy)
    labels = predict_fbi_probs(generator, ds.pose2d_noisy).argmax(axis=-1)
    return ds.pose2d_noisy, z, labels


def _to_poses(model: RefinerModel, out_std) -> np.ndarray:
    poses = model.norm_3d.destandardize(out_std).reshape(len(out_std), -1, 3)
    return root_relative(poses, model.topo)


def predict_poses(model: RefinerModel, inputs, batch_size: int = 4096) -> np.ndarray:
    """Eval-mode prediction for prepared input rows; (N, J, 3) mm."""
    outs = [net.forward(model.net, inputs[i:i + batch_size], "eval")[0]
            for i in range(0, len(inputs), batch_size)]
    return _to_poses(model, np.concatenate(outs) if outs else np.zeros((0, model.net.spec.output_dim)))


def refine(model: RefinerModel, pose2d, coarse=None, fbi_labels=None) -> np.ndarray:
    """Single-pose inference; returns a root-relative (J, 3) pose in mm."""
    z = None if coarse is None else np.asarray(getattr(coarse, "z", coarse), dtype=float)[None]
    labels = None if fbi_labels is None else np.asarray(fbi_labels)[None]
    x = build_inputs(model, np.asarray(pose2d, dtype=float)[None], z, labels)
    return predict_poses(model, x)[0]


def predict_dataset(model: RefinerModel, ds: Dataset, generator: GeneratorModel | None = None) -> np.ndarray:
    return predict_poses(model, build_inputs(model, *channels(ds, model.input_mode, model.input_source, generator)))


def train_refiner(dataset: Dataset, mode: str, policy: LossPolicy, train_cfg: TrainConfig,
                  spec_kw: dict | None = None, input_source: str = "corrupted",
                  generator: GeneratorModel | None = None, model: RefinerModel | None = None):
    """Train a refiner on the train split; returns ``(model, metrics)``.

    A given ``model`` is copied and trained further with its own
    normalisers; its mode and input source take precedence over the
    arguments.

    Metrics hold, per epoch, the alpha used, the mean training batch loss, the
    number of clipped gradient steps and train/test MPJPE measured after the
    epoch.
    """
    train, test = dataset.train, dataset.test
    if len(train) == 0:
        raise ValueError("training split is empty")
    topo = DEFAULT_TOPOLOGY
    n = len(train)
    if model is None:
        model = RefinerModel(
            new_refiner_net(refiner_spec(mode, topo, **(spec_kw or {})), init_seed(train_cfg.seed, 2)),
            mode,
            Normalizer.fit(train.pose2d_noisy.reshape(n, -1)),
            Normalizer.fit(train.coarse_z_gt),
            Normalizer.fit(train.pose3d_gt.reshape(n, -1)),
            input_source,
            topo,
        )
    else:
        model = model.copy()
        mode, input_source, topo = model.input_mode, model.input_source, model.topo
    x = build_inputs(model, *channels(train, mode, input_source, generator))
    y = model.norm_3d.standardize(train.pose3d_gt)
    x_test = build_inputs(model, *channels(test, mode, input_source, generator)) if len(test) else None
    shuffle = stream(train_cfg.seed, SHUFFLE_STREAM, 2)
    drop = stream(train_cfg.seed, DROPOUT_STREAM, 2)
    opt = net.OptimState.for_model(model.net, learning_rate=train_cfg.learning_rate)

    def eval_train():
        out = np.concatenate([net.forward(model.net, x[i:i + 4096], "eval")[0] for i in range(0, n, 4096)])
        return float(np.mean(l0(out, y))), float(np.mean(mpjpe(_to_poses(model, out), train.pose3d_gt, topo)))

    mean_l0, _ = eval_train()
    metrics = []
    for epoch in range(1, train_cfg.epochs + 1):
        est = alpha_from_mean(mean_l0)
        alpha = est.alpha if policy.alpha_policy == "per_epoch" else policy.alpha
        cfg = WeightedLossConfig(policy.epsilon, alpha)
        opt.learning_rate = train_cfg.epoch_learning_rate(epoch)
        total, clipped = 0.0, 0
        batches = minibatches(shuffle, n, train_cfg.batch_size)
        for idx in batches:
            out, cache = net.forward(model.net, x[idx], "train", drop)
            if policy.l2_path:
                value, grad, _ = l2_loss(out, y[idx])
            else:
                value, grad, _ = pose_loss(out, y[idx], cfg)
            check_finite(value, "refiner loss", epoch)
            g, _ = net.backward(model.net, cache, grad)
            # a handful of exponentially weighted samples can dwarf the rest of the batch
            g, norm = net.clip_grad_norm(g, train_cfg.max_grad_norm)
            clipped += int(train_cfg.max_grad_norm is not None and norm > train_cfg.max_grad_norm)
            net.update_running_stats(model.net, cache)
            net.opt_step(model.net, g, opt)
            total += value
        mean_l0, train_mpjpe = eval_train()
        row = {"epoch": epoch, "alpha": alpha, "alpha_clamped": int(est.clamped),
               "train_loss": total / len(batches), "clipped_steps": clipped,
               "train_l0": mean_l0, "train_mpjpe": train_mpjpe,
               "test_mpjpe": (float(np.mean(mpjpe(predict_poses(model, x_test), test.pose3d_gt, topo)))
                              if x_test is not None else float("nan"))}
        log.info("refiner[%s] epoch %d: %s", mode, epoch, row)
        metrics.append(row)
    model.optim = opt
    return model, metrics


@dataclass
class EvalTable:
    per_action: np.ndarray
    counts: np.ndarray
    average: float
    missing: list

    def row(self) -> list[float]:
        return [float(v) for v in self.per_action] + [self.average]


def evaluate(predictions, dataset: Dataset, topo: SkeletonTopology = DEFAULT_TOPOLOGY,
             num_actions: int = NUM_ACTIONS) -> EvalTable:
    """Per-action MPJPE table for predicted poses aligned with ``dataset`` rows.

    ``predictions`` is an (N, J, 3) array. Missing action bins are reported as
    NaN and listed in ``missing``; the average is weighted by sample count.
    """
    errors = mpjpe(predictions, dataset.pose3d_gt, topo)
    per_action = np.full(num_actions, np.nan)
    counts = np.zeros(num_actions, dtype=np.int64)
    for a in range(num_actions):
        sel = dataset.action == a
        counts[a] = int(np.sum(sel))
        if counts[a]:
            per_action[a] = float(np.mean(errors[sel]))
    missing = [a for a in range(num_actions) if counts[a] == 0]
    if missing:
        log.warning("no test samples for action bins %s", [f"A{a + 1}" for a in missing])
    present = counts > 0
    average = float(np.sum(per_action[present] * counts[present]) / np.sum(counts)) if np.any(present) else float("nan")
    return EvalTable(per_action, counts, average, missing)


def evaluate_model(model: RefinerModel, dataset: Dataset, topo: SkeletonTopology = DEFAULT_TOPOLOGY,
                   generator: GeneratorModel | None = None) -> EvalTable:
    return evaluate(predict_dataset(model, dataset, generator), dataset, topo)
