"""Two-branch generator: explicit per-joint depth and FBI class probabilities.

Both branches read the (noisy) 2D joints. They share no parameters, so each
can be trained or replaced without touching the other.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import fbi, net
from .loss import Normalizer, fbi_ce_loss, l2_loss
from .skeleton import DEFAULT_TOPOLOGY, Pose2D, SkeletonTopology
from .synth import Dataset
from .training import (DROPOUT_STREAM, SHUFFLE_STREAM, TrainConfig, check_finite, init_seed,
                       minibatches, stream)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoarsePose:
    """2D joints paired with an explicit root-relative depth per joint (mm)."""

    pose2d: Pose2D
    z: np.ndarray

    def __post_init__(self):
        z = np.array(self.z, dtype=float)
        if z.shape != (len(self.pose2d.coords),) or not np.all(np.isfinite(z)):
            raise ValueError("z must be finite with one value per joint")
        object.__setattr__(self, "z", z)


@dataclass
class GeneratorModel:
    coarse_head: net.MlpModel
    fbi_head: net.MlpModel
    norm_2d: Normalizer
    norm_z: Normalizer
    topo: SkeletonTopology = field(default=DEFAULT_TOPOLOGY)
    optim: dict = field(default_factory=dict)

    def copy(self) -> "GeneratorModel":
        return GeneratorModel(self.coarse_head.copy(), self.fbi_head.copy(), self.norm_2d,
                              self.norm_z, self.topo)


def default_specs(topo: SkeletonTopology = DEFAULT_TOPOLOGY, **kw) -> tuple[net.MlpSpec, net.MlpSpec]:
    J, m = topo.num_joints, topo.num_bones
    coarse = net.MlpSpec(2 * J, J, **kw)
    heads = net.MlpSpec(2 * J, 3 * m, output_activation="softmax3", **kw)
    return coarse, heads


def new_generator(specs, norm_2d: Normalizer, norm_z: Normalizer, seed: int,
                  topo: SkeletonTopology = DEFAULT_TOPOLOGY) -> GeneratorModel:
    coarse_spec, fbi_spec = specs
    J, m = topo.num_joints, topo.num_bones
    if (coarse_spec.input_dim, coarse_spec.output_dim) != (2 * J, J):
        raise ValueError(f"coarse head must map {2 * J} -> {J}")
    if (fbi_spec.input_dim, fbi_spec.output_dim) != (2 * J, 3 * m) or fbi_spec.output_activation != "softmax3":
        raise ValueError(f"FBI head must map {2 * J} -> {3 * m} with softmax3 output")
    return GeneratorModel(net.init(coarse_spec, init_seed(seed, 0)), net.init(fbi_spec, init_seed(seed, 1)),
                          norm_2d, norm_z, topo)


def predict_z(model: GeneratorModel, pose2d) -> np.ndarray:
    """Eval-mode depth prediction in mm, shape (N, J), for pixel joints (N, J, 2)."""
    x = model.norm_2d.standardize(pose2d)
    out, _ = net.forward(model.coarse_head, x, "eval")
    return model.norm_z.destandardize(out)


def predict_coarse(model: GeneratorModel, pose2d) -> CoarsePose:
    p = pose2d if isinstance(pose2d, Pose2D) else Pose2D(pose2d)
    return CoarsePose(p, predict_z(model, p.coords[None])[0])


def predict_fbi_probs(model: GeneratorModel, pose2d) -> np.ndarray:
    """Per-bone class probabilities (N, m, 3)."""
    x = model.norm_2d.standardize(pose2d)
    out, _ = net.forward(model.fbi_head, x, "eval")
    return out.reshape(len(x), -1, 3)


def predict_fbi(model: GeneratorModel, pose2d) -> np.ndarray:
    """m x 3 class probabilities for a single 2D pose."""
    p = np.asarray(pose2d, dtype=float)
    return predict_fbi_probs(model, p[None])[0]


def coarse_z_error(model: GeneratorModel, ds: Dataset, noisy: bool = True) -> float:
    """Mean |z - z_gt| in mm over ``ds``."""
    inputs = ds.pose2d_noisy if noisy else ds.pose2d
    return float(np.mean(np.abs(predict_z(model, inputs) - ds.coarse_z_gt)))


def train_generator(dataset: Dataset, specs, train_cfg: TrainConfig,
                    heads: tuple[str, ...] = ("coarse", "fbi"),
                    model: GeneratorModel | None = None):
    """Supervised pre-training of the selected heads on the train split.

    The coarse head minimises plain MSE on standardised depth; the FBI head
    minimises cross-entropy. Returns ``(model, metrics)`` where metrics has one
    dict per epoch.
    """
    train = dataset.train
    if len(train) == 0:
        raise ValueError("training split is empty")
    test = dataset.test
    if model is None:
        model = new_generator(specs, Normalizer.fit(train.pose2d_noisy.reshape(len(train), -1)),
                              Normalizer.fit(train.coarse_z_gt), train_cfg.seed, dataset_topo(dataset))
    else:
        model = model.copy()
    x = model.norm_2d.standardize(train.pose2d_noisy)
    z = model.norm_z.standardize(train.coarse_z_gt)
    labels = train.fbi_gt
    shuffle = stream(train_cfg.seed, SHUFFLE_STREAM)
    drop = {h: stream(train_cfg.seed, DROPOUT_STREAM, i) for i, h in enumerate(("coarse", "fbi"))}
    opt = {
        "coarse": net.OptimState.for_model(model.coarse_head, learning_rate=train_cfg.learning_rate),
        "fbi": net.OptimState.for_model(model.fbi_head, learning_rate=train_cfg.learning_rate),
    }
    metrics = []
    for epoch in range(1, train_cfg.epochs + 1):
        sums = {"coarse": 0.0, "fbi": 0.0}
        for o in opt.values():
            o.learning_rate = train_cfg.epoch_learning_rate(epoch)
        batches = minibatches(shuffle, len(train), train_cfg.batch_size)
        for idx in batches:
            if "coarse" in heads:
                out, cache = net.forward(model.coarse_head, x[idx], "train", drop["coarse"])
                value, grad, _ = l2_loss(out, z[idx])
                check_finite(value, "coarse loss", epoch)
                g, _ = net.backward(model.coarse_head, cache, grad)
                net.update_running_stats(model.coarse_head, cache)
                net.opt_step(model.coarse_head, g, opt["coarse"])
                sums["coarse"] += value
            if "fbi" in heads:
                out, cache = net.forward(model.fbi_head, x[idx], "train", drop["fbi"])
                ce = fbi_ce_loss(out, labels[idx])
                check_finite(ce.loss, "FBI loss", epoch)
                g, _ = net.backward(model.fbi_head, cache, ce.grad_logits, wrt_logits=True)
                net.update_running_stats(model.fbi_head, cache)
                net.opt_step(model.fbi_head, g, opt["fbi"])
                sums["fbi"] += ce.loss
        row = {"epoch": epoch,
               "coarse_loss": sums["coarse"] / len(batches),
               "fbi_loss": sums["fbi"] / len(batches)}
        if len(test):
            row["test_fbi_accuracy"] = fbi.fbi_accuracy(predict_fbi_probs(model, test.pose2d_noisy), test.fbi_gt)
            row["test_z_error_mm"] = coarse_z_error(model, test)
        log.info("generator epoch %d: %s", epoch, row)
        metrics.append(row)
    model.optim = {f"{h}_head": opt[h] for h in heads}
    return model, metrics


def dataset_topo(dataset: Dataset) -> SkeletonTopology:
    if dataset.pose3d_gt.shape[1] != DEFAULT_TOPOLOGY.num_joints:
        raise ValueError("dataset joint count does not match the default topology")
    return DEFAULT_TOPOLOGY
