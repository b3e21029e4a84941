"""Conditional adversarial fine-tuning of the coarse-depth head.

The discriminator scores a (2D pose, depth) pair, both standardised and
concatenated, with a single logit. Objectives are the logistic GAN losses in
non-saturating form.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import net
from .generator import GeneratorModel, predict_z
from .loss import l2_loss
from .skeleton import DEFAULT_TOPOLOGY, SkeletonTopology, link_lengths
from .synth import CameraModel, Dataset, unproject
from .training import (AUX_STREAM, DROPOUT_STREAM, SHUFFLE_STREAM, TrainingDiverged, check_finite,
                       init_seed, minibatches, stream)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "d_loss", "d_acc", "g_sup", "g_adv", "bone_dev")


@dataclass
class Discriminator:
    net: net.MlpModel
    optim: net.OptimState | None = None

    def copy(self) -> "Discriminator":
        return Discriminator(self.net.copy())


@dataclass
class AdvConfig:
    lambda_adv: float = 0.1
    d_steps_per_g_step: int = 3
    epochs: int = 8
    generator_learning_rate: float = 1e-4
    discriminator_learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    hidden_dim: int = 256
    num_residual_blocks: int = 2
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.d_steps_per_g_step < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("d_steps_per_g_step >= 1, epochs >= 0, batch_size >= 1 required")

    def to_json(self) -> dict:
        return asdict(self)


def discriminator_spec(topo: SkeletonTopology = DEFAULT_TOPOLOGY, hidden_dim: int = 256,
                       num_residual_blocks: int = 2) -> net.MlpSpec:
    # no batch statistics: real and fake batches are scored separately
    return net.MlpSpec(3 * topo.num_joints, 1, hidden_dim, num_residual_blocks,
                       use_batch_stats_norm=False, dropout_rate=0.0)


def new_discriminator(seed: int, topo: SkeletonTopology = DEFAULT_TOPOLOGY, **kw) -> Discriminator:
    return Discriminator(net.init(discriminator_spec(topo, **kw), seed))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logits(d: Discriminator, pairs):
    out, cache = net.forward(d.net, pairs, "train")
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("discriminator produced non-finite logits")
    return out[:, 0], cache


def _backward(d: Discriminator, cache, grad_logits):
    return net.backward(d.net, cache, grad_logits[:, None])


@dataclass
class DiscriminatorLoss:
    loss: float
    grads: dict
    logits_real: np.ndarray
    logits_fake: np.ndarray

    @property
    def accuracy(self) -> float:
        hits = np.sum(self.logits_real > 0) + np.sum(self.logits_fake < 0)
        return float(hits / (len(self.logits_real) + len(self.logits_fake)))


def bce_from_logits(logit_real, logit_fake) -> float:
    """-log sigmoid(real) - log(1 - sigmoid(fake)), averaged over each batch."""
    return float(np.mean(_softplus(-np.asarray(logit_real))) + np.mean(_softplus(np.asarray(logit_fake))))


def d_loss(d: Discriminator, real_pair, fake_pair) -> DiscriminatorLoss:
    lr, cr = _logits(d, real_pair)
    lf, cf = _logits(d, fake_pair)
    loss = bce_from_logits(lr, lf)
    gr, _ = _backward(d, cr, (_sigmoid(lr) - 1.0) / len(lr))
    gf, _ = _backward(d, cf, _sigmoid(lf) / len(lf))
    return DiscriminatorLoss(loss, {k: gr[k] + gf[k] for k in gr}, lr, lf)


def g_adv_loss(d: Discriminator, fake_pair):
    """Non-saturating generator loss ``mean(-log sigmoid(D(fake)))``.

    Returns ``(loss, gradient w.r.t. fake_pair)``; the discriminator is only
    read.
    """
    lf, cf = _logits(d, fake_pair)
    loss = float(np.mean(_softplus(-lf)))
    _, dx = _backward(d, cf, (_sigmoid(lf) - 1.0) / len(lf))
    return loss, dx


def bone_plausibility(pose2d, z, cam: CameraModel, reference_lengths,
                      topo: SkeletonTopology = DEFAULT_TOPOLOGY):
    """Mean absolute bone-length deviation (mm) of a lifted coarse pose.

    (u, v, z) is back-projected through ``cam`` and every skeleton link is
    compared to ``reference_lengths``. Batched inputs give one value per pose.
    """
    lifted = unproject(pose2d, z, cam)
    return np.mean(np.abs(link_lengths(lifted, topo) - np.asarray(reference_lengths)), axis=-1)


def _make_discriminator(g: GeneratorModel, adv_cfg: AdvConfig) -> Discriminator:
    return new_discriminator(init_seed(adv_cfg.seed, 7), g.topo, hidden_dim=adv_cfg.hidden_dim,
                             num_residual_blocks=adv_cfg.num_residual_blocks)


def _pairs(x2d_std, z_std):
    return np.concatenate([x2d_std, z_std], axis=1)


def _snapshot(g: GeneratorModel, d: Discriminator | None):
    return g.copy(), d.copy() if d is not None else None


def finetune(generator: GeneratorModel, dataset: Dataset, adv_cfg: AdvConfig, cam: CameraModel | None = None,
             reference_lengths=None, eval_set: Dataset | None = None, adversarial: bool = True):
    """Alternate discriminator and generator updates on the train split.

    Each minibatch runs ``d_steps_per_g_step`` discriminator steps (real =
    ground-truth depth, fake = current generator depth, both paired with the
    same noisy 2D input) and then one generator step on
    ``MSE + lambda_adv * adversarial loss``. When ``ema_decay > 0`` the
    returned coarse head is the exponential moving average of the generator
    weights over all steps. With ``adversarial=False`` the
    discriminator is skipped entirely (supervised-only fine-tuning); the
    generator sees identical batches and dropout draws either way.

    Returns ``(generator, discriminator, metrics)``.
    """
    train = dataset.train
    if len(train) == 0:
        raise ValueError("training split is empty")
    g = generator.copy()
    d = _make_discriminator(g, adv_cfg) if adversarial else None
    x = g.norm_2d.standardize(train.pose2d_noisy)
    z_real = g.norm_z.standardize(train.coarse_z_gt)
    shuffle = stream(adv_cfg.seed, SHUFFLE_STREAM, 1)
    drop = stream(adv_cfg.seed, DROPOUT_STREAM, 7)
    opt_g = net.OptimState.for_model(g.coarse_head, learning_rate=adv_cfg.generator_learning_rate)
    opt_d = net.OptimState.for_model(d.net, learning_rate=adv_cfg.discriminator_learning_rate) if d else None
    evaluation = eval_set if eval_set is not None else dataset.test
    metrics = []
    live = g.coarse_head
    average = live.copy() if adv_cfg.ema_decay > 0 else None
    last_good = _snapshot(g, d)
    for epoch in range(1, adv_cfg.epochs + 1):
        sums = dict(d_loss=0.0, d_acc=0.0, g_sup=0.0, g_adv=0.0)
        batches = minibatches(shuffle, len(train), adv_cfg.batch_size)
        try:
            for idx in batches:
                out, cache = net.forward(live, x[idx], "train", drop)
                real = _pairs(x[idx], z_real[idx])
                fake = _pairs(x[idx], out)
                if d is not None:
                    for _ in range(adv_cfg.d_steps_per_g_step):
                        dl = d_loss(d, real, fake)
                        check_finite(dl.loss, "discriminator loss", epoch, last_good)
                        net.opt_step(d.net, dl.grads, opt_d)
                    sums["d_loss"] += dl.loss
                    sums["d_acc"] += dl.accuracy
                sup, grad, _ = l2_loss(out, z_real[idx])
                check_finite(sup, "supervised loss", epoch, last_good)
                if d is not None:
                    adv, dx = g_adv_loss(d, fake)
                    check_finite(adv, "adversarial loss", epoch, last_good)
                    sums["g_adv"] += adv
                    if adv_cfg.lambda_adv != 0:
                        grad = grad + adv_cfg.lambda_adv * dx[:, x.shape[1]:]
                sums["g_sup"] += sup
                pg, _ = net.backward(live, cache, grad)
                net.update_running_stats(live, cache)
                net.opt_step(live, pg, opt_g)
                if average is not None:
                    net.ema_update(average, live, adv_cfg.ema_decay)
        except (FloatingPointError, net.NonFiniteGradient) as exc:
            raise TrainingDiverged(f"fine-tuning diverged in epoch {epoch}: {exc}", last_good, epoch) from exc
        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        g.coarse_head = average.copy() if average is not None else live
        row["bone_dev"] = (float(np.mean(bone_plausibility(evaluation.pose2d_noisy, predict_z(g, evaluation.pose2d_noisy),
                                                           cam, reference_lengths, g.topo)))
                           if cam is not None and reference_lengths is not None and len(evaluation) else float("nan"))
        log.info("finetune epoch %d: %s", epoch, row)
        metrics.append(row)
        last_good = _snapshot(g, d)
    g.coarse_head = average if average is not None else live
    g.optim = {"coarse_head": opt_g}
    if d is not None:
        d.optim = opt_d
    return g, d, metrics


def train_discriminator(generator: GeneratorModel, dataset: Dataset, adv_cfg: AdvConfig):
    """Discriminator-only training against a frozen generator.

    Returns ``(discriminator, accuracy on the train pairs after training)``.
    """
    train = dataset.train
    d = _make_discriminator(generator, adv_cfg)
    x = generator.norm_2d.standardize(train.pose2d_noisy)
    z_real = generator.norm_z.standardize(train.coarse_z_gt)
    z_fake = generator.norm_z.standardize(predict_z(generator, train.pose2d_noisy))
    real, fake = _pairs(x, z_real), _pairs(x, z_fake)
    shuffle = stream(adv_cfg.seed, AUX_STREAM, 7)
    opt = net.OptimState.for_model(d.net, learning_rate=adv_cfg.discriminator_learning_rate)
    for epoch in range(1, adv_cfg.epochs + 1):
        for idx in minibatches(shuffle, len(train), adv_cfg.batch_size):
            dl = d_loss(d, real[idx], fake[idx])
            check_finite(dl.loss, "discriminator loss", epoch)
            net.opt_step(d.net, dl.grads, opt)
    return d, d_loss(d, real, fake).accuracy
