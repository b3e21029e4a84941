"""Config-driven pipeline steps; each reads and writes files under ``out_dir``."""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adversarial, fbi, generator, net, plotting, refiner
from .config import RunConfig
from .loss import Normalizer, WeightedLossConfig, fbi_ce_loss, pose_loss, weighted_loss
from .persist import (CheckpointError, atomic_write, canonical_json, load_checkpoint, metrics_csv,
                      normalizers_to_json, read_dataset, read_poses, save_checkpoint, stamp, write_csv,
                      write_dataset)
from .skeleton import SkeletonTopology
from .synth import NUM_ACTIONS, CameraModel, Dataset, SynthConfig, make_dataset, make_out_of_domain
from .training import TrainConfig

log = logging.getLogger(__name__)

FILES = {
    "dataset": "dataset.jsonl",
    "generator": "generator.json",
    "generator_metrics": "generator_metrics.csv",
    "generator_ft": "generator_ft.json",
    "discriminator": "discriminator.json",
    "finetune_metrics": "finetune_metrics.csv",
    "table": "table.csv",
    "table_figure": "table.svg",
    "gradcheck": "gradcheck.csv",
    "labels": "fbi_labels.jsonl",
}
GRADCHECK_TOLERANCE = 1e-4
LOSS_DERIVATIVE_TOLERANCE = 1e-8


def out_path(run: RunConfig, key: str) -> Path:
    return run.out_dir / FILES[key]


def refiner_path(run: RunConfig, mode: str) -> Path:
    return run.out_dir / f"refiner_{mode}.json"


# ---------------------------------------------------------------------------
# config -> components
# ---------------------------------------------------------------------------

def synth_config(run: RunConfig) -> SynthConfig:
    s = run["synth"]
    return SynthConfig.default(
        seed=run.seed, count=s["count"], train_fraction=s["train_fraction"], noise_2d_std=s["noise_2d_std"],
        coarse_z_noise_std=s["coarse_z_noise_std"], fbi_flip_prob=s["fbi_flip_prob"],
        parallel_fraction=s["parallel_fraction"])


def camera(run: RunConfig) -> CameraModel:
    c = run["camera"]
    return CameraModel(c["focal_length"], tuple(c["principal_point"]), c["subject_distance"])


def net_kwargs(section: dict) -> dict:
    return {k: section[k] for k in ("hidden_dim", "num_residual_blocks", "use_batch_stats_norm", "dropout_rate")}


def generator_specs(run: RunConfig, topo: SkeletonTopology):
    return generator.default_specs(topo, **net_kwargs(run["generator"]))


def train_config(run: RunConfig, section: str) -> TrainConfig:
    s = run[section]
    return TrainConfig(s["epochs"], s["batch_size"], s["learning_rate"], run.seed, s.get("max_grad_norm"),
                       s["lr_decay"])


def adv_config(run: RunConfig) -> adversarial.AdvConfig:
    a = dict(run["adversarial"])
    return adversarial.AdvConfig(seed=run.seed, **a)


def loss_policy(run: RunConfig) -> refiner.LossPolicy:
    s = run["loss"]
    return refiner.LossPolicy(s["epsilon"], s["alpha_policy"], s["alpha"])


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def run_synth(run: RunConfig) -> Dataset:
    topo = run.topology()
    cfg = synth_config(run)
    cam = camera(run)
    ds = make_dataset(cfg, cam, topo)
    write_dataset(out_path(run, "dataset"), ds, topo, cfg.to_json(), run["camera"], run.hash)
    log.info("wrote %d samples to %s", len(ds), out_path(run, "dataset"))
    return ds


def load_dataset(run: RunConfig) -> Dataset:
    path = out_path(run, "dataset")
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run 'synth' first)")
    ds, header = read_dataset(path)
    if header["topology_hash"] != run.topology().digest():
        raise ValueError(f"{path}: dataset topology differs from the configured topology")
    return ds


def out_of_domain(run: RunConfig) -> Dataset:
    return make_out_of_domain(synth_config(run), camera(run), run["synth"]["ood_count"], run.topology())


def save_generator(path, tag: str, g: generator.GeneratorModel, run: RunConfig):
    nets = {"coarse_head": (g.coarse_head, g.optim.get("coarse_head")),
            "fbi_head": (g.fbi_head, g.optim.get("fbi_head"))}
    extra = {"normalizers": normalizers_to_json(norm_2d=g.norm_2d, norm_z=g.norm_z),
             "topology_hash": g.topo.digest()}
    return save_checkpoint(path, tag, nets, extra, run.hash)


def load_generator(path, run: RunConfig, tag: str | None = None) -> generator.GeneratorModel:
    topo = run.topology()
    coarse, heads = generator_specs(run, topo)
    nets, extra, _ = load_checkpoint(path, tag, {"coarse_head": coarse, "fbi_head": heads})
    if extra["topology_hash"] != topo.digest():
        raise CheckpointError(f"{path}: generator topology differs from the configured topology")
    norms = extra["normalizers"]
    return generator.GeneratorModel(nets["coarse_head"][0], nets["fbi_head"][0],
                                    Normalizer.from_json(norms["norm_2d"]), Normalizer.from_json(norms["norm_z"]),
                                    topo, {k: v[1] for k, v in nets.items() if v[1] is not None})


def run_train_gen(run: RunConfig):
    ds = load_dataset(run)
    topo = run.topology()
    g, metrics = generator.train_generator(ds, generator_specs(run, topo), train_config(run, "generator"))
    save_generator(out_path(run, "generator"), "generator", g, run)
    metrics_csv(out_path(run, "generator_metrics"), metrics, run.hash)
    plotting.plot_curves(metrics, ["coarse_loss", "fbi_loss"], run.out_dir / "generator_curves.svg", run.hash,
                         "generator pre-training")
    return g, metrics


def run_finetune(run: RunConfig, generator_ckpt=None):
    ds = load_dataset(run)
    g = load_generator(generator_ckpt or out_path(run, "generator"), run, "generator")
    cfg = synth_config(run)
    g_ft, d, metrics = adversarial.finetune(g, ds, adv_config(run), camera(run), cfg.reference_link_lengths(),
                                            out_of_domain(run))
    save_generator(out_path(run, "generator_ft"), "generator_ft", g_ft, run)
    save_checkpoint(out_path(run, "discriminator"), "discriminator", {"net": (d.net, d.optim)},
                    {"topology_hash": g.topo.digest()}, run.hash)
    metrics_csv(out_path(run, "finetune_metrics"), metrics, run.hash, adversarial.METRIC_COLUMNS)
    plotting.plot_curves(metrics, ["d_loss", "g_sup", "g_adv"], run.out_dir / "finetune_curves.svg", run.hash,
                         "adversarial fine-tuning")
    return g_ft, d, metrics


def _generator_for_refiner(run: RunConfig):
    if run["refiner"]["input_source"] != "generator":
        return None
    path = out_path(run, "generator_ft")
    if path.exists():
        return load_generator(path, run, "generator_ft")
    return load_generator(out_path(run, "generator"), run, "generator")


def save_refiner(path, model: refiner.RefinerModel, run: RunConfig):
    extra = {"input_mode": model.input_mode, "input_source": model.input_source,
             "normalizers": normalizers_to_json(norm_2d=model.norm_2d, norm_z=model.norm_z, norm_3d=model.norm_3d),
             "topology_hash": model.topo.digest()}
    return save_checkpoint(path, f"refiner_{model.input_mode}", {"net": (model.net, model.optim)}, extra, run.hash)


def load_refiner(path, run: RunConfig) -> refiner.RefinerModel:
    topo = run.topology()
    nets, extra, body = load_checkpoint(path)
    mode = extra["input_mode"]
    if body["tag"] != f"refiner_{mode}":
        raise CheckpointError(f"{path}: not a refiner checkpoint")
    expected = refiner.refiner_spec(mode, topo, **net_kwargs(run["refiner"]))
    if nets["net"][0].spec != expected:
        raise CheckpointError(f"{path}: checkpoint spec {nets['net'][0].spec} does not match requested {expected}")
    if extra["topology_hash"] != topo.digest():
        raise CheckpointError(f"{path}: refiner topology differs from the configured topology")
    n = extra["normalizers"]
    return refiner.RefinerModel(nets["net"][0], mode, Normalizer.from_json(n["norm_2d"]),
                                Normalizer.from_json(n["norm_z"]), Normalizer.from_json(n["norm_3d"]),
                                extra["input_source"], topo, nets["net"][1])


def run_train_refiner(run: RunConfig, mode: str):
    if mode not in refiner.MODES:
        raise ValueError(f"mode must be one of {refiner.MODES}")
    ds = load_dataset(run)
    source = run["refiner"]["input_source"]
    model, metrics = refiner.train_refiner(ds, mode, loss_policy(run), train_config(run, "refiner"),
                                           net_kwargs(run["refiner"]), source, _generator_for_refiner(run))
    save_refiner(refiner_path(run, mode), model, run)
    metrics_csv(run.out_dir / f"refiner_{mode}_metrics.csv", metrics, run.hash)
    plotting.plot_curves(metrics, ["train_mpjpe", "test_mpjpe"], run.out_dir / f"refiner_{mode}_curves.svg",
                         run.hash, f"refiner ({mode})")
    return model, metrics


def table_header(num_actions: int = NUM_ACTIONS) -> list[str]:
    return ["model"] + [f"A{a + 1}" for a in range(num_actions)] + ["Avg"]


def run_eval(run: RunConfig, ckpts=None, identity_stub: bool = False):
    """Per-action MPJPE table for the given (or all available) refiner checkpoints."""
    ds = load_dataset(run)
    test = ds.test
    topo = run.topology()
    if ckpts is None:
        ckpts = [p for p in (refiner_path(run, m) for m in refiner.MODES) if p.exists()]
    tables, predictions = {}, {}
    if identity_stub:
        predictions["identity"] = test.pose3d_gt.copy()
        tables["identity"] = refiner.evaluate(predictions["identity"], test, topo)
    gen = None
    for path in ckpts:
        model = load_refiner(path, run)
        if model.input_source == "generator" and gen is None:
            gen = _generator_for_refiner(run)
        tag = model.input_mode
        predictions[tag] = refiner.predict_dataset(model, test, gen)
        tables[tag] = refiner.evaluate(predictions[tag], test, topo)
    if not tables:
        raise FileNotFoundError(f"no refiner checkpoints found in {run.out_dir} (run 'train-refiner' first)")
    rows = [[tag] + t.row() for tag, t in tables.items()]
    write_csv(out_path(run, "table"), table_header(), rows, run.hash)
    plotting.plot_table({tag: t.row() for tag, t in tables.items()}, out_path(run, "table_figure"), run.hash)
    for i in range(min(run["eval"]["renders"], len(test))):
        for tag, pred in predictions.items():
            plotting.render_skeleton(pred[i], fbi.label_fbi(pred[i], topo), run.out_dir / "renders" /
                                     f"sample{int(test.ids[i]):06d}_{tag}.svg",
                                     f"sample {int(test.ids[i])} ({tag}, A{int(test.action[i]) + 1})", run.hash, topo,
                                     reference=test.pose3d_gt[i])
    return tables


def run_label(run: RunConfig, input_path, output_path=None) -> Path:
    topo = run.topology()
    ids, poses = read_poses(input_path, topo.num_joints)
    labels = fbi.label_fbi(poses, topo, fbi.FbiLabelConfig(run["synth"]["parallel_fraction"]))
    lines = [canonical_json({"header": {"topology_hash": topo.digest(), **stamp(run.hash)}})]
    lines += [canonical_json({"id": i, "fbi": row.tolist()}) for i, row in zip(ids, labels)]
    out = Path(output_path) if output_path else out_path(run, "labels")
    return atomic_write(out, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gradient report
# ---------------------------------------------------------------------------

def _no_dropout(spec: net.MlpSpec) -> net.MlpSpec:
    return replace(spec, dropout_rate=0.0)


def loss_derivative_check(alphas=(0.1, 0.5, 0.9), epsilon: float = 0.001, points: int = 200,
                          l0_max: float = 20.0, step: float = 1e-6) -> tuple[float, int]:
    """Max relative error of the analytic dLoss/dL0 against central differences,
    skipping points whose stencil touches the exponent clamp. Returns ``(error, points checked)``."""
    worst, checked = 0.0, 0
    for a in alphas:
        cfg = WeightedLossConfig(epsilon, a)
        grid = np.linspace(step * 10, l0_max, points)
        grid = grid[(grid + step) / (1 - a) < 50.0 - 1e-6]
        analytic = weighted_loss(grid, cfg).dloss_dl0
        numeric = (weighted_loss(grid + step, cfg).loss - weighted_loss(grid - step, cfg).loss) / (2 * step)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float(rel.max()))
        checked += len(grid)
    return worst, checked


def gradient_report(run: RunConfig) -> list[dict]:
    topo = run.topology()
    gc = run["gradcheck"]
    rng = np.random.default_rng(run.seed)
    n, fd, per = gc["batch"], gc["fd_step"], gc["max_per_param"]
    J, m = topo.num_joints, topo.num_bones
    rows = []

    def record(component, result):
        rows.append({"component": component, "checked": result.checked, "skipped_kinks": result.skipped_kinks,
                     "max_rel_error": result.max_rel_error, "tolerance": GRADCHECK_TOLERANCE,
                     "passed": int(result.max_rel_error < GRADCHECK_TOLERANCE)})

    coarse_spec, fbi_spec = (_no_dropout(s) for s in generator_specs(run, topo))
    coarse = net.init(coarse_spec, run.seed)
    x = rng.normal(size=(n, 2 * J))
    target = rng.normal(size=(n, J))
    record("generator.coarse_head (mse)", net.grad_check(coarse, x, lambda o: _mse(o, target), fd, per, run.seed))

    head = net.init(fbi_spec, run.seed + 1)
    labels = rng.integers(0, 3, (n, m))
    record("generator.fbi_head (softmax3 + cross-entropy)",
           net.grad_check(head, x, lambda o: _ce_probs(o, labels), fd, per, run.seed))
    out, cache = net.forward(head, x, "train", dropout=False)
    analytic = net.backward(head, cache, fbi_ce_loss(out, labels).grad_logits, wrt_logits=True)
    record("generator.fbi_head (logit-gradient path)",
           net.grad_check(head, x, lambda o: _ce_probs(o, labels), fd, per, run.seed, analytic=analytic))

    d = adversarial.new_discriminator(run.seed + 2, topo)
    real = rng.normal(size=(n, 3 * J))
    fake = rng.normal(size=(n, 3 * J))
    is_real = np.r_[np.ones(n), np.zeros(n)]
    pairs = np.concatenate([real, fake])
    record("discriminator (logistic loss)",
           net.grad_check(d.net, pairs, lambda o: _bce(o, is_real), fd, per, run.seed))
    record("discriminator -> generator (non-saturating loss, input gradient)",
           net.grad_check(d.net, fake, lambda o: _bce(o, np.ones(n)), fd, per, run.seed))

    cfg = WeightedLossConfig(run["loss"]["epsilon"], 0.5)
    for mode in refiner.MODES:
        spec = _no_dropout(refiner.refiner_spec(mode, topo, **net_kwargs(run["refiner"])))
        model = net.init(spec, run.seed + 3)
        xr = rng.normal(size=(n, spec.input_dim))
        yr = rng.normal(size=(n, 3 * J))
        record(f"refiner.{mode} (weighted loss)",
               net.grad_check(model, xr, lambda o: pose_loss(o, yr, cfg)[:2], fd, per, run.seed))

    err, checked = loss_derivative_check(epsilon=max(run["loss"]["epsilon"], 1e-3))
    rows.append({"component": "weighted loss dLoss/dL0", "checked": checked, "skipped_kinks": 0,
                 "max_rel_error": err, "tolerance": LOSS_DERIVATIVE_TOLERANCE,
                 "passed": int(err < LOSS_DERIVATIVE_TOLERANCE)})
    return rows


def _mse(o, t):
    return float(np.mean((o - t) ** 2)), 2.0 * (o - t) / o.size


def _ce_probs(o, labels):
    p = o.reshape(labels.shape + (3,))
    picked = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
    grad = np.zeros_like(p)
    np.put_along_axis(grad, labels[..., None], (-1.0 / picked / labels.size)[..., None], axis=-1)
    return float(np.mean(-np.log(picked))), grad.reshape(o.shape)


def _bce(o, is_real):
    logit = o[:, 0]
    sign = np.where(is_real > 0, -1.0, 1.0)
    loss = float(np.mean(np.logaddexp(0.0, sign * logit)))
    grad = sign / (1.0 + np.exp(-sign * logit)) / len(logit)
    return loss, grad[:, None]


GRADCHECK_COLUMNS = ("component", "checked", "skipped_kinks", "max_rel_error", "tolerance", "passed")


def run_gradcheck(run: RunConfig) -> list[dict]:
    rows = gradient_report(run)
    metrics_csv(out_path(run, "gradcheck"), rows, run.hash, GRADCHECK_COLUMNS)
    return rows


def run_all(run: RunConfig):
    """synth -> train-gen -> finetune -> train-refiner (base, final) -> eval."""
    run_synth(run)
    run_train_gen(run)
    run_finetune(run)
    for mode in refiner.MODES:
        run_train_refiner(run, mode)
    return run_eval(run)
