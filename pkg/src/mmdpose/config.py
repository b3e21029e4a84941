"""Run configuration: one JSON file per run, validated field by field."""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .persist import canonical_json, content_hash

DEFAULTS = {
    "seed": None,
    "topology": None,
    "out_dir": "runs/default",
    "synth": {
        "count": 20000,
        "train_fraction": 0.8,
        "noise_2d_std": 3.0,
        "coarse_z_noise_std": 30.0,
        "fbi_flip_prob": 0.05,
        "parallel_fraction": 0.15,
        "ood_count": 1000,
    },
    "camera": {"focal_length": 1000.0, "principal_point": [500.0, 500.0], "subject_distance": 5000.0},
    "generator": {
        "hidden_dim": 256, "num_residual_blocks": 2, "use_batch_stats_norm": True, "dropout_rate": 0.1,
        "epochs": 10, "batch_size": 128, "learning_rate": 1e-3, "lr_decay": 1.0,
    },
    "refiner": {
        "hidden_dim": 256, "num_residual_blocks": 2, "use_batch_stats_norm": True, "dropout_rate": 0.1,
        "epochs": 20, "batch_size": 128, "learning_rate": 1e-3, "input_source": "corrupted",
        "lr_decay": 0.95, "max_grad_norm": 1.0,
    },
    "loss": {"epsilon": 0.001, "alpha_policy": "per_epoch", "alpha": 0.5},
    "adversarial": {
        "lambda_adv": 0.1, "d_steps_per_g_step": 3, "epochs": 8, "generator_learning_rate": 1e-4,
        "discriminator_learning_rate": 1e-3, "batch_size": 128, "ema_decay": 0.99,
    },
    "eval": {"renders": 4},
    "gradcheck": {"batch": 8, "max_per_param": 12, "fd_step": 1e-5},
}


class ConfigError(ValueError):
    pass


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


_RULES = {
    "seed": (_is_int, "an integer"),
    "topology": (lambda v: v is None or isinstance(v, str), "null or a path string"),
    "out_dir": (lambda v: isinstance(v, str) and v != "", "a non-empty path string"),
    "synth.count": (lambda v: _is_int(v) and v >= 2, "an integer >= 2"),
    "synth.train_fraction": (lambda v: _is_num(v) and 0 < v < 1, "a number in (0, 1)"),
    "synth.noise_2d_std": (lambda v: _is_num(v) and v >= 0, "a number >= 0"),
    "synth.coarse_z_noise_std": (lambda v: _is_num(v) and v >= 0, "a number >= 0"),
    "synth.fbi_flip_prob": (lambda v: _is_num(v) and 0 <= v <= 1, "a number in [0, 1]"),
    "synth.parallel_fraction": (lambda v: _is_num(v) and 0 <= v < 1, "a number in [0, 1)"),
    "synth.ood_count": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    "camera.focal_length": (lambda v: _is_num(v) and v > 0, "a number > 0"),
    "camera.principal_point": (lambda v: isinstance(v, list) and len(v) == 2 and all(map(_is_num, v)),
                               "a list of two numbers"),
    "camera.subject_distance": (lambda v: _is_num(v) and v > 0, "a number > 0"),
    "loss.epsilon": (lambda v: _is_num(v) and v >= 0, "a number >= 0"),
    "loss.alpha_policy": (lambda v: v in ("per_epoch", "fixed"), "'per_epoch' or 'fixed'"),
    "loss.alpha": (lambda v: _is_num(v) and 0 < v < 1, "a number in (0, 1)"),
    "refiner.max_grad_norm": (lambda v: v is None or (_is_num(v) and v > 0), "null or a number > 0"),
    "refiner.input_source": (lambda v: v in ("corrupted", "generator"), "'corrupted' or 'generator'"),
    "adversarial.lambda_adv": (lambda v: _is_num(v) and v >= 0, "a number >= 0"),
    "adversarial.d_steps_per_g_step": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    "adversarial.ema_decay": (lambda v: _is_num(v) and 0 <= v < 1, "a number in [0, 1)"),
    "eval.renders": (lambda v: _is_int(v) and v >= 0, "an integer >= 0"),
    "gradcheck.batch": (lambda v: _is_int(v) and v >= 2, "an integer >= 2"),
    "gradcheck.max_per_param": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
    "gradcheck.fd_step": (lambda v: _is_num(v) and v > 0, "a number > 0"),
}
for _section in ("generator", "refiner"):
    _RULES.update({
        f"{_section}.hidden_dim": (lambda v: _is_int(v) and v >= 1, "an integer >= 1"),
        f"{_section}.num_residual_blocks": (lambda v: _is_int(v) and v >= 0, "an integer >= 0"),
        f"{_section}.use_batch_stats_norm": (lambda v: isinstance(v, bool), "true or false"),
        f"{_section}.dropout_rate": (lambda v: _is_num(v) and 0 <= v < 1, "a number in [0, 1)"),
        f"{_section}.lr_decay": (lambda v: _is_num(v) and 0 < v <= 1, "a number in (0, 1]"),
    })
for _section in ("generator", "refiner", "adversarial"):
    _RULES.update({
        f"{_section}.epochs": (lambda v: _is_int(v) and v >= 0, "an integer >= 0"),
        f"{_section}.batch_size": (lambda v: _is_int(v) and v >= 2, "an integer >= 2"),
    })
for _key in ("generator.learning_rate", "refiner.learning_rate", "adversarial.generator_learning_rate",
             "adversarial.discriminator_learning_rate"):
    _RULES[_key] = (lambda v: _is_num(v) and v > 0, "a number > 0")


def _locate(text: str, dotted: str) -> int | None:
    """Best-effort line number of a dotted key in the raw JSON text."""
    pos = 0
    for part in dotted.split("."):
        m = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
        if not m:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _where(text, dotted, source):
    line = _locate(text, dotted) if text else None
    return f"{source}:{line}" if line else source


def _merge(base: dict, override: dict, prefix: str, text: str, source: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"{_where(text, key, source)}: unknown config field '{key}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{_where(text, key, source)}: config field '{key}' must be an object")
            out[k] = _merge(base[k], v, key + ".", text, source)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict
    source: str = "<defaults>"
    base_dir: Path = Path(".")

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def out_dir(self) -> Path:
        p = Path(self.data["out_dir"])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def hash(self) -> str:
        body = {k: v for k, v in self.data.items() if k != "out_dir"}
        return content_hash(body)[:16]

    def to_json(self) -> str:
        return canonical_json(self.data)

    def topology(self):
        from .skeleton import DEFAULT_TOPOLOGY, SkeletonTopology
        if self.data["topology"] is None:
            return DEFAULT_TOPOLOGY
        path = Path(self.data["topology"])
        if not path.is_absolute():
            path = self.base_dir / path
        if not path.exists():
            raise ConfigError(f"{self.source}: topology file not found: {path}")
        return SkeletonTopology.load(path)

    def override(self, **fields) -> "RunConfig":
        """Apply dotted-key overrides (``{"refiner.epochs": 3}``) and revalidate."""
        data = copy.deepcopy(self.data)
        for dotted, v in fields.items():
            *parents, leaf = dotted.split(".")
            node = data
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config field '{dotted}'")
            node[leaf] = v
        return validate(data, self.source, "", self.base_dir)


def validate(data: dict, source: str = "<config>", text: str = "", base_dir: Path = Path(".")) -> RunConfig:
    for key, (ok, expected) in _RULES.items():
        node = data
        for part in key.split("."):
            node = node[part]
        if key == "seed" and node is None:
            raise ConfigError(f"{_where(text, key, source)}: config field 'seed' is mandatory")
        if not ok(node):
            raise ConfigError(f"{_where(text, key, source)}: config field '{key}' must be {expected}, got {node!r}")
    return RunConfig(data, source, base_dir)


def from_dict(obj: dict, source: str = "<dict>", text: str = "", base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: config must be a JSON object")
    return validate(_merge(DEFAULTS, obj, "", text, source), source, text, base_dir)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None
    return from_dict(obj, str(path), text, path.parent)


def default_config(seed: int = 0, **overrides) -> RunConfig:
    cfg = from_dict({"seed": seed})
    return cfg.override(**overrides) if overrides else cfg
