"""File formats: JSONL datasets, JSON checkpoints, CSV tables.

Every writer goes through ``atomic_write`` (temp file in the target
directory, then rename) and stamps the run's config hash and the package
version into the file.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .loss import Normalizer
from .net import MlpModel, MlpSpec, OptimState
from .skeleton import SkeletonTopology
from .synth import Dataset


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def stamp(config_hash: str) -> dict:
    return {"config_hash": config_hash, "version": __version__}


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _flat(a) -> list:
    return np.asarray(a).ravel().tolist()


def dataset_lines(ds: Dataset, header: dict):
    yield canonical_json({"header": header})
    for i in range(len(ds)):
        yield canonical_json({
            "id": int(ds.ids[i]),
            "action": int(ds.action[i]),
            "split": "train" if ds.is_train[i] else "test",
            "pose3d_gt": _flat(ds.pose3d_gt[i]),
            "pose2d": _flat(ds.pose2d[i]),
            "pose2d_noisy": _flat(ds.pose2d_noisy[i]),
            "coarse_z_gt": _flat(ds.coarse_z_gt[i]),
            "coarse_z_noisy": _flat(ds.coarse_z_noisy[i]),
            "fbi_gt": _flat(ds.fbi_gt[i]),
            "fbi_noisy": _flat(ds.fbi_noisy[i]),
        })


def write_dataset(path, ds: Dataset, topo: SkeletonTopology, synth_config: dict, camera: dict,
                  config_hash: str) -> Path:
    header = {"topology_hash": topo.digest(), "topology": topo.to_json(), "synth": synth_config,
              "camera": camera, **stamp(config_hash)}
    return atomic_write(path, "\n".join(dataset_lines(ds, header)) + "\n")


def read_dataset(path) -> tuple[Dataset, dict]:
    """Load a JSONL dataset; returns ``(dataset, header)``."""
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)["header"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: first line is not a dataset header") from exc
        rows = [json.loads(line) for line in fh if line.strip()]
    topo = SkeletonTopology.from_json(header["topology"])
    if topo.digest() != header["topology_hash"]:
        raise ValueError(f"{path}: topology hash mismatch")
    J, m, n = topo.num_joints, topo.num_bones, len(rows)

    def col(key, shape, dtype=float):
        return np.array([r[key] for r in rows], dtype=dtype).reshape((n,) + shape)

    ds = Dataset(
        ids=col("id", (), np.int64), action=col("action", (), np.int64),
        pose3d_gt=col("pose3d_gt", (J, 3)), pose2d=col("pose2d", (J, 2)),
        pose2d_noisy=col("pose2d_noisy", (J, 2)), coarse_z_gt=col("coarse_z_gt", (J,)),
        coarse_z_noisy=col("coarse_z_noisy", (J,)), fbi_gt=col("fbi_gt", (m,), np.int64),
        fbi_noisy=col("fbi_noisy", (m,), np.int64),
        is_train=np.array([r.get("split", "train") == "train" for r in rows], dtype=bool),
    )
    return ds, header


def read_poses(path, J: int) -> tuple[list, np.ndarray]:
    """3D poses from a JSONL file (``pose3d`` or ``pose3d_gt`` field, flat or nested).

    A leading dataset header line is skipped. Returns ``(ids, poses)``.
    """
    ids, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc.msg}") from exc
            if "header" in obj:
                continue
            coords = obj.get("pose3d", obj.get("pose3d_gt"))
            if coords is None:
                raise ValueError(f"{path}:{lineno}: no 'pose3d' field")
            arr = np.asarray(coords, dtype=float).reshape(-1)
            if arr.size != 3 * J:
                raise ValueError(f"{path}:{lineno}: expected {3 * J} coordinates, got {arr.size}")
            ids.append(obj.get("id", len(ids)))
            poses.append(arr.reshape(J, 3))
    return ids, np.array(poses).reshape(-1, J, 3)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _arrays(d: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": _flat(v)} for k, v in d.items()}


def _unarrays(d: dict) -> dict:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d.items()}


def model_to_json(model: MlpModel, optim: OptimState | None = None) -> dict:
    obj = {"spec": model.spec.to_json(), "params": _arrays(model.params), "running": _arrays(model.running)}
    if optim is not None:
        obj["optim"] = {**optim.to_json(), "m": _arrays(optim.m), "v": _arrays(optim.v)}
    return obj


def model_from_json(obj: dict, expected: MlpSpec | None = None) -> tuple[MlpModel, OptimState | None]:
    spec = MlpSpec(**obj["spec"])
    if expected is not None and spec != expected:
        raise CheckpointError(f"checkpoint spec {spec} does not match requested {expected}")
    model = MlpModel(spec, _unarrays(obj["params"]), _unarrays(obj["running"]))
    optim = None
    if "optim" in obj:
        o = obj["optim"]
        optim = OptimState(o["learning_rate"], o["beta1"], o["beta2"], o["eps"], o["step"],
                           _unarrays(o["m"]), _unarrays(o["v"]))
    return model, optim


def save_checkpoint(path, tag: str, nets: dict, extra: dict, config_hash: str) -> Path:
    """``nets`` maps a name to ``(model, optim_state_or_None)``."""
    body = {"tag": tag, **stamp(config_hash), "extra": extra,
            "nets": {k: model_to_json(m, o) for k, (m, o) in nets.items()}}
    body["content_hash"] = content_hash(body)
    return atomic_write(path, canonical_json(body) + "\n")


def load_checkpoint(path, tag: str | None = None, expected_specs: dict | None = None):
    """Returns ``(nets, extra, body)`` with ``nets[name] = (model, optim)``.

    Rejects files whose content hash does not verify, whose tag differs
    from ``tag``, or whose network specs differ from ``expected_specs``.
    """
    try:
        body = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    stored = body.pop("content_hash", None)
    if stored != content_hash(body):
        raise CheckpointError(f"{path}: content hash mismatch")
    if tag is not None and body.get("tag") != tag:
        raise CheckpointError(f"{path}: expected a {tag!r} checkpoint, found {body.get('tag')!r}")
    nets = {}
    for name, obj in body["nets"].items():
        expected = (expected_specs or {}).get(name)
        nets[name] = model_from_json(obj, expected)
    return nets, body["extra"], body


def normalizers_to_json(**norms: Normalizer) -> dict:
    return {k: v.to_json() for k, v in norms.items()}


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, header, rows, config_hash: str) -> Path:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash} version={__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return atomic_write(path, buf.getvalue())


def read_csv(path) -> tuple[list, list]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def metrics_csv(path, metrics: list[dict], config_hash: str, columns=None) -> Path:
    columns = list(columns or (metrics[0].keys() if metrics else []))
    return write_csv(path, columns, [[m.get(c, "") for c in columns] for m in metrics], config_hash)
