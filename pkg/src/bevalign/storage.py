"""On-disk formats: checkpoints, scene datasets and metrics files.

Checkpoint layout::

    b"BEVALIGN"              8 bytes magic
    uint32 LE                container version
    uint32 LE                header length in bytes
    header                   UTF-8 JSON: version tag, config hash, seed, tensor directory
    payload                  tensors back to back, little-endian, C order

Every tensor entry in the directory carries name, shape, dtype, offset and
byte length relative to the start of the payload.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import VERSION, RunConfig
from .errors import ValidationError
from .geometry import Se3Pose
from .metrics import MetricsReport
from .pillars import read_point_cloud, write_point_cloud
from .simulator import SceneSample

MAGIC = b"BEVALIGN"
CONTAINER_VERSION = 1
_HEAD = struct.Struct("<II")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1"}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_hash: str
    seed: int = 0
    version: str = VERSION
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        a = np.asarray(ckpt.tensors[name])
        dt = a.dtype.name
        if dt not in _DTYPES:
            raise ValidationError(f"tensor {name}: unsupported dtype {dt}")
        raw = np.ascontiguousarray(a, dtype=_DTYPES[dt]).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": ckpt.version, "config_hash": ckpt.config_hash, "seed": ckpt.seed,
                         "meta": ckpt.meta, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEAD.pack(CONTAINER_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path} is not a checkpoint (bad magic)")
    pos = len(MAGIC)
    version, hlen = _HEAD.unpack_from(data, pos)
    if version != CONTAINER_VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    pos += _HEAD.size
    header = json.loads(data[pos:pos + hlen].decode())
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise ValidationError(f"{path}: truncated tensor {e['name']}")
        a = np.frombuffer(data, dtype=_DTYPES[e["dtype"]], count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=start)
        tensors[e["name"]] = a.astype(e["dtype"]).reshape(e["shape"])
    return Checkpoint(tensors, header["config_hash"], header["seed"], header["version"], header.get("meta", {}))


# ---------------------------------------------------------------- datasets

MANIFEST = "manifest.json"


def _write_array(path: Path, a: np.ndarray, dtype: str) -> dict:
    path.write_bytes(np.ascontiguousarray(a, dtype=dtype).tobytes())
    return {"file": path.name, "shape": list(a.shape), "dtype": np.dtype(dtype).name}


def _read_array(folder: Path, entry: dict) -> np.ndarray:
    dt = _DTYPES[entry["dtype"]]
    a = np.frombuffer((folder / entry["file"]).read_bytes(), dtype=dt)
    return a.astype(entry["dtype"]).reshape(entry["shape"])


def write_dataset(root, samples: list[SceneSample], cfg: RunConfig, split_seeds: dict | None = None) -> dict:
    """Persist scenes under ``root``; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scenes = []
    for s in samples:
        folder = root / f"scene_{s.seed:010d}"
        folder.mkdir(exist_ok=True)
        cams = [_write_array(folder / f"camera{i}.bin", f, "<f4") for i, f in enumerate(s.camera_features)]
        depths = [_write_array(folder / f"depth{i}.bin", d, "<f4") for i, d in enumerate(s.depth_maps)]
        write_point_cloud(folder / "lidar", s.cloud)
        labels = _write_array(folder / "labels.bin", s.labels, "u1")
        scenes.append({"seed": int(s.seed), "folder": folder.name, "cameras": cams, "depths": depths,
                       "cloud": "lidar.bin", "labels": labels,
                       "world_from_ego": np.asarray(s.world_from_ego.matrix()).tolist()})
    d = cfg.to_dict()
    manifest = {"format": "bevalign-dataset", "version": VERSION, "data_hash": cfg.data_hash,
                "config": {k: d[k] for k in ("world", "rig", "grid", "bins")},
                "seeds": [int(s.seed) for s in samples], "splits": split_seeds or {}, "scenes": scenes}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read dataset manifest {path}: {exc}") from exc


def read_dataset(root, seeds=None) -> tuple[dict, list[SceneSample]]:
    root = Path(root)
    manifest = read_manifest(root)
    wanted = None if seeds is None else set(int(s) for s in seeds)
    out = []
    for e in manifest["scenes"]:
        if wanted is not None and e["seed"] not in wanted:
            continue
        folder = root / e["folder"]
        M = np.asarray(e["world_from_ego"], dtype=np.float64)
        out.append(SceneSample([_read_array(folder, c) for c in e["cameras"]],
                               [_read_array(folder, d) for d in e["depths"]],
                               read_point_cloud(folder / e["cloud"]), Se3Pose(M[:3, :3], M[:3, 3]),
                               _read_array(folder, e["labels"]), e["seed"]))
    return manifest, out


# ---------------------------------------------------------------- metrics

def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def metrics_csv(reports: list[MetricsReport], num_classes: int, version: str = VERSION) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "scene_count", *[f"iou_{k}" for k in range(num_classes)], "miou", "seed",
                "config_hash", "version"])
    for r in reports:
        w.writerow([r.label, r.scene_count, *[_fmt(v) for v in r.per_class_iou], _fmt(r.miou), r.seed,
                    r.config_hash, version])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    if isinstance(v, list):
        return [_json_safe(x) for x in v]
    return v


def metrics_json(reports: list[MetricsReport], class_names: list[str], extra: dict | None = None,
                 version: str = VERSION) -> str:
    runs = [{"run": r.label, "scene_count": r.scene_count, "per_class_iou": _json_safe(list(r.per_class_iou)),
             "miou": _json_safe(r.miou), "seed": r.seed, "config_hash": r.config_hash,
             "loss_curve": list(r.loss_curve)} for r in reports]
    doc = {"version": version, "classes": list(class_names), "runs": runs}
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, indent=1, sort_keys=True)


def write_metrics(out_dir, stem: str, reports: list[MetricsReport], class_names: list[str],
                  extra: dict | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    c = out_dir / f"{stem}.csv"
    j = out_dir / f"{stem}.json"
    c.write_text(metrics_csv(reports, len(class_names)))
    j.write_text(metrics_json(reports, class_names, extra))
    return c, j
