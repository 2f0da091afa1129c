"""Deterministic on-disk artifacts: checkpoints, reports, versioned run dirs.

Checkpoints use a small custom container rather than npz because the zip
wrapper embeds timestamps; runs re-executed from the same config snapshot
must reproduce artifacts byte for byte. Layout:

    magic b"TSCONT01" | u32 version | u64 meta length | meta JSON (utf-8)
    | concatenated little-endian float64 arrays in meta["arrays"] order

Run directories are append-only: every write allocates the next _vNNN
suffix for its stem, and readers resolve the highest version.
"""
from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError, MissingArtifactError
from .datagen import TaskSplit
from .nn import ModelSpec, ParamVector
from .pipeline import AssembledModel, Stage1Result
from .proxy import DiagFisher

_MAGIC = b"TSCONT01"
_VERSION = 1


def save_container(path, meta: dict, arrays: dict) -> None:
    meta = dict(meta)
    meta["arrays"] = [{"name": k, "length": int(np.asarray(v).size)} for k, v in arrays.items()]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for key in arrays:
            fh.write(np.ascontiguousarray(arrays[key], dtype="<f8").tobytes())


def load_container(path) -> tuple:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise DataFormatError(f"{path}: not a tailshare container")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    (meta_len,) = struct.unpack("<Q", raw[12:20])
    meta = json.loads(raw[20:20 + meta_len].decode("utf-8"))
    offset = 20 + meta_len
    arrays = {}
    for entry in meta["arrays"]:
        n = entry["length"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise DataFormatError(f"{path}: trailing bytes after declared arrays")
    return meta, arrays


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "trunk_widths": list(spec.trunk_widths),
        "head_dims": list(spec.head_dims),
        "activation": spec.activation,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(d["input_dim"], tuple(d["trunk_widths"]), tuple(d["head_dims"]), d["activation"])


def split_to_dict(split: TaskSplit) -> dict:
    return {"head_classes": list(split.head_classes), "tail_classes": list(split.tail_classes)}


def split_from_dict(d: dict) -> TaskSplit:
    return TaskSplit(tuple(d["head_classes"]), tuple(d["tail_classes"]))


def save_params(path, spec: ModelSpec, params: ParamVector, extra: dict | None = None) -> None:
    meta = {"kind": "params", "spec": spec_to_dict(spec)}
    meta.update(extra or {})
    save_container(path, meta, {"params": params.values})


def load_params(path) -> tuple:
    meta, arrays = load_container(path)
    spec = spec_from_dict(meta["spec"])
    return spec, ParamVector(arrays["params"], spec.block_table()), meta


def save_stage1(path, spec: ModelSpec, s1: Stage1Result, split: TaskSplit,
                priors: np.ndarray, extra: dict | None = None) -> None:
    meta = {
        "kind": "stage1",
        "spec": spec_to_dict(spec),
        "split": split_to_dict(split),
        "sample_count": s1.fisher_a.sample_count,
        "losses_a": list(s1.losses_a),
        "losses_b": list(s1.losses_b),
    }
    meta.update(extra or {})
    save_container(path, meta, {
        "params_a": s1.params_a.values,
        "params_b": s1.params_b.values,
        "fisher_a": s1.fisher_a.values,
        "fisher_b": s1.fisher_b.values,
        "priors": np.asarray(priors, dtype=np.float64),
    })


def load_stage1(path) -> tuple:
    meta, arrays = load_container(path)
    spec = spec_from_dict(meta["spec"])
    table = spec.block_table()
    s1 = Stage1Result(
        params_a=ParamVector(arrays["params_a"], table),
        params_b=ParamVector(arrays["params_b"], table),
        fisher_a=DiagFisher(arrays["fisher_a"], meta["sample_count"]),
        fisher_b=DiagFisher(arrays["fisher_b"], meta["sample_count"]),
        losses_a=meta["losses_a"],
        losses_b=meta["losses_b"],
    )
    return spec, s1, split_from_dict(meta["split"]), arrays["priors"], meta


def save_model(path, model: AssembledModel, extra: dict | None = None) -> None:
    meta = {
        "kind": "model",
        "spec": spec_to_dict(model.spec),
        "split": split_to_dict(model.split),
        "c": model.c,
    }
    meta.update(extra or {})
    save_container(path, meta, {
        "branch_a": model.branch_a.values,
        "branch_b": model.branch_b.values,
        "priors": model.priors,
    })


def load_model(path) -> tuple:
    meta, arrays = load_container(path)
    spec = spec_from_dict(meta["spec"])
    table = spec.block_table()
    model = AssembledModel(
        spec=spec,
        c=meta["c"],
        split=split_from_dict(meta["split"]),
        priors=arrays["priors"],
        branch_a=ParamVector(arrays["branch_a"], table),
        branch_b=ParamVector(arrays["branch_b"], table),
    )
    return model, meta


_VERSION_RE = re.compile(r"_v(\d{3,})$")


def next_version_path(run_dir, stem: str, ext: str) -> Path:
    """Allocate the next free `<stem>_vNNN<ext>` path inside run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    best = 0
    for p in run_dir.glob(f"{stem}_v*{ext}"):
        m = _VERSION_RE.search(p.name[: -len(ext)] if ext else p.name)
        if m:
            best = max(best, int(m.group(1)))
    return run_dir / f"{stem}_v{best + 1:03d}{ext}"


def latest_version_path(run_dir, stem: str, ext: str) -> Path:
    run_dir = Path(run_dir)
    best = None
    best_v = -1
    if run_dir.is_dir():
        for p in run_dir.glob(f"{stem}_v*{ext}"):
            m = _VERSION_RE.search(p.name[: -len(ext)] if ext else p.name)
            if m and int(m.group(1)) > best_v:
                best_v = int(m.group(1))
                best = p
    if best is None:
        raise MissingArtifactError(f"no {stem}_vNNN{ext} artifact in {run_dir}")
    return best


def write_config_snapshot(run_dir, config: dict) -> Path:
    path = next_version_path(run_dir, "config", ".json")
    path.write_text(json.dumps(config, sort_keys=True, indent=1))
    return path


def write_metrics_csv(path, rows: list) -> None:
    """rows: list of (eval_set_name, MetricsReport-like dict)."""
    cols = ["overall_accuracy", "head_accuracy", "tail_accuracy", "bce_a", "bce_b", "n_eval"]
    with Path(path).open("w") as fh:
        fh.write("eval_set," + ",".join(cols) + "\n")
        for name, rep in rows:
            fh.write(name + "," + ",".join(repr(rep[c]) if isinstance(rep[c], float) else str(rep[c]) for c in cols) + "\n")
