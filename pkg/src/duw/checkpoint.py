"""Checkpoint directory format.

A checkpoint is a directory with a ``manifest.json`` describing the
architecture, tensor shapes, dtype, and seed lineage, plus one flat
little-endian binary file per tensor named by its group-qualified parameter
path (e.g. ``f/conv1.weight.bin``). Round-trips are bit-exact.
"""

import json
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import fail
from .models import ModelBundle, ModelMeta

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def _dtype_name(t: torch.Tensor) -> str:
    return {torch.float32: "float32", torch.float64: "float64"}[t.dtype]


def _write_tensor(path: Path, t: torch.Tensor) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = t.detach().contiguous().numpy()
    arr.astype(arr.dtype.newbyteorder("<"), copy=False).tofile(path)


def _read_tensor(path: Path, shape, dtype_name: str) -> torch.Tensor:
    raw = np.fromfile(path, dtype=_DTYPES[dtype_name])
    expected = int(np.prod(shape)) if shape else 1
    if raw.size != expected:
        raise fail("cache-invalid", f"{path.name}: expected {expected} values, found {raw.size}")
    return torch.from_numpy(raw.astype(dtype_name, copy=True)).reshape(shape)


def save_bundle(directory, bundle: ModelBundle, seed_lineage: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    groups = {"f": bundle.theta_f, "h": bundle.theta_h, "stats": bundle.stats_f}
    if bundle.theta_d is not None:
        groups["d"] = bundle.theta_d
    tensors = []
    for gname, params in groups.items():
        for name, t in params.items():
            rel = f"{gname}/{name}.bin"
            _write_tensor(directory / rel, t)
            tensors.append({"path": rel, "shape": list(t.shape), "dtype": _dtype_name(t)})
    meta = bundle.meta
    manifest = {
        "kind": "model",
        "arch": meta.arch,
        "input_shape": list(meta.input_shape),
        "num_classes": meta.num_classes,
        "latent_dim": meta.latent_dim,
        "key_dim": meta.key_dim,
        "width": meta.width,
        "active_head": bundle.active_head,
        "byte_order": "little",
        "tensors": tensors,
        "seed_lineage": seed_lineage or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_bundle(directory) -> ModelBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise fail("cache-invalid", f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    meta = ModelMeta(
        arch=manifest["arch"],
        input_shape=tuple(manifest["input_shape"]),
        num_classes=manifest["num_classes"],
        latent_dim=manifest["latent_dim"],
        key_dim=manifest["key_dim"],
        width=manifest.get("width", 16),
    )
    groups = {"f": OrderedDict(), "h": OrderedDict(), "stats": OrderedDict(), "d": OrderedDict()}
    for info in manifest["tensors"]:
        rel = info["path"]
        gname, fname = rel.split("/", 1)
        path = directory / rel
        if not path.exists():
            raise fail("cache-invalid", f"missing tensor file {rel}")
        groups[gname][fname[: -len(".bin")]] = _read_tensor(path, info["shape"], info["dtype"])
    return ModelBundle(
        meta=meta,
        theta_f=groups["f"],
        theta_h=groups["h"],
        stats_f=groups["stats"],
        theta_d=groups["d"] or None,
        active_head=manifest.get("active_head", "classifier"),
    )
