"""On-disk expert checkpoints: a JSON manifest plus one binary matrix per parameter."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .graph import DatasetError, read_matrix, write_matrix
from .nn import VariationalEncoder
from .pretrain import ExpertCheckpoint

FORMAT_VERSION = "expert-checkpoint/1"
ENSEMBLE_VERSION = "expert-ensemble/1"


class CheckpointError(RuntimeError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class UnknownVersionError(CheckpointError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(ckpt: ExpertCheckpoint, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    params = []
    for name, tensor in ckpt.encoder.named_parameters():
        f = d / f"{name}.bin"
        write_matrix(f, tensor.data)
        params.append({"name": name, "shape": list(tensor.shape), "file": f.name, "sha256": _sha256(f)})
    extras = {}
    if ckpt.prototype is not None:
        write_matrix(d / "prototype.bin", ckpt.prototype.reshape(1, -1))
        extras["prototype"] = {"file": "prototype.bin", "sha256": _sha256(d / "prototype.bin")}
    if ckpt.assignment is not None:
        (d / "partition.csv").write_text(
            "node_id,cluster_id\n" + "".join(f"{i},{int(c)}\n" for i, c in enumerate(ckpt.assignment)))
    with open(d / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "infonce", "kl", "total"])
        for epoch, nce, kl, total in ckpt.loss_trace:
            w.writerow([epoch, repr(float(nce)), repr(float(kl)), repr(float(total))])
    manifest = {
        "version": FORMAT_VERSION,
        "domain_id": ckpt.domain_id,
        "d0": ckpt.d0,
        "frozen": True,
        "num_layers": len(ckpt.encoder.layers),
        "parameters": params,
        "param_hash": ckpt.param_hash(),
        "config": ckpt.config,
        "loss_trace_path": "loss_trace.csv",
        "partition_path": "partition.csv" if ckpt.assignment is not None else None,
        **extras,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def _load_blob(d: Path, entry: dict) -> np.ndarray:
    f = d / entry["file"]
    if not f.exists():
        raise CheckpointIntegrityError(f"missing parameter file {f}")
    try:
        arr = read_matrix(f)
    except DatasetError as exc:
        raise CheckpointIntegrityError(str(exc)) from exc
    if _sha256(f) != entry["sha256"]:
        raise CheckpointIntegrityError(f"{f}: content hash does not match the manifest")
    return arr


def load_checkpoint(directory) -> ExpertCheckpoint:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest in {d}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise UnknownVersionError(f"unsupported checkpoint version {manifest.get('version')!r}")
    tensors = {}
    for entry in manifest["parameters"]:
        arr = _load_blob(d, entry)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointIntegrityError(f"{entry['name']}: expected shape {shape}, got {arr.shape}")
        tensors[entry["name"]] = Tensor(arr.reshape(shape), name=entry["name"])
    layers = [tensors[f"gcn{i}"] for i in range(manifest["num_layers"])]
    encoder = VariationalEncoder(layers, tensors["mu_head"], tensors["logvar_head"])
    trace = []
    with open(d / manifest["loss_trace_path"], newline="") as fh:
        for row in csv.DictReader(fh):
            trace.append((int(row["epoch"]), float(row["infonce"]), float(row["kl"]), float(row["total"])))
    prototype = _load_blob(d, manifest["prototype"]).reshape(-1) if "prototype" in manifest else None
    assignment = None
    if manifest.get("partition_path"):
        with open(d / manifest["partition_path"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        assignment = np.array([int(r["cluster_id"]) for r in rows], dtype=np.int64)
    ckpt = ExpertCheckpoint(manifest["domain_id"], encoder, trace, assignment, manifest["d0"], prototype,
                            manifest["config"])
    if ckpt.param_hash() != manifest["param_hash"]:
        raise CheckpointIntegrityError("parameter hash does not match the manifest")
    return ckpt


def save_ensemble(ckpts: list[ExpertCheckpoint], directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ck in enumerate(ckpts):
        name = f"expert_{i:02d}"
        save_checkpoint(ck, d / name)
        names.append({"dir": name, "domain_id": ck.domain_id, "param_hash": ck.param_hash()})
    (d / "ensemble.json").write_text(json.dumps({"version": ENSEMBLE_VERSION, "experts": names}, indent=2))
    return d


def load_ensemble(directory) -> list[ExpertCheckpoint]:
    d = Path(directory)
    mpath = d / "ensemble.json"
    if not mpath.exists():
        raise CheckpointError(f"no ensemble manifest in {d}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("version") != ENSEMBLE_VERSION:
        raise UnknownVersionError(f"unsupported ensemble version {manifest.get('version')!r}")
    return [load_checkpoint(d / e["dir"]) for e in manifest["experts"]]
