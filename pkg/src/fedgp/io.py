"""
Versioned on-disk formats: checkpoints, result files, record streams and
client shards.

Everything is text.  JSON is written with sorted keys and Python's shortest
round-trip float repr, so save -> load -> save is byte-identical and two
identical runs produce identical files.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .deep_kernel import FeatureNetParams
from .federation import ClientShard, Dataset, NoiseModel, ServerState, load_dataset, save_dataset
from .inducing import InducingSet

__all__ = [
    "CHECKPOINT_FORMAT",
    "RESULTS_FORMAT",
    "MANIFEST_FORMAT",
    "dumps",
    "write_json",
    "read_json",
    "append_record",
    "read_records",
    "params_to_dict",
    "params_from_dict",
    "state_to_dict",
    "state_from_dict",
    "save_checkpoint",
    "load_checkpoint",
    "save_shards",
    "load_shards",
]

CHECKPOINT_FORMAT = "fedgp-checkpoint/1"
RESULTS_FORMAT = "fedgp-results/1"
MANIFEST_FORMAT = "fedgp-manifest/1"
RECORD_FORMAT = "fedgp-record/1"
SPLITS = ("train", "val", "test")


def _plain(obj):
    """Convert numpy containers and scalars to JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(obj, path) -> None:
    """Write atomically: a crash leaves either the old file or the new one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))
    os.replace(tmp, path)


def read_json(path, expect_format: str | None = None) -> dict:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if expect_format is not None and obj.get("format") != expect_format:
        raise ValueError(f"{path}: expected format {expect_format!r}, found {obj.get('format')!r}")
    return obj


def append_record(record: dict, path) -> None:
    """Append one JSON line to a record stream."""
    line = json.dumps(_plain({"format": RECORD_FORMAT, **record}), sort_keys=True, allow_nan=False)
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(line + "\n")


def read_records(path) -> list:
    if not Path(path).exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


# ------------------------------------------------------------------ model state


def params_to_dict(p: FeatureNetParams) -> dict:
    return {
        "layer_sizes": list(p.layer_sizes),
        "activations": list(p.activations),
        "version": int(p.version),
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
    }


def params_from_dict(d: dict) -> FeatureNetParams:
    weights = [np.asarray(w, dtype=float) for w in d["weights"]]
    biases = [np.asarray(b, dtype=float) for b in d["biases"]]
    p = FeatureNetParams(weights, biases, tuple(d["activations"]), int(d.get("version", 0)))
    if list(p.layer_sizes) != list(d["layer_sizes"]):
        raise ValueError("checkpoint layer sizes do not match the stored weights")
    return p


def state_to_dict(s: ServerState) -> dict:
    ind = None
    if s.inducing is not None:
        ind = {"Xbar": s.inducing.Xbar.tolist(), "ybar": s.inducing.ybar.tolist()}
    return {"round": int(s.round), "params": params_to_dict(s.params), "inducing": ind}


def state_from_dict(d: dict) -> ServerState:
    ind = d.get("inducing")
    inducing = None if ind is None else InducingSet(np.asarray(ind["Xbar"], dtype=float), ind["ybar"])
    return ServerState(params_from_dict(d["params"]), inducing, int(d["round"]))


def save_checkpoint(path, state, config: dict | None = None) -> None:
    """``state`` is a ServerState, or ``{cid: ServerState}`` for the Local baseline."""
    obj = {"format": CHECKPOINT_FORMAT, "config": config}
    if isinstance(state, dict):
        obj["local"] = {str(cid): state_to_dict(s) for cid, s in sorted(state.items())}
    else:
        obj["server"] = state_to_dict(state)
    write_json(obj, path)


def load_checkpoint(path):
    """Returns ``(state, config)``."""
    obj = read_json(path, CHECKPOINT_FORMAT)
    if "local" in obj:
        state = {int(cid): state_from_dict(s) for cid, s in obj["local"].items()}
    else:
        state = state_from_dict(obj["server"])
    return state, obj.get("config")


# ---------------------------------------------------------------------- shards


def save_shards(run_dir, shards, manifest: dict) -> None:
    """Write each client's splits as dataset text files plus a manifest."""
    run_dir = Path(run_dir)
    (run_dir / "clients").mkdir(parents=True, exist_ok=True)
    clients = []
    for s in shards:
        entry = {"cid": int(s.cid), "classes": list(s.classes), "noise": None if s.noise is None else s.noise.to_dict()}
        for split in SPLITS:
            X, y = s.split(split)
            name = f"clients/{s.cid:05d}_{split}.csv"
            save_dataset(Dataset(X, y), run_dir / name)
            entry[split] = {"file": name, "n": int(len(y)),
                            "counts": {str(c): int(np.sum(y == c)) for c in s.classes}}
            if s.indices is not None:
                entry[split]["indices"] = np.asarray(s.indices[split]).tolist()
        clients.append(entry)
    write_json({"format": MANIFEST_FORMAT, **manifest, "clients": clients}, run_dir / "manifest.json")


def load_shards(run_dir):
    """Returns ``(shards, manifest)``."""
    run_dir = Path(run_dir)
    manifest = read_json(run_dir / "manifest.json", MANIFEST_FORMAT)
    shards = []
    for entry in manifest["clients"]:
        parts, idx = {}, {}
        for split in SPLITS:
            ds = load_dataset(run_dir / entry[split]["file"])
            parts[split] = ds
            if "indices" in entry[split]:
                idx[split] = np.asarray(entry[split]["indices"], dtype=int)
        noise = entry.get("noise")
        shards.append(ClientShard(
            entry["cid"], parts["train"].X, parts["train"].y, parts["val"].X, parts["val"].y,
            parts["test"].X, parts["test"].y, tuple(entry["classes"]),
            None if noise is None else NoiseModel(noise["kind"], tuple(noise["params"]), noise["seed"]),
            idx or None,
        ))
    return shards, manifest
