"""Checkpoint store: a manifest plus raw little-endian tensor files.

Each tie group is written once under its owner (lexicographically smallest)
name; the manifest records group membership, trainability, model config, and
provenance.  Canonical ordering makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .model import ModelConfig
from .params import ParameterStore

FORMAT_VERSION = 1


def _tensor_file(owner):
    return owner.replace(".", "__") + ".bin"


def _le_dtype(dtype):
    d = np.dtype(dtype)
    if d.kind != "f" or d.itemsize not in (4, 8):
        raise ValueError(f"unsupported tensor dtype: {d}")
    return f"<f{d.itemsize}"


def save(path, cfg, store, provenance=None, opt_state=None):
    os.makedirs(path, exist_ok=True)
    params = []
    for owner, tensor in store.unique_items():
        dtype = _le_dtype(tensor.data.dtype)
        fname = _tensor_file(owner)
        tensor.data.astype(dtype).tofile(os.path.join(path, fname))
        params.append({"name": owner, "file": fname,
                       "shape": list(tensor.data.shape), "dtype": dtype})
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": cfg.to_dict(),
        "params": params,
        "tie_groups": store.tie_groups(),
        "trainable": {owner: t.requires_grad for owner, t in store.unique_items()},
        "provenance": provenance or {},
    }
    if opt_state is not None:
        optim = {}
        for owner in sorted(opt_state.slots):
            slot = opt_state.slots[owner]
            base = "optim__" + _tensor_file(owner)
            slot["m"].astype(_le_dtype(slot["m"].dtype)).tofile(os.path.join(path, "m__" + base))
            slot["v"].astype(_le_dtype(slot["v"].dtype)).tofile(os.path.join(path, "v__" + base))
            optim[owner] = {"t": slot["t"], "m_file": "m__" + base, "v_file": "v__" + base,
                            "dtype": _le_dtype(slot["m"].dtype)}
        manifest["optim"] = optim
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def load(path):
    """Returns (cfg, store, manifest, opt_state-or-None)."""
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {manifest.get('format_version')}")
    cfg = ModelConfig.from_dict(manifest["model"])
    store = ParameterStore()
    trainable = manifest["trainable"]
    for entry in manifest["params"]:
        arr = np.fromfile(os.path.join(path, entry["file"]), dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
        store.add(entry["name"], arr, trainable=trainable[entry["name"]])
    for group in manifest["tie_groups"]:
        owner = group[0]
        for name in group[1:]:
            store.tie(name, owner)
    opt_state = None
    if "optim" in manifest:
        from .optim import OptimState
        opt_state = OptimState()
        for owner, entry in manifest["optim"].items():
            dtype = np.dtype(entry["dtype"])
            shape = store[owner].data.shape
            m = np.fromfile(os.path.join(path, entry["m_file"]), dtype=dtype).reshape(shape)
            v = np.fromfile(os.path.join(path, entry["v_file"]), dtype=dtype).reshape(shape)
            opt_state.slots[owner] = {"m": m.astype(dtype.newbyteorder("=")),
                                      "v": v.astype(dtype.newbyteorder("=")),
                                      "t": entry["t"]}
    return cfg, store, manifest, opt_state
