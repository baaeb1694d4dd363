"""Versioned parameter container: named float tensors in an .npz plus a JSON header.

The header (key ``__meta__``) holds the format version, the sha256 of the
canonical config text, and free-form metadata.  Loading refuses a config hash
mismatch unless ``force=True``.
"""
from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def config_hash(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


def save_checkpoint(path, modules: dict, config_text: str, meta: dict | None = None) -> Path:
    """``modules`` maps a name to an ``nn.Module``; tensors are stored as ``name/param``."""
    arrays = {}
    for name, mod in modules.items():
        for k, v in mod.state_dict().items():
            arrays[f"{name}/{k}"] = v.detach().cpu().numpy()
    header = {"version": FORMAT_VERSION, "config_sha256": config_hash(config_text), "meta": meta or {}}
    arrays[META_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def read_header(path) -> dict:
    with np.load(path) as z:
        if META_KEY not in z:
            raise CheckpointError(f"{path}: missing header")
        return json.loads(bytes(z[META_KEY]).decode())


def load_checkpoint(path, modules: dict, config_text: str, force: bool = False) -> dict:
    """Load tensors into ``modules`` in place; returns the header."""
    header = read_header(path)
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if header["config_sha256"] != config_hash(config_text) and not force:
        raise CheckpointError(f"{path}: config hash mismatch (checkpoint {header['config_sha256'][:12]})")
    with np.load(path) as z:
        for name, mod in modules.items():
            prefix = f"{name}/"
            state = {k[len(prefix):]: torch.as_tensor(z[k]) for k in z.files if k.startswith(prefix)}
            mod.load_state_dict(state)
    return header
