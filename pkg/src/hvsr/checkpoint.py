"""Single-file checkpoint container.

Layout::

    HVSRCKPT1\\n
    <header length in bytes, ASCII decimal>\\n
    <header: UTF-8 JSON {"metadata": ..., "tensors": [...]}>
    <payload: concatenated little-endian float32 tensors>

Each tensor entry records its name, shape and byte offset into the payload.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ParentMismatchError
from .hvae import HVAE, LIKELIHOOD, HierarchySpec

MAGIC = b"HVSRCKPT1\n"
_DTYPE = np.dtype("<f4")


def save_tensors(path, tensors: dict[str, torch.Tensor], metadata: dict) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        # ascontiguousarray would promote 0-d tensors to 1-d
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype(_DTYPE, copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata, "tensors": entries}, sort_keys=True, indent=1).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header)}\n".encode())
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)
    return path


def read_header(path) -> tuple[dict, list[dict], int]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        try:
            n = int(f.readline().decode())
            header = json.loads(f.read(n).decode())
            metadata, entries = header["metadata"], header["tensors"]
        except (ValueError, UnicodeDecodeError, KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        start = f.tell()
    return metadata, entries, start


def load_tensors(path) -> tuple[dict, dict[str, torch.Tensor]]:
    metadata, entries, start = read_header(path)
    raw = Path(path).read_bytes()[start:]
    tensors = {}
    for e in entries:
        chunk = raw[e["offset"]: e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        try:
            arr = np.frombuffer(chunk, dtype=_DTYPE).reshape(e["shape"])
        except ValueError as exc:
            raise CheckpointError(f"{path}: bad entry for {e['name']} ({exc})") from exc
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return metadata, tensors


def content_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parameter_hash(module: nn.Module, prefixes: tuple[str, ...] = ("",)) -> str:
    """Hash of the raw bytes of every parameter whose name has one of ``prefixes``."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        if name.startswith(prefixes):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], path) -> None:
    expected = module.state_dict()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: tensor names do not match the spec (missing {missing[:5]}, unexpected {extra[:5]})")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, spec needs {tuple(expected[name].shape)}")
    module.load_state_dict({n: t.to(expected[n].dtype) for n, t in tensors.items()})


# --------------------------------------------------------------------------
# model-level helpers


def save_vae(path, model: HVAE, step: int = 0, seed: int = 0, **extra) -> Path:
    metadata = {
        "kind": "hvae",
        "spec": model.spec.to_dict(),
        "likelihood": LIKELIHOOD,
        "step": int(step),
        "seed": int(seed),
        "weight_decay": 0.0,
        "warmup": None,
        "ema": None,
        **extra,
    }
    return save_tensors(path, model.state_dict(), metadata)


def load_vae(path) -> tuple[HVAE, dict]:
    metadata, tensors = load_tensors(path)
    if metadata.get("kind") != "hvae":
        raise CheckpointError(f"{path} holds a {metadata.get('kind')!r} checkpoint, not an hvae")
    if metadata.get("likelihood") != LIKELIHOOD:
        raise CheckpointError(f"{path}: unsupported likelihood {metadata.get('likelihood')!r}")
    model = HVAE(HierarchySpec.from_dict(metadata["spec"]))
    load_into(model, tensors, path)
    model.eval()
    return model, metadata


def save_lr_encoder(path, lrenc, parent_hash: str, step: int = 0, seed: int = 0, **extra) -> Path:
    metadata = {
        "kind": "lr-encoder",
        "spec": lrenc.spec.to_dict(),
        "k": lrenc.k,
        "scale": lrenc.scale,
        "width_factor": lrenc.width_factor,
        "parent_hash": parent_hash,
        "step": int(step),
        "seed": int(seed),
        **extra,
    }
    return save_tensors(path, lrenc.state_dict(), metadata)


def load_lr_encoder(path, parent_hash: str):
    from .lr_encoder import LrEncoder

    metadata, tensors = load_tensors(path)
    if metadata.get("kind") != "lr-encoder":
        raise CheckpointError(f"{path} holds a {metadata.get('kind')!r} checkpoint, not an lr-encoder")
    if metadata["parent_hash"] != parent_hash:
        raise ParentMismatchError(
            f"{path}: parent VAE hash mismatch (recorded {metadata['parent_hash'][:12]}, got {parent_hash[:12]})"
        )
    lrenc = LrEncoder(HierarchySpec.from_dict(metadata["spec"]), metadata["scale"],
                      k=metadata["k"], width_factor=metadata["width_factor"])
    load_into(lrenc, tensors, path)
    lrenc.eval()
    return lrenc, metadata
