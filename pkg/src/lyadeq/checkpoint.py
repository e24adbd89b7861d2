"""Versioned binary container: manifest + little-endian float64 blocks.

Layout::

    8 bytes   magic b"LYADEQ\\x00\\x01"
    4 bytes   little-endian uint32 format version
    4 bytes   little-endian uint32 manifest length L
    L bytes   UTF-8 JSON manifest {"kind", "meta", "blocks": [{"name", "shape"}, ...]}
    ...       each block as little-endian float64, row-major, in manifest order
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LYADEQ\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, kind: str, meta: dict, blocks: list[tuple[str, np.ndarray]]) -> None:
    manifest = {
        "kind": kind,
        "meta": meta,
        "blocks": [{"name": n, "shape": list(np.shape(a))} for n, a in blocks],
    }
    raw = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for _, a in blocks:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_container(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    version, mlen = struct.unpack("<II", buf[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    manifest = json.loads(buf[16 : 16 + mlen].decode())
    off = 16 + mlen
    blocks = {}
    for b in manifest["blocks"]:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        end = off + 8 * count
        if end > len(buf):
            raise CheckpointError(f"{path}: truncated block {b['name']!r}")
        blocks[b["name"]] = np.frombuffer(buf[off:end], dtype="<f8").reshape(b["shape"]).astype(np.float64)
        off = end
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return manifest["kind"], manifest["meta"], blocks


def save_model(path, model, seed: int, epoch: int, extra: dict | None = None) -> None:
    from .layers import OrthogonalFCParams

    meta = {
        "variant": model.variant,
        "seed": seed,
        "epoch": epoch,
        "norm": model.deq.norm_inner.kind,
        "state": model.deq.n,
        "n_in": model.feature.weight.shape[1],
        "classes": model.head.n_out if isinstance(model.head, OrthogonalFCParams) else model.head.weight.shape[0],
        "icnn_hidden": model.icnn.W0.shape[0] if model.icnn is not None else None,
        "d": model.icnn.d if model.icnn is not None else None,
    }
    meta.update(extra or {})
    blocks = [(n, t.data) for n, t in model.named_parameters()] + model.buffers()
    write_container(path, "model", meta, blocks)


def load_model(path):
    from .model import init_model

    kind, meta, blocks = read_container(path)
    if kind != "model":
        raise CheckpointError(f"{path}: holds a {kind!r}, not a model")
    model = init_model(meta["variant"], meta["seed"], n_in=meta["n_in"], state=meta["state"],
                       classes=meta["classes"], norm=meta["norm"],
                       icnn_hidden=meta["icnn_hidden"] or 64, d=meta["d"] or 0.1)
    for name, t in model.named_parameters():
        if name not in blocks:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if blocks[name].shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {blocks[name].shape}, expected {t.shape}")
        t.data = blocks[name].copy()
    for name, arr in model.buffers():
        norm = model.deq.norm_inner if name.startswith("deq.norm_inner") else model.deq.norm_out
        setattr(norm, name.rsplit(".", 1)[1], blocks[name].copy())
    return model, meta


def save_dataset(path, ds) -> None:
    write_container(path, "dataset", {"split": ds.split, "note": ds.note},
                    [("images", ds.images), ("labels", ds.labels.astype(np.float64))])


def load_dataset(path):
    from .datasets import Dataset

    kind, meta, blocks = read_container(path)
    if kind != "dataset":
        raise CheckpointError(f"{path}: holds a {kind!r}, not a dataset")
    return Dataset(blocks["images"], blocks["labels"].astype(np.int64), meta["split"], meta["note"])
