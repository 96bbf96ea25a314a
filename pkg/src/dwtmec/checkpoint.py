"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"DWTMECCK"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: config, input shape, class count, tensor table
    payload   float64 little-endian tensors, concatenated in table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .train import TrainConfig, build_network
from .whitening import BatchStats, Domain

MAGIC = b"DWTMECCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(net):
    out = []
    for i, layer in enumerate(net.layers):
        for p in layer.parameters():
            out.append((f"layers.{i}.{p.name}", p.value))
        running = getattr(layer, "running", None)
        if running is None:
            continue
        for dom in Domain:
            stats = running[dom]
            if stats is not None:
                out.append((f"layers.{i}.running.{dom.value}.mu", stats.mu))
                out.append((f"layers.{i}.running.{dom.value}.sigma", stats.sigma))
    return out


def save_checkpoint(path, net, cfg: TrainConfig, input_shape, n_classes: int, extra: dict | None = None):
    tensors = _tensors(net)
    counts = {}
    for i, layer in enumerate(net.layers):
        for dom, stats in getattr(layer, "running", {}).items():
            if stats is not None:
                counts[f"layers.{i}.running.{dom.value}"] = stats.count
    header = {
        "endianness": "little",
        "dtype": "<f8",
        "config": cfg.to_dict(),
        "input_shape": [int(v) for v in input_shape],
        "n_classes": int(n_classes),
        "tensors": [{"name": n, "shape": list(v.shape)} for n, v in tensors],
        "counts": counts,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for _, v in tensors:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the network; returns ``(net, cfg, header)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[20:20 + hlen].decode())
    cfg = TrainConfig(**header["config"])
    net = build_network(cfg, header["input_shape"], header["n_classes"], seed=0)
    params = {f"layers.{i}.{p.name}": p for i, layer in enumerate(net.layers) for p in layer.parameters()}
    offset = 20 + hlen
    stats = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise CheckpointError(f"{path}: payload truncated at tensor {entry['name']}")
        value = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += n
        name = entry["name"]
        if name in params:
            if params[name].value.shape != shape:
                raise CheckpointError(f"{name}: shape {shape} does not match network")
            params[name].value[...] = value
        elif ".running." in name:
            key, field_name = name.rsplit(".", 1)
            stats.setdefault(key, {})[field_name] = value
        else:
            raise CheckpointError(f"unexpected tensor {name}")
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    for key, parts in stats.items():
        _, idx, _, dom = key.split(".")
        layer = net.layers[int(idx)]
        layer.running[Domain(dom)] = BatchStats(parts["mu"], parts["sigma"], header["counts"][key])
    return net, cfg, header
