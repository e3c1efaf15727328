"""Versioned binary checkpoint container.

Layout (all little-endian):

    bytes 0..3   magic b"SGET"
    bytes 4..7   format version, uint32 (currently 1)
    bytes 8..15  header length in bytes, uint64
    header       UTF-8 JSON: network config echo, save metadata
                 (epoch, monitored val mIOU), array manifest
                 (name, shape, dtype code) and per-BN update counts
    payload      raw array blobs, concatenated in manifest order

Loading rebuilds the network from the config echo and rejects version
mismatches and any difference between the file's array name set and the
network's registry.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .model import NetworkConfig, SegETNetwork, build

MAGIC = b"SGET"
FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def _array_items(net: SegETNetwork) -> list[tuple[str, np.ndarray]]:
    items: list[tuple[str, np.ndarray]] = []
    for name, p in net.parameters.items():
        items.append((name, p.value))
    for name, state in net.bn_states.items():
        items.append((f"{name}.running_mean", state.running_mean))
        items.append((f"{name}.running_var", state.running_var))
    return items


def save_checkpoint(path: str | Path, net: SegETNetwork, epoch: int, val_miou: float) -> None:
    code = _DTYPE_CODES[net.config.dtype]
    items = _array_items(net)
    manifest = [{"name": n, "shape": list(a.shape)} for n, a in items]
    header = {
        "config": net.config.to_dict(),
        "epoch": int(epoch),
        "val_miou": float(val_miou),
        "dtype": code,
        "arrays": manifest,
        "bn_updates": {n: s.num_updates for n, s in net.bn_states.items()},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in items:
            fh.write(np.ascontiguousarray(a, dtype=code).tobytes())


def load_checkpoint(path: str | Path) -> tuple[SegETNetwork, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + hlen > len(raw):
        raise DataFormatError(f"{path}: truncated header ({hlen} bytes declared)")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    config = NetworkConfig.from_dict(header["config"])
    net = build(config)

    expected = {n: tuple(a.shape) for n, a in _array_items(net)}
    declared = {m["name"]: tuple(m["shape"]) for m in header["arrays"]}
    if set(expected) != set(declared):
        missing = sorted(set(expected) - set(declared))
        extra = sorted(set(declared) - set(expected))
        raise DataFormatError(
            f"{path}: checkpoint array names do not match the network registry "
            f"(missing {missing[:5]}, extra {extra[:5]})"
        )

    code = header["dtype"]
    if code not in _DTYPE_CODES.values():
        raise DataFormatError(f"{path}: unknown array dtype code {code!r}")
    itemsize = np.dtype(code).itemsize
    offset = 16 + hlen
    loaded: dict[str, np.ndarray] = {}
    for m in header["arrays"]:
        shape = tuple(m["shape"])
        if shape != expected[m["name"]]:
            raise DataFormatError(
                f"{path}: array {m['name']} has shape {shape}, expected {expected[m['name']]}"
            )
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * itemsize
        if offset + nbytes > len(raw):
            raise DataFormatError(
                f"{path}: payload truncated at array {m['name']} "
                f"(need {nbytes} bytes at offset {offset})"
            )
        loaded[m["name"]] = np.frombuffer(raw, dtype=code, count=count, offset=offset).reshape(shape)
        offset += nbytes

    dt = net.config.np_dtype
    for name, p in net.parameters.items():
        p.value[...] = loaded[name].astype(dt)
    for name, state in net.bn_states.items():
        state.running_mean[...] = loaded[f"{name}.running_mean"].astype(dt)
        state.running_var[...] = loaded[f"{name}.running_var"].astype(dt)
        state.num_updates = int(header["bn_updates"][name])
    meta = {"epoch": header["epoch"], "val_miou": header["val_miou"]}
    return net, meta
