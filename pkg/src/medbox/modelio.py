"""Binary model file format.

Layout (all integers little-endian):

    bytes 0..7    magic "MBOXNET1"
    bytes 8..11   u32 format version (currently 1)
    bytes 12..15  u32 header length in bytes
    then          UTF-8 JSON header
    then          raw tensor data, each tensor at an 8-byte-aligned offset

The JSON header carries the full model configuration and an ordered tensor
directory of (name, dtype, shape, offset). Offsets are absolute file
positions. Parameters, BN running statistics, BN initialized flags, and
per-parameter trainable flags all round-trip exactly.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import BadMagic, ModelFormatError, TruncatedTensor, VersionMismatch
from .net import ModelConfig, Network
from .ops import BNState

MAGIC = b"MBOXNET1"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _align8(n: int) -> int:
    return (n + 7) & ~7


def save(net: Network, path) -> None:
    """Write the network (config, parameters, BN state) to ``path``."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name in net.param_names():
        tensors.append((name, net.params[name]))
    for name, st in sorted(net.bn_states.items()):
        tensors.append((f"{name}.running_mean", st.running_mean))
        tensors.append((f"{name}.running_var", st.running_var))

    directory = []
    blobs = []
    offset = None  # placeholder; patched after the header is sized
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ModelFormatError(f"unsupported tensor dtype {dtype} for {name}")
        blobs.append(arr.astype(_DTYPES[dtype]).tobytes())
        directory.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})

    header = {
        "config": net.config.to_dict(),
        "trainable": {k: bool(v) for k, v in net.trainable.items()},
        "bn_initialized": {k: bool(v.initialized) for k, v in net.bn_states.items()},
        "tensors": directory,
    }
    # two passes: header length shifts offsets, so size it with final digits
    header_bytes = b""
    for _ in range(3):
        base = _align8(16 + len(header_bytes))
        pos = base
        for entry, blob in zip(directory, blobs):
            entry["offset"] = pos
            pos = _align8(pos + len(blob))
        new_header = json.dumps(header, separators=(",", ":")).encode("utf-8")
        if len(new_header) == len(header_bytes):
            header_bytes = new_header
            break
        header_bytes = new_header

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        pos = 16 + len(header_bytes)
        for entry, blob in zip(directory, blobs):
            f.write(b"\x00" * (entry["offset"] - pos))
            f.write(blob)
            pos = entry["offset"] + len(blob)


def load(path) -> Network:
    """Read a model file written by :func:`save`."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise BadMagic(f"{path}: not a model file (bad magic)")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {VERSION}")
    header_len = struct.unpack("<I", raw[12:16])[0]
    if len(raw) < 16 + header_len:
        raise TruncatedTensor(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: corrupt header: {e}") from e

    config = ModelConfig.from_dict(header["config"])
    net = Network(config)
    arrays = {}
    for entry in header["tensors"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ModelFormatError(f"{path}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        start = entry["offset"]
        if start % 8:
            raise ModelFormatError(f"{path}: tensor {entry['name']} offset not aligned")
        if start + nbytes > len(raw):
            raise TruncatedTensor(
                f"{path}: truncated tensor data for {entry['name']!r} "
                f"(need {start + nbytes} bytes, file has {len(raw)})"
            )
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=start
        ).reshape(shape).astype(entry["dtype"])

    expected = net.param_names()
    missing = [n for n in expected if n not in arrays]
    if missing:
        raise ModelFormatError(f"{path}: missing tensors {missing[:4]}...")
    for name in expected:
        net.params[name] = arrays[name]
        net.trainable[name] = bool(header.get("trainable", {}).get(name, True))
    bn_names = [n for n in expected if n.endswith(".gamma")]
    for gamma_name in bn_names:
        name = gamma_name[: -len(".gamma")]
        for suffix in (".running_mean", ".running_var"):
            if name + suffix not in arrays:
                raise ModelFormatError(f"{path}: missing tensor {name + suffix!r}")
        st = BNState(arrays[name + ".running_mean"].size)
        st.running_mean = arrays[name + ".running_mean"]
        st.running_var = arrays[name + ".running_var"]
        st.initialized = bool(header.get("bn_initialized", {}).get(name, False))
        net.bn_states[name] = st
    return net
