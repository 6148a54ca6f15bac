"""CVIT checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes  b"CVIT"
    version    u32      currently 1
    cfg_len    u32      byte length of the config block
    config     cfg_len  UTF-8 ``key=value`` lines, one per line
    n_tensors  u32
    per tensor:
        name_len u16, name (UTF-8)
        ndim     u8,  dims (u64 each)
        dtype    u8 length + ASCII tag, "f64" or "f32"
        payload  prod(dims) little-endian floats, C order

Tensors are written in the order given; loading preserves that order, so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CVIT"
VERSION = 1
_DTYPES = {"f64": "<f8", "f32": "<f4"}


class CheckpointError(ValueError):
    pass


def encode(config: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    cfg = "".join(f"{k}={v}\n" for k, v in config.items()).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = "f32" if arr.dtype == np.float32 else "f64"
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(struct.pack("<B", len(tag)) + tag.encode())
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a CVIT checkpoint")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = {}
    for line in r.take(cfg_len).decode().splitlines():
        k, sep, v = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        config[k] = v
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}Q")
        (tlen,) = r.unpack("<B")
        tag = r.take(tlen).decode()
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r}")
        dt = np.dtype(_DTYPES[tag])
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after tensor directory")
    return config, tensors


def save(path, config: dict[str, str], tensors: dict[str, np.ndarray]):
    Path(path).write_bytes(encode(config, tensors))


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def save_model(path, params, cfg, stats=None, extra: dict[str, str] | None = None):
    """Write model params (plus optional standardization stats) with the model config."""
    from .config import format_config

    tensors = dict(params.arrays())
    if stats is not None:
        tensors.update(stats.arrays())
    config = format_config(cfg)
    config.update(extra or {})
    save(path, config, tensors)


def load_model(path):
    """-> (ModelConfig, ModelParams, StandardizationStats | None, raw config dict)."""
    from .config import model_config_from
    from .distill import StandardizationStats
    from .model import ModelParams

    config, tensors = load(path)
    cfg = model_config_from(config)
    params = ModelParams.from_arrays(cfg, tensors)
    stats = StandardizationStats.from_arrays(tensors) if "stats.mean" in tensors else None
    return cfg, params, stats, config
