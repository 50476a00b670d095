"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"LKF1"
    config length, UTF-8 ``key=value`` lines
    repeated until EOF:
        name length, UTF-8 name, ndim, dims..., raw little-endian f64 payload

Records named ``optim.*`` carry optimizer state and are kept apart from the
model parameters.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .model import LkformerConfig, LkraConfig, build_model, named_parameters
from .tensor import Rng

MAGIC = b"LKF1"
FORMAT_VERSION = 1
OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: LkformerConfig
    params: dict
    metadata: dict[str, str] = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def config_to_text(cfg: LkformerConfig, metadata: Optional[Mapping[str, str]] = None) -> str:
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"channels={cfg.channels}",
        f"rtb_count={cfg.rtb_count}",
        f"tl_count={cfg.tl_count}",
        f"scale={cfg.scale}",
        f"in_channels={cfg.in_channels}",
        f"gpfn_expansion={cfg.gpfn_expansion}",
        f"lkra.kernels={','.join(str(k) for k in cfg.lkra.kernels)}",
        f"lkra.use_local_pair={str(cfg.lkra.use_local_pair).lower()}",
        f"lkra.inner_residual={str(cfg.lkra.inner_residual).lower()}",
    ]
    for key, value in (metadata or {}).items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise CheckpointError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"meta.{key}={value}")
    return "\n".join(lines) + "\n"


def _parse_bool(text: str) -> bool:
    if text not in ("true", "false"):
        raise CheckpointError(f"bad boolean {text!r}")
    return text == "true"


def config_from_text(text: str) -> tuple[LkformerConfig, dict[str, str]]:
    values: dict[str, str] = {}
    metadata: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        if key.startswith("meta."):
            metadata[key[5:]] = value
        else:
            values[key] = value
    if values.get("format_version") != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported format version {values.get('format_version')!r}")
    try:
        kernels = tuple(int(k) for k in values["lkra.kernels"].split(",") if k)
        lkra = LkraConfig(kernels, _parse_bool(values["lkra.use_local_pair"]),
                          _parse_bool(values["lkra.inner_residual"]))
        cfg = LkformerConfig(
            channels=int(values["channels"]),
            rtb_count=int(values["rtb_count"]),
            tl_count=int(values["tl_count"]),
            scale=int(values["scale"]),
            in_channels=int(values["in_channels"]),
            lkra=lkra,
            gpfn_expansion=int(values["gpfn_expansion"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"config record missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CheckpointError(f"invalid config record: {exc}") from None
    return cfg, metadata


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _record(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    head = _u32(len(encoded)) + encoded + _u32(arr.ndim) + b"".join(_u32(d) for d in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, cfg: LkformerConfig, params: dict,
                    metadata: Optional[Mapping[str, str]] = None,
                    extra: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Write atomically (temp file + rename)."""
    config = config_to_text(cfg, metadata).encode("utf-8")
    chunks = [MAGIC, _u32(len(config)), config]
    for name, t in named_parameters(params):
        chunks.append(_record(name, t.data))
    for name, arr in (extra or {}).items():
        chunks.append(_record(OPTIM_PREFIX + name, np.asarray(arr)))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    reader = _Reader(buf)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not an LKF1 checkpoint (bad magic bytes)")
    try:
        text = reader.take(reader.u32("config length"), "config").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config record is not valid UTF-8") from None
    cfg, metadata = config_from_text(text)

    records: dict[str, np.ndarray] = {}
    while not reader.done:
        name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        ndim = reader.u32(f"ndim of {name}")
        dims = tuple(reader.u32(f"dims of {name}") for _ in range(ndim))
        count = int(np.prod(dims)) if dims else 1
        payload = reader.take(8 * count, f"payload of {name}")
        if name in records:
            raise CheckpointError(f"duplicate record {name!r}")
        records[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)

    # a throwaway build supplies the canonical names and shapes
    params = build_model(cfg, Rng(0), std=1.0)
    for name, t in named_parameters(params):
        arr = records.pop(name, None)
        if arr is None:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if arr.shape != t.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} does not match config {t.shape}")
        t.data[...] = arr
    extra = {}
    for name in list(records):
        if name.startswith(OPTIM_PREFIX):
            extra[name[len(OPTIM_PREFIX):]] = records.pop(name)
    if records:
        raise CheckpointError(f"unexpected records: {sorted(records)[:5]}")
    return Checkpoint(cfg, params, metadata, extra)


def load_checkpoint(path) -> tuple[LkformerConfig, dict]:
    ckpt = read_checkpoint(path)
    return ckpt.config, ckpt.params
