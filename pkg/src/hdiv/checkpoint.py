"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HDIV1"                      magic, 5 bytes
    u32 version                   currently 1
    u32 entry count
    entry*:
        u32 name length, name bytes (UTF-8)
        u8  dtype tag             0 = f32, 1 = f64
        u8  rank
        u32 dim * rank
        raw values, row-major, little-endian
    u32 CRC-32 of every preceding byte

Model hyper-parameters travel as rank-0 f64 ``meta.*`` entries so a checkpoint is
self-describing.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .pyramid import ModelConfig, PyramidModel

MAGIC = b"HDIV1"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}
SUBNET_CODES = {"DB": 0, "RB": 1}
META_KEYS = ("levels", "blocks", "channels", "growth", "subnet", "alpha", "noise_fraction")


class CheckpointError(Exception):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", TAG_OF[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[TAG_OF[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError("file too short to be a checkpoint")
    if blob[:5] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:5]!r}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    version, count = struct.unpack_from("<II", body, 5)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 13
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"{name}: truncated data")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)


def model_tensors(model: PyramidModel, state: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    cfg = model.config
    meta = {"levels": cfg.levels, "blocks": cfg.blocks, "channels": cfg.channels, "growth": cfg.growth,
            "subnet": SUBNET_CODES[cfg.subnet], "alpha": cfg.alpha, "noise_fraction": cfg.noise_fraction}
    out = {f"meta.{k}": np.asarray(meta[k], dtype=np.float64) for k in META_KEYS}
    out.update(state if state is not None else model.params.state())
    return out


def save_model(path: str | Path, model: PyramidModel, state: dict[str, np.ndarray] | None = None) -> None:
    save(path, model_tensors(model, state))


def load_model(path: str | Path, dtype: str | None = None) -> PyramidModel:
    tensors = load(path)
    try:
        meta = {k: float(tensors.pop(f"meta.{k}")) for k in META_KEYS}
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks model metadata {exc}") from exc
    kinds = {v: k for k, v in SUBNET_CODES.items()}
    first = next(iter(tensors.values()), None)
    stored = "f64" if first is not None and first.dtype == np.float64 else "f32"
    cfg = ModelConfig(levels=int(meta["levels"]), blocks=int(meta["blocks"]), channels=int(meta["channels"]),
                      growth=int(meta["growth"]), subnet=kinds[int(meta["subnet"])],
                      alpha=float(meta["alpha"]),
                      noise_fraction=meta["noise_fraction"],
                      dtype=dtype or stored)
    model = PyramidModel.create(cfg)
    try:
        model.params.load_state(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its metadata: {exc}") from exc
    return model
