"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes  b"BKCK"
    version    u32
    stage      u32 length + UTF-8
    config     u32 length + UTF-8 JSON (sorted keys, compact separators)
    rng_state  u32 length + UTF-8 JSON
    n_records  u32
    record * n_records:
        name    u16 length + UTF-8
        dtype   u8   (1 float32, 2 float64, 3 int64)
        ndim    u8
        shape   u32 * ndim
        nbytes  u64
        data    raw little-endian, C order
    crc32      u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .bkp import BKPConfig
from .head import LossConfig
from .model import BiKopModel, ModelConfig
from .sad import SADConfig
from .text import TextConfig

MAGIC = b"BKCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: BiKopModel
    stage: str
    config: dict
    rng_state: dict


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    bb = dict(d["backbone"])
    bb["image_size"] = tuple(bb["image_size"])
    return ModelConfig(
        backbone=BackboneConfig(**bb),
        text=TextConfig(**d["text"]),
        bkp=BKPConfig(**d["bkp"]),
        sad=SADConfig(**d["sad"]),
        loss=LossConfig(**d["loss"]),
        vocab_size=d["vocab_size"],
        n_slots=d["n_slots"],
        seed=d["seed"],
    )


def _blob(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_checkpoint(model: BiKopModel, stage: str, config: dict | None = None,
                      rng_state: dict | None = None) -> bytes:
    config = dict(config or {})
    config["model"] = model_config_to_dict(model.config)
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(stage), _blob(_dumps(config)),
             _blob(_dumps(rng_state or {}))]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", len(data)) + data)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: BiKopModel, path: str | Path, stage: str = "finetune",
                    config: dict | None = None, rng_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, stage, config, rng_state))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 12:
        raise CheckpointError("checkpoint is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is corrupt or truncated (crc mismatch)")
    stage = r.string()
    config = json.loads(r.string())
    rng_state = json.loads(r.string())
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    mcfg = model_config_from_dict(config["model"])
    model = BiKopModel(mcfg)
    if any(v.dtype == torch.float64 for v in state.values()):
        model.double()
    model.load_state_dict(state)
    return Checkpoint(model=model, stage=stage, config=config, rng_state=rng_state)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
