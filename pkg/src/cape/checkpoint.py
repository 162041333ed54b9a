"""Single-file binary checkpoints with explicit shared-tensor aliasing.

Layout (all integers little-endian uint32 unless noted):

    magic b"CAPE" | version | d_model n_layers n_heads ffn_dim
    max_positions vocab_size seed (int32) | tensor_count |
    per tensor: name_len name ndim dims... float32 row-major data |
    alias_count | per alias: alias_len alias canonical_len canonical

Shared tensors are stored once under the first parameter name that
reaches them; every other name pointing at the same storage goes into the
alias table. Loading rebuilds the model from the config (which recreates
the sharing wiring) and verifies that each alias really does share
storage with its canonical tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .core import DataError
from .model import ApeTransformer, ModelConfig

MAGIC = b"CAPE"
VERSION = 1

_CONFIG_FIELDS = (
    "d_model",
    "n_layers",
    "n_heads",
    "ffn_dim",
    "max_positions",
    "vocab_size",
    "seed",
)


def _named_storage_map(model: ApeTransformer):
    """Split parameter names into canonical tensors and alias pairs."""
    canonical: dict[int, str] = {}
    tensors: list[tuple[str, torch.Tensor]] = []
    aliases: list[tuple[str, str]] = []
    for name, param in model.named_parameters(remove_duplicate=False):
        key = id(param)
        if key in canonical:
            aliases.append((name, canonical[key]))
        else:
            canonical[key] = name
            tensors.append((name, param))
    return tensors, aliases


def save_checkpoint(model: ApeTransformer, path: str | Path) -> None:
    cfg = model.config
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<7i", *(getattr(cfg, f) for f in _CONFIG_FIELDS))
    tensors, aliases = _named_storage_map(model)
    out += struct.pack("<I", len(tensors))
    for name, param in tensors:
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        shape = tuple(param.shape)
        out += struct.pack("<I", len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape) if shape else b""
        data = param.detach().to(torch.float32).contiguous().numpy()
        out += data.tobytes()
    out += struct.pack("<I", len(aliases))
    for alias, target in aliases:
        for text in (alias, target):
            encoded = text.encode("utf-8")
            out += struct.pack("<I", len(encoded))
            out += encoded
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"checkpoint {self.path} is truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path: str | Path, dropout: float = 0.1) -> ApeTransformer:
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise DataError(f"{path} is not a model checkpoint")
    version = reader.u32()
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    values = struct.unpack("<7i", reader.take(28))
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, values)))
    model = ApeTransformer(config, dropout=dropout)
    expected, expected_aliases = _named_storage_map(model)
    expected_names = {name for name, _ in expected}
    seen = set()
    for _ in range(reader.u32()):
        name = reader.text()
        ndim = reader.u32()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        if name not in expected_names:
            raise DataError(f"checkpoint tensor {name} not present in model")
        param = model.get_parameter(name)
        if tuple(param.shape) != tuple(shape):
            raise DataError(
                f"tensor {name} has shape {shape}, model expects "
                f"{tuple(param.shape)}"
            )
        with torch.no_grad():
            param.copy_(torch.from_numpy(data.copy()))
        seen.add(name)
    missing = expected_names - seen
    if missing:
        raise DataError(f"checkpoint is missing tensors: {sorted(missing)}")
    stored_aliases = []
    for _ in range(reader.u32()):
        stored_aliases.append((reader.text(), reader.text()))
    if sorted(stored_aliases) != sorted(expected_aliases):
        raise DataError(
            "checkpoint alias table does not match the model's sharing structure"
        )
    for alias, target in stored_aliases:
        if model.get_parameter(alias) is not model.get_parameter(target):
            raise DataError(f"alias {alias} does not share storage with {target}")
    model.eval()
    return model
