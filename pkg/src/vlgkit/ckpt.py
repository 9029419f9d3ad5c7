"""Binary checkpoint format: JSON header + named float32 little-endian arrays.

Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, then raw array
data in header order. The header records kind ("model" or "adapters"), the
model config, the adapter variant, and per-array name/shape/frozen flags.
Loading rejects wrong magic, truncated payloads, shape mismatches, and
non-finite values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np
import torch

from .errors import CorpusDecodeError
from .seqcore import ModelConfig, atomic_write_bytes

MAGIC = b"VLGCKPT1"


def _pack(kind: str, config: ModelConfig, variant: str | None,
          named_arrays: list[tuple[str, np.ndarray, bool]]) -> bytes:
    header = {
        "kind": kind,
        "config": asdict(config),
        "variant": variant,
        "arrays": [{"name": n, "shape": list(a.shape), "frozen": fr}
                   for n, a, fr in named_arrays],
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hjson)), hjson]
    for _, a, _ in named_arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def _unpack(payload: bytes) -> tuple[dict, list[np.ndarray]]:
    if payload[:8] != MAGIC:
        raise CorpusDecodeError("bad checkpoint magic")
    if len(payload) < 12:
        raise CorpusDecodeError("truncated checkpoint header")
    (hlen,) = struct.unpack("<I", payload[8:12])
    if len(payload) < 12 + hlen:
        raise CorpusDecodeError("truncated checkpoint header")
    try:
        header = json.loads(payload[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorpusDecodeError(f"bad checkpoint header: {e}") from e
    offset = 12 + hlen
    arrays = []
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
        nbytes = count * 4
        if len(payload) < offset + nbytes:
            raise CorpusDecodeError(f"truncated array {spec['name']!r}")
        a = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").reshape(spec["shape"])
        if not np.all(np.isfinite(a)):
            raise CorpusDecodeError(f"non-finite values in array {spec['name']!r}")
        arrays.append(a)
        offset += nbytes
    if offset != len(payload):
        raise CorpusDecodeError("trailing bytes after checkpoint arrays")
    return header, arrays


def _model_arrays(model) -> list[tuple[str, np.ndarray, bool]]:
    adapter_names = {n for n, _ in model.named_adapter_parameters()}
    out = []
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        out.append((name, p.detach().numpy(), name not in adapter_names))
    return out


def save_model_checkpoint(model, path: str) -> None:
    variant = model.wrapped_linears()[0][1].variant if model.wrapped_linears() else None
    atomic_write_bytes(path, _pack("model", model.config, variant, _model_arrays(model)))


def load_model_checkpoint(path: str):
    """Rebuild a VLGModel (and its adapters, if present) from a checkpoint."""
    from .model import VLGModel

    with open(path, "rb") as f:
        header, arrays = _unpack(f.read())
    if header["kind"] != "model":
        raise CorpusDecodeError(f"expected a model checkpoint, got {header['kind']!r}")
    cfg = header["config"]
    cfg["wrapped_layers"] = tuple(cfg["wrapped_layers"])
    config = ModelConfig(**cfg)
    model = VLGModel(config)
    if header["variant"] is not None:
        model.init_adapters(header["variant"])
    listed = {spec["name"] for spec in header["arrays"]}
    missing = {n for n, _ in model.named_parameters()} - listed
    if missing:
        raise CorpusDecodeError(f"checkpoint missing parameters {sorted(missing)[:3]}")
    _load_named(model, header, arrays)
    return model


def save_adapter_checkpoint(model, path: str) -> None:
    layers = model.wrapped_linears()
    if not layers or layers[0][1].variant is None:
        raise CorpusDecodeError("model has no adapters to checkpoint")
    named = [(n, p.detach().numpy(), False) for n, p in model.named_adapter_parameters()]
    named.sort(key=lambda kv: kv[0])
    atomic_write_bytes(path, _pack("adapters", model.config, layers[0][1].variant, named))


def load_adapter_checkpoint(model, path: str) -> str:
    """Attach the checkpointed variant's adapters to model and load values."""
    with open(path, "rb") as f:
        header, arrays = _unpack(f.read())
    if header["kind"] != "adapters":
        raise CorpusDecodeError(f"expected an adapter checkpoint, got {header['kind']!r}")
    model.init_adapters(header["variant"])
    _load_named(model, header, arrays)
    return header["variant"]


def _load_named(model, header: dict, arrays: list[np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for spec, a in zip(header["arrays"], arrays):
        name = spec["name"]
        if name not in params:
            raise CorpusDecodeError(f"unknown parameter {name!r} in checkpoint")
        p = params[name]
        if tuple(p.shape) != tuple(spec["shape"]):
            raise CorpusDecodeError(
                f"shape mismatch for {name!r}: checkpoint {spec['shape']}, "
                f"model {list(p.shape)}")
        with torch.no_grad():
            p.copy_(torch.from_numpy(a.astype(np.float64)))
