"""Binary weight container.

Layout, all integers little-endian:

    bytes 0-3   magic "NLF1"
    uint32      format version (currently 1)
    uint32      header length
    bytes       header: canonical JSON (sorted keys, compact separators)
                with the architecture config, ray metadata, channel-order
                string, and folded flag
    uint32      record count
    records     uint16 name length, name bytes (utf-8),
                uint8 rank, rank x uint32 dims,
                payload as little-endian float32

Records hold every trainable parameter followed by every normalization
running-stat buffer, in model traversal order; the same container layout
stores optimizer moments for checkpoints.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .network import Model, NetConfig, build_model
from .optim import AdamState
from .rays import CHANNEL_ORDER

MAGIC = b"NLF1"
VERSION = 1


class WeightFormatError(ValueError):
    """Raised for bad magic, version, truncation, or shape mismatches."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_container(path: Path, header: dict, tensors: "OrderedDict[str, np.ndarray]") -> None:
    hb = canonical_json(header)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise WeightFormatError(f"tensor name too long: {name!r}")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            a = np.asarray(arr)
            f.write(struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise WeightFormatError(f"truncated file while reading {what}")
    return b


def _read_container(path: Path):
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise WeightFormatError(f"{path} is not a weight file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise WeightFormatError(f"unsupported format version {version} (expected {VERSION})")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, hlen, "header"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, 4 * n_elem, f"tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        return header, tensors


@dataclass
class ModelWeights:
    """Parsed weight file: architecture, ray metadata, named tensors."""

    config: NetConfig
    tensors: "OrderedDict[str, np.ndarray]"
    ray: Dict = field(default_factory=dict)
    folded: bool = False
    version: int = VERSION


def model_tensors(model: Model) -> "OrderedDict[str, np.ndarray]":
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for p in model.params():
        out[p.name] = p.value
    for name, buf in model.buffers():
        out[name] = buf
    return out


def save_weights(model: Model, path, ray: Optional[Dict] = None) -> None:
    header = {
        "channel_order": CHANNEL_ORDER,
        "config": model.config.to_dict(),
        "folded": model.folded,
        "ray": ray or {},
    }
    _write_container(Path(path), header, model_tensors(model))


def load_weights(path) -> ModelWeights:
    header, tensors = _read_container(Path(path))
    try:
        config = NetConfig.from_dict(header["config"])
    except (KeyError, TypeError) as e:
        raise WeightFormatError(f"malformed config header: {e}") from None
    return ModelWeights(
        config=config,
        tensors=tensors,
        ray=header.get("ray", {}),
        folded=bool(header.get("folded", False)),
    )


def model_from_weights(mw: ModelWeights, dtype=np.float32) -> Model:
    """Rebuild the architecture and load every tensor, validating shapes."""
    model = build_model(mw.config, seed=0, dtype=dtype)
    model.folded = mw.folded
    load_into_model(model, mw)
    return model


def load_into_model(model: Model, mw: ModelWeights) -> None:
    """Copy stored tensors into an existing model of the same architecture."""
    if model.config != mw.config:
        raise WeightFormatError("stored config does not match the model's architecture")
    expected = model_tensors(model)
    missing = set(expected) - set(mw.tensors)
    extra = set(mw.tensors) - set(expected)
    if missing or extra:
        raise WeightFormatError(
            f"tensor names do not match the architecture "
            f"(missing {sorted(missing)[:3]}..., unexpected {sorted(extra)[:3]}...)"
            if len(missing) + len(extra) > 3
            else f"tensor names do not match (missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    for name, arr in expected.items():
        src = mw.tensors[name]
        if src.shape != arr.shape:
            raise WeightFormatError(
                f"tensor {name!r} has shape {src.shape}, architecture wants {arr.shape}"
            )
        arr[...] = src.astype(arr.dtype)


def save_moments(state: AdamState, path) -> None:
    """Optimizer first/second moments in the same container layout."""
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, arr in state.m.items():
        tensors[f"m.{name}"] = arr
    for name, arr in state.v.items():
        tensors[f"v.{name}"] = arr
    _write_container(Path(path), {"kind": "adam-moments", "step": state.step}, tensors)


def load_moments(path) -> AdamState:
    header, tensors = _read_container(Path(path))
    if header.get("kind") != "adam-moments":
        raise WeightFormatError(f"{path} does not hold optimizer moments")
    state = AdamState(step=int(header["step"]))
    for name, arr in tensors.items():
        kind, pname = name.split(".", 1)
        target = state.m if kind == "m" else state.v
        target[pname] = arr
    return state
