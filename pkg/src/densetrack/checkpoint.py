"""Versioned container for named float32 arrays.

Byte layout (all integers little-endian)::

    offset 0   6 bytes   magic b"DTCKPT"
    offset 6   uint16    format version (currently 1)
    offset 8   uint32    header length N in bytes
    offset 12  N bytes   UTF-8 JSON header
    offset 12+N          data section

The header is an object with keys ``kind`` (string), ``architecture``
(object), ``meta`` (object) and ``tensors``: a list of
``{"name", "shape", "offset", "nbytes"}`` records, ``offset`` counted from the
start of the data section. Each tensor is stored as contiguous C-order
float32 little-endian values.
"""

from __future__ import annotations

import copy
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .correspond import Encoder, EncoderConfig
from .errors import LoadError
from .memory import MomentumPair

MAGIC = b"DTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<6sHI")


def save_arrays(
    path: str | Path,
    arrays: dict[str, np.ndarray | torch.Tensor],
    kind: str,
    architecture: dict | None = None,
    meta: dict | None = None,
) -> None:
    records, blobs, offset = [], [], 0
    for name in arrays:
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        data = np.ascontiguousarray(a, dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(np.shape(a)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"kind": kind, "architecture": architecture or {}, "meta": meta or {}, "tensors": records},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(arrays, header)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise LoadError(f"{path}: truncated checkpoint")
    magic, version, n = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise LoadError(f"{path}: not a checkpoint container")
    if version != VERSION:
        raise LoadError(f"{path}: unsupported format version {version}")
    header = json.loads(raw[_PREFIX.size : _PREFIX.size + n].decode("utf-8"))
    base = _PREFIX.size + n
    arrays = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        buf = raw[start : start + rec["nbytes"]]
        if len(buf) != rec["nbytes"]:
            raise LoadError(f"{path}: tensor {rec['name']} is truncated")
        arrays[rec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(rec["shape"]).astype(np.float32)
    return arrays, header


def _state(encoder: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in encoder.state_dict().items()}


def _build(config: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> Encoder:
    enc = Encoder(EncoderConfig(**config))
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    missing = set(enc.state_dict()) - set(state)
    if missing:
        raise LoadError(f"checkpoint lacks parameters {sorted(missing)[:3]}")
    enc.load_state_dict(state)
    enc.eval()
    return enc


def save_encoder(path: str | Path, encoder: Encoder, meta: dict | None = None) -> None:
    save_arrays(path, _state(encoder), "encoder", encoder.config.to_dict(), meta)


def save_pair(path: str | Path, pair: MomentumPair, meta: dict | None = None) -> None:
    arrays = {**_state(pair.theta_q, "query/"), **_state(pair.theta_r, "reference/")}
    save_arrays(path, arrays, "pair", pair.theta_q.config.to_dict(), {**(meta or {}), "m": pair.m})


def load_encoder(path: str | Path) -> Encoder:
    arrays, header = load_arrays(path)
    prefix = "query/" if header["kind"] == "pair" else ""
    return _build(header["architecture"], arrays, prefix)


def load_pair(path: str | Path, m: float = 0.999) -> MomentumPair:
    """A momentum pair; a single-encoder checkpoint yields two identical branches."""
    arrays, header = load_arrays(path)
    arch = header["architecture"]
    if header["kind"] == "pair":
        return MomentumPair(
            _build(arch, arrays, "query/"), _build(arch, arrays, "reference/"), header["meta"].get("m", m)
        )
    if header["kind"] != "encoder":
        raise LoadError(f"{path}: holds a {header['kind']!r}, not an encoder")
    enc = _build(arch, arrays)
    return MomentumPair(enc, copy.deepcopy(enc), m)


def save_probabilities(path: str | Path, probs: list[np.ndarray], meta: dict | None = None) -> None:
    """Debug dump of per-frame probability maps."""
    save_arrays(path, {f"frame/{k:05d}": p for k, p in enumerate(probs)}, "probabilities", None, meta)
