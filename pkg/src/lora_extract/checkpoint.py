"""Single-file tensor checkpoints (the safetensors container layout).

On disk::

    [u64 little-endian header length][JSON header][data buffer]

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
with offsets relative to the start of the data buffer, plus an optional
``"__metadata__"`` object of string values. Supported dtypes are F64, F32,
F16 and BF16. Everything is decoded to float64 for numerics.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateName,
    MalformedHeader,
    NonFiniteError,
    NotTwoDimensional,
    SpanOutOfBounds,
)

__all__ = [
    "DTYPE_WIDTH",
    "Checkpoint",
    "TensorRecord",
    "decode_array",
    "encode_array",
    "from_matrix",
    "load_checkpoint",
    "normalize_dtype",
    "parse_checkpoint",
    "save_checkpoint",
    "serialize_checkpoint",
    "to_matrix",
]

METADATA_KEY = "__metadata__"
HEADER_ALIGN = 8

DTYPE_WIDTH = {"f64": 8, "f32": 4, "f16": 2, "bf16": 2}
_WIRE = {"f64": "F64", "f32": "F32", "f16": "F16", "bf16": "BF16"}
_FROM_WIRE = {v: k for k, v in _WIRE.items()}


def normalize_dtype(dtype: str) -> str:
    """Map ``"F32"``, ``"float32"``, ``"f32"`` etc. to the short lowercase form."""
    key = str(dtype).strip()
    if key in _FROM_WIRE:
        return _FROM_WIRE[key]
    aliases = {"float64": "f64", "float32": "f32", "float16": "f16", "half": "f16",
               "bfloat16": "bf16"}
    key = aliases.get(key.lower(), key.lower())
    if key not in DTYPE_WIDTH:
        raise ValueError(f"unsupported dtype {dtype!r}")
    return key


# ---------------------------------------------------------------- codecs

def _f64_to_bf16_bits(x):
    """Round float64 values to bfloat16 bit patterns, nearest-even.

    Goes through float32 with round-to-odd, which has enough spare bits
    that the second rounding to bfloat16 is never a double rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        f = x.astype(np.float32)
    bits = f.view(np.uint32).copy()
    finite = np.isfinite(x)
    # step float32 results that rounded away from zero back toward zero
    overshoot = finite & (np.abs(f.astype(np.float64)) > np.abs(x))
    bits[overshoot] -= 1
    inexact = finite & (bits.view(np.float32).astype(np.float64) != x)
    bits[inexact] |= 1
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> 16) & 1)) >> 16
    out = rounded.astype(np.uint16)
    nan = np.isnan(x)
    out[nan] = ((bits[nan] >> 16) | 0x0040).astype(np.uint16)
    return out


def encode_array(arr, dtype: str) -> bytes:
    """Little-endian bytes of ``arr`` in ``dtype`` (nearest-even on downcast)."""
    dtype = normalize_dtype(dtype)
    a = np.asarray(arr, dtype=np.float64)
    if dtype == "bf16":
        return _f64_to_bf16_bits(a).astype("<u2").tobytes()
    np_type = {"f64": "<f8", "f32": "<f4", "f16": "<f2"}[dtype]
    with np.errstate(over="ignore"):
        return a.astype(np_type).tobytes()


def decode_array(raw, dtype: str, shape) -> np.ndarray:
    """Decode little-endian bytes into a float64 array of ``shape``."""
    dtype = normalize_dtype(dtype)
    if dtype == "bf16":
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        values = bits.view(np.float32)
    else:
        values = np.frombuffer(raw, dtype={"f64": "<f8", "f32": "<f4", "f16": "<f2"}[dtype])
    return values.astype(np.float64).reshape(tuple(shape))


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: tuple
    start: int
    end: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.end - self.start

    def header_entry(self, start=None):
        start = self.start if start is None else start
        return {
            "dtype": _WIRE[self.dtype],
            "shape": list(self.shape),
            "data_offsets": [start, start + self.nbytes],
        }


@dataclass
class Checkpoint:
    """Ordered tensor records over one contiguous data buffer.

    Treat instances as immutable; build new ones with :meth:`from_entries`
    or :meth:`from_arrays`.
    """

    tensors: dict = field(default_factory=dict)
    data: bytes = b""
    metadata: dict = field(default_factory=dict)

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)

    @property
    def names(self):
        return list(self.tensors)

    def raw(self, name) -> bytes:
        rec = self.tensors[name]
        return bytes(self.data[rec.start: rec.end])

    def array(self, name) -> np.ndarray:
        rec = self.tensors[name]
        return decode_array(self.data[rec.start: rec.end], rec.dtype, rec.shape)

    def matrix(self, name) -> np.ndarray:
        return to_matrix(self.tensors[name], self.data)

    @property
    def nbytes(self) -> int:
        return len(serialize_checkpoint(self))

    @classmethod
    def from_entries(cls, entries, metadata=None) -> "Checkpoint":
        """Build from ``(name, dtype, shape, raw_bytes)`` tuples, laid out in order."""
        tensors, chunks, offset = {}, [], 0
        for name, dtype, shape, raw in entries:
            if name in tensors:
                raise DuplicateName(f"duplicate tensor name {name!r}")
            dtype = normalize_dtype(dtype)
            shape = tuple(int(s) for s in shape)
            rec = TensorRecord(name, dtype, shape, offset, offset + len(raw))
            if rec.numel * DTYPE_WIDTH[dtype] != len(raw):
                raise MalformedHeader(
                    f"{name}: {len(raw)} bytes do not match shape {shape} of {dtype}"
                )
            tensors[name] = rec
            chunks.append(bytes(raw))
            offset += len(raw)
        return cls(tensors, b"".join(chunks), dict(metadata or {}))

    @classmethod
    def from_arrays(cls, arrays, dtype="f32", metadata=None) -> "Checkpoint":
        """Build from a ``{name: array}`` mapping, encoding every array as ``dtype``.

        ``dtype`` may also be a ``{name: dtype}`` mapping.
        """
        entries = []
        for name, arr in arrays.items():
            dt = dtype[name] if isinstance(dtype, dict) else dtype
            arr = np.asarray(arr)
            entries.append((name, dt, arr.shape, encode_array(arr, dt)))
        return cls.from_entries(entries, metadata)


def to_matrix(rec: TensorRecord, buffer) -> np.ndarray:
    """Decode a 2-D tensor into a float64 matrix, rejecting NaN/Inf."""
    if len(rec.shape) != 2 or min(rec.shape) == 0:
        raise NotTwoDimensional(f"{rec.name}: shape {list(rec.shape)} is not a non-empty 2-D matrix")
    m = decode_array(buffer[rec.start: rec.end], rec.dtype, rec.shape)
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{rec.name}: tensor contains NaN or Inf entries")
    return np.ascontiguousarray(m)


def from_matrix(m, name: str, dtype: str = "f32"):
    """Encode a matrix as a standalone ``(TensorRecord, bytes)`` pair."""
    m = np.asarray(m, dtype=np.float64)
    dtype = normalize_dtype(dtype)
    raw = encode_array(m, dtype)
    return TensorRecord(name, dtype, tuple(m.shape), 0, len(raw)), raw


# ---------------------------------------------------------------- parsing

def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateName(f"duplicate key {key!r} in header")
        out[key] = value
    return out


def _parse_entry(name, entry):
    if not isinstance(entry, dict):
        raise MalformedHeader(f"{name}: header entry must be an object")
    try:
        dtype = _FROM_WIRE[entry["dtype"]]
    except KeyError:
        raise MalformedHeader(f"{name}: missing or unknown dtype {entry.get('dtype')!r}") from None
    shape = entry.get("shape")
    offsets = entry.get("data_offsets")
    if not isinstance(shape, list) or not all(
        isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
    ):
        raise MalformedHeader(f"{name}: bad shape {shape!r}")
    if (not isinstance(offsets, list) or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
            or offsets[0] > offsets[1]):
        raise MalformedHeader(f"{name}: bad data_offsets {offsets!r}")
    rec = TensorRecord(name, dtype, tuple(shape), offsets[0], offsets[1])
    if rec.numel * DTYPE_WIDTH[dtype] != rec.nbytes:
        raise MalformedHeader(
            f"{name}: span of {rec.nbytes} bytes does not match shape {shape} of {entry['dtype']}"
        )
    return rec


def parse_checkpoint(blob: bytes) -> Checkpoint:
    """Parse checkpoint bytes; tensors come back ordered by data offset."""
    if len(blob) < 8:
        raise MalformedHeader("file shorter than the 8-byte header length prefix")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if header_len > len(blob) - 8:
        raise MalformedHeader(f"header length {header_len} exceeds file size {len(blob)}")
    try:
        header = json.loads(blob[8: 8 + header_len].decode("utf-8"),
                            object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeader("__metadata__ must map strings to strings")

    data = blob[8 + header_len:]
    records = [_parse_entry(name, entry) for name, entry in header.items()]
    records.sort(key=lambda r: (r.start, r.end, r.name))
    prev_end, prev_name = 0, None
    for rec in records:
        if rec.end > len(data):
            raise SpanOutOfBounds(
                f"{rec.name}: span [{rec.start}, {rec.end}) exceeds data buffer of {len(data)} bytes"
            )
        if rec.start < prev_end:
            raise SpanOutOfBounds(f"{rec.name}: span overlaps {prev_name}")
        if rec.nbytes:
            prev_end, prev_name = rec.end, rec.name
    return Checkpoint({r.name: r for r in records}, data, dict(metadata))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    """Bytes of ``ckpt`` with tensors laid out contiguously in map order.

    The header is compact JSON padded with spaces to an 8-byte boundary,
    matching what the reference writer produces.
    """
    header, chunks, offset = {}, [], 0
    if ckpt.metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in ckpt.metadata.items()}
    for name, rec in ckpt.tensors.items():
        header[name] = rec.header_entry(start=offset)
        chunks.append(ckpt.data[rec.start: rec.end])
        offset += rec.nbytes
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % HEADER_ALIGN)
    return struct.pack("<Q", len(text)) + text + b"".join(bytes(c) for c in chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    blob = serialize_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
