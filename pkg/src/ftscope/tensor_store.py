"""Read, validate, and write checkpoint container files with bounded memory.

Container layout (safetensors-compatible):
  bytes 0-7     little-endian u64 N = header length
  bytes 8..8+N  UTF-8 JSON object: tensor name -> {"dtype", "shape", "data_offsets"},
                plus an optional "__metadata__" string-to-string object
  bytes 8+N..   data region; "data_offsets" are relative to its start

Only F32/F16/BF16 tensors are supported. All numeric access widens to
float64, which is exact for every representable f16/bf16/f32 value, and
all payload copying is done on raw bytes so nothing ever round-trips
through a narrower float.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContainerError

DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}

_HEADER_LEN_FMT = "<Q"
# Guards against nonsense header lengths before attempting a giant read.
_MAX_HEADER_BYTES = 256 * 1024 * 1024

DEFAULT_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class TensorRecord:
    """Metadata for one stored tensor; offsets are data-region relative."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int

    @property
    def n_elems(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


@dataclass(frozen=True)
class Checkpoint:
    """Open container: metadata only, payload stays on disk until read."""

    path: str
    records: dict[str, TensorRecord]
    metadata: dict[str, str]
    data_start: int
    total_params: int

    def __contains__(self, name: str) -> bool:
        return name in self.records


@dataclass
class PairReport:
    """Alignment check result; mismatches are data, not errors."""

    mismatches: list[tuple[str, str]] = field(default_factory=list)

    @property
    def aligned(self) -> bool:
        return not self.mismatches

    def to_dict(self) -> dict:
        return {
            "aligned": self.aligned,
            "mismatches": [{"name": n, "reason": r} for n, r in self.mismatches],
        }


# ---------------------------------------------------------------------------
# dtype widening / narrowing
#
# numpy's f16<->f64 and f32<->f64 casts are exact for all values except that
# hardware casts may quiet signaling-NaN payloads, so NaN lanes are composed
# bit-level to keep every 16/32-bit pattern round-trippable.
# ---------------------------------------------------------------------------


def _compose_f64_nan(sign: np.ndarray, mantissa52: np.ndarray) -> np.ndarray:
    bits = (sign.astype(np.uint64) << np.uint64(63)) | (np.uint64(0x7FF) << np.uint64(52))
    bits |= mantissa52.astype(np.uint64)
    return bits.view(np.float64)


def widen_f16_bits(bits: np.ndarray) -> np.ndarray:
    """uint16 f16 bit patterns -> exact float64 (NaN payloads preserved)."""
    bits = np.ascontiguousarray(bits, dtype=np.uint16)
    with np.errstate(invalid="ignore"):
        out = bits.view(np.float16).astype(np.float64)
    nan = ((bits & 0x7C00) == 0x7C00) & ((bits & 0x03FF) != 0)
    if nan.any():
        man = (bits[nan].astype(np.uint64) & np.uint64(0x3FF)) << np.uint64(42)
        out[nan] = _compose_f64_nan(bits[nan] >> 15, man)
    return out


def widen_bf16_bits(bits: np.ndarray) -> np.ndarray:
    """uint16 bf16 bit patterns -> exact float64 (NaN payloads preserved)."""
    bits = np.ascontiguousarray(bits, dtype=np.uint16)
    f32 = (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)
    with np.errstate(invalid="ignore"):
        out = f32.astype(np.float64)
    nan = ((bits & 0x7F80) == 0x7F80) & ((bits & 0x007F) != 0)
    if nan.any():
        man = (bits[nan].astype(np.uint64) & np.uint64(0x7F)) << np.uint64(45)
        out[nan] = _compose_f64_nan(bits[nan] >> 15, man)
    return out


def widen_f32_bits(bits: np.ndarray) -> np.ndarray:
    """uint32 f32 bit patterns -> exact float64 (NaN payloads preserved)."""
    bits = np.ascontiguousarray(bits, dtype=np.uint32)
    with np.errstate(invalid="ignore"):
        out = bits.view(np.float32).astype(np.float64)
    nan = ((bits & np.uint32(0x7F800000)) == np.uint32(0x7F800000)) & (
        (bits & np.uint32(0x007FFFFF)) != 0
    )
    if nan.any():
        man = (bits[nan].astype(np.uint64) & np.uint64(0x7FFFFF)) << np.uint64(29)
        out[nan] = _compose_f64_nan(bits[nan] >> np.uint32(31), man)
    return out


def narrow_f64_to_f16_bits(values: np.ndarray) -> np.ndarray:
    """float64 -> uint16 f16 bits, round-to-nearest-even; inverse of widen."""
    values = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore", under="ignore"):
        out = values.astype(np.float16).view(np.uint16).copy()
    nan = np.isnan(values)
    if nan.any():
        v = values[nan].view(np.uint64)
        man = ((v >> np.uint64(42)) & np.uint64(0x3FF)).astype(np.uint16)
        man[man == 0] = 0x200  # payload lost below bit 42: keep a quiet NaN
        out[nan] = ((v >> np.uint64(63)).astype(np.uint16) << 15) | 0x7C00 | man
    return out


def narrow_f64_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """float64 -> uint16 bf16 bits, round-to-nearest-even; inverse of widen."""
    values = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore", under="ignore"):
        f32bits = values.astype(np.float32).view(np.uint32)
    rounding = np.uint32(0x7FFF) + ((f32bits >> np.uint32(16)) & np.uint32(1))
    out = ((f32bits + rounding) >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        v = values[nan].view(np.uint64)
        man = ((v >> np.uint64(45)) & np.uint64(0x7F)).astype(np.uint16)
        man[man == 0] = 0x40
        out[nan] = ((v >> np.uint64(63)).astype(np.uint16) << 15) | 0x7F80 | man
    return out


def narrow_f64_to_f32_bits(values: np.ndarray) -> np.ndarray:
    """float64 -> uint32 f32 bits, round-to-nearest-even; inverse of widen."""
    values = np.asarray(values, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore", under="ignore"):
        out = values.astype(np.float32).view(np.uint32).copy()
    nan = np.isnan(values)
    if nan.any():
        v = values[nan].view(np.uint64)
        man = ((v >> np.uint64(29)) & np.uint64(0x7FFFFF)).astype(np.uint32)
        man[man == 0] = 0x400000
        out[nan] = (
            ((v >> np.uint64(63)).astype(np.uint32) << np.uint32(31))
            | np.uint32(0x7F800000)
            | man
        )
    return out


def decode_to_f64(raw: bytes | np.ndarray, dtype: str) -> np.ndarray:
    """Raw little-endian payload bytes -> float64 values, exactly."""
    buf = np.frombuffer(raw, dtype=np.uint8) if isinstance(raw, (bytes, bytearray, memoryview)) else raw
    if dtype == "F32":
        return widen_f32_bits(buf.view(np.dtype("<u4")))
    if dtype == "F16":
        return widen_f16_bits(buf.view(np.dtype("<u2")))
    if dtype == "BF16":
        return widen_bf16_bits(buf.view(np.dtype("<u2")))
    raise ContainerError(f"unknown dtype {dtype!r}")


def encode_from_f64(values: np.ndarray, dtype: str) -> bytes:
    """float64 values -> raw payload bytes (round-to-nearest narrowing)."""
    if dtype == "F32":
        return narrow_f64_to_f32_bits(values).astype("<u4").tobytes()
    if dtype == "F16":
        return narrow_f64_to_f16_bits(values).astype("<u2").tobytes()
    if dtype == "BF16":
        return narrow_f64_to_bf16_bits(values).astype("<u2").tobytes()
    raise ContainerError(f"unknown dtype {dtype!r}")


# ---------------------------------------------------------------------------
# container reading
# ---------------------------------------------------------------------------


def _reject_duplicate_keys(pairs):
    seen = set()
    out = {}
    for key, value in pairs:
        if key in seen:
            raise ContainerError(f"duplicate tensor name in header: {key!r}")
        seen.add(key)
        out[key] = value
    return out


def _parse_header(f: IO[bytes], path: str) -> tuple[dict, int]:
    prefix = f.read(8)
    if len(prefix) < 8:
        raise ContainerError(f"{path}: file too short for header length prefix")
    (header_len,) = struct.unpack(_HEADER_LEN_FMT, prefix)
    if header_len == 0 or header_len > _MAX_HEADER_BYTES:
        raise ContainerError(f"{path}: implausible header length {header_len}")
    raw = f.read(header_len)
    if len(raw) < header_len:
        raise ContainerError(f"{path}: truncated header ({len(raw)} of {header_len} bytes)")
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except ContainerError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError(f"{path}: header JSON must be an object")
    return header, 8 + header_len


def _validate_entry(path: str, name: str, entry) -> TensorRecord:
    if not isinstance(entry, dict):
        raise ContainerError(f"{path}: entry for {name!r} is not an object")
    try:
        dtype = entry["dtype"]
        shape = entry["shape"]
        begin, end = entry["data_offsets"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"{path}: entry for {name!r} missing dtype/shape/data_offsets") from exc
    if dtype not in DTYPE_SIZES:
        raise ContainerError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
    if not isinstance(shape, list) or not all(isinstance(d, int) and d > 0 for d in shape):
        raise ContainerError(f"{path}: tensor {name!r} has invalid shape {shape!r}")
    if not (isinstance(begin, int) and isinstance(end, int) and 0 <= begin <= end):
        raise ContainerError(f"{path}: tensor {name!r} has invalid data_offsets {entry['data_offsets']!r}")
    record = TensorRecord(name=name, dtype=dtype, shape=tuple(shape), offset=begin, nbytes=end - begin)
    if record.nbytes != record.n_elems * DTYPE_SIZES[dtype]:
        raise ContainerError(
            f"{path}: tensor {name!r} length {record.nbytes} does not match "
            f"shape {shape} x {dtype}"
        )
    return record


def open_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Parse and validate the header; never touches the data region."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        header, data_start = _parse_header(f, path)

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ContainerError(f"{path}: __metadata__ must map strings to strings")

    records: dict[str, TensorRecord] = {}
    for name, entry in header.items():
        records[name] = _validate_entry(path, name, entry)

    by_offset = sorted(records.values(), key=lambda r: (r.offset, r.offset + r.nbytes))
    prev_end = 0
    prev_name = None
    for rec in by_offset:
        if rec.offset < prev_end:
            raise ContainerError(
                f"{path}: tensors {prev_name!r} and {rec.name!r} have overlapping byte ranges"
            )
        prev_end = rec.offset + rec.nbytes
        prev_name = rec.name

    data_size = os.stat(path).st_size - data_start
    if prev_end > data_size:
        raise ContainerError(
            f"{path}: data region is {data_size} bytes but tensors extend to {prev_end} (truncated file)"
        )

    total = sum(r.n_elems for r in records.values())
    return Checkpoint(path=path, records=records, metadata=metadata, data_start=data_start, total_params=total)


def _record(ckpt: Checkpoint, name: str) -> TensorRecord:
    try:
        return ckpt.records[name]
    except KeyError:
        raise ContainerError(f"{ckpt.path}: unknown tensor name {name!r}") from None


def read_raw_chunks(ckpt: Checkpoint, name: str, chunk_elems: int = DEFAULT_CHUNK_ELEMS) -> Iterator[bytes]:
    """Yield the tensor's payload as raw byte chunks of chunk_elems elements."""
    if chunk_elems < 1:
        raise ValueError("chunk_elems must be >= 1")
    rec = _record(ckpt, name)
    step = chunk_elems * DTYPE_SIZES[rec.dtype]
    with open(ckpt.path, "rb") as f:
        f.seek(ckpt.data_start + rec.offset)
        remaining = rec.nbytes
        while remaining > 0:
            want = min(step, remaining)
            buf = f.read(want)
            if len(buf) != want:
                raise ContainerError(f"{ckpt.path}: short read in tensor {name!r}")
            remaining -= want
            yield buf


def read_chunks(ckpt: Checkpoint, name: str, chunk_elems: int = DEFAULT_CHUNK_ELEMS) -> Iterator[np.ndarray]:
    """Yield the tensor widened to float64, chunk_elems elements at a time."""
    dtype = _record(ckpt, name).dtype
    for buf in read_raw_chunks(ckpt, name, chunk_elems):
        yield decode_to_f64(buf, dtype)


def read_tensor(ckpt: Checkpoint, name: str) -> np.ndarray:
    """Whole tensor as a float64 array in its stored shape (small tensors only)."""
    rec = _record(ckpt, name)
    parts = list(read_chunks(ckpt, name, max(1, rec.n_elems)))
    flat = parts[0] if len(parts) == 1 else np.concatenate(parts)
    return flat.reshape(rec.shape)


# ---------------------------------------------------------------------------
# container writing
# ---------------------------------------------------------------------------


def write_checkpoint(
    records: Iterable[tuple[str, str, Sequence[int], Iterable[bytes] | bytes]],
    path: str | os.PathLike,
    metadata: dict[str, str] | None = None,
) -> None:
    """Write a container atomically (temp file + rename).

    `records` supplies (name, dtype, shape, payload) in the order the header
    should list them; payload is bytes or an iterable of byte chunks whose
    total length must equal product(shape) * dtype size.
    """
    path = os.fspath(path)
    records = list(records)

    specs: list[TensorRecord] = []
    payloads = []
    names = set()
    offset = 0
    for name, dtype, shape, payload in records:
        if dtype not in DTYPE_SIZES:
            raise ContainerError(f"unknown dtype {dtype!r} for tensor {name!r}")
        if name in names:
            raise ContainerError(f"duplicate tensor name: {name!r}")
        if not all(isinstance(d, int) and d > 0 for d in shape):
            raise ContainerError(f"tensor {name!r} has invalid shape {tuple(shape)!r}")
        names.add(name)
        n_elems = 1
        for d in shape:
            n_elems *= d
        nbytes = n_elems * DTYPE_SIZES[dtype]
        specs.append(TensorRecord(name=name, dtype=dtype, shape=tuple(shape), offset=offset, nbytes=nbytes))
        payloads.append(payload)
        offset += nbytes

    header: dict = {}
    if metadata:
        header["__metadata__"] = dict(metadata)
    for rec in specs:
        header[rec.name] = {
            "dtype": rec.dtype,
            "shape": list(rec.shape),
            "data_offsets": [rec.offset, rec.offset + rec.nbytes],
        }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")

    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(struct.pack(_HEADER_LEN_FMT, len(header_bytes)))
            f.write(header_bytes)
            for rec, payload in zip(specs, payloads):
                if isinstance(payload, (bytes, bytearray, memoryview)):
                    payload = (payload,)
                written = 0
                for chunk in payload:
                    chunk = bytes(chunk)
                    written += len(chunk)
                    if written > rec.nbytes:
                        raise ContainerError(
                            f"tensor {rec.name!r}: payload exceeds {rec.nbytes} bytes from shape x dtype"
                        )
                    f.write(chunk)
                if written != rec.nbytes:
                    raise ContainerError(
                        f"tensor {rec.name!r}: payload is {written} bytes, expected {rec.nbytes}"
                    )
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


# ---------------------------------------------------------------------------
# pair validation
# ---------------------------------------------------------------------------


def validate_pair(pre: Checkpoint, ft: Checkpoint) -> PairReport:
    """Aligned iff the two checkpoints agree on names, shapes, and dtypes."""
    report = PairReport()
    for name in pre.records:
        if name not in ft.records:
            report.mismatches.append((name, "missing_in_ft"))
    for name, ft_rec in ft.records.items():
        pre_rec = pre.records.get(name)
        if pre_rec is None:
            report.mismatches.append((name, "missing_in_pre"))
            continue
        if pre_rec.shape != ft_rec.shape:
            report.mismatches.append((name, "shape"))
        elif pre_rec.dtype != ft_rec.dtype:
            report.mismatches.append((name, "dtype"))
    report.mismatches.sort()
    return report
