"""Parameter sets, task vectors and the EPMC v1 container format.

Layout of an EPMC v1 file (all integers little-endian)::

    b"EPMC" | u32 version=1 | u32 count
    count x { u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | ndim x u64 dim | u64 offset }
    data region (tensors back to back, row-major, little-endian IEEE-754)

``dtype`` is 0 for f32 and 1 for f64. Offsets are relative to the start of the
data region. Records are written sorted by name.
"""

from __future__ import annotations

import logging
import math
import os
import struct
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"EPMC"
VERSION = 1

_DTYPE_CODES = {"f32": 0, "f64": 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NUMPY_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointFormatError(ValueError):
    """Base class for malformed EPMC containers."""


class BadMagicError(CheckpointFormatError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


class TruncatedError(CheckpointFormatError):
    pass


class DuplicateNameError(CheckpointFormatError):
    pass


class LayoutError(CheckpointFormatError):
    """Shapes and offsets do not describe the data region."""


class AlignmentError(ValueError):
    """Two parameter sets do not share the same name/shape/dtype table."""


class ParameterSet(Mapping):
    """Ordered mapping from layer name to a float64 array.

    Values are always held as float64; ``dtypes`` records the storage dtype
    (``"f32"`` or ``"f64"``) used when the set is written to disk. Widening
    f32 to f64 is exact, so a read/write cycle is bit-preserving.
    """

    def __init__(self, entries=None, dtypes=None):
        self._arrays: dict[str, np.ndarray] = {}
        self._dtypes: dict[str, str] = {}
        dtypes = dict(dtypes or {})
        items = entries.items() if isinstance(entries, Mapping) else (entries or ())
        for name, value in items:
            if not isinstance(name, str) or not name:
                raise ValueError(f"layer names must be non-empty strings, got {name!r}")
            if name in self._arrays:
                raise ValueError(f"duplicate layer name {name!r}")
            arr = np.asarray(value)
            if name in dtypes:
                dt = dtypes[name]
            elif isinstance(entries, ParameterSet):
                dt = entries.dtypes[name]
            else:
                dt = "f32" if arr.dtype == np.float32 else "f64"
            if dt not in _DTYPE_CODES:
                raise ValueError(f"unsupported dtype {dt!r} for {name!r}")
            self._arrays[name] = np.array(arr, dtype=np.float64, copy=True)
            self._dtypes[name] = dt

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        body = ", ".join(f"{n}: {a.shape} {self._dtypes[n]}" for n, a in self._arrays.items())
        return f"{type(self).__name__}({{{body}}})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return self.signature() == other.signature() and all(
            np.array_equal(self[n], other[n]) for n in self
        )

    __hash__ = None

    @property
    def dtypes(self) -> dict[str, str]:
        return dict(self._dtypes)

    def signature(self) -> tuple:
        """The (name, shape, dtype) table that defines alignment, sorted by name."""
        return tuple(sorted((n, a.shape, self._dtypes[n]) for n, a in self._arrays.items()))

    def aligned_with(self, other: ParameterSet) -> bool:
        return self.signature() == other.signature()

    def map(self, fn, cls=None):
        cls = cls or type(self)
        return cls({n: fn(a) for n, a in self._arrays.items()}, dtypes=self._dtypes)

    def _binary(self, other, op):
        if isinstance(other, ParameterSet):
            check_aligned(self, other)
            return type(self)({n: op(a, other[n]) for n, a in self._arrays.items()}, dtypes=self._dtypes)
        return self.map(lambda a: op(a, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar):
        return self.map(lambda a: a * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(np.negative)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def flatten(self) -> np.ndarray:
        """Concatenate all entries, sorted by name, into one vector."""
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([self._arrays[n].ravel() for n in sorted(self._arrays)])

    def unflatten(self, vector: np.ndarray, cls=None):
        """Inverse of :meth:`flatten` using this set's layout."""
        vector = np.asarray(vector, dtype=np.float64)
        out, pos = {}, 0
        for n in sorted(self._arrays):
            a = self._arrays[n]
            out[n] = vector[pos : pos + a.size].reshape(a.shape)
            pos += a.size
        if pos != vector.size:
            raise ValueError(f"vector has {vector.size} entries, layout needs {pos}")
        return (cls or type(self))(out, dtypes=self._dtypes)


class TaskVector(ParameterSet):
    """Per-layer difference between a fine-tuned set and its base."""


def check_aligned(*sets: ParameterSet) -> None:
    if not sets:
        return
    ref = sets[0].signature()
    for i, s in enumerate(sets[1:], start=1):
        sig = s.signature()
        if sig != ref:
            a, b = dict((n, (sh, dt)) for n, sh, dt in ref), dict((n, (sh, dt)) for n, sh, dt in sig)
            diff = sorted(set(a.items()) ^ set(b.items()))
            raise AlignmentError(f"parameter set {i} is not aligned with set 0; differing entries: {diff[:6]}")


def task_vector(fine_tuned: ParameterSet, base: ParameterSet) -> TaskVector:
    check_aligned(fine_tuned, base)
    return TaskVector({n: fine_tuned[n] - base[n] for n in fine_tuned}, dtypes=fine_tuned.dtypes)


@dataclass(frozen=True)
class LayerClass:
    name: str
    kind: str  # "matrix" or "auxiliary"

    @property
    def is_matrix(self) -> bool:
        return self.kind == "matrix"


def is_matrix_shape(shape) -> bool:
    return len(shape) == 2 and shape[0] >= 2 and shape[1] >= 2


def classify_layers(params: ParameterSet) -> list[LayerClass]:
    return [
        LayerClass(name, "matrix" if is_matrix_shape(arr.shape) else "auxiliary")
        for name, arr in params.items()
    ]


def matrix_layers(params: ParameterSet) -> list[str]:
    return [lc.name for lc in classify_layers(params) if lc.is_matrix]


# ---------------------------------------------------------------------------
# EPMC container


def _sort_key(name: str) -> bytes:
    return name.encode("utf-8")


def encode_checkpoint(params: ParameterSet) -> bytes:
    names = sorted(params, key=_sort_key)
    header = [MAGIC, struct.pack("<II", VERSION, len(names))]
    chunks = []
    offset = 0
    for name in names:
        arr = params[name]
        dt = params.dtypes[name]
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"layer name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"too many dimensions for {name!r}")
        header.append(struct.pack("<H", len(raw_name)))
        header.append(raw_name)
        header.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        header.append(struct.pack("<Q", offset))
        data = np.ascontiguousarray(arr, dtype=_NUMPY_DTYPES[dt]).tobytes()
        chunks.append(data)
        offset += len(data)
    return b"".join(header) + b"".join(chunks)


def decode_checkpoint(blob: bytes, cls=ParameterSet) -> ParameterSet:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"unexpected end of file while reading {what} at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if len(blob) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported EPMC version {version}")

    records = []
    seen = set()
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"record {i}"))
        try:
            name = bytes(take(name_len, f"record {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"record {i} name is not UTF-8") from exc
        code, ndim = struct.unpack("<BB", take(2, f"record {i}"))
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(f"record {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"record {i} dims"))
        (offset,) = struct.unpack("<Q", take(8, f"record {i} offset"))
        if not name:
            raise CheckpointFormatError(f"record {i} has an empty name")
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        records.append((name, _CODE_DTYPES[code], shape, offset))

    data_start = pos
    data_len = len(view) - data_start
    spans = []
    for name, dt, shape, offset in records:
        nbytes = math.prod(shape) * _NUMPY_DTYPES[dt].itemsize
        spans.append((offset, offset + nbytes, name))
    needed = max((end for _, end, _ in spans), default=0)
    if needed > data_len:
        raise TruncatedError(f"data region has {data_len} bytes, tensors need {needed}")
    ordered = sorted(spans)
    for (s0, e0, n0), (s1, e1, n1) in zip(ordered, ordered[1:]):
        if s1 < e0:
            raise LayoutError(f"tensors {n0!r} and {n1!r} overlap in the data region")
    if sum(e - s for s, e, _ in spans) != data_len:
        raise LayoutError(f"data region is {data_len} bytes but tensors cover {sum(e - s for s, e, _ in spans)}")

    entries, dtypes = {}, {}
    for name, dt, shape, offset in records:
        npdt = _NUMPY_DTYPES[dt]
        count_el = math.prod(shape)
        raw = view[data_start + offset : data_start + offset + count_el * npdt.itemsize]
        entries[name] = np.frombuffer(raw, dtype=npdt).reshape(shape)
        dtypes[name] = dt
    return cls(entries, dtypes=dtypes)


def write_checkpoint(params: ParameterSet, path) -> None:
    blob = encode_checkpoint(params)
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path, cls=ParameterSet) -> ParameterSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_checkpoint(blob, cls=cls)


# ---------------------------------------------------------------------------
# Metadata sidecars: UTF-8 ``key=value`` lines next to a container.


def sidecar_path(path) -> str:
    return os.fspath(path) + ".meta"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def write_sidecar(path, meta: Mapping[str, object]) -> None:
    lines = []
    for key, value in meta.items():
        if "=" in key or "\n" in key:
            raise ValueError(f"invalid metadata key {key!r}")
        text = format_value(value)
        if "\n" in text:
            raise ValueError(f"metadata value for {key!r} contains a newline")
        lines.append(f"{key}={text}\n")
    with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def read_sidecar(path) -> dict[str, str]:
    meta = {}
    with open(sidecar_path(path), encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointFormatError(f"malformed metadata line {line!r}")
            meta[key] = value
    return meta


def stack_entries(sets: Iterable[ParameterSet], suffix_sep: str = "#") -> ParameterSet:
    """Pack a sequence of aligned sets into one set with ``name#index`` keys."""
    out, dtypes = {}, {}
    ref = None
    for i, s in enumerate(sets):
        if ref is None:
            ref = s
        else:
            check_aligned(ref, s)
        for n in s:
            out[f"{n}{suffix_sep}{i}"] = s[n]
            dtypes[f"{n}{suffix_sep}{i}"] = s.dtypes[n]
    return ParameterSet(out, dtypes=dtypes)


def unstack_entries(packed: ParameterSet, cls=ParameterSet, suffix_sep: str = "#") -> list:
    """Inverse of :func:`stack_entries`; samples are ordered by index."""
    groups: dict[int, dict[str, np.ndarray]] = {}
    dtypes: dict[int, dict[str, str]] = {}
    for key in packed:
        name, sep, idx = key.rpartition(suffix_sep)
        if not sep or not idx.isdigit() or not name:
            raise CheckpointFormatError(f"entry {key!r} lacks a '{suffix_sep}<index>' suffix")
        groups.setdefault(int(idx), {})[name] = packed[key]
        dtypes.setdefault(int(idx), {})[name] = packed.dtypes[key]
    if sorted(groups) != list(range(len(groups))):
        raise CheckpointFormatError("sample indices are not contiguous from 0")
    out = []
    for i in range(len(groups)):
        names = sorted(groups[i], key=_sort_key)
        out.append(cls({n: groups[i][n] for n in names}, dtypes=dtypes[i]))
    if out:
        check_aligned(*out)
    return out
