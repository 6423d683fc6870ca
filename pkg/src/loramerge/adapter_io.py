"""Reading and writing LoRA adapters stored as safetensors files.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
tensor keys to dtype/shape/byte ranges (plus an optional ``__metadata__``
string map), then the raw tensor bytes.  A module ``p`` is the pair of
tensors ``p.lora_A.weight`` (r x d_in) and ``p.lora_B.weight`` (d_out x r).
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

LORA_A_SUFFIX = ".lora_A.weight"
LORA_B_SUFFIX = ".lora_B.weight"
ALPHA_KEY = "lora_alpha"
TASK_KEY = "task_name"

_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2"), "BF16": np.dtype("<u2")}
_MAX_HEADER = 100 * 1024 * 1024


@dataclass(frozen=True, eq=False)
class LoraPair:
    module_name: str
    A: np.ndarray
    B: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        A = np.ascontiguousarray(self.A, dtype=np.float32)
        B = np.ascontiguousarray(self.B, dtype=np.float32)
        if A.ndim != 2 or B.ndim != 2:
            raise ValidationError(f"{self.module_name}: A and B must be 2-D")
        if A.shape[0] != B.shape[1]:
            raise ValidationError(
                f"{self.module_name}: rank mismatch, A is {A.shape} but B is {B.shape}"
            )
        if A.shape[0] > min(A.shape[1], B.shape[0]):
            raise ValidationError(
                f"{self.module_name}: rank {A.shape[0]} exceeds min(d_in, d_out)"
            )
        if self.alpha is not None and not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValidationError(f"{self.module_name}: lora_alpha must be non-negative")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LoraPair):
            return NotImplemented
        return (
            self.module_name == other.module_name
            and self.alpha == other.alpha
            and self.A.shape == other.A.shape
            and self.B.shape == other.B.shape
            and self.A.tobytes() == other.A.tobytes()
            and self.B.tobytes() == other.B.tobytes()
        )

    __hash__ = None


@dataclass(eq=False)
class AdapterSet:
    """One task's adapter: module name -> LoraPair, iterated in sorted order."""

    task_name: str
    modules: dict[str, LoraPair]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, pair in self.modules.items():
            if name != pair.module_name:
                raise ValidationError(f"module key {name!r} holds pair {pair.module_name!r}")
        self.modules = {name: self.modules[name] for name in sorted(self.modules)}
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}

    @classmethod
    def from_pairs(cls, task_name, pairs, metadata=None):
        return cls(task_name, {p.module_name: p for p in pairs}, dict(metadata or {}))

    def __iter__(self):
        return iter(self.modules.values())

    def __len__(self):
        return len(self.modules)

    def __getitem__(self, name):
        return self.modules[name]

    def __eq__(self, other):
        if not isinstance(other, AdapterSet):
            return NotImplemented
        return (
            self.task_name == other.task_name
            and list(self.modules) == list(other.modules)
            and all(self.modules[k] == other.modules[k] for k in self.modules)
            and self.metadata == other.metadata
        )

    __hash__ = None

    @property
    def alpha(self) -> float | None:
        alphas = {p.alpha for p in self}
        if len(alphas) > 1:
            raise ValidationError(f"task {self.task_name!r} mixes lora_alpha values {alphas}")
        return alphas.pop() if alphas else None


@dataclass(frozen=True)
class CompatibilityLayout:
    modules: tuple[str, ...]
    shapes: dict[str, tuple[int, int, int]]
    n_tasks: int
    alpha: float | None = None


def _format_alpha(alpha: float) -> str:
    return str(int(alpha)) if float(alpha).is_integer() else repr(float(alpha))


# -- raw container ---------------------------------------------------------

def read_safetensors(path) -> tuple[dict[str, np.ndarray], dict[str, str], dict[str, str]]:
    """Parse a safetensors file into (tensors, metadata, dtypes).

    F16 and BF16 payloads are widened to float32.  Tensors of other dtypes
    are returned as ``None`` so callers can count and skip them.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: file shorter than the 8-byte header length", offset=0)
    (hlen,) = struct.unpack("<Q", raw[:8])
    if hlen > _MAX_HEADER or 8 + hlen > len(raw):
        raise FormatError(f"{path}: header length {hlen} exceeds file size {len(raw)}", offset=0)
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not UTF-8", offset=8 + exc.start) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON header: {exc.msg}", offset=8 + exc.pos) from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object", offset=8)

    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError(f"{path}: __metadata__ must map strings to strings", offset=8)

    base = 8 + hlen
    buffer = memoryview(raw)[base:]
    tensors, dtypes = {}, {}
    for key, info in header.items():
        if not isinstance(info, dict):
            raise FormatError(f"{path}: entry {key!r} is not an object", offset=8)
        dtype, shape, offsets = info.get("dtype"), info.get("shape"), info.get("data_offsets")
        if (
            not isinstance(shape, list)
            or not all(isinstance(s, int) and s >= 0 for s in shape)
            or not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise FormatError(f"{path}: entry {key!r} has bad shape/data_offsets", offset=8)
        begin, end = offsets
        if not (0 <= begin <= end <= len(buffer)):
            raise FormatError(
                f"{path}: tensor {key!r} data_offsets {offsets} outside buffer of "
                f"{len(buffer)} bytes",
                offset=base + begin,
            )
        dtypes[key] = dtype
        if dtype not in _DTYPES:
            tensors[key] = None
            continue
        np_dtype = _DTYPES[dtype]
        count = math.prod(shape)
        if end - begin != count * np_dtype.itemsize:
            raise FormatError(
                f"{path}: tensor {key!r} spans {end - begin} bytes, "
                f"{dtype}{shape} needs {count * np_dtype.itemsize}",
                offset=base + begin,
            )
        arr = np.frombuffer(buffer[begin:end], dtype=np_dtype, count=count)
        if dtype == "BF16":
            arr = (arr.astype(np.uint32) << 16).view(np.float32)
        tensors[key] = arr.astype(np.float32).reshape(shape)
    return tensors, metadata, dtypes


def serialize_safetensors(tensors: Mapping[str, np.ndarray], metadata=None) -> bytes:
    """Encode float32 tensors with sorted keys and no gaps between payloads."""
    header, chunks, offset = {}, [], 0
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
    for key in sorted(tensors):
        data = np.ascontiguousarray(tensors[key], dtype="<f4")
        blob = data.tobytes()
        header[key] = {
            "dtype": "F32",
            "shape": list(data.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        chunks.append(blob)
        offset += len(blob)
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(chunks)


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a sibling temp file and rename so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


# -- adapters --------------------------------------------------------------

def adapter_tensors(adapter: AdapterSet) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(adapter) == 0:
        raise ValidationError(f"adapter {adapter.task_name!r} has no modules to save")
    tensors = {}
    for pair in adapter:
        tensors[pair.module_name + LORA_A_SUFFIX] = pair.A
        tensors[pair.module_name + LORA_B_SUFFIX] = pair.B
    metadata = dict(adapter.metadata)
    metadata[TASK_KEY] = adapter.task_name
    alpha = adapter.alpha
    if alpha is not None:
        metadata[ALPHA_KEY] = _format_alpha(alpha)
    else:
        metadata.pop(ALPHA_KEY, None)
    return tensors, metadata


def save_adapter(adapter: AdapterSet, path) -> None:
    tensors, metadata = adapter_tensors(adapter)
    atomic_write_bytes(path, serialize_safetensors(tensors, metadata))


def load_adapter(path, task_name: str | None = None) -> AdapterSet:
    path = Path(path)
    tensors, metadata, dtypes = read_safetensors(path)

    alpha = None
    if ALPHA_KEY in metadata:
        try:
            alpha = float(metadata[ALPHA_KEY])
        except ValueError:
            raise ValidationError(
                f"{path}: lora_alpha {metadata[ALPHA_KEY]!r} is not a number"
            ) from None

    prefixes_a, prefixes_b, ignored = {}, {}, 0
    for key, value in tensors.items():
        if key.endswith(LORA_A_SUFFIX):
            prefixes_a[key[: -len(LORA_A_SUFFIX)]] = key
        elif key.endswith(LORA_B_SUFFIX):
            prefixes_b[key[: -len(LORA_B_SUFFIX)]] = key
        else:
            ignored += 1
    if ignored:
        log.info("%s: ignored %d non-LoRA tensors", path, ignored)

    for orphan in sorted(set(prefixes_a) ^ set(prefixes_b)):
        have = "lora_A" if orphan in prefixes_a else "lora_B"
        raise ValidationError(f"{path}: module {orphan!r} has {have} but no partner tensor")

    pairs = []
    for prefix in sorted(prefixes_a):
        key_a, key_b = prefixes_a[prefix], prefixes_b[prefix]
        for key in (key_a, key_b):
            if tensors[key] is None:
                raise FormatError(f"{path}: tensor {key!r} has unsupported dtype {dtypes[key]!r}")
            if tensors[key].ndim != 2:
                raise ValidationError(f"{path}: tensor {key!r} must be 2-D")
            if not np.isfinite(tensors[key]).all():
                raise ValidationError(f"{path}: tensor {key!r} contains non-finite values")
        A, B = tensors[key_a], tensors[key_b]
        if A.shape[0] != B.shape[1]:
            raise ValidationError(
                f"{path}: module {prefix!r} rank mismatch: {key_a} is {list(A.shape)}, "
                f"{key_b} is {list(B.shape)}"
            )
        pairs.append(LoraPair(prefix, A, B, alpha))

    if not pairs:
        raise ValidationError(f"{path}: no LoRA modules found")
    name = task_name or metadata.get(TASK_KEY) or path.stem
    extra = {k: v for k, v in metadata.items() if k not in (TASK_KEY, ALPHA_KEY)}
    return AdapterSet.from_pairs(name, pairs, extra)


def validate_compatibility(sets, strict: bool = True) -> CompatibilityLayout:
    """Check that all task adapters share modules, shapes, ranks and alpha."""
    sets = list(sets)
    if not sets:
        raise ValidationError("need at least one adapter")
    names = [s.task_name for s in sets]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ValidationError(f"duplicate task names {dupes}; task names must be unique")

    common = set(sets[0].modules)
    for s in sets[1:]:
        common &= set(s.modules)
    for s in sets:
        extra = sorted(set(s.modules) - common)
        if extra:
            if strict:
                raise ValidationError(
                    f"task {s.task_name!r} has module {extra[0]!r} missing from other tasks"
                )
            log.warning("task %r: dropping unmatched modules %s", s.task_name, extra)
    if not common:
        raise ValidationError("adapters share no modules")

    modules = tuple(sorted(common))
    shapes = {}
    ref = sets[0]
    for m in modules:
        p = ref[m]
        shapes[m] = (p.d_out, p.d_in, p.rank)
        for s in sets[1:]:
            q = s[m]
            if (q.d_out, q.d_in, q.rank) != shapes[m]:
                raise ValidationError(
                    f"task {s.task_name!r} module {m!r}: shape (d_out, d_in, r) = "
                    f"{(q.d_out, q.d_in, q.rank)} differs from {shapes[m]} in task "
                    f"{ref.task_name!r}"
                )

    alphas = {}
    for s in sets:
        for m in modules:
            alphas.setdefault(s[m].alpha, (s.task_name, m))
    if len(alphas) > 1:
        (a1, (t1, m1)), (a2, (t2, m2)) = list(alphas.items())[:2]
        raise ValidationError(
            f"metadata conflict: lora_alpha {a1} (task {t1!r}, module {m1!r}) vs "
            f"{a2} (task {t2!r}, module {m2!r})"
        )
    return CompatibilityLayout(modules, shapes, len(sets), next(iter(alphas)))
