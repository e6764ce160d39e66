"""Binary tensor container, delta computation and storage accounting.

Container layout::

    [8 bytes]  header length N, unsigned little-endian
    [N bytes]  UTF-8 JSON header, keys sorted, no whitespace
    [rest]     payload, raw little-endian bytes

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
where the offsets are ``[begin, end)`` into the payload. An optional
``"__metadata__"`` entry carries a free-form JSON object (the artifact
manifest lives there).
"""

import fnmatch
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

METADATA_KEY = "__metadata__"
DTYPES = ("f32", "f16", "bf16", "u8-packed")
_ITEMSIZE = {"f32": 4, "f16": 2, "bf16": 2, "u8-packed": 1}


class ContainerError(ValueError):
    """Malformed or inconsistent container file."""


class ShapeMismatchError(ValueError):
    pass


# -- dtype codecs -------------------------------------------------------------


def f32_to_bf16_bits(x: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 (nearest, ties to even); return raw bits."""
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    nan = np.isnan(x)
    rounding = ((bits >> np.uint32(16)) & np.uint32(1)) + np.uint32(0x7FFF)
    with np.errstate(over="ignore"):
        out = ((bits + rounding) >> np.uint32(16)).astype(np.uint16)
    out[nan] = np.uint16(0x7FC0)
    return out


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def round_to_dtype(x: np.ndarray, dtype: str) -> np.ndarray:
    """Values as they come back after storing ``x`` with ``dtype`` (float32 out)."""
    x = np.asarray(x, dtype=np.float32)
    if dtype == "f32":
        return x.copy()
    if dtype == "f16":
        return x.astype(np.float16).astype(np.float32)
    if dtype == "bf16":
        return bf16_bits_to_f32(f32_to_bf16_bits(x))
    raise ContainerError(f"unsupported float dtype {dtype!r}")


def _encode(array: np.ndarray, dtype: str) -> bytes:
    if dtype == "f32":
        return np.ascontiguousarray(array, dtype="<f4").tobytes()
    if dtype == "f16":
        return np.ascontiguousarray(array, dtype=np.float32).astype("<f2").tobytes()
    if dtype == "bf16":
        return f32_to_bf16_bits(np.asarray(array, dtype=np.float32)).astype("<u2").tobytes()
    if dtype == "u8-packed":
        arr = np.asarray(array)
        if arr.dtype != np.uint8:
            raise ContainerError("u8-packed tensors must be uint8 arrays")
        return np.ascontiguousarray(arr).tobytes()
    raise ContainerError(f"unsupported dtype {dtype!r}")


def _decode(raw: bytes, dtype: str, shape: list[int]) -> np.ndarray:
    if dtype == "f32":
        out = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    elif dtype == "f16":
        out = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    elif dtype == "bf16":
        out = bf16_bits_to_f32(np.frombuffer(raw, dtype="<u2"))
    else:
        return np.frombuffer(raw, dtype=np.uint8).copy()
    return out.reshape(shape)


def _element_count(shape) -> int:
    count = 1
    for dim in shape:
        count *= int(dim)
    return count


# -- container ----------------------------------------------------------------


@dataclass
class TensorContainer:
    """A parsed container. ``raw_header`` keeps the exact bytes read from disk."""

    header: dict
    payload: bytes
    raw_header: bytes = b""
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def names(self) -> list[str]:
        return sorted(k for k in self.header if k != METADATA_KEY)

    @property
    def metadata(self) -> dict:
        return self.header.get(METADATA_KEY, {})

    def __contains__(self, name: str) -> bool:
        return name != METADATA_KEY and name in self.header

    def __len__(self) -> int:
        return len(self.names)

    def info(self, name: str) -> dict:
        if name not in self:
            raise KeyError(name)
        return self.header[name]

    def dtype(self, name: str) -> str:
        return self.info(name)["dtype"]

    def shape(self, name: str) -> tuple[int, ...]:
        return tuple(self.info(name)["shape"])

    def raw(self, name: str) -> bytes:
        begin, end = self.info(name)["data_offsets"]
        return self.payload[begin:end]

    def get(self, name: str) -> np.ndarray:
        """Decoded tensor; float dtypes come back as float32, u8-packed as uint8."""
        if name not in self._cache:
            info = self.info(name)
            self._cache[name] = _decode(self.raw(name), info["dtype"], info["shape"])
        return self._cache[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.get(name)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: self.get(name) for name in self.names}

    def dtypes(self) -> dict[str, str]:
        return {name: self.dtype(name) for name in self.names}

    def to_bytes(self) -> bytes:
        raw = self.raw_header or _dump_header(self.header)
        return struct.pack("<Q", len(raw)) + raw + self.payload


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def parse_container(data: bytes) -> TensorContainer:
    if len(data) < 8:
        raise ContainerError(f"file too short for header length: {len(data)} bytes at byte 0")
    (header_len,) = struct.unpack_from("<Q", data, 0)
    if header_len > len(data) - 8:
        raise ContainerError(f"header length {header_len} exceeds file size {len(data)} at byte 0")
    raw_header = bytes(data[8 : 8 + header_len])
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise ContainerError(f"malformed JSON header at byte {8 + pos}: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError("header is not a JSON object at byte 8")
    payload = bytes(data[8 + header_len :])
    _validate(header, len(payload), 8 + header_len)
    return TensorContainer(header=header, payload=payload, raw_header=raw_header)


def _validate(header: dict, payload_len: int, payload_start: int) -> None:
    spans = []
    for name, info in header.items():
        if name == METADATA_KEY:
            if not isinstance(info, dict):
                raise ContainerError(f"{METADATA_KEY} must be an object")
            continue
        try:
            dtype, shape, (begin, end) = info["dtype"], info["shape"], info["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerError(f"tensor {name!r}: bad header entry {info!r}") from exc
        if dtype not in DTYPES:
            raise ContainerError(f"tensor {name!r}: unsupported dtype {dtype!r}")
        if not (0 <= begin <= end):
            raise ContainerError(f"tensor {name!r}: bad offsets [{begin}, {end})")
        if end > payload_len:
            raise ContainerError(
                f"tensor {name!r}: truncated payload, needs byte {payload_start + end} "
                f"but file ends at byte {payload_start + payload_len}"
            )
        expected = _element_count(shape) * _ITEMSIZE[dtype]
        if end - begin != expected:
            raise ContainerError(
                f"tensor {name!r}: {end - begin} bytes at byte {payload_start + begin}, expected {expected}"
            )
        spans.append((begin, end, name))
    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin < cursor:
            raise ContainerError(f"tensor {name!r}: offsets overlap at byte {payload_start + begin}")
        if begin > cursor:
            raise ContainerError(f"tensor {name!r}: gap in payload at byte {payload_start + cursor}")
        cursor = end
    if cursor != payload_len:
        raise ContainerError(f"payload has {payload_len - cursor} trailing bytes at byte {payload_start + cursor}")


def read_container(path) -> TensorContainer:
    return parse_container(Path(path).read_bytes())


def encode_container(
    tensors: Mapping[str, np.ndarray],
    dtypes: Mapping[str, str] | str | None = None,
    metadata: dict | None = None,
) -> bytes:
    """Serialize tensors deterministically (names sorted, canonical JSON)."""
    if isinstance(dtypes, str) or dtypes is None:
        default = dtypes or "f32"
        dtypes = {name: default for name in tensors}
    header: dict = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if name == METADATA_KEY:
            raise ContainerError(f"{METADATA_KEY} is reserved")
        dtype = dtypes.get(name, "f32")
        array = np.asarray(tensors[name])
        raw = _encode(array, dtype)
        header[name] = {"dtype": dtype, "shape": list(array.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    if metadata is not None:
        header[METADATA_KEY] = metadata
    raw_header = _dump_header(header)
    return struct.pack("<Q", len(raw_header)) + raw_header + b"".join(chunks)


def write_container(path, tensors, dtypes=None, metadata=None) -> str:
    """Write a container file and return its SHA-256 hex digest.

    ``tensors`` is either a name -> array mapping or a TensorContainer, which
    is written back byte-for-byte.
    """
    if isinstance(tensors, TensorContainer):
        data = tensors.to_bytes()
    else:
        data = encode_container(tensors, dtypes, metadata)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def container_digest(container: TensorContainer) -> str:
    return hashlib.sha256(container.to_bytes()).hexdigest()


# -- deltas -------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaTensor:
    name: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2 or 0 in data.shape:
            raise ShapeMismatchError(f"{self.name}: delta must be a non-empty 2-D matrix, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"{self.name}: delta has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


TensorFilter = Callable[[str, tuple], bool]


def make_filter(patterns: Iterable[str] | str | TensorFilter | None) -> TensorFilter:
    """Build the include filter. Only 2-D tensors ever pass.

    ``patterns`` is None (all 2-D tensors), a glob or list of globs matched
    against tensor names, or a predicate ``(name, shape) -> bool``.
    """
    if callable(patterns):
        return lambda name, shape: len(shape) == 2 and bool(patterns(name, shape))
    if isinstance(patterns, str):
        patterns = [patterns]
    globs = list(patterns) if patterns else None

    def accept(name, shape):
        if len(shape) != 2:
            return False
        return globs is None or any(fnmatch.fnmatchcase(name, g) for g in globs)

    return accept


def _as_mapping(source) -> Mapping[str, np.ndarray]:
    if isinstance(source, TensorContainer):
        return {name: source.get(name) for name in source.names}
    return source


def compute_delta(base, finetuned, include=None) -> list[DeltaTensor]:
    """ΔW = W_ft - W_base for every tensor accepted by ``include``.

    Both inputs may be TensorContainers or name -> array mappings. Tensors
    the filter rejects are not returned; see :func:`passthrough_names`.
    """
    accept = make_filter(include)
    base, finetuned = _as_mapping(base), _as_mapping(finetuned)
    deltas = []
    for name in sorted(finetuned):
        ft = np.asarray(finetuned[name])
        if not accept(name, ft.shape):
            continue
        if name not in base:
            raise KeyError(f"tensor {name!r} missing from base checkpoint")
        b = np.asarray(base[name])
        if b.shape != ft.shape:
            raise ShapeMismatchError(f"tensor {name!r}: base shape {b.shape} != fine-tuned shape {ft.shape}")
        deltas.append(DeltaTensor(name, ft.astype(np.float32) - b.astype(np.float32)))
    missing = sorted(n for n in base if n not in finetuned and accept(n, np.shape(base[n])))
    if missing:
        raise KeyError(f"tensor {missing[0]!r} missing from fine-tuned checkpoint")
    return deltas


def passthrough_names(finetuned, include=None) -> list[str]:
    accept = make_filter(include)
    finetuned = _as_mapping(finetuned)
    return sorted(n for n in finetuned if not accept(n, np.shape(finetuned[n])))


# -- accounting ---------------------------------------------------------------


def compression_ratio(original_param_count: float, stored_equiv_16bit_count: float) -> float:
    """Original size over stored size, both counted in 16-bit entries."""
    if stored_equiv_16bit_count <= 0:
        raise ValueError("stored count must be positive")
    return float(original_param_count) / float(stored_equiv_16bit_count)


def factorized_storage(m: int, n: int, keep_rates, bits=None) -> float:
    """Expected 16-bit-equivalent entries for sparse singular factors.

    Each stored column k costs ``keep_k * (m + n) * bits_k / 16`` entries for
    U and V plus one 16-bit singular value. Columns with keep rate 0 cost
    nothing.
    """
    keep = np.asarray(keep_rates, dtype=np.float64)
    weight = np.ones_like(keep) if bits is None else np.asarray(bits, dtype=np.float64) / 16.0
    stored = keep > 0
    return float(np.sum(keep[stored] * (m + n) * weight[stored]) + np.count_nonzero(stored))
