"""Compressed-artifact payload codecs and checkpoint-level compress/reconstruct.

An artifact is a tensor container. Every compressed tensor is one
``u8-packed`` entry holding the record payload described below; tensors
that are not compressed (1-D biases, norms, anything the include filter
rejects) are stored as-is. The manifest sits under ``__metadata__``.

Payload layouts (varint = unsigned LEB128, f16 = little-endian IEEE half):

impart
    varint K, f16 sigma[K], f16 keep[K], then per column k:
    varint nU, f16 U[nU], varint nV, f16 V[nV]
    (kept entries, already rescaled, in ascending row order)
impart-qt
    varint K, f16 sigma[K], f16 keep[K], then per column k and per factor:
    varint count, f16 scale, packed codes (bit width from the group table,
    codes stored as code + 2**(bits-1))
dare
    f16 keep, varint count, f16 values[count] in row-major order
lowrank
    varint r, f16 sigma[r], f16 U[m*r] column by column, f16 V[n*r] likewise
"""

import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .impart import (
    SparseFactors,
    SparsifyConfig,
    allocate_sparsity,
    dare_mask,
    dare_sparsify,
    empty_sparse,
    f16_keep_rate,
    sparsify,
)
from .packing import decode_varint, encode_varint, pack_codes, packed_size, unpack_codes, varint_size
from .quant import QuantConfig, QuantizedFactors, bits_for_columns, quantize_artifact, solve_alpha_for_cr
from .svd import SvdFactors, lowrank_rank, svd
from .tensor_store import (
    DeltaTensor,
    TensorContainer,
    compute_delta,
    container_digest,
    encode_container,
    make_filter,
    round_to_dtype,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METHODS = ("impart", "dare", "lowrank", "impart-qt")
F16_MAX = 65504.0
# smallest keep rate whose rescaled unit-norm entries still fit in float16
MIN_KEEP = 2.0**-14


class ArtifactError(ValueError):
    pass


class DigestMismatchError(ArtifactError):
    pass


# -- byte helpers ---------------------------------------------------------------


def _f16_bytes(values) -> bytes:
    values = np.asarray(values, dtype=np.float64)
    if values.size and np.max(np.abs(values)) > F16_MAX:
        raise ArtifactError(f"value {np.max(np.abs(values)):.4g} overflows float16 storage")
    return values.astype("<f2").tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def varint(self) -> int:
        value, self.pos = decode_varint(self.data, self.pos)
        return value

    def take(self, nbytes: int) -> bytes:
        if self.pos + nbytes > len(self.data):
            raise ArtifactError(f"truncated record payload at byte {self.pos}")
        out = self.data[self.pos : self.pos + nbytes]
        self.pos += nbytes
        return out

    def f16(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(2 * count), dtype="<f2").astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ArtifactError(f"{len(self.data) - self.pos} trailing bytes in record payload")


# -- impart -------------------------------------------------------------------


def impart_column_overhead(m: int, n: int) -> float:
    """Per-column bytes beyond the kept entries, in 16-bit units."""
    return 2.0 + (varint_size(m) + varint_size(n)) / 2.0


def encode_impart(sf: SparseFactors) -> bytes:
    out = io.BytesIO()
    out.write(encode_varint(sf.columns))
    out.write(_f16_bytes(sf.sigma))
    out.write(_f16_bytes(sf.keep))
    for u, v in zip(sf.U_values, sf.V_values):
        out.write(encode_varint(len(u)))
        out.write(_f16_bytes(u))
        out.write(encode_varint(len(v)))
        out.write(_f16_bytes(v))
    return out.getvalue()


def decode_impart(data: bytes, shape, salt: str) -> SparseFactors:
    rd = _Reader(data)
    K = rd.varint()
    sigma = rd.f16(K)
    keep = rd.f16(K)
    sf = SparseFactors(tuple(shape), salt, sigma, keep, [], [])
    sf.ensure_masks()
    for k in range(K):
        nu = rd.varint()
        sf.U_values.append(rd.f16(nu).astype(np.float32))
        nv = rd.varint()
        sf.V_values.append(rd.f16(nv).astype(np.float32))
        if nu != sf.U_masks[k].sum() or nv != sf.V_masks[k].sum():
            raise ArtifactError(f"column {k}: stored counts ({nu}, {nv}) disagree with regenerated masks")
    rd.done()
    return sf


# -- impart-qt ----------------------------------------------------------------


def quantized_column_overhead(m: int, n: int) -> float:
    # sigma, keep, two scales, two counts, and on average half a packing unit per factor
    return 4.0 + (varint_size(m) + varint_size(n)) / 2.0 + 1.0


def encode_quantized(qf: QuantizedFactors) -> bytes:
    out = io.BytesIO()
    out.write(encode_varint(qf.columns))
    out.write(_f16_bytes(qf.sigma))
    out.write(_f16_bytes(qf.keep))
    for k in range(qf.columns):
        bits = int(qf.bits[k])
        offset = 1 << (bits - 1)
        for codes, scale in ((qf.U_codes[k], qf.U_scales[k]), (qf.V_codes[k], qf.V_scales[k])):
            out.write(encode_varint(len(codes)))
            out.write(_f16_bytes([scale]))
            out.write(pack_codes(np.asarray(codes, dtype=np.int64) + offset, bits))
    return out.getvalue()


def decode_quantized(data: bytes, shape, salt: str, group_bits) -> QuantizedFactors:
    rd = _Reader(data)
    K = rd.varint()
    sigma = rd.f16(K)
    keep = rd.f16(K)
    bits = bits_for_columns(K, group_bits)
    parts = {"U": ([], np.zeros(K)), "V": ([], np.zeros(K))}
    for k in range(K):
        b = int(bits[k])
        for which in ("U", "V"):
            count = rd.varint()
            parts[which][1][k] = rd.f16(1)[0]
            raw = rd.take(packed_size(count, b))
            parts[which][0].append(unpack_codes(raw, count, b).astype(np.int64) - (1 << (b - 1)))
    rd.done()
    qf = QuantizedFactors(tuple(shape), salt, sigma, keep, bits, parts["U"][0], parts["U"][1],
                          parts["V"][0], parts["V"][1], tuple(tuple(g) for g in group_bits))
    qf.ensure_masks()
    for k in range(K):
        if len(qf.U_codes[k]) != qf.U_masks[k].sum() or len(qf.V_codes[k]) != qf.V_masks[k].sum():
            raise ArtifactError(f"column {k}: stored counts disagree with regenerated masks")
    return qf


# -- dare ---------------------------------------------------------------------


@dataclass
class DareRecord:
    shape: tuple
    salt: str
    keep: float
    values: np.ndarray

    def reconstruct(self) -> np.ndarray:
        m, n = self.shape
        out = np.zeros(m * n, dtype=np.float32)
        if self.keep >= 1.0:
            out[:] = self.values
        elif self.keep > 0:
            out[dare_mask(self.shape, self.keep, self.salt).reshape(-1)] = self.values
        return out.reshape(m, n)


def dare_record(delta: DeltaTensor, alpha: float, salt: str) -> DareRecord:
    m, n = delta.shape
    if alpha == 0.0:
        return DareRecord(delta.shape, salt, 1.0, delta.data.reshape(-1).astype(np.float32))
    overhead = (2 + varint_size(m * n)) / 2.0
    keep = max((1.0 - alpha) - overhead / (m * n), 0.0)
    # the kept count is binomial; a 3-sigma margin keeps the payload inside the budget
    keep = f16_keep_rate(max(keep - 3.0 * math.sqrt(keep * (1.0 - keep) / (m * n)), 0.0))
    if keep <= 0:
        return DareRecord(delta.shape, salt, 0.0, np.zeros(0, dtype=np.float32))
    sparse = dare_sparsify(delta.data, 1.0 - keep, salt)
    mask = dare_mask(delta.shape, keep, salt).reshape(-1)
    return DareRecord(delta.shape, salt, keep, sparse.reshape(-1)[mask])


def encode_dare(rec: DareRecord) -> bytes:
    return _f16_bytes([rec.keep]) + encode_varint(len(rec.values)) + _f16_bytes(rec.values)


def decode_dare(data: bytes, shape, salt: str) -> DareRecord:
    rd = _Reader(data)
    keep = float(rd.f16(1)[0])
    count = rd.varint()
    values = rd.f16(count).astype(np.float32)
    rd.done()
    return DareRecord(tuple(shape), salt, keep, values)


# -- lowrank ------------------------------------------------------------------


def encode_lowrank(f: SvdFactors) -> bytes:
    return (
        encode_varint(f.rank)
        + _f16_bytes(f.sigma)
        + _f16_bytes(f.U.T.reshape(-1))
        + _f16_bytes(f.V.T.reshape(-1))
    )


def decode_lowrank(data: bytes, shape) -> SvdFactors:
    m, n = shape
    rd = _Reader(data)
    r = rd.varint()
    sigma = rd.f16(r)
    U = rd.f16(m * r).reshape(r, m).T
    V = rd.f16(n * r).reshape(r, n).T
    rd.done()
    return SvdFactors(U=U, sigma=sigma, V=V)


# -- per-tensor compression -----------------------------------------------------


@dataclass(frozen=True)
class CompressConfig:
    method: str = "impart"
    alpha: float | None = None
    cr: float | None = None
    cr_qt: float | None = None
    beta: float = 0.6
    C: float = 1.0
    quant: QuantConfig = QuantConfig()
    seed_salt: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        given = [x is not None for x in (self.alpha, self.cr, self.cr_qt)]
        if sum(given) != 1:
            raise ValueError("give exactly one of alpha, cr, cr_qt")
        if self.cr_qt is not None and self.method != "impart-qt":
            raise ValueError("cr_qt only applies to method impart-qt")
        if self.cr is not None and self.cr < 1:
            raise ValueError("cr must be >= 1")
        if self.alpha is not None and not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must be in [0, 1)")
        SparsifyConfig(self.target_alpha if self.cr_qt is None else 0.0, self.beta, self.C)

    @property
    def target_alpha(self) -> float | None:
        if self.alpha is not None:
            return self.alpha
        if self.cr is not None:
            return 1.0 - 1.0 / self.cr
        return None

    def salt_for(self, name: str) -> str:
        return f"{self.seed_salt}/{name}" if self.seed_salt else name

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "cr": self.cr,
            "cr_qt": self.cr_qt,
            "beta": self.beta,
            "C": self.C,
            "group_bits": [list(g) for g in self.quant.group_bits],
            "blocksize": self.quant.blocksize,
            "damp": self.quant.damp,
            "seed_salt": self.seed_salt,
        }


_SIXTEEN = ((None, 16),)


def _impart_alpha(f: SvdFactors, cfg: CompressConfig, shape) -> float:
    """Allocation alpha whose expected payload fits the byte budget of the target."""
    m, n = shape
    alpha = cfg.target_alpha
    if cfg.method == "impart-qt":
        if cfg.cr_qt is None:
            return alpha
        return solve_alpha_for_cr(f.sigma, cfg.cr_qt, cfg.beta, cfg.C, cfg.quant.group_bits, shape,
                                  column_overhead=quantized_column_overhead(m, n))
    if alpha == 0.0:
        return 0.0
    return solve_alpha_for_cr(f.sigma, 1.0 / (1.0 - alpha), cfg.beta, cfg.C, _SIXTEEN, shape,
                              column_overhead=impart_column_overhead(m, n))


def compress_tensor(delta: DeltaTensor, cfg: CompressConfig, calibration=None) -> tuple[bytes, dict, object]:
    """Compress one delta matrix. Returns (payload, manifest record, decoded record)."""
    m, n = delta.shape
    salt = cfg.salt_for(delta.name)
    record = {"method": cfg.method, "shape": [m, n], "salt": salt, "beta": cfg.beta, "C": cfg.C}
    if cfg.method == "dare":
        alpha = cfg.target_alpha
        rec = dare_record(delta, alpha, salt)
        record.update(alpha=alpha, alpha_effective=1.0 - rec.keep)
        payload = encode_dare(rec)
        return payload, record, decode_dare(payload, (m, n), salt)
    if cfg.method == "lowrank":
        alpha = cfg.target_alpha
        f = svd(delta)
        r = lowrank_rank(m, n, alpha)
        f = SvdFactors(U=f.U[:, :r], sigma=f.sigma[:r], V=f.V[:, :r])
        record.update(alpha=alpha, alpha_effective=1.0 - r * (m + n + 1) / (m * n), rank=r)
        payload = encode_lowrank(f)
        return payload, record, decode_lowrank(payload, (m, n))

    f = svd(delta)
    if f.sigma[0] == 0:
        sf = empty_sparse((m, n), salt)
        record.update(alpha=cfg.target_alpha, alpha_effective=None, plan_digest=None, plan={})
    else:
        alpha_eff = _impart_alpha(f, cfg, (m, n))
        plan = allocate_sparsity(f.sigma, alpha_eff, cfg.beta, cfg.C, shape=(m, n))
        plan.p = _drop_tiny_keep(plan.p)
        sf = sparsify(f, plan, salt)
        record.update(
            alpha=cfg.target_alpha,
            alpha_effective=alpha_eff,
            plan_digest=plan.digest(),
            plan=plan.summary(),
        )
    if cfg.method == "impart":
        payload = encode_impart(sf)
        return payload, record, decode_impart(payload, (m, n), salt)
    # values are stored at 16 bits before quantization, as in the plain artifact
    sf16 = decode_impart(encode_impart(sf), (m, n), salt)
    sf16.plan = sf.plan
    qf = quantize_artifact(sf16, cfg.quant, calibration)
    record["group_bits"] = [list(g) for g in cfg.quant.group_bits]
    record["cr_qt"] = cfg.cr_qt
    payload = encode_quantized(qf)
    return payload, record, decode_quantized(payload, (m, n), salt, cfg.quant.group_bits)


def _drop_tiny_keep(p: np.ndarray) -> np.ndarray:
    p = p.copy()
    p[1.0 - p < MIN_KEEP] = 1.0
    return p


def decode_record(payload: bytes, record: dict):
    method, shape, salt = record["method"], record["shape"], record["salt"]
    if method == "impart":
        return decode_impart(payload, shape, salt)
    if method == "impart-qt":
        return decode_quantized(payload, shape, salt, record["group_bits"])
    if method == "dare":
        return decode_dare(payload, shape, salt)
    if method == "lowrank":
        return decode_lowrank(payload, shape)
    raise ArtifactError(f"unknown method {method!r} in manifest")


# -- checkpoint level -----------------------------------------------------------


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("DELTAPRESS_THREADS", "1")))
    except ValueError:
        return 1


def _rel_error(approx: np.ndarray, exact: np.ndarray) -> float:
    norm = float(np.linalg.norm(exact))
    diff = float(np.linalg.norm(approx.astype(np.float64) - exact.astype(np.float64)))
    if norm == 0:
        return 0.0 if diff == 0 else float("inf")
    return diff / norm


def compress_checkpoint(base: TensorContainer | None, finetuned: TensorContainer, cfg: CompressConfig,
                        include=None, calibration=None, threads: int | None = None) -> tuple[bytes, dict]:
    """Compress every delta accepted by ``include``; return (artifact bytes, report).

    With ``base=None`` the ``finetuned`` container is taken to hold deltas
    already, and the manifest records no base digest.
    """
    if base is None:
        base_digest = None
        base = {n: np.zeros(finetuned.shape(n), np.float32) for n in finetuned.names}
    else:
        base_digest = container_digest(base)
    deltas = compute_delta(base, finetuned, include)
    accept = make_filter(include)
    threads = threads or default_threads()
    calibration = calibration or {}

    def work(delta):
        try:
            return compress_tensor(delta, cfg, calibration.get(delta.name))
        except Exception as exc:
            raise type(exc)(f"{delta.name}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, deltas))
    else:
        results = [work(d) for d in deltas]

    tensors, dtypes, records, rows = {}, {}, {}, []
    original = stored = 0
    for delta, (payload, record, decoded) in zip(deltas, results):
        m, n = delta.shape
        record["dtype"] = finetuned.dtype(delta.name)
        record["payload_bytes"] = len(payload)
        tensors[delta.name] = np.frombuffer(payload, dtype=np.uint8)
        dtypes[delta.name] = "u8-packed"
        records[delta.name] = record
        err = _rel_error(decoded.reconstruct(), delta.data)
        original += 2 * m * n
        stored += len(payload)
        rows.append({
            "name": delta.name,
            "shape": [m, n],
            "payload_bytes": len(payload),
            "cr": (2 * m * n / len(payload)) if payload else None,
            "rel_error": err,
            **{k: record[k] for k in ("alpha", "alpha_effective") if k in record},
            **({"plan": record["plan"]} if "plan" in record else {}),
        })
    for name in finetuned.names:
        if name in tensors or accept(name, finetuned.shape(name)):
            continue
        tensors[name] = finetuned.get(name)
        dtypes[name] = finetuned.dtype(name)
        records[name] = {"method": "raw", "dtype": finetuned.dtype(name)}

    manifest = {
        "format_version": FORMAT_VERSION,
        "producer": f"deltapress {__version__}",
        "base_digest": base_digest,
        "config": cfg.to_dict(),
        "tensors": records,
    }
    data = encode_container(tensors, dtypes, {"manifest": manifest})
    report = {
        "schema_version": 1,
        "config": cfg.to_dict(),
        "original_bytes_16bit": original,
        "payload_bytes": stored,
        "achieved_cr": (original / stored) if stored else None,
        "tensors": rows,
    }
    return data, report


def load_manifest(artifact: TensorContainer) -> dict:
    manifest = artifact.metadata.get("manifest")
    if not manifest:
        raise ArtifactError("container has no artifact manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"unsupported artifact format_version {manifest.get('format_version')!r}")
    return manifest


def decode_deltas(artifact: TensorContainer) -> dict[str, np.ndarray]:
    """Dense reconstructed deltas for every compressed tensor in the artifact."""
    manifest = load_manifest(artifact)
    out = {}
    for name, record in sorted(manifest["tensors"].items()):
        if record["method"] == "raw":
            continue
        out[name] = decode_record(artifact.raw(name), record).reconstruct()
    return out


def reconstruct_checkpoint(artifact: TensorContainer, base: TensorContainer, force: bool = False):
    """W = W_base + reconstructed delta; returns (tensors, dtypes)."""
    manifest = load_manifest(artifact)
    digest = container_digest(base)
    if manifest["base_digest"] is not None and digest != manifest["base_digest"] and not force:
        raise DigestMismatchError(
            f"base checkpoint digest {digest[:12]} does not match artifact ({manifest['base_digest'][:12]})"
        )
    tensors, dtypes = {}, {}
    deltas = decode_deltas(artifact)
    for name, record in sorted(manifest["tensors"].items()):
        dtype = record.get("dtype", "f32")
        if record["method"] == "raw":
            tensors[name] = artifact.get(name)
        else:
            if name not in base:
                raise ArtifactError(f"tensor {name!r} missing from base checkpoint")
            tensors[name] = (base.get(name).astype(np.float32) + deltas[name]).astype(np.float32)
        dtypes[name] = dtype
    for name in base.names:
        if name not in tensors:
            tensors[name] = base.get(name)
            dtypes[name] = base.dtype(name)
    return tensors, dtypes


def storage_rounded(tensors: dict, dtypes: dict) -> dict:
    return {name: round_to_dtype(t, dtypes[name]) for name, t in tensors.items() if dtypes[name] != "u8-packed"}
