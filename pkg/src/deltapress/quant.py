"""Mixed-precision quantization of sparse singular vectors.

GPTQ is run with a keep-mask: only kept entries are quantized and only
their rounding error is propagated. Rows of the weight handed to
:func:`gptq_sparse` are singular vectors, so each row carries its own scale
and bit width and rows never interact.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .impart import SparseFactors, allocate_sparsity, column_masks
from .packing import SUPPORTED_BITS

DEFAULT_GROUP_BITS = ((2, 8), (32, 3), (None, 2))


class HessianError(np.linalg.LinAlgError):
    pass


class UnreachableRatioError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    """``group_bits`` lists (count, bits) in descending-sigma order; count None means "the rest"."""

    group_bits: tuple = DEFAULT_GROUP_BITS
    blocksize: int = 128
    damp: float = 0.01

    def __post_init__(self):
        groups = tuple(tuple(g) for g in self.group_bits)
        object.__setattr__(self, "group_bits", groups)
        for count, bits in groups:
            if bits not in SUPPORTED_BITS:
                raise ValueError(f"bit width {bits} not in {SUPPORTED_BITS}")
            if count is not None and count <= 0:
                raise ValueError("group counts must be positive")
        if self.blocksize <= 0:
            raise ValueError("blocksize must be positive")
        if self.damp < 0:
            raise ValueError("damp must be non-negative")


def bits_for_columns(columns: int, group_bits=DEFAULT_GROUP_BITS) -> np.ndarray:
    """Bit width of each of the leading ``columns`` singular vectors."""
    out = np.zeros(columns, dtype=np.int64)
    start = 0
    for count, bits in group_bits:
        stop = columns if count is None else min(columns, start + count)
        out[start:stop] = bits
        start = stop
        if start >= columns:
            break
    if start < columns:
        # groups ran out: the last group's width covers the remainder
        out[start:] = group_bits[-1][1]
    return out


def qmax(bits) -> np.ndarray:
    return (1 << (np.asarray(bits, dtype=np.int64) - 1)) - 1


def rtn_scale(w, bits: int, mask=None) -> float:
    w = np.asarray(w, dtype=np.float64)
    kept = w if mask is None else w[np.asarray(mask, dtype=bool)]
    if kept.size == 0:
        return 0.0
    return float(np.float16(np.max(np.abs(kept)) / qmax(bits)))


def rtn_quantize(w, bits: int, mask=None, scale: float | None = None):
    """Symmetric round-to-nearest with one scale for the whole vector.

    Returns ``(codes, scale)``; codes are signed ints in [-qmax, qmax] and
    masked entries get code 0. The scale is rounded to float16 before use.
    """
    w = np.asarray(w, dtype=np.float64)
    mask = np.ones(w.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if scale is None:
        scale = rtn_scale(w, bits, mask)
    if scale == 0.0 or not mask.any():
        return np.zeros(w.shape, dtype=np.int64), float(scale)
    top = int(qmax(bits))
    codes = np.clip(np.round(w / scale), -top, top).astype(np.int64)
    codes[~mask] = 0
    return codes, float(scale)


def hessian_inverse_factor(H) -> np.ndarray:
    """Upper Cholesky factor R of H^-1 (H^-1 = R.T @ R), as used by GPTQ."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"Hessian must be square, got {H.shape}")
    if not np.allclose(H, H.T, rtol=1e-10, atol=1e-12):
        raise HessianError("Hessian is not symmetric")
    try:
        L = np.linalg.cholesky(H)
        eye = np.eye(H.shape[0])
        Linv = np.linalg.solve(L, eye)
        Hinv = Linv.T @ Linv
        return np.linalg.cholesky(Hinv).T
    except np.linalg.LinAlgError as exc:
        raise HessianError("Hessian is not positive definite; increase damping and retry") from exc


def build_hessian(X, damp: float = 0.01) -> np.ndarray:
    """H = 2 X X^T + lambda I with lambda = damp * mean(diag(2 X X^T)).

    ``X`` holds calibration inputs as columns (features x samples).
    """
    X = np.asarray(X, dtype=np.float64)
    H = 2.0 * X @ X.T
    lam = damp * float(np.mean(np.diag(H))) if H.size else 0.0
    H[np.diag_indices_from(H)] += lam
    return H


def build_hessian_inverse(X, damp: float = 0.01) -> np.ndarray:
    return hessian_inverse_factor(build_hessian(X, damp))


def gptq_sparse(W, M, H_inv_chol, bits, blocksize: int = 128):
    """Column-blocked GPTQ restricted to the entries where ``M`` is True.

    ``bits`` is a scalar or one width per row. Scales are fixed per row from
    the masked input before any error propagation. Returns
    ``(codes, scales, Q)`` where ``Q = codes * scales[:, None]``.
    """
    W = np.array(W, dtype=np.float64)
    M = np.asarray(M, dtype=bool)
    R = np.asarray(H_inv_chol, dtype=np.float64)
    rows, cols = W.shape
    if M.shape != W.shape:
        raise ValueError(f"mask shape {M.shape} != weight shape {W.shape}")
    if R.shape != (cols, cols):
        raise ValueError(f"Hessian factor shape {R.shape} does not match {cols} columns")
    if np.any(np.diag(R) == 0):
        raise HessianError("zero diagonal in inverse-Hessian factor; increase damping")
    bits = np.broadcast_to(np.asarray(bits, dtype=np.int64), (rows,))
    scales = np.array([rtn_scale(W[i], int(bits[i]), M[i]) for i in range(rows)])
    top = qmax(bits).astype(np.float64)
    safe = np.where(scales > 0, scales, 1.0)

    codes = np.zeros((rows, cols), dtype=np.int64)
    Q = np.zeros((rows, cols))
    for i1 in range(0, cols, blocksize):
        i2 = min(i1 + blocksize, cols)
        W1 = W[:, i1:i2].copy()
        E1 = np.zeros((rows, i2 - i1))
        R1 = R[i1:i2, i1:i2]
        for j in range(i2 - i1):
            m = M[:, i1 + j]
            w = W1[:, j] * m
            c = np.clip(np.round(w / safe), -top, top)
            c[(scales == 0) | ~m] = 0
            q = c * scales
            codes[:, i1 + j] = c
            Q[:, i1 + j] = q
            err = (w - q) / R1[j, j]
            W1[:, j:] -= np.outer(err, R1[j, j:])
            E1[:, j] = err
        W[:, i2:] -= E1 @ R[i1:i2, i2:]
    return codes, scales, Q


def hessian_error(W, Q, H) -> float:
    """tr((W - Q) H (W - Q)^T)."""
    D = np.asarray(W, dtype=np.float64) - np.asarray(Q, dtype=np.float64)
    return float(np.einsum("ij,jk,ik->", D, np.asarray(H, dtype=np.float64), D))


@dataclass
class QuantizedFactors:
    """Quantized kept entries of sparse singular vectors.

    ``U_codes[k]`` and ``V_codes[k]`` are signed codes for the kept entries
    of column k (positions regenerate from ``sigma`` and ``salt``).
    """

    shape: tuple[int, int]
    salt: str
    sigma: np.ndarray
    keep: np.ndarray
    bits: np.ndarray
    U_codes: list
    U_scales: np.ndarray
    V_codes: list
    V_scales: np.ndarray
    group_bits: tuple = DEFAULT_GROUP_BITS
    U_masks: list = field(repr=False, default_factory=list)
    V_masks: list = field(repr=False, default_factory=list)
    plan: object = None

    @property
    def columns(self) -> int:
        return len(self.sigma)

    def ensure_masks(self) -> None:
        if len(self.U_masks) != self.columns:
            m, n = self.shape
            sigma16 = np.asarray(self.sigma, dtype=np.float16).astype(np.float64)
            self.U_masks = column_masks(sigma16, self.keep, m, self.salt, "U")
            self.V_masks = column_masks(sigma16, self.keep, n, self.salt, "V")

    def dense_factors(self) -> tuple[np.ndarray, np.ndarray]:
        self.ensure_masks()
        m, n = self.shape
        U = np.zeros((m, self.columns))
        V = np.zeros((n, self.columns))
        for k in range(self.columns):
            U[self.U_masks[k], k] = self.U_codes[k] * self.U_scales[k]
            V[self.V_masks[k], k] = self.V_codes[k] * self.V_scales[k]
        return U, V

    def reconstruct(self) -> np.ndarray:
        U, V = self.dense_factors()
        return ((U * np.asarray(self.sigma, dtype=np.float64)) @ V.T).astype(np.float32)


def quantize_artifact(sparse: SparseFactors, cfg: QuantConfig | None = None, calibration=None) -> QuantizedFactors:
    """GPTQ the kept entries of U (identity Hessian) and V (layer-input Hessian).

    ``calibration`` is None for an identity Hessian or a matrix X of layer
    inputs with one sample per column (n rows).
    """
    cfg = cfg or QuantConfig()
    m, n = sparse.shape
    K = sparse.columns
    bits = bits_for_columns(K, cfg.group_bits)
    if K == 0:
        return QuantizedFactors(sparse.shape, sparse.salt, np.zeros(0), np.zeros(0), bits, [], np.zeros(0),
                                [], np.zeros(0), cfg.group_bits, [], [], sparse.plan)
    sparse.ensure_masks()

    U_codes, U_scales = [], np.zeros(K)
    for k in range(K):
        c, s = rtn_quantize(sparse.U_values[k], int(bits[k]))
        U_codes.append(c)
        U_scales[k] = s

    W = np.zeros((K, n))
    M = np.zeros((K, n), dtype=bool)
    for k in range(K):
        M[k] = sparse.V_masks[k]
        W[k, M[k]] = sparse.V_values[k]
    if calibration is None:
        R = np.eye(n)
    else:
        X = np.asarray(calibration, dtype=np.float64)
        if X.shape[0] != n:
            raise ValueError(f"calibration has {X.shape[0]} rows, layer input dimension is {n}")
        R = build_hessian_inverse(X, cfg.damp)
    codes, V_scales, _ = gptq_sparse(W, M, R, bits, cfg.blocksize)
    V_codes = [codes[k, M[k]] for k in range(K)]

    sigma16 = np.asarray(sparse.sigma, dtype=np.float16).astype(np.float64)
    return QuantizedFactors(
        shape=sparse.shape,
        salt=sparse.salt,
        sigma=sigma16,
        keep=np.asarray(sparse.keep, dtype=np.float64),
        bits=bits,
        U_codes=U_codes,
        U_scales=U_scales,
        V_codes=V_codes,
        V_scales=V_scales,
        group_bits=cfg.group_bits,
        U_masks=list(sparse.U_masks),
        V_masks=list(sparse.V_masks),
        plan=sparse.plan,
    )


# -- compression-ratio search -------------------------------------------------


def quantized_alpha(plan, group_bits=DEFAULT_GROUP_BITS) -> float:
    """Mean over q components of (bits_k / 16) * (1 - p_k)."""
    keep = 1.0 - np.asarray(plan.p, dtype=np.float64)
    bits = bits_for_columns(len(keep), group_bits)
    return float(np.sum(keep * bits / 16.0) / max(len(keep), 1))


def achieved_ratio(plan, shape=None, group_bits=DEFAULT_GROUP_BITS, column_overhead: float = 0.0) -> float:
    """Original 16-bit entries over stored 16-bit-equivalent entries.

    U and V of each kept column cost ``(1 - p_k) * (m + n) * bits_k / 16``;
    ``column_overhead`` adds a fixed cost per kept column (singular value,
    scales, counts).
    """
    keep = 1.0 - np.asarray(plan.p, dtype=np.float64)
    q = len(keep)
    m, n = shape if shape is not None else (q, q)
    bits = bits_for_columns(q, group_bits)
    kept = keep > 0
    stored = np.sum(keep[kept] * (m + n) * bits[kept] / 16.0) + column_overhead * np.count_nonzero(kept)
    return float("inf") if stored <= 0 else m * n / stored


def solve_alpha_for_cr(
    sigma,
    cr_target: float,
    beta: float,
    C: float,
    group_bits=DEFAULT_GROUP_BITS,
    shape=None,
    tol: float = 1e-4,
    column_overhead: float = 0.0,
    return_path: bool = False,
):
    """Binary search for the sparsity ratio whose plan reaches ``cr_target``.

    The returned alpha is the upper end of the final bracket, so the achieved
    ratio is never below the target. With ``return_path`` the list of
    ``(alpha, quantized_alpha, ratio)`` midpoints is returned too.
    """
    if cr_target < 1:
        raise ValueError("target compression ratio must be >= 1")
    sigma = np.asarray(sigma, dtype=np.float64)

    def ratio(alpha):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            plan = allocate_sparsity(sigma, alpha, beta, C, shape=shape)
        return plan, achieved_ratio(plan, shape, group_bits, column_overhead)

    plan0, r0 = ratio(0.0)
    path = []
    if r0 >= cr_target:
        return (0.0, path) if return_path else 0.0
    low, high = 0.0, 1.0
    while high - low > tol:
        mid = 0.5 * (low + high)
        plan, cr = ratio(mid)
        path.append((mid, quantized_alpha(plan, group_bits), cr))
        if cr < cr_target:
            low = mid
        else:
            high = mid
    if high >= 1.0 or not np.isfinite(ratio(high)[1]):
        raise UnreachableRatioError(f"compression ratio {cr_target} is unreachable without dropping every component")
    return (high, path) if return_path else high
