"""Thin SVD with canonical signs, the LowRank baseline and reconstruction."""

from dataclasses import dataclass

import numpy as np

from .tensor_store import DeltaTensor


class SvdError(RuntimeError):
    pass


class RankUnderflowError(ValueError):
    pass


@dataclass
class SvdFactors:
    """ΔW ≈ U @ diag(sigma) @ V.T with sigma non-increasing."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.V.shape[0]

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        U = self.U.astype(np.float64)
        V = self.V.astype(np.float64)
        return ((U * self.sigma.astype(np.float64)) @ V.T).astype(np.float32)


def canonicalize_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip column pairs so the largest-magnitude entry of each U column is >= 0."""
    if U.shape[1] == 0:
        return U, V
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, V * signs


def svd(delta) -> SvdFactors:
    """Thin SVD (q = min(m, n)) of a DeltaTensor or plain matrix."""
    name = delta.name if isinstance(delta, DeltaTensor) else "<matrix>"
    data = delta.data if isinstance(delta, DeltaTensor) else np.asarray(delta, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise SvdError(f"{name}: matrix has non-finite entries")
    try:
        U, s, Vt = np.linalg.svd(data.astype(np.float64), full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"{name}: SVD did not converge") from exc
    # LAPACK already sorts, but ties and -0.0 make an explicit stable sort cheap insurance
    order = np.argsort(-s, kind="stable")
    U, s, V = U[:, order], np.maximum(s[order], 0.0), Vt[order].T
    U, V = canonicalize_signs(U, V)
    return SvdFactors(U=U, sigma=s, V=V)


def lowrank_rank(m: int, n: int, alpha: float) -> int:
    """Largest r whose factor storage r*(m+n+1) fits in (1-alpha)*m*n entries."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    q = min(m, n)
    if alpha == 0.0:
        return q
    r = int(np.floor((1.0 - alpha) * m * n / (m + n + 1)))
    if r < 1:
        raise RankUnderflowError(f"rank underflow: alpha={alpha} leaves no room for one component of a {m}x{n} matrix")
    return min(r, q)


def truncate_lowrank(f: SvdFactors, alpha: float) -> SvdFactors:
    r = lowrank_rank(*f.shape, alpha)
    return SvdFactors(U=f.U[:, :r].copy(), sigma=f.sigma[:r].copy(), V=f.V[:, :r].copy())


def reconstruct(f) -> np.ndarray:
    """Dense m x n matrix from SvdFactors, SparseFactors or QuantizedFactors."""
    return f.reconstruct()
