"""Importance-aware sparsification of singular vectors, plus the DARE baseline.

Each singular-vector pair k gets a drop rate p_k that shrinks as sigma_k
grows. Entries of U[:, k] and V[:, k] are then kept independently with
probability 1 - p_k and rescaled by 1 / (1 - p_k), which keeps the
reconstruction unbiased. Masks are never stored: they are regenerated from
the 16-bit singular value and a salt string.
"""

import hashlib
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import prng
from .svd import SvdFactors, svd
from .tensor_store import DeltaTensor

log = logging.getLogger(__name__)

BETA_GRID = (0.6, 0.7, 0.8)
C_GRID = (0.5, 1.0)

# slack on the budget comparison so exact-equality budgets don't trigger a spurious shift
_BUDGET_RTOL = 1e-12


@dataclass(frozen=True)
class SparsifyConfig:
    alpha: float
    beta: float = 0.6
    C: float = 1.0
    seed_salt: str = ""
    rescale: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")

    @classmethod
    def presets(cls, alpha: float, seed_salt: str = "") -> list["SparsifyConfig"]:
        return [cls(alpha, beta, C, seed_salt) for beta in BETA_GRID for C in C_GRID]


@dataclass
class SparsityPlan:
    p: np.ndarray
    gamma: float
    r: int
    alpha_factor: float
    alpha: float = 0.0
    beta: float = 0.0
    C: float = 1.0

    @property
    def q(self) -> int:
        return self.p.shape[0]

    @property
    def keep(self) -> np.ndarray:
        return 1.0 - self.p

    @property
    def kept_columns(self) -> int:
        return int(np.count_nonzero(self.p < 1.0))

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.p, dtype="<f8").tobytes())
        h.update(struct.pack("<dddd", self.alpha, self.beta, self.C, self.alpha_factor))
        return h.hexdigest()[:16]

    def summary(self) -> dict:
        kept = self.p[self.p < 1.0]
        quantiles = np.quantile(kept, [0.0, 0.25, 0.5, 0.75, 1.0]).tolist() if kept.size else []
        return {
            "r": self.r,
            "gamma": None if not np.isfinite(self.gamma) else float(self.gamma),
            "alpha_factor": self.alpha_factor,
            "kept_columns": self.kept_columns,
            "p_quantiles": quantiles,
        }


def per_factor_target(alpha: float, shape: tuple[int, int] | None = None) -> float:
    """Drop rate each factor needs so U and V together keep (1-alpha)*m*n entries.

    For a square matrix this is (1 + alpha) / 2. For m x n it solves
    q * (1 - rho) * (m + n) = (1 - alpha) * m * n with q = min(m, n).
    """
    if shape is None or shape[0] == shape[1]:
        return (1.0 + alpha) / 2.0
    m, n = shape
    q = min(m, n)
    rho = 1.0 - (1.0 - alpha) * m * n / (q * (m + n))
    return float(min(max(rho, 0.0), 1.0))


def _power(x: np.ndarray, C: float) -> np.ndarray:
    # sqrt is correctly rounded everywhere; libm pow(x, 0.5) is not always
    if C == 1.0:
        return x
    if C == 0.5:
        return np.sqrt(x)
    return x**C


def allocate_sparsity(sigma, alpha: float, beta: float, C: float, shape=None) -> SparsityPlan:
    """Per-singular-vector drop rates for a descending spectrum.

    The leading floor(q * (1 - beta)) components get rates proportional to
    1 - (sigma_k / sigma_1)^C, scaled so the overall rate meets the
    per-factor target; the rest are dropped. When the cap p_k <= 1 keeps the
    target out of reach, trailing components are dropped one at a time until
    the mean rate over all q components reaches the target.

    ``alpha == 0`` means no sparsification: only the pre-prune applies.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    q = sigma.shape[0]
    if np.any(np.diff(sigma) > 0):
        raise ValueError("singular values must be non-increasing")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    af = per_factor_target(alpha, shape)
    provenance = dict(alpha=alpha, beta=beta, C=C)
    if q == 0 or sigma[0] <= 0:
        return SparsityPlan(np.ones(q), 0.0, 0, af, **provenance)

    r = int(np.floor(q * (1.0 - beta)))
    p = np.ones(q)
    if alpha == 0.0:
        p[:r] = 0.0
        return SparsityPlan(p, 0.0, r, af, **provenance)
    if r == 0:
        warnings.warn("pre-prune leaves no components; every singular vector is dropped", stacklevel=2)
        return SparsityPlan(p, 0.0, 0, af, **provenance)

    importance = 1.0 - _power(sigma[:r] / sigma[0], C)
    total = math.fsum(importance)
    scale = (af - beta) / (1.0 - beta)
    uncapped = scale * r / total if total > 0 else np.inf
    cap = 1.0 / importance[r - 1] if importance[r - 1] > 0 else np.inf
    gamma = min(uncapped, cap)
    with np.errstate(invalid="ignore"):
        p[:r] = np.where(importance > 0, importance * gamma, 0.0)
    np.clip(p, 0.0, 1.0, out=p)

    # Drop trailing kept components until the mean rate reaches the target.
    # S(j) = sum(p[:j]) + (q - j) only grows as j falls, so the loop's stopping
    # point is the largest j with S(j) >= target; sums are exactly rounded.
    target = af * q * (1.0 - _BUDGET_RTOL)

    def reaches(j):
        return math.fsum([*p[:j], float(q - j)]) >= target

    if not reaches(r):
        lo, hi = 0, r - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if reaches(mid):
                lo = mid
            else:
                hi = mid - 1
        p[lo:r] = 1.0
    if np.all(p == 1.0):
        warnings.warn(f"alpha={alpha} prunes every singular vector", stacklevel=2)
    return SparsityPlan(p, float(gamma), r, af, **provenance)


def f16_keep_rate(keep: float) -> float:
    """Largest float16 value <= keep. Stored keep rates never exceed the plan."""
    k16 = np.float16(keep)
    if float(k16) > keep:
        k16 = np.nextafter(k16, np.float16(0))
    return float(k16)


def f16_value(x: float) -> float:
    return float(np.float16(x))


def mask_seed(sigma_k: float, salt: str, which: str = "U") -> int:
    """64-bit seed for the mask of column k of U (or V).

    ``sigma_k`` should already be the 16-bit value stored in the artifact.
    The float64 bit pattern of sigma_k is XORed with FNV-1a-64(salt); V adds
    one before the SplitMix64 step.
    """
    if which not in ("U", "V"):
        raise ValueError(f"which must be 'U' or 'V', got {which!r}")
    (bits,) = struct.unpack("<Q", struct.pack("<d", float(sigma_k)))
    x = bits ^ prng.fnv1a64(salt)
    if which == "V":
        x = (x + 1) & prng.MASK64
    return prng.splitmix64(x)


def column_masks(sigma16, keep16, length: int, salt: str, which: str) -> list[np.ndarray]:
    seeds = [mask_seed(s, salt, which) for s in sigma16]
    if not seeds:
        return []
    masks = prng.bernoulli_keep(np.array(seeds, dtype=np.uint64), length, np.asarray(keep16))
    return list(masks)


@dataclass
class SparseFactors:
    """Kept, rescaled entries of the leading singular-vector pairs.

    Column k holds ``U[mask_u[k], k] / keep[k]`` (and likewise for V);
    masks are derived from ``sigma16[k]`` and ``salt``.
    """

    shape: tuple[int, int]
    salt: str
    sigma: np.ndarray
    keep: np.ndarray
    U_values: list
    V_values: list
    U_masks: list = field(repr=False, default_factory=list)
    V_masks: list = field(repr=False, default_factory=list)
    plan: SparsityPlan | None = None

    @property
    def columns(self) -> int:
        return len(self.sigma)

    @property
    def sigma16(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=np.float16).astype(np.float64)

    @property
    def stored_entries(self) -> int:
        return int(sum(len(u) for u in self.U_values) + sum(len(v) for v in self.V_values))

    def ensure_masks(self) -> None:
        if len(self.U_masks) != self.columns:
            m, n = self.shape
            self.U_masks = column_masks(self.sigma16, self.keep, m, self.salt, "U")
            self.V_masks = column_masks(self.sigma16, self.keep, n, self.salt, "V")

    def dense_factors(self) -> tuple[np.ndarray, np.ndarray]:
        self.ensure_masks()
        m, n = self.shape
        U = np.zeros((m, self.columns))
        V = np.zeros((n, self.columns))
        for k in range(self.columns):
            U[self.U_masks[k], k] = self.U_values[k]
            V[self.V_masks[k], k] = self.V_values[k]
        return U, V

    def reconstruct(self) -> np.ndarray:
        U, V = self.dense_factors()
        return ((U * np.asarray(self.sigma, dtype=np.float64)) @ V.T).astype(np.float32)


def sparsify(f: SvdFactors, plan: SparsityPlan, salt: str = "", rescale: bool = True) -> SparseFactors:
    """Mask and rescale the singular vectors according to ``plan``.

    Columns with p_k = 1 are dropped; the rest keep each entry with
    probability 1 - p_k (rounded down to float16, the stored precision).
    """
    if plan.q != f.rank:
        raise ValueError(f"plan has {plan.q} rates but factors have rank {f.rank}")
    m, n = f.shape
    keep16 = np.array([f16_keep_rate(1.0 - pk) if pk < 1.0 else 0.0 for pk in plan.p])
    cols = np.flatnonzero(keep16 > 0)
    sigma = np.asarray(f.sigma[cols], dtype=np.float64)
    sigma16 = np.asarray(sigma, dtype=np.float16).astype(np.float64)
    keep = keep16[cols]
    U_masks = column_masks(sigma16, keep, m, salt, "U")
    V_masks = column_masks(sigma16, keep, n, salt, "V")
    U_values, V_values = [], []
    for j, k in enumerate(cols):
        scale = 1.0 / keep[j] if rescale else 1.0
        U_values.append((f.U[U_masks[j], k] * scale).astype(np.float32))
        V_values.append((f.V[V_masks[j], k] * scale).astype(np.float32))
    return SparseFactors(
        shape=(m, n),
        salt=salt,
        sigma=sigma,
        keep=keep,
        U_values=U_values,
        V_values=V_values,
        U_masks=U_masks,
        V_masks=V_masks,
        plan=plan,
    )


def empty_sparse(shape, salt: str = "", plan=None) -> SparseFactors:
    return SparseFactors(tuple(shape), salt, np.zeros(0), np.zeros(0), [], [], [], [], plan)


def sparsify_tensor(delta, cfg: SparsifyConfig, alpha_effective: float | None = None) -> SparseFactors:
    """svd -> allocate_sparsity -> sparsify for one delta matrix.

    ``alpha_effective`` overrides the allocation target (used when a storage
    budget has been solved for); ``cfg.alpha`` stays the recorded target.
    """
    if not isinstance(delta, DeltaTensor):
        delta = DeltaTensor(cfg.seed_salt or "<matrix>", delta)
    salt = cfg.seed_salt or delta.name
    f = svd(delta)
    alpha = cfg.alpha if alpha_effective is None else alpha_effective
    if f.rank == 0 or f.sigma[0] == 0:
        return empty_sparse(delta.shape, salt)
    plan = allocate_sparsity(f.sigma, alpha, cfg.beta, cfg.C, shape=delta.shape)
    return sparsify(f, plan, salt, rescale=cfg.rescale)


def dare_seed(salt: str) -> int:
    return prng.splitmix64(prng.fnv1a64(salt) ^ prng.fnv1a64("dare"))


def dare_mask(shape, keep: float, salt: str) -> np.ndarray:
    m, n = shape
    return prng.bernoulli_keep(np.uint64(dare_seed(salt)), m * n, keep).reshape(m, n)


def dare_sparsify(delta, p: float, salt: str = "", rescale: bool = True) -> np.ndarray:
    """Drop each entry with probability p, rescale survivors by 1 / (1 - p).

    The keep rate is rounded down to float16 as stored in artifacts.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop rate must be in [0, 1), got {p}")
    data = delta.data if isinstance(delta, DeltaTensor) else np.asarray(delta, dtype=np.float32)
    if isinstance(delta, DeltaTensor) and not salt:
        salt = delta.name
    if p == 0.0:
        return data.astype(np.float32, copy=True)
    keep = f16_keep_rate(1.0 - p)
    if keep <= 0.0:
        return np.zeros_like(data, dtype=np.float32)
    mask = dare_mask(data.shape, keep, salt)
    scale = 1.0 / keep if rescale else 1.0
    return np.where(mask, data.astype(np.float64) * scale, 0.0).astype(np.float32)
