"""Synthetic benchmark: error of each method across compression ratios.

Deltas are random orthogonal factors with a power-law spectrum
sigma_k = k**-exponent, optionally plus Gaussian noise, so the corpus is
fully determined by the spec and its seed.
"""

import csv
import io
import itertools
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .artifact import CompressConfig, compress_tensor
from .estimators import relative_error
from .impart import BETA_GRID, C_GRID
from .tensor_store import DeltaTensor

CR_GRID = (8, 16, 32, 64)
CR_QT_GRID = (16, 32, 64, 128)


@dataclass
class BenchSpec:
    sizes: list = field(default_factory=lambda: [[128, 128]])
    exponents: list = field(default_factory=lambda: [1.0])
    noise: list = field(default_factory=lambda: [0.0])
    methods: list = field(default_factory=lambda: ["impart", "dare", "lowrank"])
    cr: list = field(default_factory=lambda: list(CR_GRID))
    cr_qt: list = field(default_factory=lambda: list(CR_QT_GRID))
    trials: int = 1
    seed: int = 0
    betas: list = field(default_factory=lambda: list(BETA_GRID))
    Cs: list = field(default_factory=lambda: list(C_GRID))
    scale: float = 0.01

    @classmethod
    def from_dict(cls, data: dict) -> "BenchSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown bench spec keys: {sorted(unknown)}")
        return cls(**data)


def random_orthonormal(rows: int, cols: int, rng) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((rows, cols)))
    return Q * np.sign(np.diag(R))


def synthetic_delta(m: int, n: int, exponent: float, noise: float = 0.0, rng=None, scale: float = 0.01) -> np.ndarray:
    """Delta with spectrum k**-exponent, Frobenius norm ``scale * sqrt(m*n) / 10``, plus relative noise."""
    rng = np.random.default_rng(rng)
    q = min(m, n)
    sigma = np.arange(1, q + 1, dtype=np.float64) ** -exponent
    delta = (random_orthonormal(m, q, rng) * sigma) @ random_orthonormal(n, q, rng).T
    delta /= np.linalg.norm(delta)
    if noise:
        g = rng.standard_normal((m, n))
        delta += noise * g / np.linalg.norm(g)
    target = scale * np.sqrt(m * n) / 10.0
    return (delta * target / np.linalg.norm(delta)).astype(np.float32)


def _cell(delta: DeltaTensor, method: str, kind: str, target: float, betas, Cs) -> dict:
    grid = itertools.product(betas, Cs) if method.startswith("impart") else [(0.6, 1.0)]
    best = None
    for beta, C in grid:
        cfg = CompressConfig(method=method, beta=beta, C=C, **{kind: target})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            payload, record, decoded = compress_tensor(delta, cfg)
        err = relative_error(decoded.reconstruct(), delta.data)
        m, n = delta.shape
        row = {"rel_error": err, "achieved_cr": 2 * m * n / len(payload), "payload_bytes": len(payload)}
        if method.startswith("impart"):
            row.update(beta=beta, C=C)
        if best is None or err < best["rel_error"]:
            best = row
    return best


def run_bench(spec: BenchSpec) -> dict:
    rows = []
    cells = itertools.product(spec.sizes, spec.exponents, spec.noise, range(spec.trials))
    for idx, ((m, n), exponent, noise, trial) in enumerate(cells):
        rng = np.random.default_rng([spec.seed, idx])
        delta = DeltaTensor(f"bench/{idx}", synthetic_delta(m, n, exponent, noise, rng, spec.scale))
        for method in spec.methods:
            kind, targets = ("cr_qt", spec.cr_qt) if method == "impart-qt" else ("cr", spec.cr)
            for target in targets:
                row = {"m": m, "n": n, "exponent": exponent, "noise": noise, "trial": trial,
                       "method": method, "target_kind": kind, "target": target}
                try:
                    row.update(_cell(delta, method, kind, target, spec.betas, spec.Cs))
                    row["status"] = "ok"
                except Exception as exc:
                    row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
                rows.append(row)
    return {"schema_version": 1, "spec": asdict(spec), "rows": rows}


CSV_FIELDS = ("m", "n", "exponent", "noise", "trial", "method", "target_kind", "target",
              "rel_error", "achieved_cr", "payload_bytes", "beta", "C", "status", "error")


def report_csv(report: dict) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in report["rows"]:
        writer.writerow(row)
    return out.getvalue()
