"""Task Arithmetic and TIES merging, optionally after per-model sparsification.

Checkpoints are plain ``name -> array`` mappings. Sums over models are taken
in sorted order per element, so the result does not depend on model order.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .impart import SparsifyConfig, dare_sparsify, sparsify_tensor
from .tensor_store import DeltaTensor, ShapeMismatchError

LAMBDA_GRID = (0.4, 0.6, 0.8, 1.0, 1.2)
RETAIN_GRID = (0.4, 0.6, 0.8)
PRESPARSIFY_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass(frozen=True)
class PreSparsify:
    kind: str = "none"
    ratio: float = 0.0
    beta: float = 0.6
    C: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "dare", "impart"):
            raise ValueError(f"unknown pre-sparsification {self.kind!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"sparsification ratio must be in [0, 1), got {self.ratio}")

    @classmethod
    def parse(cls, text: str) -> "PreSparsify":
        """``none``, ``dare:p`` or ``impart:alpha[:beta:C]``."""
        parts = text.split(":")
        if parts[0] == "none":
            return cls()
        if parts[0] == "dare" and len(parts) == 2:
            return cls("dare", float(parts[1]))
        if parts[0] == "impart" and len(parts) in (2, 4):
            extra = {} if len(parts) == 2 else {"beta": float(parts[2]), "C": float(parts[3])}
            return cls("impart", float(parts[1]), **extra)
        raise ValueError(f"cannot parse pre-sparsification {text!r}")


@dataclass(frozen=True)
class MergeConfig:
    strategy: str = "ta"
    lam: float = 1.0
    retain: float = 1.0
    pre_sparsify: PreSparsify = field(default_factory=PreSparsify)

    def __post_init__(self):
        if self.strategy not in ("ta", "ties"):
            raise ValueError(f"unknown merge strategy {self.strategy!r}")
        if not 0.0 < self.retain <= 1.0:
            raise ValueError(f"retain must be in (0, 1], got {self.retain}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shapes(base: Mapping, deltas: Sequence[Mapping]) -> None:
    for t, delta in enumerate(deltas):
        for name, d in delta.items():
            if name not in base:
                raise KeyError(f"model {t}: tensor {name!r} not in base checkpoint")
            if np.shape(d) != np.shape(base[name]):
                raise ShapeMismatchError(f"model {t}: tensor {name!r} has shape {np.shape(d)}, base has {np.shape(base[name])}")


def _ordered_sum(stack: np.ndarray) -> np.ndarray:
    return np.sort(stack, axis=0).sum(axis=0)


def merge_ta(base: Mapping, deltas: Sequence[Mapping], lam: float) -> dict:
    """W_base + lam * sum_t delta_t for every tensor any delta touches."""
    _check_shapes(base, deltas)
    merged = {}
    for name, w in base.items():
        parts = [np.asarray(d[name], dtype=np.float64) for d in deltas if name in d]
        if not parts:
            merged[name] = np.array(w, dtype=np.float32)
            continue
        total = _ordered_sum(np.stack(parts))
        merged[name] = (np.asarray(w, dtype=np.float64) + lam * total).astype(np.float32)
    return merged


def ties_trim(delta, retain: float) -> np.ndarray:
    """Keep the ceil(retain * size) largest-magnitude entries, first index wins ties."""
    if not 0.0 < retain <= 1.0:
        raise ValueError(f"retain must be in (0, 1], got {retain}")
    delta = np.asarray(delta, dtype=np.float32)
    if retain == 1.0:
        return delta.copy()
    flat = delta.reshape(-1)
    k = math.ceil(retain * flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    out[order[:k]] = flat[order[:k]]
    return out.reshape(delta.shape)


def ties_combine(trimmed: np.ndarray) -> np.ndarray:
    """Sign election and disjoint mean over a (models, ...) stack of trimmed deltas."""
    trimmed = np.asarray(trimmed, dtype=np.float64)
    elected = np.sign(_ordered_sum(trimmed))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0) & (elected != 0)
    count = agree.sum(axis=0)
    total = _ordered_sum(np.where(agree, trimmed, 0.0))
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def merge_ties(base: Mapping, deltas: Sequence[Mapping], lam: float, retain: float) -> dict:
    if not deltas:
        raise ValueError("TIES needs at least one model")
    _check_shapes(base, deltas)
    merged = {}
    for name, w in base.items():
        parts = [ties_trim(d[name], retain) for d in deltas if name in d]
        if not parts:
            merged[name] = np.array(w, dtype=np.float32)
            continue
        merged[name] = (np.asarray(w, dtype=np.float64) + lam * ties_combine(np.stack(parts))).astype(np.float32)
    return merged


def presparsify(delta: Mapping, spec: PreSparsify, salt: str = "") -> dict:
    """Apply DARE or ImPart (densified) to every 2-D tensor of one model's delta."""
    if spec.kind == "none" or spec.ratio == 0.0:
        return {name: np.asarray(d, dtype=np.float32) for name, d in delta.items()}
    out = {}
    for name, d in delta.items():
        d = np.asarray(d, dtype=np.float32)
        tensor_salt = f"{salt}/{name}" if salt else name
        if d.ndim != 2:
            out[name] = d
        elif spec.kind == "dare":
            out[name] = dare_sparsify(d, spec.ratio, tensor_salt)
        else:
            cfg = SparsifyConfig(spec.ratio, spec.beta, spec.C, tensor_salt)
            out[name] = sparsify_tensor(DeltaTensor(name, d), cfg).reconstruct()
    return out


def merge_with_presparsify(base: Mapping, deltas: Sequence[Mapping], cfg: MergeConfig, salt: str = "merge") -> dict:
    prepared = [presparsify(d, cfg.pre_sparsify, f"{salt}{t}") for t, d in enumerate(deltas)]
    if cfg.strategy == "ta":
        return merge_ta(base, prepared, cfg.lam)
    return merge_ties(base, prepared, cfg.lam, cfg.retain)


def deltas_from_checkpoints(base: Mapping, finetuned: Sequence[Mapping]) -> list[dict]:
    return [
        {name: np.asarray(ft[name], dtype=np.float32) - np.asarray(base[name], dtype=np.float32) for name in ft if name in base}
        for ft in finetuned
    ]


class GridSearchError(RuntimeError):
    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


def grid_search(
    base: Mapping,
    deltas: Sequence[Mapping],
    evaluate: Callable[[dict], float],
    strategy: str = "ta",
    lambdas=LAMBDA_GRID,
    retains=RETAIN_GRID,
    ratios=PRESPARSIFY_GRID,
    kinds=("dare", "impart"),
    beta: float = 0.6,
    C: float = 1.0,
) -> tuple[MergeConfig, dict]:
    """Two-stage search: merge hyperparameters first, then sparsification ratio.

    ``evaluate`` scores a merged checkpoint (higher is better). Ties keep
    the earliest configuration in grid order.
    """
    entries = []
    report = {"schema_version": 1, "strategy": strategy, "entries": entries}

    def run(cfg: MergeConfig, stage: int) -> float:
        start = time.perf_counter()
        try:
            score = float(evaluate(merge_with_presparsify(base, deltas, cfg)))
        except Exception as exc:
            report["error"] = f"{type(exc).__name__}: {exc}"
            raise GridSearchError(f"evaluation failed for {cfg}: {exc}", report) from exc
        entries.append({"stage": stage, "config": cfg.to_dict(), "score": score,
                        "wall_time": time.perf_counter() - start})
        return score

    stage1 = [MergeConfig(strategy, lam, retain) for lam in lambdas
              for retain in (retains if strategy == "ties" else (1.0,))]
    best, best_score = None, -np.inf
    for cfg in stage1:
        score = run(cfg, 1)
        if score > best_score:
            best, best_score = cfg, score
    stage1_best = best
    for kind in kinds:
        for ratio in ratios:
            cfg = replace(stage1_best, pre_sparsify=PreSparsify(kind, ratio, beta, C))
            score = run(cfg, 2)
            if score > best_score:
                best, best_score = cfg, score
    report["best"] = {"config": best.to_dict(), "score": best_score}
    return best, report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
