"""scikit-learn style wrappers around the compressors.

Each estimator takes a 2-D delta matrix. ``fit`` compresses it and keeps
the compressed record; ``transform`` returns the dense reconstruction, so
``fit_transform(delta)`` is "compress, then decompress".
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .impart import SparsifyConfig, allocate_sparsity, dare_sparsify, sparsify
from .quant import DEFAULT_GROUP_BITS, QuantConfig, quantize_artifact, solve_alpha_for_cr
from .svd import svd, truncate_lowrank


def relative_error(approx, exact) -> float:
    exact = np.asarray(exact, dtype=np.float64)
    norm = np.linalg.norm(exact)
    diff = np.linalg.norm(np.asarray(approx, dtype=np.float64) - exact)
    return 0.0 if norm == 0 and diff == 0 else float(diff / norm) if norm else float("inf")


class _DeltaCompressor(TransformerMixin, BaseEstimator):
    def _validate(self, X):
        return check_array(X, dtype=np.float32, ensure_min_samples=1, ensure_min_features=1)

    def transform(self, X):
        """Compress ``X`` with the fitted settings and return the reconstruction."""
        check_is_fitted(self, "record_")
        X = self._validate(X)
        if X.shape == self.delta_.shape and np.array_equal(X, self.delta_):
            return self.record_.reconstruct_dense()
        return self._compress(X)[0].reconstruct_dense()

    def fit(self, X, y=None):
        self.delta_ = self._validate(X)
        self.record_, fitted = self._compress(self.delta_)
        for key, value in fitted.items():
            setattr(self, key, value)
        self.n_features_in_ = self.delta_.shape[1]
        return self

    def score(self, X, y=None):
        """Negative relative Frobenius error of the reconstruction."""
        X = self._validate(X)
        return -relative_error(self.transform(X), X)


class _Wrapped:
    def __init__(self, obj, dense=None):
        self.obj = obj
        self._dense = dense

    def reconstruct_dense(self):
        return self._dense if self._dense is not None else self.obj.reconstruct()


class ImpartSparsifier(_DeltaCompressor):
    """Importance-aware SVD-space sparsification."""

    def __init__(self, alpha=0.9, beta=0.6, C=1.0, seed_salt="delta", rescale=True):
        self.alpha = alpha
        self.beta = beta
        self.C = C
        self.seed_salt = seed_salt
        self.rescale = rescale

    def _compress(self, X):
        SparsifyConfig(self.alpha, self.beta, self.C, self.seed_salt, self.rescale)
        f = svd(X)
        plan = allocate_sparsity(f.sigma, self.alpha, self.beta, self.C, shape=X.shape)
        factors = sparsify(f, plan, self.seed_salt, rescale=self.rescale)
        return _Wrapped(factors), {"svd_": f, "plan_": plan, "factors_": factors}


class DareSparsifier(_DeltaCompressor):
    """Uniform random drop with 1 / (1 - p) rescale."""

    def __init__(self, p=0.9, seed_salt="delta", rescale=True):
        self.p = p
        self.seed_salt = seed_salt
        self.rescale = rescale

    def _compress(self, X):
        return _Wrapped(None, dare_sparsify(X, self.p, self.seed_salt, rescale=self.rescale)), {}


class LowRankCompressor(_DeltaCompressor):
    """Top-r truncated SVD under the same storage budget as alpha."""

    def __init__(self, alpha=0.9):
        self.alpha = alpha

    def _compress(self, X):
        factors = truncate_lowrank(svd(X), self.alpha)
        return _Wrapped(factors), {"factors_": factors, "rank_": factors.rank}


class ImpartQuantizer(_DeltaCompressor):
    """Sparsify, then quantize the kept entries with mixed-precision GPTQ.

    Set ``cr_qt`` to search for the sparsity ratio that reaches a combined
    compression ratio; otherwise ``alpha`` is used directly.
    """

    def __init__(self, cr_qt=None, alpha=0.9, beta=0.6, C=1.0, group_bits=DEFAULT_GROUP_BITS,
                 blocksize=128, damp=0.01, seed_salt="delta", calibration=None):
        self.cr_qt = cr_qt
        self.alpha = alpha
        self.beta = beta
        self.C = C
        self.group_bits = group_bits
        self.blocksize = blocksize
        self.damp = damp
        self.seed_salt = seed_salt
        self.calibration = calibration

    def _compress(self, X):
        cfg = QuantConfig(self.group_bits, self.blocksize, self.damp)
        f = svd(X)
        alpha = self.alpha
        if self.cr_qt is not None:
            alpha = solve_alpha_for_cr(f.sigma, self.cr_qt, self.beta, self.C, cfg.group_bits, X.shape)
        plan = allocate_sparsity(f.sigma, alpha, self.beta, self.C, shape=X.shape)
        factors = quantize_artifact(sparsify(f, plan, self.seed_salt), cfg, self.calibration)
        return _Wrapped(factors), {"alpha_": alpha, "plan_": plan, "factors_": factors}
