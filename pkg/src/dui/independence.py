"""Kernel dependence measures and the distributional-independence loss.

The loss is ``L_F = nHSIC(X, Y) - alpha * nHSIC(X, Yhat)`` where ``Yhat`` are
predicted class probabilities. Its gradient with respect to the prediction
matrix is available in closed form, which is what lets the model code
backpropagate it through a network in a single extra pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial.distance import pdist, squareform

Normalization = Literal["raw_trace", "n_minus_1_squared", "frobenius"]
NORMALIZATIONS = ("raw_trace", "n_minus_1_squared", "frobenius")


@dataclass(frozen=True)
class KernelConfig:
    kind: Literal["rbf", "linear", "delta"] = "rbf"
    bandwidth: float | str = "median"

    def __post_init__(self):
        if self.kind not in ("rbf", "linear", "delta"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ValueError(f"bandwidth must be a positive number or 'median', got {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")


@dataclass(frozen=True)
class IndependenceConfig:
    feature_kernel: KernelConfig = field(default_factory=lambda: KernelConfig("rbf", "median"))
    label_kernel: KernelConfig = field(default_factory=lambda: KernelConfig("delta"))
    prediction_kernel: KernelConfig = field(default_factory=lambda: KernelConfig("linear"))
    alpha: float = 1.0
    normalization: Normalization = "n_minus_1_squared"
    # rows used for O(n^2) kernels when the data is larger than this
    batch_size: int = 512
    seed: int = 0
    # feature used by the plug-in MI diagnostic; None picks the highest-variance one
    mi_feature: int | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


class NonDifferentiableKernelError(ValueError):
    pass


def _check_prediction_kernel(config: IndependenceConfig) -> None:
    if config.prediction_kernel.kind == "delta":
        raise NonDifferentiableKernelError("non-differentiable prediction kernel")


# ---------------------------------------------------------------------------
# kernels


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def median_bandwidth(rows) -> float:
    """Median of pairwise Euclidean distances.

    Falls back to the median of the non-zero distances when more than half
    of the pairs coincide.
    """
    d = pdist(_as_rows(rows))
    if d.size == 0 or not np.any(d > 0):
        raise ValueError("degenerate kernel input: all rows identical, median bandwidth undefined")
    sigma = float(np.median(d))
    if sigma == 0.0:
        sigma = float(np.median(d[d > 0]))
    return sigma


def kernel_matrix(rows, config: KernelConfig, bandwidth: float | None = None) -> np.ndarray:
    """Gram matrix of ``rows`` (n x d, or a length-n vector) under ``config``."""
    if config.kind == "delta":
        x = np.asarray(rows)
        if x.ndim == 1:
            return (x[:, None] == x[None, :]).astype(np.float64)
        return np.all(x[:, None, :] == x[None, :, :], axis=-1).astype(np.float64)
    X = _as_rows(rows)
    if X.shape[0] < 2:
        raise ValueError("kernel_matrix needs at least 2 rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("kernel input must be finite")
    if config.kind == "linear":
        return X @ X.T
    sigma = bandwidth if bandwidth is not None else config.bandwidth
    if sigma == "median":
        sigma = median_bandwidth(X)
    sq = squareform(pdist(X, "sqeuclidean"))
    return np.exp(-sq / (2.0 * sigma * sigma))


@dataclass(frozen=True, eq=False)
class CenteredKernel:
    matrix: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def frobenius(self) -> float:
        return float(np.sqrt(np.sum(self.matrix * self.matrix)))


def center(K) -> CenteredKernel:
    """HKH with H = I - 11^T/n, computed without forming H."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"kernel must be square, got shape {K.shape}")
    row = K.mean(axis=1, keepdims=True)
    col = K.mean(axis=0, keepdims=True)
    Kc = K - row - col + K.mean()
    # exact symmetry keeps nhsic(a, b) == nhsic(b, a) bit-for-bit
    Kc = 0.5 * (Kc + Kc.T)
    return CenteredKernel(Kc)


def _scale(normalization: str, n: int) -> float:
    if normalization == "raw_trace":
        return 1.0
    if normalization == "n_minus_1_squared":
        return 1.0 / float((n - 1) ** 2)
    raise ValueError(normalization)


def nhsic(a: CenteredKernel, b: CenteredKernel, normalization: Normalization = "n_minus_1_squared") -> float:
    if a.n != b.n:
        raise ValueError(f"kernel sizes differ: {a.n} vs {b.n}")
    trace = float(np.sum(a.matrix * b.matrix))  # tr(AB) for symmetric A, B
    if normalization == "frobenius":
        denom = a.frobenius() * b.frobenius()
        return 0.0 if denom == 0.0 else trace / denom
    return trace * _scale(normalization, a.n)


# ---------------------------------------------------------------------------
# plug-in mutual information


def discretize(values, bins: int | None = None) -> np.ndarray:
    """Equal-width binning into ``ceil(sqrt(n))`` bins by default."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if bins is None:
        bins = max(1, math.ceil(math.sqrt(v.size)))
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.size, dtype=np.int64)
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def entropy(x) -> float:
    _, counts = np.unique(np.asarray(x), return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def plugin_mi(x, y) -> float:
    """Plug-in mutual information (nats) of two discrete vectors."""
    x = np.asarray(x).ravel()
    y = np.asarray(y).ravel()
    if x.size != y.size or x.size == 0:
        raise ValueError("plugin_mi needs two non-empty vectors of equal length")
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1.0)
    joint /= x.size
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def dist(a: float, b: float) -> float:
    return abs(a - b)


# ---------------------------------------------------------------------------
# distributional loss


def _label_kernel(labels, class_count: int | None, config: KernelConfig) -> np.ndarray:
    labels = np.asarray(labels)
    if config.kind == "delta":
        return kernel_matrix(labels, config)
    k = class_count if class_count is not None else int(labels.max()) + 1
    return kernel_matrix(np.eye(k)[labels], config)


def label_kernel(labels, config: IndependenceConfig, class_count: int | None = None) -> CenteredKernel:
    return center(_label_kernel(labels, class_count, config.label_kernel))


def feature_kernel(features, config: IndependenceConfig) -> CenteredKernel:
    return center(kernel_matrix(features, config.feature_kernel))


def prediction_kernel(predictions, config: IndependenceConfig) -> CenteredKernel:
    return center(kernel_matrix(predictions, config.prediction_kernel))


def lf_value(features_kernel: CenteredKernel, labels, predictions, config: IndependenceConfig) -> float:
    """``nHSIC(X, Y) - alpha * nHSIC(X, Yhat)`` under one normalization."""
    _check_prediction_kernel(config)
    P = np.asarray(predictions, dtype=np.float64)
    if not np.allclose(P.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("predictions must be row-stochastic")
    first = nhsic(features_kernel, label_kernel(labels, config, P.shape[1]), config.normalization)
    if config.alpha == 0.0:
        return first
    second = nhsic(features_kernel, prediction_kernel(P, config), config.normalization)
    return first - config.alpha * second


def _grad_wrt_kernel(features_kernel: CenteredKernel, K: np.ndarray, config: IndependenceConfig) -> np.ndarray:
    """d nHSIC(X, Yhat) / d K_Yhat for the uncentered prediction kernel K."""
    Kx = features_kernel.matrix
    n = Kx.shape[0]
    if config.normalization == "frobenius":
        Ky = center(K)
        a, b = features_kernel.frobenius(), Ky.frobenius()
        if a == 0.0 or b == 0.0:
            return np.zeros_like(K)
        trace = float(np.sum(Kx * Ky.matrix))
        return Kx / (a * b) - trace / (a * b ** 3) * Ky.matrix
    # tr(Kx H K H) = tr(Kx K) because Kx is already centered
    return _scale(config.normalization, n) * Kx


def lf_grad_predictions(features_kernel: CenteredKernel, predictions, config: IndependenceConfig) -> np.ndarray:
    """Gradient of :func:`lf_value` with respect to the n x C prediction matrix."""
    _check_prediction_kernel(config)
    P = np.asarray(predictions, dtype=np.float64)
    if config.alpha == 0.0:
        return np.zeros_like(P)
    pk = config.prediction_kernel
    if pk.kind == "linear" and config.normalization != "frobenius":
        # d/dP c tr(Kx P P^T) = 2 c Kx P
        dP = 2.0 * _scale(config.normalization, P.shape[0]) * (features_kernel.matrix @ P)
    elif pk.kind == "linear":
        K = P @ P.T
        W = _grad_wrt_kernel(features_kernel, K, config)
        dP = (W + W.T) @ P
    else:
        if pk.bandwidth == "median":
            raise ValueError("rbf prediction kernel needs a numeric bandwidth to be differentiated")
        sigma2 = float(pk.bandwidth) ** 2
        K = kernel_matrix(P, pk)
        W = _grad_wrt_kernel(features_kernel, K, config)
        WK = (W + W.T) * K
        dP = -(WK.sum(axis=1, keepdims=True) * P - WK @ P) / sigma2
    return -config.alpha * dP


def independence_rows(n: int, config: IndependenceConfig, include=None, pool=None) -> np.ndarray:
    """Sorted row subset of size <= batch_size used for kernel terms.

    Rows in ``include`` are kept first (truncated to the batch size), the rest
    is filled by a seeded draw from ``pool`` (default: all rows).
    """
    pool = np.arange(n) if pool is None else np.asarray(pool, dtype=np.int64)
    if pool.size <= config.batch_size:
        return np.sort(pool)
    rng = np.random.default_rng(config.seed)
    chosen = np.empty(0, dtype=np.int64)
    if include is not None and len(include):
        inc = np.intersect1d(np.asarray(include, dtype=np.int64), pool)
        chosen = np.sort(rng.permutation(inc)[: config.batch_size])
    rest = np.setdiff1d(pool, chosen, assume_unique=False)
    need = config.batch_size - chosen.size
    if need > 0:
        chosen = np.concatenate([chosen, rng.choice(rest, size=need, replace=False)])
    return np.sort(chosen)


class DistributionalLoss:
    """L_F prepared on a fixed row subset of one dataset.

    The feature kernel and the label term are data-only and computed once;
    :meth:`value` and :meth:`grad` then take the full n x C prediction matrix
    and only read (or write) the rows in ``self.rows``.
    """

    def __init__(self, features, labels, config: IndependenceConfig, rows=None,
                 class_count: int | None = None):
        _check_prediction_kernel(config)
        features = np.asarray(features, dtype=np.float64)
        self.config = config
        self.n_total = features.shape[0]
        self.rows = independence_rows(self.n_total, config) if rows is None else np.sort(
            np.asarray(rows, dtype=np.int64))
        if self.rows.size < 2:
            raise ValueError("L_F needs at least 2 rows")
        self.features_kernel = feature_kernel(features[self.rows], config)
        labels = np.asarray(labels)[self.rows]
        self.label_term = nhsic(self.features_kernel, label_kernel(labels, config, class_count),
                                config.normalization)

    @property
    def is_quadratic(self) -> bool:
        """True when :meth:`grad` is linear in the predictions."""
        return (self.config.prediction_kernel.kind == "linear"
                and self.config.normalization != "frobenius")

    def value(self, predictions) -> float:
        if self.config.alpha == 0.0:
            return self.label_term
        P = np.asarray(predictions)[self.rows]
        second = nhsic(self.features_kernel, prediction_kernel(P, self.config), self.config.normalization)
        return self.label_term - self.config.alpha * second

    def grad(self, predictions) -> np.ndarray:
        P = np.asarray(predictions, dtype=np.float64)
        out = np.zeros_like(P)
        if self.config.alpha != 0.0:
            out[self.rows] = lf_grad_predictions(self.features_kernel, P[self.rows], self.config)
        return out


# ---------------------------------------------------------------------------
# shift diagnostics


def _hsic_dependence(features, target_kernel_fn, config: IndependenceConfig) -> float:
    return nhsic(feature_kernel(features, config), target_kernel_fn(), config.normalization)


def _mi_feature(features, config: IndependenceConfig) -> int:
    if config.mi_feature is not None:
        return config.mi_feature
    return int(np.argmax(np.var(features, axis=0)))


def dependence_pair(features, labels, predictions, config: IndependenceConfig,
                    measure: Literal["hsic", "mi"] = "hsic", mi_feature: int | None = None
                    ) -> tuple[float, float]:
    """``(dep(X, Yhat), dep(X, Y))`` on a seeded row subset of at most batch_size."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    P = np.asarray(predictions, dtype=np.float64)
    rows = independence_rows(X.shape[0], config)
    X, y, P = X[rows], y[rows], P[rows]
    if measure == "mi":
        j = _mi_feature(X, config) if mi_feature is None else mi_feature
        xb = discretize(X[:, j])
        return plugin_mi(xb, np.argmax(P, axis=1)), plugin_mi(xb, y)
    Kx = feature_kernel(X, config)
    dep_pred = nhsic(Kx, prediction_kernel(P, config), config.normalization)
    dep_true = nhsic(Kx, label_kernel(y, config, P.shape[1]), config.normalization)
    return dep_pred, dep_true


def delta_p(predictions_full, predictions_retained, data_full, data_retained,
            config: IndependenceConfig, measure: Literal["hsic", "mi"] = "hsic") -> float:
    """Shift in feature/label vs feature/prediction dependence after removal.

    ``DIST(dep(D, Yhat), dep(D, Y)) - DIST(dep(D', Yhat'), dep(D', Y'))``.
    """
    if data_retained.n == 0:
        raise ValueError("empty retained set")
    # one feature for both sides so the MI terms are comparable
    j = _mi_feature(data_full.features, config) if measure == "mi" else None
    a = dependence_pair(data_full.features, data_full.labels, predictions_full, config, measure, j)
    b = dependence_pair(data_retained.features, data_retained.labels, predictions_retained,
                        config, measure, j)
    return dist(*a) - dist(*b)
