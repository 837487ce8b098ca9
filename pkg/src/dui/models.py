"""Small numpy classifiers with analytic gradients.

Three architectures share one flat parameter layout convention (weights then
biases, layer by layer):

* ``logreg``  softmax(X W + b)                       W: m x C, b: C
* ``mlp``     softmax(relu(X W0 + b0) W1 + b1)       W0: m x h, b0: h, W1: h x C, b1: C
* ``gcn``     softmax(A relu(A X W0) W1)             W0: m x h, W1: h x C

``A`` is the normalised adjacency of a :class:`~dui.datasets.GraphDataset`.
The training objective is mean cross-entropy over the loss rows plus
``l2_reg / 2 * ||theta||^2``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .datasets import Dataset, GraphDataset, arrays
from .independence import DistributionalLoss, IndependenceConfig, independence_rows

Arch = Literal["logreg", "mlp", "gcn"]


@dataclass(frozen=True)
class ModelSpec:
    arch: Arch
    input_dim: int
    class_count: int
    hidden_dim: int | None = None
    l2_reg: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("logreg", "mlp", "gcn"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.arch != "logreg" and (self.hidden_dim is None or self.hidden_dim < 1):
            raise ValueError(f"{self.arch} needs hidden_dim >= 1")
        if self.input_dim < 1 or self.class_count < 2:
            raise ValueError("input_dim must be >= 1 and class_count >= 2")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        m, C, h = self.input_dim, self.class_count, self.hidden_dim
        if self.arch == "logreg":
            return [("W", (m, C)), ("b", (C,))]
        if self.arch == "mlp":
            return [("W0", (m, h)), ("b0", (h,)), ("W1", (h, C)), ("b1", (C,))]
        return [("W0", (m, h)), ("W1", (h, C))]

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes)

    def weight_mask(self) -> np.ndarray:
        """True on weight-matrix coordinates, False on biases."""
        return np.concatenate([np.full(math.prod(s), name.startswith("W")) for name, s in self.shapes])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class LossBreakdown:
    origin: float
    lf: float
    total: float


@dataclass(frozen=True)
class TrainOptions:
    learning_rate: float = 0.5
    epochs: int = 200
    tolerance: float = 1e-6


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, last_finite_loss: float):
        super().__init__(f"training diverged at epoch {epoch}; last finite loss {last_finite_loss:.6g}")
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


def unpack(spec: ModelSpec, theta) -> list[np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.param_count,):
        raise ValueError(f"expected {spec.param_count} parameters, got shape {theta.shape}")
    out, i = [], 0
    for _, shape in spec.shapes:
        size = math.prod(shape)
        out.append(theta[i:i + size].reshape(shape))
        i += size
    return out


def init_params(spec: ModelSpec) -> np.ndarray:
    """Uniform(+-0.1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(spec.seed)
    parts = []
    for name, shape in spec.shapes:
        if name.startswith("W"):
            bound = 0.1 / math.sqrt(shape[0])
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
        else:
            parts.append(np.zeros(shape))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# forward / backward


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _check_inputs(spec: ModelSpec, X: np.ndarray, A) -> None:
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"features must be n x {spec.input_dim}, got {X.shape}")
    if (spec.arch == "gcn") != (A is not None):
        raise ValueError("normalized_adjacency is required for gcn and only for gcn")
    if A is not None and A.shape != (X.shape[0], X.shape[0]):
        raise ValueError(f"adjacency must be {X.shape[0]}x{X.shape[0]}, got {A.shape}")


def _forward(spec: ModelSpec, params, X, A):
    """Return (logits, cache) with everything the backward pass needs."""
    if spec.arch == "logreg":
        W, b = params
        return X @ W + b, {"X": X}
    if spec.arch == "mlp":
        W0, b0, W1, b1 = params
        Z1 = X @ W0 + b0
        H1 = np.maximum(Z1, 0.0)
        return H1 @ W1 + b1, {"X": X, "Z1": Z1, "H1": H1}
    W0, W1 = params
    AX = A @ X
    Z1 = AX @ W0
    H1 = np.maximum(Z1, 0.0)
    AH = A @ H1
    return AH @ W1, {"AX": AX, "Z1": Z1, "AH": AH, "A": A}


def _backward(spec: ModelSpec, params, cache, dZ: np.ndarray) -> np.ndarray:
    """Gradient of sum(dZ * logits) with respect to the flat parameters."""
    if spec.arch == "logreg":
        X = cache["X"]
        return np.concatenate([(X.T @ dZ).ravel(), dZ.sum(axis=0)])
    if spec.arch == "mlp":
        W0, b0, W1, b1 = params
        X, Z1, H1 = cache["X"], cache["Z1"], cache["H1"]
        dW1 = H1.T @ dZ
        dZ1 = (dZ @ W1.T) * (Z1 > 0)
        return np.concatenate([(X.T @ dZ1).ravel(), dZ1.sum(axis=0), dW1.ravel(), dZ.sum(axis=0)])
    W0, W1 = params
    A, AX, Z1, AH = cache["A"], cache["AX"], cache["Z1"], cache["AH"]
    dW1 = AH.T @ dZ
    dZ1 = (A.T @ (dZ @ W1.T)) * (Z1 > 0)
    return np.concatenate([(AX.T @ dZ1).ravel(), dW1.ravel()])


def _rows(data: Dataset, loss_indices) -> np.ndarray:
    if loss_indices is None:
        return np.arange(data.n)
    rows = np.asarray(loss_indices, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("empty loss index set")
    if rows.min() < 0 or rows.max() >= data.n:
        raise IndexError("loss index out of range")
    return rows


def _prediction_to_logit_grad(P: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return P * (G - np.sum(P * G, axis=1, keepdims=True))


def _ce_logit_grad(P: np.ndarray, labels: np.ndarray, rows: np.ndarray, weight: float) -> np.ndarray:
    D = np.zeros_like(P)
    D[rows] = P[rows]
    D[rows, labels[rows]] -= 1.0
    return D * weight


def forward(spec: ModelSpec, theta, features, normalized_adjacency=None) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    _check_inputs(spec, X, normalized_adjacency)
    logits, _ = _forward(spec, unpack(spec, theta), X, normalized_adjacency)
    return _softmax(logits)


def predict_proba(spec: ModelSpec, theta, data: Dataset) -> np.ndarray:
    X, _, A = arrays(data)
    return forward(spec, theta, X, A)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray, rows: np.ndarray) -> float:
    Z = logits[rows]
    Z = Z - Z.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(rows.size), labels[rows]]))


def _ridge(spec: ModelSpec, theta: np.ndarray) -> float:
    return 0.5 * spec.l2_reg * float(theta @ theta)


def loss(spec: ModelSpec, theta, data: Dataset, loss_indices=None) -> float:
    """Mean cross-entropy over ``loss_indices`` plus the ridge term."""
    theta = np.asarray(theta, dtype=np.float64)
    rows = _rows(data, loss_indices)
    X, y, A = arrays(data)
    _check_inputs(spec, X, A)
    logits, _ = _forward(spec, unpack(spec, theta), X, A)
    return _cross_entropy(logits, y, rows) + _ridge(spec, theta)


def loss_and_grad(spec: ModelSpec, theta, data: Dataset, loss_indices=None) -> tuple[float, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    rows = _rows(data, loss_indices)
    X, y, A = arrays(data)
    _check_inputs(spec, X, A)
    params = unpack(spec, theta)
    logits, cache = _forward(spec, params, X, A)
    dZ = _ce_logit_grad(_softmax(logits), y, rows, 1.0 / rows.size)
    value = _cross_entropy(logits, y, rows) + _ridge(spec, theta)
    return value, _backward(spec, params, cache, dZ) + spec.l2_reg * theta


def grad(spec: ModelSpec, theta, data: Dataset, loss_indices=None) -> np.ndarray:
    return loss_and_grad(spec, theta, data, loss_indices)[1]


def _fd_step(theta: np.ndarray, v: np.ndarray) -> float:
    return 1e-4 * (1.0 + np.linalg.norm(theta)) / max(np.linalg.norm(v), 1e-12)


def fd_hvp(grad_fn, theta, v) -> np.ndarray:
    """Central difference of a gradient function along ``v``."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros_like(v)
    h = _fd_step(theta, v)
    return (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h)


def _forward_r(spec: ModelSpec, params, vparams, cache) -> tuple[np.ndarray, dict]:
    """Directional derivative of the logits along ``vparams`` (R-operator)."""
    if spec.arch == "logreg":
        Vw, vb = vparams
        return cache["X"] @ Vw + vb, {}
    if spec.arch == "mlp":
        _, _, W1, _ = params
        V0, vb0, V1, vb1 = vparams
        RH1 = (cache["X"] @ V0 + vb0) * (cache["Z1"] > 0)
        return RH1 @ W1 + cache["H1"] @ V1 + vb1, {"RH1": RH1}
    _, W1 = params
    V0, V1 = vparams
    RAH = cache["A"] @ ((cache["AX"] @ V0) * (cache["Z1"] > 0))
    return RAH @ W1 + cache["AH"] @ V1, {"RAH": RAH}


def _backward_r(spec: ModelSpec, params, vparams, cache, rcache, dZ, RdZ) -> np.ndarray:
    """Directional derivative of :func:`_backward` given ``R{dZ}``.

    ReLU masks are piecewise constant, so they carry no R term.
    """
    out = _backward(spec, params, cache, RdZ)
    if spec.arch == "logreg":
        return out
    if spec.arch == "mlp":
        V1 = vparams[2]
        X, Z1 = cache["X"], cache["Z1"]
        dZ1 = (dZ @ V1.T) * (Z1 > 0)
        return out + np.concatenate([(X.T @ dZ1).ravel(), dZ1.sum(axis=0),
                                     (rcache["RH1"].T @ dZ).ravel(), np.zeros(dZ.shape[1])])
    V1 = vparams[1]
    A, AX, Z1 = cache["A"], cache["AX"], cache["Z1"]
    dZ1 = (A.T @ (dZ @ V1.T)) * (Z1 > 0)
    return out + np.concatenate([(AX.T @ dZ1).ravel(), (rcache["RAH"].T @ dZ).ravel()])


def _analytic_hvp(spec: ModelSpec, theta: np.ndarray, data: Dataset, rows: np.ndarray, v: np.ndarray,
                  lam: float = 0.0, lf_term: DistributionalLoss | None = None) -> np.ndarray:
    """Exact (almost everywhere) Hessian-vector product by forward-over-reverse.

    Covers the cross-entropy plus ridge objective and, when ``lf_term`` has a
    gradient linear in the predictions, ``lam`` times L_F.
    """
    X, y, A = arrays(data)
    _check_inputs(spec, X, A)
    params, vparams = unpack(spec, theta), unpack(spec, v)
    logits, cache = _forward(spec, params, X, A)
    P = _softmax(logits)
    RZ, rcache = _forward_r(spec, params, vparams, cache)
    RP = _prediction_to_logit_grad(P, RZ)
    dZ = _ce_logit_grad(P, y, rows, 1.0 / rows.size)
    RdZ = np.zeros_like(P)
    RdZ[rows] = RP[rows] / rows.size
    if lam != 0.0 and lf_term is not None and lf_term.config.alpha != 0.0:
        G, RG = lf_term.grad(P), lf_term.grad(RP)
        s = np.sum(P * G, axis=1, keepdims=True)
        Rs = np.sum(RP * G + P * RG, axis=1, keepdims=True)
        dZ = dZ + lam * P * (G - s)
        RdZ = RdZ + lam * (RP * (G - s) + P * (RG - Rs))
    return _backward_r(spec, params, vparams, cache, rcache, dZ, RdZ) + spec.l2_reg * v


def hvp(spec: ModelSpec, theta, data: Dataset, loss_indices, v, method: str = "auto") -> np.ndarray:
    """Hessian-vector product of :func:`loss`.

    ``method="auto"`` is exact forward-over-reverse differentiation; ``"fd"``
    is a central finite difference of :func:`grad`, kept as an independent
    check. On ReLU networks the finite difference picks up activation
    pattern flips and is noticeably less accurate.
    """
    if method not in ("auto", "fd"):
        raise ValueError(f"unknown hvp method {method!r}")
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros(spec.param_count)
    rows = _rows(data, loss_indices)
    theta = np.asarray(theta, dtype=np.float64)
    if method == "auto":
        return _analytic_hvp(spec, theta, data, rows, v)
    return fd_hvp(lambda t: grad(spec, t, data, rows), theta, v)


# ---------------------------------------------------------------------------
# loss + lambda * L_F


def prepare_lf(spec: ModelSpec, data: Dataset, loss_indices, independence,
               include=None) -> DistributionalLoss:
    """Build (or pass through) the L_F term over rows drawn from the loss rows."""
    if isinstance(independence, DistributionalLoss):
        return independence
    if not isinstance(independence, IndependenceConfig):
        raise TypeError("independence must be an IndependenceConfig or a DistributionalLoss")
    rows = _rows(data, loss_indices)
    X, y, _ = arrays(data)
    batch = independence_rows(data.n, independence, include=include, pool=rows)
    return DistributionalLoss(X, y, independence, rows=batch, class_count=spec.class_count)


def combined_loss(spec: ModelSpec, theta, data: Dataset, loss_indices, lam: float,
                  independence) -> LossBreakdown:
    theta = np.asarray(theta, dtype=np.float64)
    rows = _rows(data, loss_indices)
    X, y, A = arrays(data)
    logits, _ = _forward(spec, unpack(spec, theta), X, A)
    origin = _cross_entropy(logits, y, rows) + _ridge(spec, theta)
    lf_term = prepare_lf(spec, data, rows, independence)
    lf = lf_term.value(_softmax(logits))
    return LossBreakdown(origin, lf, origin + lam * lf)


def _combined_grad(spec: ModelSpec, theta: np.ndarray, data: Dataset, rows: np.ndarray, lam: float,
                   lf_term: DistributionalLoss, with_loss: bool):
    X, y, A = arrays(data)
    _check_inputs(spec, X, A)
    params = unpack(spec, theta)
    logits, cache = _forward(spec, params, X, A)
    P = _softmax(logits)
    dZ = _ce_logit_grad(P, y, rows, 1.0 / rows.size)
    if lam != 0.0 and lf_term.config.alpha != 0.0:
        dZ = dZ + lam * _prediction_to_logit_grad(P, lf_term.grad(P))
    g = _backward(spec, params, cache, dZ) + spec.l2_reg * theta
    if not with_loss:
        return g, None
    origin = _cross_entropy(logits, y, rows) + _ridge(spec, theta)
    lf = lf_term.value(P)
    return g, LossBreakdown(origin, lf, origin + lam * lf)


def combined_grad(spec: ModelSpec, theta, data: Dataset, loss_indices, lam: float,
                  independence) -> tuple[np.ndarray, LossBreakdown]:
    """Gradient of ``L_origin + lam * L_F`` and the loss values at ``theta``.

    The prediction-space gradient of L_F is folded into the cross-entropy
    logit gradient so both terms share one backward pass.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    rows = _rows(data, loss_indices)
    lf_term = prepare_lf(spec, data, rows, independence)
    return _combined_grad(spec, np.asarray(theta, dtype=np.float64), data, rows, lam, lf_term, True)


def combined_hvp(spec: ModelSpec, theta, data: Dataset, loss_indices, lam: float,
                 independence, v, method: str = "auto") -> np.ndarray:
    """Hessian-vector product of ``L_origin + lam * L_F``.

    Exact when L_F is quadratic in the predictions (linear prediction kernel
    without frobenius normalisation); otherwise, or with ``method="fd"``, a
    central finite difference of :func:`combined_grad`.
    """
    if method not in ("auto", "fd"):
        raise ValueError(f"unknown hvp method {method!r}")
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return np.zeros(spec.param_count)
    rows = _rows(data, loss_indices)
    lf_term = prepare_lf(spec, data, rows, independence)
    if method == "auto" and (lam == 0.0 or lf_term.is_quadratic):
        return _analytic_hvp(spec, theta, data, rows, v, lam, lf_term)
    return fd_hvp(lambda t: _combined_grad(spec, t, data, rows, lam, lf_term, False)[0], theta, v)


def row_gradient(spec: ModelSpec, theta, data: Dataset, rows, *, ce_weight: float,
                 lam: float = 0.0, lf: DistributionalLoss | None = None,
                 ridge_weight: float = 0.0) -> np.ndarray:
    """Contribution of ``rows`` to the objective gradient.

    Cross-entropy of each listed row weighted by ``ce_weight``, plus
    ``lam`` times the L_F prediction gradient restricted to those rows, plus
    ``ridge_weight * l2_reg * theta``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    X, y, A = arrays(data)
    params = unpack(spec, theta)
    logits, cache = _forward(spec, params, X, A)
    P = _softmax(logits)
    dZ = _ce_logit_grad(P, y, rows, ce_weight)
    if lam != 0.0 and lf is not None and lf.config.alpha != 0.0:
        G = lf.grad(P)
        mask = np.zeros(data.n, dtype=bool)
        mask[rows] = True
        G[~mask] = 0.0
        dZ = dZ + lam * _prediction_to_logit_grad(P, G)
    return _backward(spec, params, cache, dZ) + ridge_weight * spec.l2_reg * theta


# ---------------------------------------------------------------------------
# training


def train(spec: ModelSpec, data: Dataset, train_indices=None,
          opt: TrainOptions = TrainOptions()) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent from the seeded initialisation.

    Returns ``(theta, runtime_seconds)``.
    """
    if opt.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if isinstance(data, GraphDataset) != (spec.arch == "gcn"):
        raise ValueError("gcn needs a GraphDataset and other archs a DatasetTable")
    rows = _rows(data, train_indices)
    start = time.perf_counter()
    theta = init_params(spec)
    last = math.inf
    for epoch in range(opt.epochs):
        value, g = loss_and_grad(spec, theta, data, rows)
        if not (math.isfinite(value) and np.all(np.isfinite(g))):
            raise TrainingDivergedError(epoch, last)
        last = value
        if np.linalg.norm(g) < opt.tolerance:
            break
        theta = theta - opt.learning_rate * g
    return theta, time.perf_counter() - start


# ---------------------------------------------------------------------------
# persistence: b"DUIP" | sha256(spec) | uint64 count | float64 LE values

_MAGIC = b"DUIP"


def params_to_bytes(spec: ModelSpec, theta) -> bytes:
    theta = np.asarray(theta, dtype="<f8")
    return _MAGIC + bytes.fromhex(spec.digest()) + struct.pack("<Q", theta.size) + theta.tobytes()


def params_from_bytes(spec: ModelSpec, buf: bytes) -> np.ndarray:
    if buf[:4] != _MAGIC:
        raise ValueError("not a parameter file (bad magic)")
    if buf[4:36] != bytes.fromhex(spec.digest()):
        raise ValueError("parameter file was written for a different model spec")
    (count,) = struct.unpack("<Q", buf[36:44])
    if count != spec.param_count or len(buf) != 44 + 8 * count:
        raise ValueError("parameter file length does not match the model spec")
    return np.frombuffer(buf, dtype="<f8", offset=44).astype(np.float64)


def save_params(path, spec: ModelSpec, theta) -> None:
    Path(path).write_bytes(params_to_bytes(spec, theta))


def load_params(path, spec: ModelSpec) -> np.ndarray:
    return params_from_bytes(spec, Path(path).read_bytes())
