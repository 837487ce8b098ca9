"""Influence-based unlearning with an optional independence regulariser.

A request changes the training objective; ``influence_gradient`` returns the
resulting change in the objective gradient at the current parameters, and
the update is one damped Newton step ``theta* = theta - (H + delta I)^-1 g``
on the retained data. ``method="influence"`` uses the plain loss, ``"dui"``
the loss plus ``lam * L_F`` in both ``g`` and ``H``.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
import scipy.linalg

from . import models
from .datasets import Dataset, GraphDataset
from .independence import DistributionalLoss, IndependenceConfig
from .models import ModelSpec, TrainOptions
from .requests import AppliedRequest

log = logging.getLogger(__name__)

Method = Literal["retrain", "influence", "dui"]
HVP = Callable[[np.ndarray], np.ndarray]


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class UnlearnConfig:
    method: Method = "dui"
    lam: float = 1.0
    solver: Literal["direct", "lissa"] = "lissa"
    lissa_iterations: int = 100
    lissa_scale: float = 0.1
    damping: float = 0.01
    lissa_repeats: int = 1
    # power-iteration steps used to check lissa_scale; 0 disables the probe
    spectral_probe: int = 0
    independence: IndependenceConfig = field(default_factory=IndependenceConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    direct_max_params: int = 2000

    def __post_init__(self):
        if self.method not in ("retrain", "influence", "dui"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.solver not in ("direct", "lissa"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.lam < 0 or self.damping < 0:
            raise ValueError("lam and damping must be >= 0")
        if self.lissa_iterations < 1 or self.lissa_repeats < 1:
            raise ValueError("lissa_iterations and lissa_repeats must be >= 1")
        if not self.lissa_scale > 0:
            raise ValueError("lissa_scale must be > 0")


@dataclass(frozen=True, eq=False)
class SolveResult:
    x: np.ndarray
    residual: float
    condition: float | None = None


@dataclass(frozen=True, eq=False)
class UnlearnResult:
    theta: np.ndarray
    runtime_seconds: float
    diagnostics: dict


# ---------------------------------------------------------------------------
# gradient assembly


def _loss_rows(data: Dataset, loss_indices) -> np.ndarray:
    return np.arange(data.n) if loss_indices is None else np.sort(np.asarray(loss_indices, dtype=np.int64))


def _receptive_rows(data: Dataset, rows: np.ndarray, hops: int = 2) -> np.ndarray:
    """Rows whose GCN output depends on features of ``rows``."""
    if not isinstance(data, GraphDataset):
        return rows
    mask = np.zeros(data.n, dtype=bool)
    mask[rows] = True
    reach = (data.adjacency + data.adjacency.T).tocsr()
    for _ in range(hops):
        mask = mask | (reach @ mask.astype(np.float64) > 0)
    return np.flatnonzero(mask)


def _lf(spec, data, loss_rows, independence, include=None, rows=None) -> DistributionalLoss | None:
    if independence is None:
        return None
    if rows is not None:
        return DistributionalLoss(data.features, data.labels, independence, rows=rows,
                                  class_count=spec.class_count)
    return models.prepare_lf(spec, data, loss_rows, independence, include=include)


def influence_gradient(spec: ModelSpec, theta, applied: AppliedRequest, lam: float = 0.0,
                       independence: IndependenceConfig | None = None, loss_indices=None) -> np.ndarray:
    """Change in the objective gradient caused by the request, at ``theta``.

    Points: ``-(1/n_kept) * sum_z grad[l(z) + l2/2 ||theta||^2]`` over removed
    loss rows, i.e. the gradient of the retained objective when ``theta`` is
    optimal for the full one. On graphs the surviving rows' change through
    the altered neighbourhoods is added, so the result is again exactly that
    gradient. Feature values: ``(1/n) * sum_z [grad l(z~) -
    grad l(z)]`` over touched rows. With ``lam > 0`` every per-row term also
    carries ``lam`` times that row's share of the L_F gradient.
    """
    theta = np.asarray(theta, dtype=np.float64)
    source = applied.source
    loss_rows = _loss_rows(source, loss_indices)
    use_lf = lam != 0.0 and independence is not None and independence.alpha != 0.0
    if applied.mode == "points":
        removed = np.intersect1d(applied.delta_rows, loss_rows)
        if removed.size == 0:
            log.warning("empty unlearning request; influence gradient is zero")
            return np.zeros_like(theta)
        n_kept = loss_rows.size - removed.size
        lf = _lf(spec, source, loss_rows, independence, include=removed) if use_lf else None
        g = -models.row_gradient(spec, theta, source, removed, ce_weight=1.0 / n_kept, lam=lam,
                                 lf=lf, ridge_weight=removed.size / n_kept)
        if isinstance(source, GraphDataset):
            # removing nodes also changes the aggregated inputs of surviving nodes
            kept = np.setdiff1d(loss_rows, removed)
            g += (models.row_gradient(spec, theta, applied.retained, applied.remap(kept), ce_weight=1.0 / n_kept)
                  - models.row_gradient(spec, theta, source, kept, ce_weight=1.0 / n_kept))
        return g

    touched = np.intersect1d(_receptive_rows(source, applied.delta_rows), loss_rows)
    if touched.size == 0:
        log.warning("empty unlearning request; influence gradient is zero")
        return np.zeros_like(theta)
    w = 1.0 / loss_rows.size
    lf_orig = lf_pert = None
    if use_lf:
        lf_orig = _lf(spec, source, loss_rows, independence, include=applied.delta_rows)
        lf_pert = _lf(spec, applied.retained, loss_rows, independence, rows=lf_orig.rows)
    after = models.row_gradient(spec, theta, applied.retained, touched, ce_weight=w, lam=lam, lf=lf_pert)
    before = models.row_gradient(spec, theta, source, touched, ce_weight=w, lam=lam, lf=lf_orig)
    return after - before


# ---------------------------------------------------------------------------
# Hessian operators and inverse-HVP solvers


def hessian_operator(spec: ModelSpec, theta, data: Dataset, loss_indices=None, lam: float = 0.0,
                     independence: IndependenceConfig | None = None) -> HVP:
    """``v -> H v`` for the loss (``lam == 0``) or the loss plus ``lam * L_F``."""
    theta = np.asarray(theta, dtype=np.float64)
    rows = _loss_rows(data, loss_indices)
    if lam == 0.0 or independence is None:
        return lambda v: models.hvp(spec, theta, data, rows, v)
    lf = models.prepare_lf(spec, data, rows, independence)
    return lambda v: models.combined_hvp(spec, theta, data, rows, lam, lf, v)


def _relative_residual(hvp: HVP, x: np.ndarray, v: np.ndarray, damping: float) -> float:
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    return float(np.linalg.norm(hvp(x) + damping * x - v) / nv)


def assemble_hessian(hvp: HVP, dim: int) -> np.ndarray:
    H = np.empty((dim, dim))
    e = np.zeros(dim)
    for i in range(dim):
        e[i] = 1.0
        H[:, i] = hvp(e)
        e[i] = 0.0
    return 0.5 * (H + H.T)


def solve_direct(hvp: HVP, v, damping: float = 0.01, max_dim: int = 2000) -> SolveResult:
    """Dense Cholesky solve of ``(H + damping I) x = v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.size > max_dim:
        raise SolverError(f"direct solver limited to {max_dim} parameters, got {v.size}; use lissa")
    if not np.any(v):
        return SolveResult(np.zeros_like(v), 0.0, None)
    H = assemble_hessian(hvp, v.size) + damping * np.eye(v.size)
    try:
        factor = scipy.linalg.cho_factor(H)
    except np.linalg.LinAlgError:
        raise SolverError(
            f"damped Hessian is not positive definite (damping={damping}); increase damping") from None
    x = scipy.linalg.cho_solve(factor, v)
    diag = np.abs(np.diag(factor[0]))
    condition = float((diag.max() / diag.min()) ** 2)
    return SolveResult(x, _relative_residual(hvp, x, v, damping), condition)


def spectral_radius(hvp: HVP, dim: int, damping: float = 0.0, iterations: int = 20, seed: int = 0) -> float:
    """Power-iteration estimate of the largest |eigenvalue| of ``H + damping I``."""
    x = np.random.default_rng(seed).normal(size=dim)
    x /= np.linalg.norm(x)
    rho = 0.0
    for _ in range(iterations):
        y = hvp(x) + damping * x
        rho = float(np.linalg.norm(y))
        if rho == 0.0:
            return 0.0
        x = y / rho
    return rho


def lissa(hvp: HVP, v, iterations: int = 100, scale: float = 0.1, damping: float = 0.01,
          repeats: int = 1, probe: int = 0) -> SolveResult:
    """Truncated Neumann series for ``(H + damping I)^-1 v``.

    ``est_0 = v``, ``est_j = v + (I - scale (H + damping I)) est_{j-1}``; the
    series converges to ``(scale (H + damping I))^-1 v`` so the last estimate
    is multiplied by ``scale``. ``iterations`` counts series terms: one
    iteration returns ``scale * v``. Needs ``scale * ||H + damping I|| < 1``.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.any(v):
        return SolveResult(np.zeros_like(v), 0.0)
    if probe:
        rho = spectral_radius(hvp, v.size, damping, probe)
        if scale * rho >= 1.0:
            warnings.warn(f"lissa scale {scale} times spectral radius {rho:.4g} >= 1; "
                          "the recursion may not converge", RuntimeWarning, stacklevel=2)
    total = np.zeros_like(v)
    for _ in range(repeats):
        est = v.copy()
        prev_norm = np.linalg.norm(est)
        growth = 0
        for _ in range(iterations - 1):
            est = v + est - scale * (hvp(est) + damping * est)
            norm = np.linalg.norm(est)
            if not np.isfinite(norm):
                raise SolverError("lissa iterate became non-finite; scale (beta) too large")
            growth = growth + 1 if norm > 2.0 * prev_norm else 0
            if growth >= 3:
                raise SolverError("lissa iterate norm doubled 3 steps in a row; scale (beta) too large")
            prev_norm = norm
        total += est
    x = scale * total / repeats
    return SolveResult(x, _relative_residual(hvp, x, v, damping))


def inverse_hvp_direct(spec: ModelSpec, theta, data: Dataset, v, lam: float = 0.0,
                       independence: IndependenceConfig | None = None, damping: float = 0.01,
                       loss_indices=None) -> SolveResult:
    op = hessian_operator(spec, theta, data, loss_indices, lam, independence)
    return solve_direct(op, v, damping)


def inverse_hvp_lissa(spec: ModelSpec, theta, data: Dataset, v, lam: float = 0.0,
                      independence: IndependenceConfig | None = None, iterations: int = 100,
                      scale: float = 0.1, damping: float = 0.01, repeats: int = 1,
                      loss_indices=None, probe: int = 0) -> SolveResult:
    op = hessian_operator(spec, theta, data, loss_indices, lam, independence)
    return lissa(op, v, iterations, scale, damping, repeats, probe)


def _solve(op: HVP, v: np.ndarray, config: UnlearnConfig) -> SolveResult:
    if config.solver == "direct":
        return solve_direct(op, v, config.damping, config.direct_max_params)
    return lissa(op, v, config.lissa_iterations, config.lissa_scale, config.damping,
                 config.lissa_repeats, config.spectral_probe)


# ---------------------------------------------------------------------------
# entry points


def retained_loss_indices(applied: AppliedRequest, loss_indices=None):
    if loss_indices is None:
        return None
    return applied.remap(loss_indices)


def unlearn(spec: ModelSpec, theta, data: Dataset, applied: AppliedRequest, config: UnlearnConfig,
            loss_indices=None) -> UnlearnResult:
    """Produce parameters for the retained data by ``config.method``.

    ``data`` is the dataset ``theta`` was trained on (``applied.source``);
    ``loss_indices`` are its supervised rows (``None`` for all).
    """
    if applied.source is not data:
        raise ValueError("applied request does not belong to this dataset")
    theta = np.asarray(theta, dtype=np.float64)
    kept_loss = retained_loss_indices(applied, loss_indices)
    diagnostics: dict = {"method": config.method}
    start = time.perf_counter()
    if config.method == "retrain":
        theta_star, _ = models.train(spec, applied.retained, kept_loss, config.train)
    else:
        lam = config.lam if config.method == "dui" else 0.0
        indep = config.independence if config.method == "dui" else None
        g = influence_gradient(spec, theta, applied, lam, indep, loss_indices)
        diagnostics["influence_grad_norm"] = float(np.linalg.norm(g))
        if np.any(g):
            op = hessian_operator(spec, theta, applied.retained, kept_loss, lam, indep)
            sol = _solve(op, g, config)
            theta_star = theta - sol.x
            if config.solver == "lissa":
                diagnostics["lissa_residual"] = sol.residual
            else:
                diagnostics["direct_residual"] = sol.residual
                diagnostics["condition_estimate"] = sol.condition
        else:
            theta_star = theta.copy()
            if config.solver == "lissa":
                diagnostics["lissa_residual"] = 0.0
    runtime = time.perf_counter() - start
    if not np.all(np.isfinite(theta_star)):
        raise SolverError("unlearned parameters are not finite")

    before = models.loss(spec, theta, applied.retained, kept_loss)
    after = models.loss(spec, theta_star, applied.retained, kept_loss)
    diagnostics["retained_loss_before"] = before
    diagnostics["retained_loss_after"] = after
    if config.method == "dui":
        lf = models.prepare_lf(spec, applied.retained, kept_loss, config.independence)
        b = models.combined_loss(spec, theta, applied.retained, kept_loss, config.lam, lf)
        a = models.combined_loss(spec, theta_star, applied.retained, kept_loss, config.lam, lf)
        diagnostics["loss_breakdown_before"] = {"origin": b.origin, "lf": b.lf, "total": b.total}
        diagnostics["loss_breakdown_after"] = {"origin": a.origin, "lf": a.lf, "total": a.total}
    return UnlearnResult(theta_star, max(runtime, 1e-12), diagnostics)


def lf_row_gradients(spec: ModelSpec, theta, data: Dataset, rows, lf: DistributionalLoss) -> np.ndarray:
    """Per-row L_F parameter gradients, one row per entry of ``rows``."""
    return np.stack([models.row_gradient(spec, theta, data, [r], ce_weight=0.0, lam=1.0, lf=lf)
                     for r in np.asarray(rows, dtype=np.int64)])


def i_up_params(spec: ModelSpec, theta, z_row: int, data: Dataset, independence: IndependenceConfig,
                damping: float = 0.01, loss_indices=None, lf: DistributionalLoss | None = None,
                solver: Literal["direct", "lissa"] = "direct", **lissa_kw) -> np.ndarray:
    """Distributional influence of upweighting one row: ``-(H + delta I)^-1 grad L_F(z)``.

    Diagnostic only; the unlearning update does not call it.
    """
    rows = _loss_rows(data, loss_indices)
    if lf is None:
        lf = models.prepare_lf(spec, data, rows, independence)
    g = lf_row_gradients(spec, theta, data, [z_row], lf)[0]
    op = hessian_operator(spec, theta, data, rows)
    if solver == "direct":
        return -solve_direct(op, g, damping).x
    return -lissa(op, g, damping=damping, **lissa_kw).x
