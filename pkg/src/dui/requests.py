"""Unlearning requests: which points or feature cells to forget, and applying them."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .datasets import Dataset

log = logging.getLogger(__name__)

Mode = Literal["points", "feature_values"]
Strategy = Literal["random", "top_k"]
Replacement = Literal["zero", "feature_mean"]


class EmptyRetainedSetError(ValueError):
    pass


def _floor(x: float) -> int:
    # guards against 0.1 * 30 == 3.0000000000000004 style products
    return math.floor(x + 1e-9)


@dataclass(frozen=True, eq=False)
class UnlearnRequest:
    mode: Mode
    strategy: Strategy
    unlearn_ratio: float
    point_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    cells: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=np.int64))
    feature_ratio: float = 1.0
    replacement: Replacement = "zero"
    seed: int | None = None
    dataset_digest: str = ""

    def __post_init__(self):
        if self.mode not in ("points", "feature_values"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.strategy not in ("random", "top_k"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.replacement not in ("zero", "feature_mean"):
            raise ValueError(f"unknown replacement {self.replacement!r}")
        if not 0.0 <= self.unlearn_ratio < 1.0:
            raise ValueError("unlearn_ratio must lie in [0, 1)")
        if not 0.0 < self.feature_ratio <= 1.0:
            raise ValueError("feature_ratio must lie in (0, 1]")
        pts = np.unique(np.asarray(self.point_indices, dtype=np.int64))
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
        cells = np.unique(cells, axis=0) if cells.size else cells
        object.__setattr__(self, "point_indices", pts)
        object.__setattr__(self, "cells", cells)

    @property
    def is_empty(self) -> bool:
        return self.point_indices.size == 0 and self.cells.shape[0] == 0

    @property
    def rows(self) -> np.ndarray:
        """Rows touched by the request, sorted."""
        if self.mode == "points":
            return self.point_indices
        return np.unique(self.cells[:, 0])

    def to_text(self) -> str:
        lines = [
            "unlearn-request v1",
            f"mode {self.mode}",
            f"strategy {self.strategy}",
            f"unlearn_ratio {self.unlearn_ratio!r}",
            f"feature_ratio {self.feature_ratio!r}",
            f"replacement {self.replacement}",
            f"seed {'-' if self.seed is None else self.seed}",
            f"dataset {self.dataset_digest or '-'}",
        ]
        if self.mode == "points":
            lines.append(f"points {self.point_indices.size}")
            lines += [str(i) for i in self.point_indices]
        else:
            lines.append(f"cells {self.cells.shape[0]}")
            lines += [f"{r} {c}" for r, c in self.cells]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "UnlearnRequest":
        lines = text.splitlines()
        if not lines or lines[0] != "unlearn-request v1":
            raise ValueError("not an unlearn request (missing header)")
        head = dict(line.split(" ", 1) for line in lines[1:8])
        kind, count = lines[8].split()
        body = lines[9:9 + int(count)]
        if len(body) != int(count):
            raise ValueError("truncated unlearn request")
        kw = dict(
            mode=head["mode"], strategy=head["strategy"],
            unlearn_ratio=float(head["unlearn_ratio"]), feature_ratio=float(head["feature_ratio"]),
            replacement=head["replacement"],
            seed=None if head["seed"] == "-" else int(head["seed"]),
            dataset_digest="" if head["dataset"] == "-" else head["dataset"],
        )
        if kind == "points":
            kw["point_indices"] = np.array([int(s) for s in body], dtype=np.int64)
        else:
            kw["cells"] = np.array([[int(t) for t in s.split()] for s in body], dtype=np.int64).reshape(-1, 2)
        return cls(**kw)


def _candidates(data: Dataset, candidates) -> np.ndarray:
    return np.arange(data.n) if candidates is None else np.sort(np.asarray(candidates, dtype=np.int64))


def _warn_empty(req: UnlearnRequest) -> UnlearnRequest:
    if req.is_empty:
        log.warning("unlearn request selects nothing (ratio %s)", req.unlearn_ratio)
    return req


def random_request(data: Dataset, unlearn_ratio: float, mode: Mode = "points", seed: int = 0,
                   feature_ratio: float = 1.0, replacement: Replacement = "zero",
                   candidates=None) -> UnlearnRequest:
    """Uniformly sampled points, or cells within uniformly sampled features.

    ``candidates`` restricts the eligible rows (e.g. the training nodes of a
    transductive graph split); ratios are taken relative to its size.
    """
    pool = _candidates(data, candidates)
    rng = np.random.default_rng(seed)
    k = _floor(pool.size * unlearn_ratio)
    common = dict(mode=mode, strategy="random", unlearn_ratio=unlearn_ratio, feature_ratio=feature_ratio,
                  replacement=replacement, seed=seed, dataset_digest=data.digest())
    if mode == "points":
        return _warn_empty(UnlearnRequest(point_indices=rng.choice(pool, size=k, replace=False), **common))
    n_feat = _floor(data.m * feature_ratio)
    feats = np.sort(rng.choice(data.m, size=n_feat, replace=False))
    cells = [np.column_stack([rng.choice(pool, size=k, replace=False), np.full(k, j)]) for j in feats]
    cells = np.concatenate(cells) if cells else np.empty((0, 2), dtype=np.int64)
    return _warn_empty(UnlearnRequest(cells=cells, **common))


def _top(values: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest values; ties go to the lower position."""
    order = np.lexsort((np.arange(values.size), -values))
    return order[:k]


def topk_request(data: Dataset, unlearn_ratio: float, feature_ratio: float = 1.0,
                 mode: Mode = "feature_values", replacement: Replacement = "zero",
                 candidates=None) -> UnlearnRequest:
    """Deterministic top-k selection.

    Features are ranked by column sum and the top ``floor(m * feature_ratio)``
    kept. In ``feature_values`` mode each kept feature contributes its
    ``k = floor(n * unlearn_ratio)`` largest cells. In ``points`` mode the k
    rows with the largest sum over the kept features are removed.
    """
    pool = _candidates(data, candidates)
    X = data.features[pool]
    k = _floor(pool.size * unlearn_ratio)
    n_feat = _floor(data.m * feature_ratio)
    feats = np.sort(_top(X.sum(axis=0), n_feat))
    common = dict(mode=mode, strategy="top_k", unlearn_ratio=unlearn_ratio, feature_ratio=feature_ratio,
                  replacement=replacement, seed=None, dataset_digest=data.digest())
    if mode == "points":
        score = X[:, feats].sum(axis=1) if feats.size else np.zeros(pool.size)
        return _warn_empty(UnlearnRequest(point_indices=pool[_top(score, k)], **common))
    cells = [np.column_stack([pool[_top(X[:, j], k)], np.full(k, j)]) for j in feats]
    cells = np.concatenate(cells) if cells else np.empty((0, 2), dtype=np.int64)
    return _warn_empty(UnlearnRequest(cells=cells, **common))


@dataclass(frozen=True, eq=False)
class AppliedRequest:
    request: UnlearnRequest
    source: Dataset
    retained: Dataset
    delta_rows: np.ndarray
    # feature_values mode: touched rows before/after replacement
    original_rows: np.ndarray
    perturbed_rows: np.ndarray
    # for each retained row, its index in ``source``
    kept_rows: np.ndarray

    @property
    def mode(self) -> Mode:
        return self.request.mode

    def remap(self, indices) -> np.ndarray:
        """Positions in ``retained`` of those source ``indices`` that survive."""
        indices = np.asarray(indices, dtype=np.int64)
        pos = np.full(self.source.n, -1, dtype=np.int64)
        pos[self.kept_rows] = np.arange(self.kept_rows.size)
        out = pos[indices]
        return out[out >= 0]


def apply(data: Dataset, request: UnlearnRequest) -> AppliedRequest:
    if request.dataset_digest and request.dataset_digest != data.digest():
        raise ValueError("request was generated for a different dataset")
    n, m = data.n, data.m
    rows = request.rows
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise IndexError("request row index out of range")
    if request.mode == "points":
        if rows.size >= n:
            raise EmptyRetainedSetError("empty retained set")
        kept = np.setdiff1d(np.arange(n), rows)
        retained = data.subset(kept) if rows.size else data
        original = data.features[rows]
        return AppliedRequest(request, data, retained, rows, original, original.copy(), kept)

    cells = request.cells
    if cells.size and (cells[:, 1].min() < 0 or cells[:, 1].max() >= m):
        raise IndexError("request feature index out of range")
    kept = np.arange(n)
    if not cells.size:
        empty = np.empty((0, m))
        return AppliedRequest(request, data, data, rows, empty, empty, kept)
    X = np.array(data.features)
    if request.replacement == "zero":
        X[cells[:, 0], cells[:, 1]] = 0.0
    else:
        X[cells[:, 0], cells[:, 1]] = data.features.mean(axis=0)[cells[:, 1]]
    retained = data.with_features(X)
    return AppliedRequest(request, data, retained, rows, data.features[rows], X[rows], kept)


def label_histogram_shift(data: Dataset, rows) -> float:
    """Total-variation distance between the class histogram of ``rows`` and of all rows."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return 0.0
    C = data.class_count
    full = np.bincount(data.labels, minlength=C) / data.n
    part = np.bincount(data.labels[rows], minlength=C) / rows.size
    return 0.5 * float(np.abs(full - part).sum())

