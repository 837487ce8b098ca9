"""Dataset ingestion: IDX images, Planetoid citation graphs, CSV tables.

Everything is normalised to a :class:`DatasetTable` (float64 features, int64
labels). Graphs wrap a table together with a symmetric sparse adjacency.
"""
from __future__ import annotations

import csv
import gzip
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    """Raised when an input file does not match its expected layout."""


@dataclass(frozen=True, eq=False)
class DatasetTable:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_names: tuple[str, ...] | None = None
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"labels must have length {X.shape[0]}, got shape {y.shape}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if y.min() < 0 or y.max() >= self.class_count:
            raise ValueError("labels must lie in [0, class_count)")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        if self.feature_names is not None and len(self.feature_names) != X.shape[1]:
            raise ValueError("feature_names length must equal the feature count")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @property
    def table(self) -> "DatasetTable":
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.features.shape, dtype="<i8").tobytes())
        h.update(self.features.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(str(self.class_count).encode())
        return h.hexdigest()

    def subset(self, rows) -> "DatasetTable":
        rows = np.asarray(rows, dtype=np.int64)
        return DatasetTable(self.features[rows], self.labels[rows], self.class_count,
                            self.feature_names, self.label_names)

    def with_features(self, features: np.ndarray) -> "DatasetTable":
        return DatasetTable(features, self.labels, self.class_count,
                            self.feature_names, self.label_names)


def normalize_adjacency(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """Symmetric GCN normalisation D^-1/2 (A + I) D^-1/2 of a 0/1 adjacency."""
    n = adjacency.shape[0]
    a_hat = sp.csr_matrix(adjacency, dtype=np.float64) + sp.identity(n, format="csr")
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    return sp.csr_matrix(d_inv_sqrt @ a_hat @ d_inv_sqrt)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    table: DatasetTable
    adjacency: sp.csr_matrix
    dropped_edges: int = 0

    def __post_init__(self):
        a = sp.csr_matrix(self.adjacency, dtype=np.float64)
        n = self.table.n
        if a.shape != (n, n):
            raise ValueError(f"adjacency must be {n}x{n}, got {a.shape}")
        if (a - a.T).count_nonzero():
            raise ValueError("adjacency must be symmetric")
        if a.diagonal().any():
            raise ValueError("adjacency must have a zero diagonal")
        a.eliminate_zeros()
        object.__setattr__(self, "adjacency", a)

    @cached_property
    def normalized_adjacency(self) -> sp.csr_matrix:
        return normalize_adjacency(self.adjacency)

    @property
    def features(self) -> np.ndarray:
        return self.table.features

    @property
    def labels(self) -> np.ndarray:
        return self.table.labels

    @property
    def class_count(self) -> int:
        return self.table.class_count

    @property
    def n(self) -> int:
        return self.table.n

    @property
    def m(self) -> int:
        return self.table.m

    def digest(self) -> str:
        h = hashlib.sha256(self.table.digest().encode())
        coo = sp.triu(self.adjacency).tocoo()
        order = np.lexsort((coo.col, coo.row))
        h.update(coo.row[order].astype("<i8").tobytes())
        h.update(coo.col[order].astype("<i8").tobytes())
        return h.hexdigest()

    def subset(self, rows) -> "GraphDataset":
        """Induced subgraph on ``rows``; edges to dropped nodes disappear."""
        rows = np.asarray(rows, dtype=np.int64)
        return GraphDataset(self.table.subset(rows), self.adjacency[rows][:, rows])

    def with_features(self, features: np.ndarray) -> "GraphDataset":
        return GraphDataset(self.table.with_features(features), self.adjacency, self.dropped_edges)


Dataset = DatasetTable | GraphDataset


def concat_tables(tables: Sequence[DatasetTable]) -> DatasetTable:
    if not tables:
        raise ValueError("nothing to concatenate")
    first = tables[0]
    for t in tables[1:]:
        if t.m != first.m:
            raise ValueError("feature counts differ between tables")
    return DatasetTable(
        np.concatenate([t.features for t in tables]),
        np.concatenate([t.labels for t in tables]),
        max(t.class_count for t in tables),
        first.feature_names,
    )


# ---------------------------------------------------------------------------
# IDX (MNIST) files


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _idx_header(buf: bytes, path, expected_magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < 4:
        raise DatasetFormatError(f"{path}: truncated file, cannot read magic number")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise DatasetFormatError(
            f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(buf) < need:
        raise DatasetFormatError(f"{path}: truncated file, header dimensions incomplete")
    return struct.unpack(f">{ndims}I", buf[4:need])


def read_idx_images(path) -> np.ndarray:
    buf = _read_bytes(path)
    count, rows, cols = _idx_header(buf, path, IDX_IMAGES_MAGIC, 3)
    if count == 0:
        raise DatasetFormatError(f"{path}: empty dataset")
    size = count * rows * cols
    if len(buf) - 16 < size:
        raise DatasetFormatError(
            f"{path}: truncated pixel data, expected {size} bytes, found {len(buf) - 16}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    (count,) = _idx_header(buf, path, IDX_LABELS_MAGIC, 1)
    if count == 0:
        raise DatasetFormatError(f"{path}: empty dataset")
    if len(buf) - 8 < count:
        raise DatasetFormatError(
            f"{path}: truncated label data, expected {count} bytes, found {len(buf) - 8}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path) -> DatasetTable:
    """Load an IDX image/label pair, pixels scaled to [0, 1] and flattened."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"item count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.max() >= 10:
        raise DatasetFormatError(f"{labels_path}: label value {labels.max()} outside [0, 10)")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return DatasetTable(features, labels.astype(np.int64), 10)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels to IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_mnist(directory) -> DatasetTable:
    """Merge the canonical train and t10k IDX pairs found in ``directory``."""
    directory = Path(directory)
    tables = []
    for prefix in ("train", "t10k"):
        imgs = sorted(directory.glob(f"{prefix}-images*idx3-ubyte*"))
        lbls = sorted(directory.glob(f"{prefix}-labels*idx1-ubyte*"))
        if not imgs or not lbls:
            raise FileNotFoundError(f"no {prefix} IDX pair under {directory}")
        tables.append(load_idx(imgs[0], lbls[0]))
    return concat_tables(tables)


# ---------------------------------------------------------------------------
# Planetoid .content / .cites


def load_citation_graph(content_path, cites_path) -> GraphDataset:
    ids: dict[str, int] = {}
    label_ids: dict[str, int] = {}
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(content_path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise DatasetFormatError(f"{content_path}:{lineno}: expected 'id features... label'")
            values = parts[1:-1]
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DatasetFormatError(
                    f"{content_path}:{lineno}: {len(values)} feature values, expected {width}")
            if parts[0] in ids:
                raise DatasetFormatError(f"{content_path}:{lineno}: duplicate node id {parts[0]!r}")
            ids[parts[0]] = len(ids)
            try:
                rows.append([float(v) for v in values])
            except ValueError as exc:
                raise DatasetFormatError(f"{content_path}:{lineno}: {exc}") from None
            labels.append(label_ids.setdefault(parts[-1], len(label_ids)))
    if not ids:
        raise DatasetFormatError(f"{content_path}: empty dataset")

    src, dst = [], []
    dropped = 0
    with open(cites_path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise DatasetFormatError(f"{cites_path}:{lineno}: expected 'cited_id citing_id'")
            a, b = ids.get(parts[0]), ids.get(parts[1])
            if a is None or b is None:
                dropped += 1
                continue
            if a != b:
                src.append(a)
                dst.append(b)
    if dropped:
        log.info("dropped %d citation edges referencing unknown ids", dropped)

    n = len(ids)
    adj = sp.coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).astype(np.float64)
    names = tuple(label_ids)
    table = DatasetTable(np.array(rows, dtype=np.float64).reshape(n, width), np.array(labels),
                         max(len(names), 2), label_names=names)
    return GraphDataset(table, sp.csr_matrix(adj), dropped_edges=dropped)


# ---------------------------------------------------------------------------
# CSV


def load_csv(path) -> DatasetTable:
    """Header row required; the last column is the label."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty dataset") from None
        raw_rows = [r for r in reader if r]
    if not raw_rows:
        raise DatasetFormatError(f"{path}: empty dataset")
    width = len(header)
    feats, raw_labels = [], []
    for lineno, r in enumerate(raw_rows, 2):
        if len(r) != width:
            raise DatasetFormatError(f"{path}:{lineno}: {len(r)} columns, expected {width}")
        try:
            feats.append([float(v) for v in r[:-1]])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        raw_labels.append(r[-1].strip())
    if all(s.isdigit() for s in raw_labels):
        labels = np.array([int(s) for s in raw_labels])
        names = None
        class_count = max(int(labels.max()) + 1, 2)
    else:
        mapping: dict[str, int] = {}
        labels = np.array([mapping.setdefault(s, len(mapping)) for s in raw_labels])
        names = tuple(mapping)
        class_count = max(len(mapping), 2)
    return DatasetTable(np.array(feats), labels, class_count,
                        feature_names=tuple(header[:-1]), label_names=names)


# ---------------------------------------------------------------------------
# Synthetic fixtures


def make_synthetic(n: int = 500, m: int = 10, class_count: int = 2, seed: int = 0,
                   separation: float = 1.0, nonnegative: bool = False) -> DatasetTable:
    """Gaussian class blobs; feature 0 is the most class-informative one.

    Class ``c`` shifts feature 0 by ``separation * c`` and the remaining
    features by smaller random offsets, so top-k selection on feature 0
    removes a class-skewed subset.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, class_count, size=n)
    offsets = rng.normal(scale=0.3 * separation, size=(class_count, m))
    offsets[:, 0] = separation * np.arange(class_count)
    X = rng.normal(size=(n, m)) + offsets[labels]
    if nonnegative:
        X = np.abs(X)
    return DatasetTable(X, labels, class_count)


def make_synthetic_graph(n: int = 60, m: int = 8, class_count: int = 3, seed: int = 0,
                         p_in: float = 0.15, p_out: float = 0.01) -> GraphDataset:
    """Stochastic block model with sparse 0/1 bag-of-words style features."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, class_count, size=n)
    same = labels[:, None] == labels[None, :]
    probs = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < probs, k=1)
    adj = (upper | upper.T).astype(np.float64)
    word_probs = rng.uniform(0.05, 0.3, size=(class_count, m))
    X = (rng.random((n, m)) < word_probs[labels]).astype(np.float64)
    return GraphDataset(DatasetTable(X, labels, class_count), sp.csr_matrix(adj))


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class Split:
    train_indices: np.ndarray
    test_indices: np.ndarray = field(repr=False)


def split_indices(n: int, spec: SplitSpec) -> Split:
    if n < 2:
        raise ValueError("need at least 2 points to split")
    n_train = math.floor(spec.train_fraction * n + 1e-9)
    if n_train < 1 or n_train >= n:
        raise ValueError(f"train_fraction {spec.train_fraction} leaves an empty side for n={n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return Split(np.sort(perm[:n_train]), np.sort(perm[n_train:]))


def split(data: Dataset, spec: SplitSpec):
    """Return ``(train, test_indices)``.

    Tables: ``train`` is the row subset. Graphs are transductive: ``train`` is
    the full graph and callers restrict the loss to ``train_indices(split)``;
    use :func:`split_indices` directly when both index sets are needed.
    """
    s = split_indices(data.n, spec)
    if isinstance(data, GraphDataset):
        return data, s.test_indices
    return data.subset(s.train_indices), s.test_indices


def arrays(data: Dataset):
    """``(features, labels, normalized_adjacency or None)`` for model code."""
    if isinstance(data, GraphDataset):
        return data.features, data.labels, data.normalized_adjacency
    return data.features, data.labels, None
