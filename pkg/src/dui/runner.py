"""Experiment orchestration: the (ratio x method x repeat) grid and its reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets, evaluation, models, requests
from .config import ExperimentConfig
from .datasets import Dataset, GraphDataset
from .models import ModelSpec
from .unlearn import unlearn

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
CSV_HEADER = ["method", "ratio", "repeat", "macro_f1", "micro_f1", "brier", "runtime_s", "hsic_shift", "mi_shift"]
SUMMARY_HEADER = ["method", "ratio", "f1_mean", "f1_std", "rt_seconds"]


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "synthetic":
        data = datasets.make_synthetic(d.n, d.m, d.class_count, seed=d.data_seed, separation=d.separation,
                                       nonnegative=d.nonnegative)
    elif d.kind == "synthetic_graph":
        data = datasets.make_synthetic_graph(d.n, d.m, d.class_count, seed=d.data_seed, p_in=d.p_in, p_out=d.p_out)
    elif d.kind == "idx":
        data = datasets.load_idx(cfg.resolve(d.images), cfg.resolve(d.labels))
    elif d.kind == "mnist":
        data = datasets.load_mnist(cfg.resolve(d.directory))
    elif d.kind == "citation":
        data = datasets.load_citation_graph(cfg.resolve(d.content), cfg.resolve(d.cites))
    else:
        data = datasets.load_csv(cfg.resolve(d.path))
    if d.subset and d.subset < data.n:
        rows = np.sort(np.random.default_rng(d.subset_seed).permutation(data.n)[:d.subset])
        data = data.subset(rows)
    return data


@dataclass(frozen=True, eq=False)
class Prepared:
    """Dataset after the train/test split.

    ``train`` is what models are fit on; ``loss_indices`` restricts the loss
    on graphs (transductive) and is ``None`` for tables.
    """

    full: Dataset
    train: Dataset
    loss_indices: np.ndarray | None
    test_indices: np.ndarray

    @property
    def candidates(self) -> np.ndarray | None:
        return self.loss_indices

    def test_probabilities(self, spec: ModelSpec, theta, applied: requests.AppliedRequest | None = None):
        if isinstance(self.full, GraphDataset):
            graph = self.train if applied is None else applied.retained
            rows = self.test_indices if applied is None else applied.remap(self.test_indices)
            return models.predict_proba(spec, theta, graph)[rows]
        return models.predict_proba(spec, theta, self.full.subset(self.test_indices))

    def test_labels(self) -> np.ndarray:
        return self.full.labels[self.test_indices]


def prepare(cfg: ExperimentConfig) -> Prepared:
    full = load_dataset(cfg)
    s = datasets.split_indices(full.n, cfg.split)
    if isinstance(full, GraphDataset):
        return Prepared(full, full, s.train_indices, s.test_indices)
    return Prepared(full, full.subset(s.train_indices), None, s.test_indices)


def model_spec(cfg: ExperimentConfig, data: Dataset, seed: int) -> ModelSpec:
    m = cfg.model
    return ModelSpec(m.arch, data.m, data.class_count, hidden_dim=m.hidden_dim, l2_reg=m.l2_reg, seed=seed)


def make_request(cfg: ExperimentConfig, prep: Prepared, ratio: float, seed: int) -> requests.UnlearnRequest:
    r = cfg.request
    if r.strategy == "random":
        return requests.random_request(prep.train, ratio, mode=r.mode, seed=seed, feature_ratio=r.feature_ratio,
                                       replacement=r.replacement, candidates=prep.candidates)
    return requests.topk_request(prep.train, ratio, feature_ratio=r.feature_ratio, mode=r.mode,
                                 replacement=r.replacement, candidates=prep.candidates)


def metrics(prep: Prepared, spec: ModelSpec, theta, applied=None) -> dict:
    return evaluation.classification_metrics(prep.test_probabilities(spec, theta, applied), prep.test_labels(),
                                             prep.full.class_count)


@dataclass
class CellRecord:
    method: str
    ratio: float
    repeat: int
    seed: int
    status: str = "ok"
    error: str | None = None
    report: evaluation.EvalReport | None = None
    request_digest: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"method": self.method, "ratio": self.ratio, "repeat": self.repeat, "seed": self.seed,
               "status": self.status, "request_digest": self.request_digest}
        if self.error is not None:
            out["error"] = self.error
        if self.report is not None:
            rep = self.report.to_dict()
            # wall-clock time varies run to run; it lives in the CSV outputs
            rep.pop("runtime_seconds")
            out["eval"] = rep
            out["diagnostics"] = self.diagnostics
        return out

    def csv_row(self) -> list:
        if self.report is None:
            return [self.method, self.ratio, self.repeat] + [""] * 6
        r = self.report
        return [self.method, self.ratio, self.repeat, r.macro_f1, r.micro_f1, r.brier, r.runtime_seconds,
                r.hsic_shift, r.mi_shift]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[CellRecord]
    base_models: list[dict]
    dataset_info: dict

    @property
    def failed(self) -> list[CellRecord]:
        return [r for r in self.records if r.status != "ok"]

    def aggregates(self) -> list[dict]:
        """Mean and n-1 standard deviation per (method, ratio) over successful repeats."""
        out = []
        for ratio in self.config.request.unlearn_ratios:
            for method in self.config.methods:
                reps = [r.report for r in self.records
                        if r.method == method and r.ratio == ratio and r.report is not None]
                out.append(aggregate(method, ratio, reps))
        return out

    def to_json(self) -> dict:
        aggs = [{k: v for k, v in a.items() if k != "rt_seconds"} for a in self.aggregates()]
        return {
            "schema_version": REPORT_SCHEMA,
            "config_digest": self.config.digest(),
            "config": self.config.to_dict(),
            "evaluated_on": "held-out test split",
            "dataset": self.dataset_info,
            "base_models": self.base_models,
            "records": [r.to_json() for r in self.records],
            "aggregates": aggs,
            "failed_cells": len(self.failed),
        }


def _std(values: list[float]) -> float:
    # a single repeat has no spread to estimate; report 0 rather than NaN
    return statistics.stdev(values) if len(values) > 1 else 0.0


def aggregate(method: str, ratio: float, reports: list[evaluation.EvalReport]) -> dict:
    f1 = [r.macro_f1 for r in reports]
    if not reports:
        return {"method": method, "ratio": ratio, "count": 0, "f1_mean": None, "f1_std": None,
                "micro_f1_mean": None, "brier_mean": None, "hsic_shift_mean": None, "mi_shift_mean": None,
                "rt_seconds": None}
    return {
        "method": method, "ratio": ratio, "count": len(reports),
        "f1_mean": statistics.fmean(f1), "f1_std": _std(f1),
        "micro_f1_mean": statistics.fmean(r.micro_f1 for r in reports),
        "brier_mean": statistics.fmean(r.brier for r in reports),
        "hsic_shift_mean": statistics.fmean(r.hsic_shift for r in reports),
        "mi_shift_mean": statistics.fmean(r.mi_shift for r in reports),
        "rt_seconds": statistics.fmean(r.runtime_seconds for r in reports),
    }


def _run_cell(cfg: ExperimentConfig, prep: Prepared, spec: ModelSpec, theta, applied, method: str,
              ratio: float, repeat: int, seed: int) -> CellRecord:
    rec = CellRecord(method, ratio, repeat, seed, request_digest=applied.request.digest())
    ucfg = cfg.unlearn_config(method)
    result = unlearn(spec, theta, prep.train, applied, ucfg, prep.loss_indices)
    m = metrics(prep, spec, result.theta, applied)
    shift = evaluation.shift_report(spec, theta, result.theta, applied, cfg.independence, prep.loss_indices)
    rec.report = evaluation.EvalReport(
        macro_f1=m["macro_f1"], micro_f1=m["micro_f1"], brier=m["brier"],
        runtime_seconds=result.runtime_seconds, hsic_shift=shift["hsic_shift"], mi_shift=shift["mi_shift"],
        method=method, unlearn_ratio=ratio, feature_ratio=cfg.request.feature_ratio, seed=seed)
    rec.diagnostics = result.diagnostics
    return rec


def _failed(method, ratio, repeat, seed, exc: Exception) -> CellRecord:
    log.error("cell %s ratio=%s repeat=%d failed: %s", method, ratio, repeat, exc)
    return CellRecord(method, ratio, repeat, seed, status="failed", error=f"{type(exc).__name__}: {exc}")


def run_grid(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every (repeat, ratio, method) cell; failures are recorded, not raised."""
    prep = prepare(cfg)
    info = {"digest": prep.full.digest(), "n": prep.full.n, "m": prep.full.m,
            "class_count": prep.full.class_count, "train_rows": int(prep.train.n if prep.loss_indices is None
                                                                     else prep.loss_indices.size),
            "test_rows": int(prep.test_indices.size)}
    records: list[CellRecord] = []
    bases: list[dict] = []
    for repeat in range(cfg.repeats):
        seed = cfg.seed + repeat
        spec = model_spec(cfg, prep.full, seed)
        try:
            theta, _ = models.train(spec, prep.train, prep.loss_indices, cfg.train)
        except Exception as e:  # noqa: BLE001 - every cell of this repeat fails the same way
            for ratio in cfg.request.unlearn_ratios:
                records += [_failed(m, ratio, repeat, seed, e) for m in cfg.methods]
            bases.append({"repeat": repeat, "seed": seed, "status": "failed", "error": str(e)})
            continue
        bases.append({"repeat": repeat, "seed": seed, "status": "ok", **metrics(prep, spec, theta)})
        for ratio in cfg.request.unlearn_ratios:
            try:
                applied = requests.apply(prep.train, make_request(cfg, prep, ratio, seed))
            except Exception as e:  # noqa: BLE001
                records += [_failed(m, ratio, repeat, seed, e) for m in cfg.methods]
                continue
            for method in cfg.methods:
                try:
                    records.append(_run_cell(cfg, prep, spec, theta, applied, method, ratio, repeat, seed))
                except Exception as e:  # noqa: BLE001
                    records.append(_failed(method, ratio, repeat, seed, e))
    return ExperimentResult(cfg, records, bases, info)


def write_reports(result: ExperimentResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "csv": out / "report.csv", "summary": out / "summary.csv"}
    paths["json"].write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    with paths["csv"].open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(r.csv_row() for r in result.records)
    with paths["summary"].open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for a in result.aggregates():
            w.writerow(["" if a[k] is None else a[k] for k in SUMMARY_HEADER])
    return paths


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """Run the grid under a BLAS thread limit and write report.json, report.csv and summary.csv."""
    with threadpool_limits(limits=cfg.threads):
        result = run_grid(cfg)
    write_reports(result, cfg.output_dir if out_dir is None else out_dir)
    if result.failed:
        log.warning("%d of %d cells failed", len(result.failed), len(result.records))
    return result


def recompute_aggregates(records: list[dict]) -> dict[tuple[str, float], tuple[float, float]]:
    """(f1_mean, f1_std) per cell from the raw report.json records."""
    cells: dict[tuple[str, float], list[float]] = {}
    for r in records:
        if r["status"] == "ok":
            cells.setdefault((r["method"], r["ratio"]), []).append(r["eval"]["macro_f1"])
    return {k: (math.fsum(v) / len(v), _std(v)) for k, v in cells.items()}
