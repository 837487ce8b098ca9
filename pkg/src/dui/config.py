"""Experiment configuration: an INI file with a fixed, versioned schema.

Every key has a default except the dataset paths of file-backed kinds.
Unknown sections or keys are errors, reported with their line number.
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

from .datasets import SplitSpec
from .independence import IndependenceConfig, KernelConfig
from .models import TrainOptions
from .unlearn import UnlearnConfig

SCHEMA_VERSION = 1
METHODS = ("retrain", "influence", "dui")
DATASET_KINDS = ("synthetic", "synthetic_graph", "idx", "mnist", "citation", "csv")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` holds one message per issue."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in _list(text)]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _bandwidth(text: str) -> float | str:
    return "median" if text.strip() == "median" else float(text)


# section -> key -> (parser, default); default None marks a required key
_UNLEARN_KEYS: dict[str, tuple[Callable, Any]] = {
    "lam": (float, 1.0),
    "solver": (str, "lissa"),
    "lissa_iterations": (int, 100),
    "lissa_scale": (float, 0.1),
    "damping": (float, 0.01),
    "lissa_repeats": (int, 1),
    "spectral_probe": (int, 0),
    "direct_max_params": (int, 2000),
}

SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "experiment": {
        "schema_version": (int, SCHEMA_VERSION),
        "seed": (int, 0),
        "repeats": (int, 1),
        "methods": (_list, list(METHODS)),
        "output_dir": (str, "out"),
        "threads": (int, 1),
    },
    "dataset": {
        "kind": (str, "synthetic"),
        "n": (int, 500),
        "m": (int, 10),
        "class_count": (int, 2),
        "separation": (float, 2.0),
        "nonnegative": (_bool, True),
        "p_in": (float, 0.15),
        "p_out": (float, 0.01),
        "data_seed": (int, 0),
        "images": (str, None),
        "labels": (str, None),
        "directory": (str, None),
        "content": (str, None),
        "cites": (str, None),
        "path": (str, None),
        "subset": (int, 0),
        "subset_seed": (int, 0),
    },
    "model": {
        "arch": (str, "logreg"),
        "hidden_dim": (_opt_int, None),
        "l2_reg": (float, 0.01),
    },
    "train": {
        "learning_rate": (float, 0.5),
        "epochs": (int, 200),
        "tolerance": (float, 1e-6),
    },
    "split": {
        "train_fraction": (float, 0.9),
        "seed": (int, 0),
    },
    "request": {
        "strategy": (str, "top_k"),
        "mode": (str, "points"),
        "unlearn_ratios": (_floats, [0.05, 0.075, 0.1, 0.2]),
        "feature_ratio": (float, 1.0),
        "replacement": (str, "zero"),
    },
    "unlearn": _UNLEARN_KEYS,
    "independence": {
        "feature_kernel": (str, "rbf"),
        "feature_bandwidth": (_bandwidth, "median"),
        "label_kernel": (str, "delta"),
        "prediction_kernel": (str, "linear"),
        "prediction_bandwidth": (_bandwidth, 1.0),
        "alpha": (float, 1.0),
        "normalization": (str, "n_minus_1_squared"),
        "batch_size": (int, 512),
        "seed": (int, 0),
        "mi_feature": (_opt_int, None),
    },
}
for _m in METHODS:
    SCHEMA[f"unlearn.{_m}"] = _UNLEARN_KEYS

# keys whose absence is fine unless the dataset kind needs them
_PATH_KEYS = {"idx": ("images", "labels"), "mnist": ("directory",), "citation": ("content", "cites"),
              "csv": ("path",)}


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    n: int = 500
    m: int = 10
    class_count: int = 2
    separation: float = 2.0
    nonnegative: bool = True
    p_in: float = 0.15
    p_out: float = 0.01
    data_seed: int = 0
    images: str | None = None
    labels: str | None = None
    directory: str | None = None
    content: str | None = None
    cites: str | None = None
    path: str | None = None
    subset: int = 0
    subset_seed: int = 0


@dataclass(frozen=True)
class RequestConfig:
    strategy: str = "top_k"
    mode: str = "points"
    unlearn_ratios: tuple[float, ...] = (0.05, 0.075, 0.1, 0.2)
    feature_ratio: float = 1.0
    replacement: str = "zero"


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "logreg"
    hidden_dim: int | None = None
    l2_reg: float = 0.01


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    split: SplitSpec = field(default_factory=SplitSpec)
    request: RequestConfig = field(default_factory=RequestConfig)
    methods: tuple[str, ...] = METHODS
    unlearn: dict[str, UnlearnConfig] = field(default_factory=dict)
    independence: IndependenceConfig = field(default_factory=IndependenceConfig)
    seed: int = 0
    repeats: int = 1
    output_dir: str = "out"
    threads: int = 1
    schema_version: int = SCHEMA_VERSION
    # directory relative dataset paths are resolved against
    base_dir: str = "."

    def unlearn_config(self, method: str) -> UnlearnConfig:
        return self.unlearn[method]

    def with_overrides(self, seed: int | None = None, threads: int | None = None,
                       output_dir: str | None = None) -> "ExperimentConfig":
        kw = {}
        if seed is not None:
            kw["seed"] = seed
        if threads is not None:
            kw["threads"] = threads
        if output_dir is not None:
            kw["output_dir"] = output_dir
        return replace(self, **kw)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        """Plain-data view used for the report digest (output_dir and base_dir excluded)."""
        d = asdict(self)
        d.pop("output_dir")
        d.pop("base_dir")
        d["unlearn"] = {m: asdict(c) for m, c in sorted(self.unlearn.items())}
        return d

    def digest(self) -> str:
        return hashlib.sha256(repr(_canonical(self.to_dict())).encode()).hexdigest()


def _canonical(obj):
    if isinstance(obj, dict):
        return tuple((k, _canonical(obj[k])) for k in sorted(obj))
    if isinstance(obj, (list, tuple)):
        return tuple(_canonical(v) for v in obj)
    return obj


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    where: dict[tuple[str, str | None], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), no)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            where.setdefault((section, m.group(1).strip().lower()), no)
    return where


def _parse_sections(text: str, source: str) -> tuple[dict[str, dict[str, Any]], dict]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError([f"{source}:{e.lineno}: line outside any [section]"]) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError([f"{source}:{e.lineno}: duplicate section [{e.section}]"]) from None
    except configparser.DuplicateOptionError as e:
        raise ConfigError([f"{source}:{e.lineno}: duplicate key {e.section}.{e.option}"]) from None
    except configparser.ParsingError as e:
        raise ConfigError([f"{source}:{no}: cannot parse {line.strip()!r}" for no, line in e.errors]) from None
    lines = _line_index(text)
    problems: list[str] = []
    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        sec_line = lines.get((section, None), 0)
        if section not in SCHEMA:
            problems.append(f"{source}:{sec_line}: unknown section [{section}]")
            continue
        schema = SCHEMA[section]
        out = values.setdefault(section, {})
        for key, raw in parser.items(section):
            line = lines.get((section, key), sec_line)
            if key not in schema:
                problems.append(f"{source}:{line}: unknown key {section}.{key}")
                continue
            parse, _ = schema[key]
            try:
                out[key] = parse(raw)
            except ValueError as e:
                problems.append(f"{source}:{line}: field {section}.{key}: {e}")
    if problems:
        raise ConfigError(problems)
    return values, lines


def _get(values: dict, section: str, key: str):
    sec = values.get(section, {})
    if key in sec:
        return sec[key]
    return SCHEMA[section][key][1]


def _section(values: dict, section: str) -> dict[str, Any]:
    return {k: _get(values, section, k) for k in SCHEMA[section]}


def _independence(values: dict) -> IndependenceConfig:
    s = _section(values, "independence")
    return IndependenceConfig(
        feature_kernel=KernelConfig(s["feature_kernel"], s["feature_bandwidth"]),
        label_kernel=KernelConfig(s["label_kernel"]),
        prediction_kernel=KernelConfig(s["prediction_kernel"], s["prediction_bandwidth"]),
        alpha=s["alpha"], normalization=s["normalization"], batch_size=s["batch_size"],
        seed=s["seed"], mi_feature=s["mi_feature"],
    )


def from_text(text: str, source: str = "<config>", base_dir: str | Path = ".") -> ExperimentConfig:
    values, lines = _parse_sections(text, source)
    problems: list[str] = []

    def check(ok: bool, section: str, key: str, msg: str):
        if not ok:
            line = lines.get((section, key), lines.get((section, None), 0))
            problems.append(f"{source}:{line}: field {section}.{key}: {msg}")

    exp = _section(values, "experiment")
    check(exp["schema_version"] == SCHEMA_VERSION, "experiment", "schema_version",
          f"unsupported schema version {exp['schema_version']} (expected {SCHEMA_VERSION})")
    check(exp["repeats"] >= 1, "experiment", "repeats", "must be >= 1")
    check(exp["threads"] >= 1, "experiment", "threads", "must be >= 1")
    check(exp["seed"] >= 0, "experiment", "seed", "must be >= 0")
    methods = tuple(exp["methods"])
    check(bool(methods) and all(m in METHODS for m in methods) and len(set(methods)) == len(methods),
          "experiment", "methods", f"must be distinct names from {', '.join(METHODS)}")

    ds = _section(values, "dataset")
    check(ds["kind"] in DATASET_KINDS, "dataset", "kind", f"must be one of {', '.join(DATASET_KINDS)}")
    for key in _PATH_KEYS.get(ds["kind"], ()):
        check(ds[key] is not None, "dataset", key, f"required for kind {ds['kind']}")
    check(ds["subset"] >= 0, "dataset", "subset", "must be >= 0")

    req = _section(values, "request")
    check(bool(req["unlearn_ratios"]), "request", "unlearn_ratios", "needs at least one ratio")

    model = ModelConfig(**_section(values, "model"))
    check(model.arch in ("logreg", "mlp", "gcn"), "model", "arch", "must be logreg, mlp or gcn")
    check((model.arch == "gcn") == (ds["kind"] in ("citation", "synthetic_graph")), "model", "arch",
          "gcn goes with graph datasets (citation, synthetic_graph) and only with them")

    built: dict[str, Any] = {}
    for name, make in [
        ("train", lambda: TrainOptions(**_section(values, "train"))),
        ("split", lambda: SplitSpec(**_section(values, "split"))),
        ("request", lambda: RequestConfig(**{**req, "unlearn_ratios": tuple(req["unlearn_ratios"])})),
        ("independence", lambda: _independence(values)),
    ]:
        try:
            built[name] = make()
        except (ValueError, TypeError) as e:
            problems.append(f"{source}:{lines.get((name, None), 0)}: section [{name}]: {e}")
    if "request" in built:
        r = built["request"]
        check(r.strategy in ("random", "top_k"), "request", "strategy", "must be random or top_k")
        check(r.mode in ("points", "feature_values"), "request", "mode", "must be points or feature_values")
        check(r.replacement in ("zero", "feature_mean"), "request", "replacement", "must be zero or feature_mean")
        check(all(0.0 <= x < 1.0 for x in r.unlearn_ratios), "request", "unlearn_ratios", "ratios lie in [0, 1)")
        check(0.0 < r.feature_ratio <= 1.0, "request", "feature_ratio", "must lie in (0, 1]")

    unlearn: dict[str, UnlearnConfig] = {}
    base = _section(values, "unlearn")
    for m in METHODS:
        merged = {**base, **values.get(f"unlearn.{m}", {})}
        try:
            unlearn[m] = UnlearnConfig(method=m, independence=built.get("independence", IndependenceConfig()),
                                       train=built.get("train", TrainOptions()), **merged)
        except (ValueError, TypeError) as e:
            sec = f"unlearn.{m}" if f"unlearn.{m}" in values else "unlearn"
            problems.append(f"{source}:{lines.get((sec, None), 0)}: section [{sec}]: {e}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        dataset=DatasetConfig(**ds), model=model, train=built["train"], split=built["split"],
        request=built["request"], methods=methods, unlearn=unlearn, independence=built["independence"],
        seed=exp["seed"], repeats=exp["repeats"], output_dir=exp["output_dir"], threads=exp["threads"],
        schema_version=exp["schema_version"], base_dir=str(base_dir),
    )


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError([f"{path}: cannot read ({e.strerror})"]) from None
    return from_text(text, source=str(path), base_dir=path.parent)
