"""Command-line interface.

Exit status: 0 success, 1 runtime error or failed grid cells, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import models, requests, runner
from .unlearn import unlearn

log = logging.getLogger("dui")


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (INI)")
    common.add_argument("--seed", type=_u64, help="override [experiment] seed")
    common.add_argument("--threads", type=_positive, help="BLAS threads; 1 is bit-reproducible")
    common.add_argument("--out", help="output directory (default: [experiment] output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dui", description="Influence-based machine unlearning experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="fit the base model and save its parameters")
    u = sub.add_parser("unlearn", parents=[common], help="apply one request to a saved model")
    u.add_argument("--model", required=True, help="parameter file written by 'train'")
    u.add_argument("--request", help="serialized request; generated from the config if omitted")
    u.add_argument("--method", choices=config_mod.METHODS, default="dui")
    u.add_argument("--ratio", type=float, help="unlearn ratio when generating (default: first in config)")
    e = sub.add_parser("eval", parents=[common], help="test-split metrics of a saved model")
    e.add_argument("--model", required=True)
    e.add_argument("--applied-request", help="evaluate on the data retained after this request")
    sub.add_parser("experiment", parents=[common], help="run the full grid and write reports")
    sub.add_parser("validate-config", parents=[common], help="check a config file and exit")
    return p


def _load_config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    return cfg.with_overrides(seed=args.seed, threads=args.threads, output_dir=args.out)


def _out_dir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_model(path, spec):
    try:
        return models.load_params(path, spec)
    except OSError as e:
        raise UsageError(f"cannot read model {path}: {e.strerror}") from None


def _load_request(path, prep, cfg, ratio, seed):
    if path is None:
        return runner.make_request(cfg, prep, ratio, seed)
    try:
        return requests.UnlearnRequest.from_text(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read request {path}: {e.strerror}") from None


def cmd_train(args, cfg) -> int:
    prep = runner.prepare(cfg)
    spec = runner.model_spec(cfg, prep.full, cfg.seed)
    theta, runtime = models.train(spec, prep.train, prep.loss_indices, cfg.train)
    out = _out_dir(cfg)
    models.save_params(out / "model.bin", spec, theta)
    _write_json(out / "train.json", {"seed": cfg.seed, "spec_digest": spec.digest(),
                                     "runtime_seconds": runtime, **runner.metrics(prep, spec, theta)})
    print(out / "model.bin")
    return 0


def cmd_unlearn(args, cfg) -> int:
    prep = runner.prepare(cfg)
    spec = runner.model_spec(cfg, prep.full, cfg.seed)
    theta = _load_model(args.model, spec)
    ratio = cfg.request.unlearn_ratios[0] if args.ratio is None else args.ratio
    request = _load_request(args.request, prep, cfg, ratio, cfg.seed)
    applied = requests.apply(prep.train, request)
    result = unlearn(spec, theta, prep.train, applied, cfg.unlearn_config(args.method), prep.loss_indices)
    out = _out_dir(cfg)
    blob = models.params_to_bytes(spec, result.theta)
    (out / "theta_unlearned.bin").write_bytes(blob)
    (out / "request.txt").write_text(request.to_text())
    _write_json(out / "unlearn.json", {
        "method": args.method, "request_digest": request.digest(),
        "theta_sha256": hashlib.sha256(blob).hexdigest(), "runtime_seconds": result.runtime_seconds,
        "diagnostics": result.diagnostics, **runner.metrics(prep, spec, result.theta, applied)})
    print(out / "theta_unlearned.bin")
    return 0


def cmd_eval(args, cfg) -> int:
    prep = runner.prepare(cfg)
    spec = runner.model_spec(cfg, prep.full, cfg.seed)
    theta = _load_model(args.model, spec)
    applied = None
    if args.applied_request:
        req = _load_request(args.applied_request, prep, cfg, None, None)
        applied = requests.apply(prep.train, req)
    report = runner.metrics(prep, spec, theta, applied)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        (_out_dir(cfg) / "eval.json").write_text(text + "\n")
    return 0


def cmd_experiment(args, cfg) -> int:
    result = runner.run_experiment(cfg)
    print(Path(cfg.output_dir) / "report.json")
    if result.failed:
        print(f"{len(result.failed)} of {len(result.records)} cells failed", file=sys.stderr)
        return 1
    return 0


def cmd_validate(args, cfg) -> int:
    print(f"{args.config}: ok (schema {cfg.schema_version}, digest {cfg.digest()[:12]})")
    return 0


COMMANDS = {"train": cmd_train, "unlearn": cmd_unlearn, "eval": cmd_eval, "experiment": cmd_experiment,
            "validate-config": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
    except config_mod.ConfigError as e:
        for problem in e.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - map any runtime failure to status 1
        log.debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
