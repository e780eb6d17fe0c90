"""Command-line entry point: ingest, train, evaluate, predict, benchmark.

Experiment settings live in JSON config files (see docs/formats.md);
command-line flags override config values.  Exit codes: 0 on success, 2 on
usage or validation problems, 3 on runtime or numerical failures.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .data_io import (
    DatasetDescriptor,
    SplitSpec,
    load_model,
    parse_qos_log,
    save_model,
    split,
    write_qos_log,
    write_split_manifest,
)
from .errors import VALIDATION_ERRORS, BtdqosError, ConfigError
from .evaluation import mae, rmse, run_benchmark
from .model import BlockStructure, cp_structure, predict_entry, tucker_structure
from .rng import derive_seed
from .trainer import TrainConfig, fit, grid_search

logger = logging.getLogger(__name__)

#: Default dataset root for relative data paths.
DATA_DIR_ENV = "BTDQOS_DATA_DIR"

#: Default benchmark model set: a CP emulation and a Tucker emulation of the
#: usual baselines, plus the native block term model.  Three blocks of rank
#: (2, 2, 2) is the block term default at block count 3.
DEFAULT_BENCHMARK_MODELS = (
    ("M1-emulated", {"cp": 3}),
    ("M2-emulated", {"tucker": [3, 3, 3]}),
    ("M3-bnbt", {"blocks": [[2, 2, 2], [2, 2, 2], [2, 2, 2]]}),
)


def _resolve_input(path_str, config_dir=None):
    """Resolve a data path against the config dir, then $BTDQOS_DATA_DIR."""
    path = Path(path_str)
    if path.is_absolute():
        candidates = [path]
    else:
        candidates = [Path.cwd() / path]
        if config_dir is not None:
            candidates.append(Path(config_dir) / path)
        data_dir = os.environ.get(DATA_DIR_ENV)
        if data_dir:
            candidates.append(Path(data_dir) / path)
    for cand in candidates:
        if cand.exists():
            return cand
    raise ConfigError(f"input file not found: {path_str}")


def _descriptor_from_dict(d) -> DatasetDescriptor:
    try:
        return DatasetDescriptor(
            name=d.get("name", "dataset"),
            qos_type=d.get("qos_type", "response_time"),
            dims=(d["users"], d["services"], d["slices"]),
            source_path=d.get("path"),
        )
    except KeyError as exc:
        raise ConfigError(f"dataset config is missing {exc}")


def _structure_from_dict(d) -> BlockStructure:
    if "blocks" in d:
        return BlockStructure(tuple(tuple(b) for b in d["blocks"]))
    if "cp" in d:
        return cp_structure(int(d["cp"]))
    if "tucker" in d:
        return tucker_structure(*d["tucker"])
    raise ConfigError("structure needs one of 'blocks', 'cp' or 'tucker'")


def _train_config_from_dict(d, seed_override=None) -> TrainConfig:
    known = {"lambda1", "lambda2", "lambda3", "max_iter", "tol", "seed",
             "epsilon_guard", "bias_enabled", "freeze_cores", "stop_on"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
    kwargs = dict(d)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return TrainConfig(**kwargs)


def _grids_from_dict(d):
    if d is None:
        return None
    try:
        return (d["lambda1"], d["lambda2"], d["lambda3"])
    except KeyError as exc:
        raise ConfigError(f"grid config is missing {exc}")


def _load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return doc, path.parent


# -- commands ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    try:
        ratios = tuple(float(x) for x in args.split.split(","))
        if len(ratios) != 3:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--split must be three comma-separated ratios, got {args.split!r}")
    seed = args.seed if args.seed is not None else 0
    spec = SplitSpec(*ratios, seed=seed)
    descriptor = DatasetDescriptor(
        name=args.name or Path(args.data).stem,
        qos_type=args.qos_type,
        dims=(args.users, args.services, args.slices),
        source_path=args.data,
    )
    data_path = _resolve_input(args.data)
    result = parse_qos_log(data_path, descriptor, one_based=args.one_based)
    logger.info("ingested %s: %d records, %d kept, %d dropped",
                data_path, result.records, result.kept, result.dropped)
    parts = split(result.tensor, spec)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for part_name, part in (("train", parts.train),
                            ("validation", parts.validation),
                            ("test", parts.test)):
        file_path = out_dir / f"{part_name}.txt"
        write_qos_log(part, file_path,
                      header=f"{descriptor.name} {part_name} partition")
        files[part_name] = file_path.name
    write_split_manifest(
        parts, out_dir / "manifest.json",
        extra={
            "dataset": descriptor.name,
            "qos_type": descriptor.qos_type,
            "source": str(args.data),
            "seed": seed,
            "ratios": list(ratios),
            "records": result.records,
            "kept": result.kept,
            "dropped": result.dropped,
            "files": files,
        },
        include_indices=args.manifest_indices,
    )
    logger.info("wrote partitions %s and manifest.json to %s",
                sorted(files.values()), out_dir)
    return 0


def cmd_train(args) -> int:
    doc, config_dir = _load_config(args.config)
    descriptor = _descriptor_from_dict(doc.get("dataset", {}))
    if descriptor.source_path is None:
        raise ConfigError("train config needs dataset.path")
    split_doc = doc.get("split")
    if not split_doc:
        raise ConfigError("train config needs a split section")
    structure = _structure_from_dict(doc.get("structure", {}))

    train_doc = dict(doc.get("train", {}))
    if args.max_iter is not None:
        train_doc["max_iter"] = args.max_iter
    if args.tol is not None:
        train_doc["tol"] = args.tol
    if args.no_bias:
        train_doc["bias_enabled"] = False
    for lam in ("lambda1", "lambda2", "lambda3"):
        value = getattr(args, lam)
        if value is not None:
            train_doc[lam] = value
    cfg = _train_config_from_dict(train_doc, seed_override=args.seed)

    out_doc = doc.get("output", {})
    checkpoint_path = Path(args.checkpoint or out_doc.get("checkpoint", "model.json"))
    trajectory_path = Path(args.trajectory or out_doc.get("trajectory_csv", "trajectory.csv"))

    data_path = _resolve_input(descriptor.source_path, config_dir)
    result = parse_qos_log(data_path, descriptor,
                           one_based=doc.get("dataset", {}).get("one_based", False))
    spec = SplitSpec(split_doc["train"], split_doc["validation"],
                     split_doc["test"], seed=split_doc.get("seed", 0))
    parts = split(result.tensor, spec)
    logger.info("training on %d entries (validation %d, test %d held out)",
                parts.train.n_entries, parts.validation.n_entries,
                parts.test.n_entries)

    grids = _grids_from_dict(doc.get("grid"))
    if grids is not None:
        cfg = grid_search(parts.train, parts.validation, descriptor.dims,
                          structure, grids, cfg)
        logger.info("grid search selected lambda=(%g, %g, %g)",
                    cfg.lambda1, cfg.lambda2, cfg.lambda3)
    model, report = fit(parts.train, parts.validation, descriptor.dims,
                        structure, cfg)

    for parent in (checkpoint_path.parent, trajectory_path.parent):
        parent.mkdir(parents=True, exist_ok=True)
    save_model(model, checkpoint_path)
    with trajectory_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "objective", "validation_rmse"))
        for n, (loss, vr) in enumerate(zip(report.loss_trajectory,
                                           report.validation_rmse_trajectory), 1):
            writer.writerow((n, repr(loss), repr(vr)))
    splits_dir = out_doc.get("splits_dir")
    if splits_dir:
        splits_path = Path(splits_dir)
        splits_path.mkdir(parents=True, exist_ok=True)
        for part_name, part in (("train", parts.train),
                                ("validation", parts.validation),
                                ("test", parts.test)):
            write_qos_log(part, splits_path / f"{part_name}.txt")
    logger.info("converged=%s after %d epochs; checkpoint %s, trajectory %s",
                report.converged, report.epochs_run, checkpoint_path,
                trajectory_path)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(_resolve_input(args.checkpoint))
    descriptor = DatasetDescriptor(
        name="evaluate", qos_type="response_time",
        dims=model.dims, source_path=args.data)
    result = parse_qos_log(_resolve_input(args.data), descriptor,
                           one_based=args.one_based)
    print(f"rmse={rmse(model, result.tensor):.6f} "
          f"mae={mae(model, result.tensor):.6f}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(_resolve_input(args.checkpoint))
    value = predict_entry(model, args.i, args.j, args.k)
    print(format(value, "#.6g"))
    return 0


def cmd_benchmark(args) -> int:
    doc, config_dir = _load_config(args.config)
    descriptor = _descriptor_from_dict(doc.get("dataset", {}))
    if descriptor.source_path is None:
        raise ConfigError("benchmark config needs dataset.path")
    data_path = _resolve_input(descriptor.source_path, config_dir)
    result = parse_qos_log(data_path, descriptor,
                           one_based=doc.get("dataset", {}).get("one_based", False))
    logger.info("benchmark source %s: %d observed entries",
                descriptor.name, result.tensor.n_entries)

    split_specs = []
    for entry in doc.get("splits", ()):
        try:
            split_specs.append((entry["label"],
                                (entry["train"], entry["validation"], entry["test"])))
        except KeyError as exc:
            raise ConfigError(f"split spec is missing {exc}")
    if not split_specs:
        raise ConfigError("benchmark config needs a nonempty splits list")

    models_doc = doc.get("models")
    if models_doc is None:
        models_doc = [dict(label=label, **structure)
                      for label, structure in DEFAULT_BENCHMARK_MODELS]
    model_configs = []
    for entry in models_doc:
        if "label" not in entry:
            raise ConfigError("every model config needs a label")
        structure = _structure_from_dict(entry)
        model_configs.append((entry["label"], structure))

    repeats = args.repeats if args.repeats is not None else int(doc.get("repeats", 1))
    top_seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    run_seeds = [derive_seed(top_seed, "run", r) for r in range(repeats)]
    cfg = _train_config_from_dict(doc.get("train", {}))
    grids = _grids_from_dict(doc.get("grid"))

    report = run_benchmark(result.tensor, split_specs, model_configs, cfg,
                           repeats=run_seeds, grids=grids,
                           threads=max(1, args.threads))

    out_doc = doc.get("output", {})
    detail_path = Path(args.out_detail or out_doc.get("detail_csv", "benchmark_detail.csv"))
    aggregate_path = Path(args.out_aggregate
                          or out_doc.get("aggregate_csv", "benchmark_aggregate.csv"))
    for parent in (detail_path.parent, aggregate_path.parent):
        parent.mkdir(parents=True, exist_ok=True)
    report.write_detail_csv(detail_path)
    report.write_aggregate_csv(aggregate_path)
    logger.info("wrote %d detail rows to %s and %d aggregate rows to %s",
                len(report.cells), detail_path, len(report.aggregates),
                aggregate_path)
    return 0


# -- argument parsing --------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="top-level random seed (overrides config)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for benchmark cells")
    common.add_argument("--quiet", action="store_true",
                        help="only warnings and errors on stderr")

    parser = argparse.ArgumentParser(
        prog="btdqos",
        description="Sparse tensor completion benchmarks for dynamic QoS prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="parse a QoS log and write split partitions")
    p.add_argument("--data", required=True, help="QoS log file")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--services", type=int, required=True)
    p.add_argument("--slices", type=int, required=True)
    p.add_argument("--split", required=True,
                   help="train,validation,test ratios, e.g. 0.1,0.1,0.8")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--qos-type", default="response_time",
                   choices=("response_time", "throughput"))
    p.add_argument("--name", default=None, help="dataset label")
    p.add_argument("--one-based", action="store_true",
                   help="input ids count from 1")
    p.add_argument("--manifest-indices", action="store_true",
                   help="list every entry index in the manifest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common],
                       help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--no-bias", action="store_true",
                   help="train without the linear bias vectors")
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--lambda3", type=float, default=None)
    p.add_argument("--checkpoint", default=None, help="checkpoint output path")
    p.add_argument("--trajectory", default=None, help="trajectory CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a checkpoint on a test tensor file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="test partition log file")
    p.add_argument("--one-based", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common],
                       help="predict one (i, j, k) cell from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-i", type=int, required=True)
    p.add_argument("-j", type=int, required=True)
    p.add_argument("-k", type=int, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", parents=[common],
                       help="run the cross-density model comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--out-detail", default=None)
    p.add_argument("--out-aggregate", default=None)
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        logger.error("error: %s", exc)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        logger.error("error: %s", exc)
        return 2
    except BtdqosError as exc:
        logger.error("runtime error: %s", exc)
        return 3
    except Exception as exc:  # pragma: no cover - last-resort guard
        logger.exception("unexpected failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
