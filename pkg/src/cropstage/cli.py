"""Command-line surface wiring the simulator, preprocessing, training,
evaluation, and activation export into reproducible runs.

Every command resolves its configuration, writes a run manifest (command,
configuration hash, seed, input and output paths, artifact versions) into the
output directory before producing any output, and exits 0 on success, 2 on a
configuration error, 3 on a data error, and 4 on a numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import pathlib
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .dataio import (DATASET_FORMAT_VERSION, load_corpus, load_dataset,
                     save_dataset, write_corpus)
from .hmm import HmmError, HmmFit, em_fit, season_sequences
from .models import (CHECKPOINT_VERSION, REFERENCE_PARAM_COUNTS, build_model,
                     load_checkpoint, save_checkpoint)
from .preprocess import (DataError, FilterError, ScalingError, StageDataset,
                         build_dataset)
from .simulate import SimConfig, simulate_benchmark
from .training import (HmmEnsembleEstimator, NNEstimator, TrainConfig,
                       TrainingDiverged, cross_validate, evaluate,
                       export_activations, train, write_history_csv,
                       write_report_csvs)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

NN_ARCHS = tuple(REFERENCE_PARAM_COUNTS)
HMM_TEST_RUNS = 10


class ConfigError(ValueError):
    """Bad flags or configuration file contents."""


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed: int,
                   inputs: list, outputs: list) -> dict:
    """The manifest is written before any command output."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "artifact_versions": {
            "cropstage": __version__,
            "checkpoint_format": CHECKPOINT_VERSION,
            "dataset_format": DATASET_FORMAT_VERSION,
        },
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


def _sim_config(args) -> SimConfig:
    overrides = _load_config_file(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "years", None) is not None:
        overrides["years"] = args.years
    try:
        return SimConfig(**overrides)
    except (TypeError, DataError) as err:
        raise ConfigError(f"bad simulation config: {err}") from None


def cmd_simulate(args) -> int:
    config = _sim_config(args)
    out_dir = pathlib.Path(args.out)
    write_manifest(out_dir, "simulate", asdict(config), config.seed,
                   inputs=[], outputs=["split.json", "year_<YYYY>/asd_<K>/*.csv"])
    seasons, split = simulate_benchmark(config)
    written = write_corpus(seasons, split, out_dir)
    print(f"simulate: wrote {len(written)} files under {out_dir} "
          f"({config.years} years, {config.n_asds} districts, "
          f"{config.fields_per_asd} fields each)")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    data_dir = pathlib.Path(args.data)
    out_dir = pathlib.Path(args.out)
    config = {"data": str(data_dir), "cutoff_week": args.cutoff_week}
    write_manifest(out_dir, "preprocess", config, args.seed or 0,
                   inputs=[data_dir],
                   outputs=["features.npy", "locations.npy", "targets.npy",
                            "index.npy", "dataset.json"])
    seasons, split = load_corpus(data_dir)
    dataset = build_dataset(seasons, train_years=split["train_years"],
                            test_years=split["test_years"])
    if args.cutoff_week is not None:
        keep = dataset.cutoffs == args.cutoff_week
        dataset = StageDataset(
            dataset.features[keep], dataset.locations[keep],
            dataset.targets[keep], dataset.cutoffs[keep], dataset.years[keep],
            dataset.asds[keep], dataset.field_counts, dataset.scaling,
            dataset.train_years, dataset.test_years)
    save_dataset(dataset, out_dir)
    print(f"preprocess: {len(dataset)} items of shape 39x12 (+9 location) "
          f"written to {out_dir}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    overrides = _load_config_file(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return TrainConfig(**overrides)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad training config: {err}") from None


def cmd_train(args) -> int:
    if args.arch not in NN_ARCHS + ("hmm",):
        raise ConfigError(f"unknown architecture tag {args.arch!r}")
    dataset = load_dataset(args.dataset)
    out_dir = pathlib.Path(args.out)
    config = _train_config(args)
    write_manifest(out_dir, "train",
                   {"arch": args.arch, "crossval": args.crossval,
                    **asdict(config)},
                   config.seed, inputs=[args.dataset],
                   outputs=["checkpoint", "history.csv"])

    train_years = dataset.train_years
    train_data = dataset.subset_years(train_years)

    if args.arch == "hmm":
        observations, occupancies, years = season_sequences(train_data)
        fit = em_fit(observations, occupancies, years, runs=args.hmm_runs,
                     seed=config.seed)
        fit.save(out_dir / "hmm.json")
        print(f"train: hmm ensemble of {len(fit.models)} runs -> "
              f"{out_dir / 'hmm.json'}")
        return EXIT_OK

    if args.crossval:
        results = cross_validate(lambda s: build_model(args.arch, s),
                                 train_data, train_years, config=config,
                                 seed=config.seed)
        for r in results:
            path = out_dir / f"fold_{r['fold']}_report.json"
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(r["report"].to_dict(), fh, sort_keys=True, indent=1)
        print(f"train: wrote {len(results)} fold reports to {out_dir}")
        return EXIT_OK

    model = build_model(args.arch, seed=config.seed)
    count = model.n_parameters()
    reference = REFERENCE_PARAM_COUNTS[args.arch]
    print(f"train: {args.arch} has {count} trainable parameters "
          f"(reference {reference}, delta {count - reference:+d})")
    monitor_rng = np.random.default_rng([config.seed, 4])
    monitor_year = (args.monitor_year if args.monitor_year is not None
                    else int(monitor_rng.choice(train_years)))
    result = train(model, train_data, monitor_year, config)
    save_checkpoint(model, out_dir / "model.ckpt")
    write_history_csv(result, out_dir / "history.csv")
    print(f"train: stopped at epoch {result.stopped_epoch} "
          f"(best {result.best_epoch}, monitor year {monitor_year}); "
          f"checkpoint -> {out_dir / 'model.ckpt'}")
    return EXIT_OK


def _build_estimator(checkpoint_path):
    path = pathlib.Path(checkpoint_path)
    if path.suffix == ".json":
        fit = HmmFit.load(path)
        return HmmEnsembleEstimator(fit.top(HMM_TEST_RUNS)), "hmm"
    model = load_checkpoint(path)
    return NNEstimator(model), model.arch


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.dataset)
    out_dir = pathlib.Path(args.out)
    years = args.years or dataset.test_years
    if not years:
        raise ConfigError("no evaluation years: dataset has no test split "
                          "and --years was not given")
    missing = sorted(set(years) - set(dataset.years.tolist()))
    if missing:
        raise DataError(f"years not in dataset: {missing}")
    write_manifest(out_dir, "evaluate",
                   {"checkpoint": str(args.checkpoint), "years": list(years)},
                   args.seed or 0, inputs=[args.checkpoint, args.dataset],
                   outputs=["report.json", "nse_stages.csv", "cs_weekly.csv",
                            "cumulative_progress.csv"])
    estimator, arch = _build_estimator(args.checkpoint)
    report, weekly = evaluate(estimator, dataset, years, label=arch)
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
    write_report_csvs(report, weekly, out_dir)
    shown = {s: (None if v is None else round(v, 4))
             for s, v in report.nse_mean.items()}
    print(f"evaluate: {arch} mean NSE per stage {shown} -> {out_dir}")
    return EXIT_OK


def cmd_export_activations(args) -> int:
    dataset = load_dataset(args.dataset)
    out_dir = pathlib.Path(args.out)
    write_manifest(out_dir, "export-activations",
                   {"checkpoint": str(args.checkpoint), "tap": args.tap},
                   args.seed or 0, inputs=[args.checkpoint, args.dataset],
                   outputs=[f"activations_{args.tap}.csv", f"pca_{args.tap}.csv"])
    model = load_checkpoint(args.checkpoint)
    try:
        export = export_activations(model, dataset, args.tap, out_dir)
    except KeyError as err:
        raise ConfigError(str(err)) from None
    print(f"export-activations: {export.n_rows} rows x {export.width} units "
          f"({args.tap}) -> {export.activations_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cropstage",
        description="In-season crop growth stage estimation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic season corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of simulator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--years", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="build scaled feature blocks")
    p.add_argument("data", help="corpus directory from the simulate command")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--cutoff-all", action="store_true", default=True,
                       help="emit all 39 cutoff variants (default)")
    group.add_argument("--cutoff-week", type=int,
                       help="emit a single cutoff variant")
    p.set_defaults(func=cmd_preprocess, config=None)

    p = sub.add_parser("train", help="fit an estimator on the training years")
    p.add_argument("--arch", required=True,
                   choices=list(NN_ARCHS) + ["hmm"])
    p.add_argument("dataset", help="dataset directory from preprocess")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--crossval", action="store_true",
                   help="run the five-fold protocol instead of a single fit")
    p.add_argument("--monitor-year", type=int)
    p.add_argument("--hmm-runs", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on held-out years")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--years", type=int, nargs="*")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-activations",
                       help="dump tapped layer activations plus a 2-component "
                            "quick-look projection")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--tap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_export_activations)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_CONFIG if err.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, ScalingError, FilterError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, HmmError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
