"""One-call synthetic benchmark: simulate, preprocess, fit the three
networks and the hidden-Markov baseline, and score everything on the
held-out years.

The default geometry is the paper-shaped corpus (17 years, 9 districts, 13/4
split); the training profile is the reduced desk-scale one, since the
full-protocol settings (300 epochs at a 1e-5 learning rate) are sized for
real multi-year data rather than a half-hour desk run.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .hmm import em_fit, season_sequences
from .models import build_model, parameter_count_report
from .preprocess import StageDataset, build_dataset
from .simulate import BenchmarkSplit, SimConfig, simulate_benchmark
from .training import (HmmEnsembleEstimator, MetricsReport, NNEstimator,
                       TrainConfig, TrainResult, desk_config, evaluate, train)

logger = logging.getLogger(__name__)

NN_ARCHS = ("dense", "sequential", "dgnn")
HMM_TEST_RUNS = 10


@dataclass
class BenchmarkResult:
    split: BenchmarkSplit
    dataset: StageDataset
    reports: dict[str, MetricsReport]
    weekly: dict[str, dict]
    train_results: dict[str, TrainResult]
    parameter_reports: list[dict]
    timings: dict[str, float] = field(default_factory=dict)

    def mean_nse(self, label: str) -> float:
        return self.reports[label].mean_nse_across_stages()

    def total_seconds(self) -> float:
        return sum(self.timings.values())


def build_benchmark_dataset(sim_config: SimConfig | None = None
                            ) -> tuple[StageDataset, BenchmarkSplit, dict]:
    """Simulate the corpus and preprocess it into the model-ready dataset."""
    sim_config = sim_config or SimConfig()
    timings: dict[str, float] = {}
    t0 = time.time()
    seasons, split = simulate_benchmark(sim_config)
    timings["simulate"] = time.time() - t0
    t0 = time.time()
    dataset = build_dataset([s.season_inputs() for s in seasons],
                            train_years=split.train_years,
                            test_years=split.test_years)
    timings["preprocess"] = time.time() - t0
    return dataset, split, timings


def run_benchmark(sim_config: SimConfig | None = None,
                  train_config: TrainConfig | None = None,
                  archs=NN_ARCHS, hmm_runs: int = 100,
                  dataset: StageDataset | None = None,
                  split: BenchmarkSplit | None = None,
                  timings: dict | None = None) -> BenchmarkResult:
    """Full protocol on one corpus. A prebuilt dataset/split pair may be
    passed to reuse an existing preprocessing run."""
    sim_config = sim_config or SimConfig()
    config = train_config or desk_config(seed=sim_config.seed)
    if dataset is None:
        dataset, split, timings = build_benchmark_dataset(sim_config)
    timings = dict(timings or {})

    train_data = dataset.subset_years(dataset.train_years)
    monitor_rng = np.random.default_rng([config.seed, 4])
    monitor_year = int(monitor_rng.choice(dataset.train_years))

    reports: dict[str, MetricsReport] = {}
    weekly: dict[str, dict] = {}
    train_results: dict[str, TrainResult] = {}
    parameter_reports = []
    for arch in archs:
        parameter_reports.append(parameter_count_report(arch, seed=config.seed))
        model = build_model(arch, seed=config.seed)
        t0 = time.time()
        train_results[arch] = train(model, train_data, monitor_year, config)
        timings[f"train_{arch}"] = time.time() - t0
        t0 = time.time()
        reports[arch], weekly[arch] = evaluate(
            NNEstimator(model), dataset, dataset.test_years, label=arch)
        timings[f"evaluate_{arch}"] = time.time() - t0
        logger.info("%s: mean test NSE %.3f", arch,
                    reports[arch].mean_nse_across_stages())

    t0 = time.time()
    observations, occupancies, years = season_sequences(train_data)
    fit = em_fit(observations, occupancies, years, runs=hmm_runs,
                 seed=config.seed)
    timings["train_hmm"] = time.time() - t0
    t0 = time.time()
    reports["hmm"], weekly["hmm"] = evaluate(
        HmmEnsembleEstimator(fit.top(HMM_TEST_RUNS)), dataset,
        dataset.test_years, label="hmm")
    timings["evaluate_hmm"] = time.time() - t0
    logger.info("hmm: mean test NSE %.3f",
                reports["hmm"].mean_nse_across_stages())

    return BenchmarkResult(split, dataset, reports, weekly, train_results,
                           parameter_reports, timings)
