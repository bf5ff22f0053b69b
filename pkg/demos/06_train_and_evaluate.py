#!/usr/bin/env python3
"""Train one estimator and read its report.

The dense funnel trains in under a minute on a small corpus: KL-divergence
loss against the weekly occupancy targets, Adam, early stopping on one
held-out monitor year, best-weights restoration. Evaluation aggregates
district estimates to state level with field-count weights and scores the
weekly series with per-stage efficiency and per-week cosine similarity.
"""

import numpy as np

from cropstage import build_dataset, build_model
from cropstage.metrics import STAGES
from cropstage.simulate import quick_config, simulate_benchmark
from cropstage.training import (NNEstimator, TrainConfig, evaluate,
                                export_activations, train)

config = quick_config()
seasons, split = simulate_benchmark(config)
dataset = build_dataset([s.season_inputs() for s in seasons],
                        train_years=split.train_years,
                        test_years=split.test_years)
train_data = dataset.subset_years(split.train_years)

model = build_model("dense", seed=0)
print(f"dense estimator: {model.n_parameters():,} trainable parameters")

settings = TrainConfig(max_epochs=20, patience=5, learning_rate=2e-3,
                       batch_size=64, seed=0)
result = train(model, train_data, monitor_year=split.train_years[-1],
               config=settings)
print(f"stopped at epoch {result.stopped_epoch}, "
      f"best monitor loss at epoch {result.best_epoch}")
for epoch, train_loss, monitor_loss in result.history[:5]:
    print(f"  epoch {epoch:>2}: train {train_loss:.4f}  monitor {monitor_loss:.4f}")

report, weekly = evaluate(NNEstimator(model), dataset, split.test_years,
                          label="dense")
print("\nper-stage NSE on the held-out years:")
for stage in STAGES:
    value = report.nse_mean[stage]
    print(f"  {stage:<14} {'n/a' if value is None else f'{value:.3f}'}")
print(f"mean across stages: {report.mean_nse_across_stages():.3f}")

year = split.test_years[0]
cs = report.per_year[year]["cs_weekly"]
print(f"\nweek-by-week cosine similarity, {year}: "
      f"min {min(cs):.3f} at week {int(np.argmin(cs))}, "
      f"median {np.median(cs):.3f}")

# activations feeding the softmax layer, with a 2-component quick look
export = export_activations(model, dataset.subset_years(split.test_years),
                            "pre_softmax", "/tmp/cropstage_demo_activations")
print(f"\nexported {export.n_rows} x {export.width} activations "
      f"-> {export.activations_path}")
print(f"quick-look explained variance: {export.explained.round(3)}")
