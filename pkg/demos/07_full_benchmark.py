#!/usr/bin/env python3
"""The paper-shaped benchmark: 17 years, 9 districts, 13/4 split, seed 42.

Runs the whole protocol (simulate, preprocess to 5967 items, train the three
networks, fit the 100-run HMM ensemble, evaluate on the four anomalous
held-out years) in roughly a quarter hour on a desktop CPU. The same run
backs the acceptance suite's benchmark criterion.

Equivalent command-line session:

    cropstage simulate --out corpus --seed 42
    cropstage preprocess corpus --out dataset
    cropstage train --arch dgnn dataset --out fit_dgnn --config desk.json
    cropstage train --arch hmm dataset --out fit_hmm
    cropstage evaluate fit_dgnn/model.ckpt dataset --out eval_dgnn
"""

from cropstage.benchmark import run_benchmark
from cropstage.metrics import STAGES

result = run_benchmark()

print(f"\ncorpus: train {result.split.train_years}")
print(f"        test  {result.split.test_years} "
      f"({[result.split.profiles[y]['name'] for y in result.split.test_years]})")
print(f"dataset: {len(result.dataset)} items\n")

print("trainable parameters (delta vs published):")
for report in result.parameter_reports:
    print(f"  {report['arch']:<11} {report['parameters']:>9,} "
          f"({report['delta']:+,})")

print("\nmean test NSE per stage:")
header = "  ".join(f"{s[:7]:>8}" for s in STAGES)
print(f"  {'model':<11} {header}     mean")
for label in ("hmm", "dense", "sequential", "dgnn"):
    report = result.reports[label]
    cells = "  ".join(
        f"{report.nse_mean[s]:8.3f}" if report.nse_mean[s] is not None
        else f"{'n/a':>8}" for s in STAGES)
    print(f"  {label:<11} {cells}   {report.mean_nse_across_stages():6.3f}")

print("\ntimings:")
for step, seconds in result.timings.items():
    print(f"  {step:<18} {seconds:7.1f}s")
print(f"  {'total':<18} {result.total_seconds():7.1f}s")
