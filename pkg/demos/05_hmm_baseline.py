#!/usr/bin/env python3
"""The hidden-Markov baseline.

A six-state left-to-right chain with diagonal-Gaussian emissions over the
weekly feature channels. Fitting runs EM many times, each with a random
4-year validation subset and a jittered statistics-informed start; estimates
average the posterior marginals of the best runs.
"""

import numpy as np

from cropstage import build_dataset
from cropstage.hmm import (em_fit, forward_backward, hmm_estimate,
                           season_sequences)
from cropstage.metrics import STAGES
from cropstage.simulate import quick_config, simulate_benchmark

config = quick_config()
seasons, split = simulate_benchmark(config)
dataset = build_dataset([s.season_inputs() for s in seasons],
                        train_years=split.train_years,
                        test_years=split.test_years)

observations, occupancies, years = season_sequences(
    dataset.subset_years(split.train_years))
print(f"fitting on {len(observations)} full-season sequences "
      f"({len(set(years))} years)")

fit = em_fit(observations, occupancies, years, runs=20, val_years=2, seed=0)
best = fit.best()
print(f"\n{len(fit.models)} EM runs; best validation log-likelihood "
      f"{fit.val_logliks.max():.1f}")
print("fitted transition matrix (left-to-right, single-step):")
for i, row in enumerate(best.transitions):
    print(f"  {STAGES[i][:10]:<10} " + " ".join(f"{v:5.2f}" for v in row))

# posterior marginals through one held-out season
test_items = dataset.subset_years(split.test_years[:1])
full = int(np.nonzero((test_items.cutoffs == 38) & (test_items.asds == 0))[0][0])
features = test_items.features[full]
gamma, _, loglik = forward_backward(best, features[1:39])
print(f"\nheld-out season log-likelihood {loglik:.1f}")
print("posterior stage marginals at selected cutoffs (10-run ensemble):")
for cutoff in (0, 8, 16, 24, 32, 38):
    est = hmm_estimate(fit.top(10), features, cutoff)
    truth_idx = int(np.nonzero((test_items.cutoffs == cutoff)
                               & (test_items.asds == 0))[0][0])
    truth = test_items.targets[truth_idx]
    print(f"  week {cutoff:>2}: est {np.round(est, 2)}  true {np.round(truth, 2)}")
