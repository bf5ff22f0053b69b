#!/usr/bin/env python3
"""From raw field records to model-ready feature blocks.

Every district season becomes 39 in-season items: one per cutoff week, each
a 39x12 block where the 12 channels are district statistics (canopy mean and
spread, accumulated degree days, solar energy, rainfall, soil constants) and
everything after the cutoff is replaced by the pad values the models were
trained to read as "not observed yet".
"""

import numpy as np

from cropstage import build_dataset
from cropstage.preprocess import CHANNELS, SOIL_CHANNELS, ZSCORE_CHANNELS
from cropstage.simulate import quick_config, simulate_benchmark

config = quick_config()
seasons, split = simulate_benchmark(config)
print(f"corpus: {config.years} years x {config.n_asds} districts, "
      f"train {split.train_years}, test {split.test_years}")

dataset = build_dataset([s.season_inputs() for s in seasons],
                        train_years=split.train_years,
                        test_years=split.test_years)
print(f"dataset: {len(dataset)} items "
      f"({config.years} x {config.n_asds} x 39 cutoff variants)")

# one item, mid-season cutoff
idx = int(np.nonzero((dataset.years == split.test_years[0])
                     & (dataset.asds == 0) & (dataset.cutoffs == 20))[0][0])
block = dataset.features[idx]
print(f"\nitem {idx}: year {dataset.years[idx]}, district {dataset.asds[idx]}, "
      f"cutoff week {dataset.cutoffs[idx]}")
print(f"location one-hot: {dataset.locations[idx].astype(int)}")
print(f"target occupancy: {dataset.targets[idx].round(3)}")

print("\nchannel             observed w1..w20 mean   padded w21..w38 value")
for ch, name in enumerate(CHANNELS):
    pad = block[25, ch]
    seen = block[1:21, ch].mean()
    kind = ("z-score" if ch in ZSCORE_CHANNELS
            else "soil const" if ch in SOIL_CHANNELS else "min-max")
    print(f"{name:<12} {kind:>10}  {seen:20.3f}   {pad:18.3f}")

# the padded region carries no information from the future
later = dataset.features[idx][21:, :8]
unique = {float(v) for v in np.unique(later)}
print(f"\ndistinct values in the padded time-varying region: {sorted(unique)}")
