import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cropstage import preprocess as pp
from cropstage.preprocess import (DailyMet, DataError, FilterError, FparSample,
                                  ScalingError, SoilProps, accumulate_agdd,
                                  asd_aggregate, build_dataset, compute_gdd,
                                  fit_scaling, occupancy_from_cumulative,
                                  reject_fpar_spikes, sg_smooth_fpar,
                                  standardize_and_pad, week_grid,
                                  weekly_aggregate, SeasonInputs)

YEAR = 2010


def make_met_series(year=YEAR, start=(3, 1), end=(12, 20), tmax=26.0, tmin=14.0,
                    rain=2.0, srad=200.0, daylength=45000.0):
    days = []
    date = dt.date(year, *start)
    stop = dt.date(year, *end)
    while date <= stop:
        days.append(DailyMet(date, tmax, tmin, rain, srad, daylength))
        date += dt.timedelta(days=1)
    return days


def logistic_fpar_samples(year=YEAR, step=4, noise=None, seed=5):
    samples = []
    date = dt.date(year, 3, 5)
    stop = dt.date(year, 11, 25)
    rng = np.random.default_rng(seed)
    while date <= stop:
        doy = date.timetuple().tm_yday
        value = 0.05 + 0.8 / (1.0 + math.exp(-(doy - 170) / 12.0))
        if doy > 280:
            value = max(0.08, value - (doy - 280) * 0.01)
        if noise:
            value += rng.normal(0, noise)
        samples.append(FparSample(date, float(np.clip(value, 0.0, 1.0))))
        date += dt.timedelta(days=step)
    return samples


def ramp_progress():
    """Ordered cumulative stage curves over the 38 data weeks."""
    weeks = np.arange(38, dtype=float)

    def ramp(start, length):
        return np.clip((weeks - start) / length, 0.0, 1.0)

    cum = np.stack([
        np.ones(38), ramp(6, 5), ramp(15, 4), ramp(19, 5), ramp(26, 5), ramp(30, 6),
    ], axis=1)
    return cum


# ---------------------------------------------------------------- degree days

def test_gdd_hand_cases():
    assert compute_gdd(30.0, 10.0) == 12.0
    assert compute_gdd(6.0, 2.0) == 0.0
    assert compute_gdd(40.0, 20.0) == 19.0


def test_gdd_ambiguous_middle_case_floors_tmin():
    # tmin below base but tmax above it: tmin is floored at the base
    assert compute_gdd(20.0, 2.0) == (min(20.0, 34.0) + 8.0) / 2.0 - 8.0


def test_gdd_rejects_inverted_temperatures():
    with pytest.raises(DataError):
        compute_gdd(5.0, 10.0)


@given(st.floats(-40, 55), st.floats(0, 40))
@settings(max_examples=300, deadline=None)
def test_gdd_bounds(tmax, spread):
    tmin = tmax - spread
    value = compute_gdd(tmax, tmin)
    assert 0.0 <= value <= 26.0


def test_agdd_all_cold_days_zero():
    days = make_met_series(tmax=6.0, tmin=0.0)
    _, series = accumulate_agdd(days, YEAR)
    np.testing.assert_array_equal(series, np.zeros_like(series))


def test_agdd_running_sum_hand_case():
    start = dt.date(YEAR, 4, 8)
    days = [
        DailyMet(start, 30.0, 10.0, 0.0, 100.0, 40000.0),                 # gdd 12
        DailyMet(start + dt.timedelta(days=1), 40.0, 20.0, 0.0, 100.0, 40000.0),  # 19
    ]
    _, series = accumulate_agdd(days, YEAR)
    np.testing.assert_allclose(series, [12.0, 31.0])


def test_agdd_requires_april_coverage_and_no_gaps():
    days = make_met_series(start=(5, 1))
    with pytest.raises(DataError):
        accumulate_agdd(days, YEAR)
    days = make_met_series()
    broken = days[:50] + days[52:]
    with pytest.raises(DataError):
        accumulate_agdd(broken, YEAR)


@given(st.lists(st.tuples(st.floats(-10, 45), st.floats(0, 25)), min_size=5,
                max_size=40))
@settings(max_examples=100, deadline=None)
def test_agdd_non_decreasing(temp_pairs):
    start = dt.date(YEAR, 4, 8)
    days = [DailyMet(start + dt.timedelta(days=i), tmax, tmax - spread,
                     0.0, 100.0, 40000.0)
            for i, (tmax, spread) in enumerate(temp_pairs)]
    _, series = accumulate_agdd(days, YEAR)
    assert np.all(np.diff(series) >= 0.0)


# ------------------------------------------------------------------ SG filter

def test_sg_affine_series_reproduced_exactly():
    start = dt.date(YEAR, 4, 2)
    samples = [FparSample(start + dt.timedelta(days=4 * i), 0.2 + 0.004 * 4 * i)
               for i in range(40)]
    cutoff = samples[-1].date
    dates, values = sg_smooth_fpar(samples, cutoff)
    expected = 0.2 + 0.004 * np.arange((cutoff - start).days + 1)
    assert dates[0] == start and dates[-1] == cutoff
    np.testing.assert_allclose(values, expected, atol=1e-9)


def test_sg_june_spike_excluded():
    samples = logistic_fpar_samples()
    spike_date = dt.date(YEAR, 6, 10)
    clean = {s.date: s.fpar for s in samples}
    base = np.interp(spike_date.timetuple().tm_yday,
                     [s.date.timetuple().tm_yday for s in samples],
                     [s.fpar for s in samples])
    spiked = sorted(samples + [FparSample(spike_date, min(1.0, base + 0.5))],
                    key=lambda s: s.date)

    retained = reject_fpar_spikes(spiked)
    assert all(s.date != spike_date for s in retained)
    assert len(retained) == len(samples)

    # smoothed output is unaffected by the rejected spike
    cutoff = dt.date(YEAR, 8, 1)
    _, with_spike = sg_smooth_fpar(spiked, cutoff)
    _, without = sg_smooth_fpar(sorted(samples, key=lambda s: s.date), cutoff)
    np.testing.assert_allclose(with_spike, without, atol=1e-12)


def test_sg_autumn_drops_are_kept():
    # fast gradients after September 1 are real harvest signals, not noise
    start = dt.date(YEAR, 9, 2)
    samples = [FparSample(start, 0.8), FparSample(start + dt.timedelta(days=4), 0.3)]
    assert len(reject_fpar_spikes(samples)) == 2


def test_sg_causality_rerun_oracle():
    samples = logistic_fpar_samples(noise=0.01)
    cutoff = dt.date(YEAR, 8, 15)
    dates_a, values_a = sg_smooth_fpar(samples, cutoff)
    dates_b, values_b = sg_smooth_fpar(samples, dt.date(YEAR, 11, 20))

    # values more than one trend window before the cutoff are unchanged by
    # the extra future data
    horizon = (cutoff - dates_a[0]).days - (2 * pp.TREND_HALF_WINDOW + 1)
    assert horizon > 20
    np.testing.assert_allclose(values_a[:horizon], values_b[:horizon], atol=1e-9)


def test_sg_needs_two_samples():
    with pytest.raises(FilterError):
        sg_smooth_fpar([FparSample(dt.date(YEAR, 5, 1), 0.3)], dt.date(YEAR, 9, 1))


def test_sg_uses_only_data_before_cutoff():
    samples = logistic_fpar_samples()
    cutoff = dt.date(YEAR, 7, 1)
    later = [FparSample(s.date, min(1.0, s.fpar)) for s in samples]
    later_modified = [
        FparSample(s.date, 0.99) if s.date > cutoff else s for s in later
    ]
    _, a = sg_smooth_fpar(samples, cutoff)
    _, b = sg_smooth_fpar(later_modified, cutoff)
    np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------------ weekly agg

def test_weekly_srad_unit_conversion():
    days = make_met_series(srad=300.0, daylength=40000.0)
    weekly = weekly_aggregate(days, YEAR)
    np.testing.assert_allclose(weekly["srad"],
                               np.full(38, 7 * 300.0 * 40000.0 * 1e-6))


def test_weekly_zero_rain():
    days = make_met_series(rain=0.0)
    weekly = weekly_aggregate(days, YEAR)
    np.testing.assert_array_equal(weekly["rain"], np.zeros(38))


def test_weekly_agdd_non_decreasing_and_week_end_sampled():
    days = make_met_series()
    weekly = weekly_aggregate(days, YEAR)
    assert np.all(np.diff(weekly["agdd"]) >= 0.0)
    # week containing April 8 onward accumulates 12 deg-days per day
    spans = week_grid(YEAR)
    start = dt.date(YEAR, 4, 8)
    for w, (monday, sunday) in enumerate(spans):
        if sunday >= start:
            expected = ((sunday - start).days + 1) * compute_gdd(26.0, 14.0)
            np.testing.assert_allclose(weekly["agdd"][w], expected)
            break


def test_weekly_missing_day_raises():
    days = make_met_series()
    del days[40]
    with pytest.raises(DataError):
        weekly_aggregate(days, YEAR)


def test_week_grid_shape():
    spans = week_grid(YEAR)
    assert len(spans) == 38
    assert spans[0][0].isocalendar()[1] == 13
    assert spans[-1][0].isocalendar()[1] == 50
    for monday, sunday in spans:
        assert (sunday - monday).days == 6
        assert monday.weekday() == 0


# -------------------------------------------------------------- district stats

def test_asd_single_field_stats():
    fpar = np.full((1, 4), 0.6)
    agdd = np.array([[10.0, 20.0, 30.0, 40.0]])
    srad = np.full((1, 4), 150.0)
    rain = np.full((1, 4), 3.0)
    block = asd_aggregate(fpar, agdd, srad, rain, [9.0], [1.4])
    np.testing.assert_array_equal(block[:, 1], np.zeros(4))   # fpar std
    np.testing.assert_array_equal(block[:, 3], np.zeros(4))   # agdd std
    np.testing.assert_array_equal(block[:, 2], agdd[0])
    np.testing.assert_array_equal(block[:, 9], np.zeros(4))   # cond std


def test_asd_rain_median_hand_case():
    rain = np.array([[0.0], [10.0]])
    ones = np.ones((2, 1))
    block = asd_aggregate(ones * 0.5, ones, ones, rain, [1.0, 2.0], [1.0, 1.5])
    assert block[0, 6] == 5.0   # median
    assert block[0, 7] == 5.0   # population std


def test_asd_permutation_invariance():
    rng = np.random.default_rng(173)
    fpar = rng.uniform(0, 1, (5, 6))
    agdd = rng.uniform(0, 100, (5, 6))
    srad = rng.uniform(50, 250, (5, 6))
    rain = rng.uniform(0, 30, (5, 6))
    cond = rng.uniform(1, 20, 5)
    bd = rng.uniform(1, 2, 5)
    base = asd_aggregate(fpar, agdd, srad, rain, cond, bd)
    perm = rng.permutation(5)
    shuffled = asd_aggregate(fpar[perm], agdd[perm], srad[perm], rain[perm],
                             cond[perm], bd[perm])
    np.testing.assert_allclose(base, shuffled, atol=1e-12)


def test_asd_empty_district_rejected():
    with pytest.raises(DataError):
        asd_aggregate(np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3)),
                      np.empty((0, 3)), [], [])


# ------------------------------------------------------------------- scaling

def synthetic_blocks(rng, n=4):
    blocks = []
    for _ in range(n):
        block = np.full((39, 12), np.nan)
        block[1:, :] = rng.uniform(0.5, 1.5, (38, 12))
        block[1:, 2] = np.cumsum(rng.uniform(0, 30, 38))  # agdd-like
        blocks.append(block)
    return blocks


def test_scaling_zscore_and_minmax_anchors():
    rng = np.random.default_rng(179)
    blocks = synthetic_blocks(rng)
    stats = fit_scaling(blocks)
    ch_z = 4
    assert abs(stats.apply(np.array([stats.mean[ch_z]]), ch_z)[0]) <= 1e-12
    ch_m = 0
    assert abs(stats.apply(np.array([stats.maximum[ch_m]]), ch_m)[0] - 1.0) <= 1e-12
    assert abs(stats.apply(np.array([stats.minimum[ch_m]]), ch_m)[0]) <= 1e-12


def test_scaling_degenerate_rejected():
    rng = np.random.default_rng(181)
    blocks = synthetic_blocks(rng)
    for b in blocks:
        b[1:, 4] = 7.0  # constant z-score channel
    with pytest.raises(ScalingError):
        fit_scaling(blocks)


def test_standardize_and_pad_cutoff_zero_fully_padded():
    rng = np.random.default_rng(191)
    blocks = synthetic_blocks(rng)
    stats = fit_scaling(blocks)
    block = blocks[0].copy()
    feats = standardize_and_pad(block, 0, stats, 3)
    for ch in range(12):
        if ch in pp.SOIL_CHANNELS:
            continue
        expected = pp.PAD_ZSCORE if ch in pp.ZSCORE_CHANNELS else pp.PAD_MINMAX
        np.testing.assert_array_equal(feats.weeks[:, ch], np.full(39, expected))
    assert feats.location[3] == 1.0 and feats.location.sum() == 1.0


def test_standardize_and_pad_padded_region_and_idempotence():
    rng = np.random.default_rng(193)
    blocks = synthetic_blocks(rng)
    stats = fit_scaling(blocks)
    cutoff = 12
    feats = standardize_and_pad(blocks[0], cutoff, stats, 0)
    for ch in range(12):
        if ch in pp.SOIL_CHANNELS:
            np.testing.assert_allclose(feats.weeks[:, ch],
                                       np.full(39, feats.weeks[1, ch]))
            continue
        pad = pp.PAD_ZSCORE if ch in pp.ZSCORE_CHANNELS else pp.PAD_MINMAX
        np.testing.assert_array_equal(feats.weeks[cutoff + 1:, ch],
                                      np.full(38 - cutoff, pad))
        assert feats.weeks[0, ch] == pad
    # reapplying the pad rule leaves pad cells untouched
    again = standardize_and_pad(blocks[0], cutoff, stats, 0)
    np.testing.assert_array_equal(feats.weeks[cutoff + 1:],
                                  again.weeks[cutoff + 1:])


def test_occupancy_from_cumulative():
    occ = occupancy_from_cumulative([1.0, 0.6, 0.3, 0.1, 0.0, 0.0])
    np.testing.assert_allclose(occ, [0.4, 0.3, 0.2, 0.1, 0.0, 0.0], atol=1e-12)
    assert abs(occ.sum() - 1.0) <= 1e-12
    with pytest.raises(DataError):
        occupancy_from_cumulative([1.0, 0.2, 0.5, 0.1, 0.0, 0.0])


# --------------------------------------------------------------- full dataset

def varying_met_series(rng, year=YEAR):
    days = []
    date = dt.date(year, 3, 1)
    stop = dt.date(year, 12, 20)
    while date <= stop:
        doy = date.timetuple().tm_yday
        tmean = 10.0 + 14.0 * math.sin(2 * math.pi * (doy - 105) / 365.0)
        tmean += rng.normal(0, 1.0)
        rain = float(rng.gamma(0.7, 6.0)) if rng.random() < 0.3 else 0.0
        srad = max(20.0, 160 + 120 * math.sin(2 * math.pi * (doy - 80) / 365.0)
                   + rng.normal(0, 20))
        daylength = 43200 + 12600 * math.sin(2 * math.pi * (doy - 80) / 365.0)
        days.append(DailyMet(date, tmean + 6, tmean - 6, rain, srad, daylength))
        date += dt.timedelta(days=1)
    return days


def make_season_inputs(year=YEAR, asd=0, n_fields=2):
    rng = np.random.default_rng(197 + asd)
    met, fpar, soil = [], [], []
    for i in range(n_fields):
        met.append(varying_met_series(rng, year=year))
        fpar.append(logistic_fpar_samples(year=year, noise=0.005, seed=50 + 10 * asd + i))
        spread = 1.0 + 0.4 * asd
        soil.append(SoilProps(8.0 + i * spread + 0.7 * asd,
                              1.3 + 0.05 * i * spread + 0.02 * asd))
    return SeasonInputs(year, asd, met, fpar, soil, ramp_progress())


@pytest.fixture(scope="module")
def tiny_dataset():
    # soil channels are season constants, so min-max scaling needs at least
    # two districts; fit on two and build the single-season set with it
    from cropstage.preprocess import SeasonAssembler
    seasons = [make_season_inputs(asd=0), make_season_inputs(asd=1)]
    stats = fit_scaling([SeasonAssembler(s).full_channels() for s in seasons])
    return build_dataset([seasons[0]], train_years=[YEAR], scaling=stats)


def test_dataset_single_season_has_39_items(tiny_dataset):
    assert len(tiny_dataset) == 39
    assert tiny_dataset.features.shape == (39, 39, 12)
    assert tiny_dataset.locations.shape == (39, 9)
    assert tiny_dataset.targets.shape == (39, 6)


def test_dataset_padding_consistent_with_cutoff(tiny_dataset):
    for i in range(len(tiny_dataset)):
        cutoff = tiny_dataset.cutoffs[i]
        block = tiny_dataset.features[i]
        for ch in range(12):
            if ch in pp.SOIL_CHANNELS:
                continue
            pad = pp.PAD_ZSCORE if ch in pp.ZSCORE_CHANNELS else pp.PAD_MINMAX
            np.testing.assert_array_equal(block[cutoff + 1:, ch],
                                          np.full(38 - cutoff, pad))


def test_dataset_targets_are_distributions(tiny_dataset):
    sums = tiny_dataset.targets.sum(axis=1)
    np.testing.assert_allclose(sums, np.ones(39), atol=1e-9)
    np.testing.assert_array_equal(tiny_dataset.targets[0],
                                  [1.0, 0.0, 0.0, 0.0, 0.0, 0.0])


def test_dataset_cardinality_two_seasons():
    seasons = [make_season_inputs(asd=0), make_season_inputs(asd=1)]
    ds = build_dataset(seasons, train_years=[YEAR])
    assert len(ds) == 2 * 39
