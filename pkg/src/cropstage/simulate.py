"""Mechanistic synthetic seasons: correlated weather, canopy, and ground-truth
stage occupancy at desk scale.

Temperature follows a seasonal sinusoid with field-level noise and a
north-south district gradient; rainfall is gamma-distributed on wet days;
each field advances through the six stages when its accumulated degree days
from planting (less a penalty per dry week, modeling moisture stress) cross
cultivar thresholds. Canopy fraction rises logistically after emergence,
plateaus, and declines through maturity, with observation noise and
occasional cloud dips that exercise the spike-rejection rule. All randomness
derives from named streams keyed by (seed, year, district, field, variable),
so reseeding or changing one anomaly knob never perturbs unrelated draws.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .preprocess import (DailyMet, DataError, FparSample, SoilProps,
                         agdd_start_date, compute_gdd, week_grid,
                         N_DATA_WEEKS, SeasonInputs)
from .metrics import N_STAGES

SIM_START = (3, 1)
SIM_END = (12, 20)

# variable codes for the per-field random streams
_TEMP, _RAIN, _SRAD, _FPAR, _CLOUD, _SOIL, _PLANT = range(7)

# anomaly profiles cycled over the held-out years, mirroring selection of
# test seasons by their deviation from the corpus mean; offsets sit around
# two interannual standard deviations, like the real outlier seasons
TEST_YEAR_PROFILES = (
    {"name": "fast_hot_dry", "temp_offset": 1.4, "rain_factor": 0.7,
     "planting_shift": -4.0},
    {"name": "delayed_cool_wet", "temp_offset": -1.3, "rain_factor": 1.35,
     "planting_shift": 6.0},
    {"name": "wet_spring", "temp_offset": -0.5, "rain_factor": 1.4,
     "planting_shift": 3.0},
    {"name": "cool_fall", "temp_offset": -1.0, "rain_factor": 0.95,
     "planting_shift": 0.0},
)

NEUTRAL_PROFILE = {"name": "neutral", "temp_offset": 0.0, "rain_factor": 1.0,
                   "planting_shift": 0.0}


@dataclass(frozen=True)
class SimConfig:
    seed: int = 42
    years: int = 17
    first_year: int = 2003
    n_asds: int = 9
    fields_per_asd: int = 16
    # planting-date distribution (day of year)
    planting_mean_doy: float = 115.0
    planting_sd_days: float = 4.0
    # cultivar degree-day thresholds from planting, one per stage transition
    stage_thresholds: tuple = (125.0, 800.0, 1000.0, 1400.0, 1750.0)
    # weather shape
    temp_base_c: float = 9.5
    temp_amplitude_c: float = 16.0
    temp_phase_doy: float = 105.0
    diurnal_half_range_c: float = 6.0
    temp_noise_sd_c: float = 1.2
    asd_temp_gradient_c: float = 0.8
    srad_base: float = 160.0
    srad_amplitude: float = 130.0
    srad_phase_doy: float = 81.0
    srad_noise_sd: float = 22.0
    wet_day_prob: float = 0.32
    rain_shape: float = 0.7
    rain_scale_mm: float = 11.0
    # moisture-stress delay: dry weeks slow the stage clock
    rain_deficit_mm: float = 8.0
    deficit_penalty_agdd: float = 12.0
    # canopy signal
    fpar_background: float = 0.05
    fpar_peak: float = 0.88
    fpar_residue: float = 0.10
    fpar_noise_sd: float = 0.015
    cloud_dip_prob: float = 0.06
    fpar_step_days: int = 4
    # year-to-year anomaly spread for training years
    year_temp_sd_c: float = 0.6
    year_rain_log_sd: float = 0.15
    year_planting_sd_days: float = 3.0

    def __post_init__(self):
        if len(self.stage_thresholds) != N_STAGES - 1:
            raise DataError("need one degree-day threshold per stage transition")
        if np.any(np.diff(self.stage_thresholds) <= 0):
            raise DataError("stage thresholds must be strictly increasing")
        if self.years < 1 or self.n_asds < 1 or self.fields_per_asd < 1:
            raise DataError("years, districts, and fields must be positive")


@dataclass
class FieldSeason:
    met: list
    fpar: list
    soil: SoilProps
    planting: dt.date
    transition_dates: list  # first date each stage threshold is crossed (or None)


@dataclass
class SimulatedSeason:
    year: int
    asd: int
    fields: list[FieldSeason]
    progress: np.ndarray  # [38, 6] cumulative reached-stage fractions

    def season_inputs(self) -> SeasonInputs:
        return SeasonInputs(
            self.year, self.asd,
            [f.met for f in self.fields],
            [f.fpar for f in self.fields],
            [f.soil for f in self.fields],
            self.progress,
        )


def _stream(config: SimConfig, year: int, asd: int, field_idx: int,
            variable: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, year, asd, field_idx, variable])


def _season_dates(year: int) -> list[dt.date]:
    start = dt.date(year, *SIM_START)
    stop = dt.date(year, *SIM_END)
    return [start + dt.timedelta(days=i) for i in range((stop - start).days + 1)]


def _doy(dates) -> np.ndarray:
    return np.array([d.timetuple().tm_yday for d in dates], dtype=float)


def simulate_field(config: SimConfig, year: int, asd: int, field_idx: int,
                   profile: dict) -> FieldSeason:
    dates = _season_dates(year)
    doy = _doy(dates)
    n = len(dates)

    asd_offset = config.asd_temp_gradient_c * (asd // 3 - 1)
    tmean = (config.temp_base_c + profile["temp_offset"] + asd_offset
             + config.temp_amplitude_c
             * np.sin(2 * math.pi * (doy - config.temp_phase_doy) / 365.0))
    tmean = tmean + _stream(config, year, asd, field_idx, _TEMP).normal(
        0.0, config.temp_noise_sd_c, n)
    tmax = tmean + config.diurnal_half_range_c
    tmin = tmean - config.diurnal_half_range_c

    rain_rng = _stream(config, year, asd, field_idx, _RAIN)
    wet = rain_rng.random(n) < config.wet_day_prob
    amounts = rain_rng.gamma(config.rain_shape,
                             config.rain_scale_mm * profile["rain_factor"], n)
    rain = np.where(wet, amounts, 0.0)

    srad_rng = _stream(config, year, asd, field_idx, _SRAD)
    srad = (config.srad_base + config.srad_amplitude
            * np.sin(2 * math.pi * (doy - config.srad_phase_doy) / 365.0)
            + srad_rng.normal(0.0, config.srad_noise_sd, n))
    srad = np.maximum(srad, 15.0)
    daylength = 43200.0 + 12600.0 * np.sin(2 * math.pi * (doy - 80.0) / 365.0)

    met = [DailyMet(dates[i], float(tmax[i]), float(tmin[i]), float(rain[i]),
                    float(srad[i]), float(daylength[i])) for i in range(n)]

    plant_rng = _stream(config, year, asd, field_idx, _PLANT)
    plant_doy = (config.planting_mean_doy + profile["planting_shift"]
                 + plant_rng.normal(0.0, config.planting_sd_days))
    plant_doy = int(round(np.clip(plant_doy, 95.0, 165.0)))
    planting = dt.date(year, 1, 1) + dt.timedelta(days=plant_doy - 1)

    gdd = np.array([compute_gdd(float(tmax[i]), float(tmin[i])) for i in range(n)])
    date_index = {d: i for i, d in enumerate(dates)}
    plant_i = date_index[planting]
    agdd_plant = np.zeros(n)
    agdd_plant[plant_i:] = np.cumsum(gdd[plant_i:])

    # dry weeks after planting slow the stage clock from the following Monday
    penalty = np.zeros(n)
    for monday, sunday in week_grid(year):
        if monday < planting or sunday not in date_index:
            continue
        week_rain = rain[date_index[monday]:date_index[sunday] + 1].sum()
        if week_rain < config.rain_deficit_mm:
            start = date_index[sunday] + 1
            if start < n:
                penalty[start:] += config.deficit_penalty_agdd
    effective = agdd_plant - penalty

    thresholds = np.asarray(config.stage_thresholds)
    transition_dates = []
    for thr in thresholds:
        crossed = np.nonzero(effective >= thr)[0]
        transition_dates.append(dates[crossed[0]] if crossed.size else None)

    fpar = _field_fpar(config, year, asd, field_idx, dates, effective)
    soil_rng = _stream(config, year, asd, field_idx, _SOIL)
    soil = SoilProps(
        float(np.exp(soil_rng.normal(math.log(9.0), 0.45))),
        float(np.clip(soil_rng.normal(1.45, 0.08), 1.1, 1.9)),
    )
    return FieldSeason(met, fpar, soil, planting, transition_dates)


def _field_fpar(config: SimConfig, year: int, asd: int, field_idx: int,
                dates, effective: np.ndarray) -> list:
    thr = config.stage_thresholds
    rise_mid = 0.5 * (thr[0] + thr[1])
    rise_width = (thr[1] - thr[0]) / 8.0

    canopy = config.fpar_background + (config.fpar_peak - config.fpar_background) \
        / (1.0 + np.exp(-(effective - rise_mid) / rise_width))
    senescence = np.clip((effective - thr[3]) / (thr[4] - thr[3]), 0.0, 1.0)
    canopy = canopy - (canopy - 1.8 * config.fpar_residue) * senescence
    canopy = np.where(effective >= thr[4], config.fpar_residue, canopy)

    noise_rng = _stream(config, year, asd, field_idx, _FPAR)
    cloud_rng = _stream(config, year, asd, field_idx, _CLOUD)
    samples = []
    for i in range(0, len(dates), config.fpar_step_days):
        value = canopy[i] + noise_rng.normal(0.0, config.fpar_noise_sd)
        if cloud_rng.random() < config.cloud_dip_prob:
            value -= cloud_rng.uniform(0.35, 0.55)
        samples.append(FparSample(dates[i], float(np.clip(value, 0.01, 1.0))))
    return samples


def simulate_season(config: SimConfig, year: int,
                    profile: dict | None = None) -> list[SimulatedSeason]:
    """All districts of one season year under an anomaly profile."""
    profile = dict(NEUTRAL_PROFILE if profile is None else profile)
    spans = week_grid(year)
    seasons = []
    for asd in range(config.n_asds):
        fields = [simulate_field(config, year, asd, f, profile)
                  for f in range(config.fields_per_asd)]
        progress = np.zeros((N_DATA_WEEKS, N_STAGES))
        progress[:, 0] = 1.0
        for w, (_, sunday) in enumerate(spans):
            for stage in range(1, N_STAGES):
                reached = [
                    f.transition_dates[stage - 1] is not None
                    and f.transition_dates[stage - 1] <= sunday
                    for f in fields
                ]
                progress[w, stage] = float(np.mean(reached))
        seasons.append(SimulatedSeason(year, asd, fields, progress))
    return seasons


@dataclass
class BenchmarkSplit:
    train_years: list[int]
    test_years: list[int]
    profiles: dict[int, dict] = field(default_factory=dict)


def make_benchmark(config: SimConfig) -> BenchmarkSplit:
    """Deterministic train/test split over the configured years. The held-out
    years sit at the end of the span and carry the fixed anomaly profiles
    (fast, delayed, wet, cool); training years get mild seeded year effects.
    Reseeding changes the weather draws but never the split structure."""
    if config.years < 5:
        raise DataError("need at least 5 years for a train/test split")
    n_test = 4 if config.years >= 17 else max(1, config.years // 4)
    years = [config.first_year + i for i in range(config.years)]
    train_years = years[:-n_test]
    test_years = years[-n_test:]

    profiles: dict[int, dict] = {}
    year_rng = np.random.default_rng([config.seed, 0xA11])
    for year in train_years:
        profiles[year] = {
            "name": "train",
            "temp_offset": float(year_rng.normal(0.0, config.year_temp_sd_c)),
            "rain_factor": float(np.exp(year_rng.normal(0.0, config.year_rain_log_sd))),
            "planting_shift": float(year_rng.normal(0.0, config.year_planting_sd_days)),
        }
    for i, year in enumerate(test_years):
        profiles[year] = dict(TEST_YEAR_PROFILES[i % len(TEST_YEAR_PROFILES)])
    return BenchmarkSplit(train_years, test_years, profiles)


def simulate_benchmark(config: SimConfig) -> tuple[list[SimulatedSeason], BenchmarkSplit]:
    """Simulate every year of the benchmark split."""
    split = make_benchmark(config)
    seasons: list[SimulatedSeason] = []
    for year in split.train_years + split.test_years:
        seasons.extend(simulate_season(config, year, split.profiles[year]))
    return seasons, split


def quick_config(**overrides) -> SimConfig:
    """Small configuration for tests and demos: 6 years, 3 districts."""
    base = dict(seed=7, years=6, n_asds=3, fields_per_asd=6)
    base.update(overrides)
    return SimConfig(**base)


def zero_noise_config(**overrides) -> SimConfig:
    """Fully deterministic weather: no noise, no rain, no stage-clock
    penalties, fixed planting; transitions are hand-computable."""
    base = dict(
        seed=1, years=1, n_asds=1, fields_per_asd=2,
        temp_noise_sd_c=0.0, srad_noise_sd=0.0, wet_day_prob=0.0,
        deficit_penalty_agdd=0.0, planting_sd_days=0.0,
        fpar_noise_sd=0.0, cloud_dip_prob=0.0,
        asd_temp_gradient_c=0.0,
        year_temp_sd_c=0.0, year_rain_log_sd=0.0, year_planting_sd_days=0.0,
    )
    base.update(overrides)
    return SimConfig(**base)
