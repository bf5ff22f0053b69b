"""Daily field records to scaled 39-week district feature blocks.

The weekly grid holds 38 Monday-Sunday data weeks (ISO weeks 13-50, spanning
the earliest planting and latest harvest) plus one leading pre-season slot,
so every season yields 39 in-season cutoff variants. Feature channels, in
order: fpar mean, fpar std, agdd mean, agdd std, srad mean, srad std, rain
median, rain std, conductivity mean, conductivity std, bulk density mean,
bulk density std. All statistics are across the fields of one district.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter

from .metrics import N_STAGES

N_WEEKS = 39
N_DATA_WEEKS = 38
FIRST_WEEK_OF_YEAR = 13
N_FEATURES = 12
N_LOCATIONS = 9

GDD_BASE_C = 8.0
GDD_CAP_C = 34.0
AGDD_START = (4, 8)  # April 8, before first planting

FPAR_GRADIENT_LIMIT = 0.3
TREND_HALF_WINDOW = 40
MAIN_HALF_WINDOW = 4
SG_DEGREE = 1
MAX_ENVELOPE_ITERATIONS = 10

CHANNELS = (
    "fpar_mean", "fpar_std", "agdd_mean", "agdd_std",
    "srad_mean", "srad_std", "rain_median", "rain_std",
    "cond_mean", "cond_std", "bd_mean", "bd_std",
)
ZSCORE_CHANNELS = (4, 5, 6, 7)            # solar radiation and rainfall
MINMAX_CHANNELS = (0, 1, 2, 3, 8, 9, 10, 11)  # fpar, agdd, and soil
SOIL_CHANNELS = (8, 9, 10, 11)            # constants, replicated across weeks
PAD_ZSCORE = 0.0
PAD_MINMAX = 0.5


class DataError(ValueError):
    """Input records violate the documented format or coverage rules."""


class FilterError(ValueError):
    """The smoothing filter was left with no usable samples."""


class ScalingError(ValueError):
    """Scaling statistics are degenerate (zero variance or zero range)."""


@dataclass(frozen=True)
class DailyMet:
    """One day of field meteorology."""

    date: dt.date
    tmax: float      # deg C
    tmin: float      # deg C
    rain: float      # mm/day
    srad: float      # W/m^2 over daylight
    daylength: float  # seconds

    def __post_init__(self):
        if self.tmax < self.tmin:
            raise DataError(f"{self.date}: tmax {self.tmax} below tmin {self.tmin}")
        if self.rain < 0:
            raise DataError(f"{self.date}: negative rainfall")
        if not 0 <= self.daylength <= 86400:
            raise DataError(f"{self.date}: daylength outside [0, 86400] s")


@dataclass(frozen=True)
class FparSample:
    date: dt.date
    fpar: float

    def __post_init__(self):
        if not 0.0 <= self.fpar <= 1.0:
            raise DataError(f"{self.date}: fpar outside [0, 1]")


@dataclass(frozen=True)
class SoilProps:
    sat_conductivity: float  # um/s
    bulk_density: float      # g/cm^3

    def __post_init__(self):
        if self.sat_conductivity <= 0 or self.bulk_density <= 0:
            raise DataError("soil properties must be positive")


def compute_gdd(tmax: float, tmin: float) -> float:
    """Growing degree days for one day: midpoint of the capped temperatures
    above the 8 C base, zero when tmax stays below the base.

    Both temperatures are clamped into [8, 34] before averaging so a single
    day contributes at most 26 degree-days and never a negative amount.
    """
    if tmax < tmin:
        raise DataError(f"tmax {tmax} below tmin {tmin}")
    if tmax < GDD_BASE_C:
        return 0.0
    capped_max = min(tmax, GDD_CAP_C)
    capped_min = min(max(tmin, GDD_BASE_C), GDD_CAP_C)
    return max(0.0, (capped_max + capped_min) / 2.0 - GDD_BASE_C)


def agdd_start_date(year: int) -> dt.date:
    return dt.date(year, *AGDD_START)


def accumulate_agdd(days, year: int) -> tuple[list[dt.date], np.ndarray]:
    """Running total of daily GDD from April 8 of the season year.

    ``days`` must be consecutive daily records covering April 8 onward;
    records before April 8 are ignored. Returns the covered dates and the
    non-decreasing accumulated series.
    """
    start = agdd_start_date(year)
    kept = [d for d in days if d.date >= start]
    if not kept or kept[0].date != start:
        raise DataError(f"met series must cover {start} onward")
    dates = []
    values = np.zeros(len(kept))
    total = 0.0
    for i, day in enumerate(kept):
        if i and (day.date - kept[i - 1].date).days != 1:
            raise DataError(f"gap in met series before {day.date}")
        total += compute_gdd(day.tmax, day.tmin)
        values[i] = total
        dates.append(day.date)
    return dates, values


def _savgol(values: np.ndarray, half_window: int, degree: int) -> np.ndarray:
    window = 2 * half_window + 1
    if window > values.size:
        window = values.size if values.size % 2 == 1 else values.size - 1
    if window <= degree:
        return values.copy()
    return savgol_filter(values, window, degree, mode="interp")


def reject_fpar_spikes(samples) -> list[FparSample]:
    """Drop samples that jump more than 0.3 from the previously retained
    value; the rule applies only before September (the earliest harvest),
    where such gradients are phenologically unrealistic."""
    kept: list[FparSample] = []
    for sample in samples:
        if kept and sample.date.month < 9:
            if abs(sample.fpar - kept[-1].fpar) > FPAR_GRADIENT_LIMIT:
                continue
        kept.append(sample)
    return kept


def sg_smooth_fpar(samples, cutoff_date: dt.date) -> tuple[list[dt.date], np.ndarray]:
    """Daily smoothed canopy series from sparse samples up to a cutoff date.

    Pipeline: spike rejection on the raw samples, linear interpolation to a
    daily grid, a wide degree-1 Savitzky-Golay pass for the long-term trend,
    then the iterative upper-envelope refit with the narrow window. The
    envelope loop replaces below-fit points with the fitted value and stops
    when the weighted fitting-effect index stops decreasing (at most 10
    rounds). Only samples at or before ``cutoff_date`` are used.
    """
    in_season = sorted(
        (s for s in samples if s.date <= cutoff_date), key=lambda s: s.date
    )
    if len(in_season) < 2:
        raise FilterError("need at least two samples before the cutoff")
    retained = reject_fpar_spikes(in_season)
    if len(retained) < 2:
        raise FilterError("all samples rejected by the gradient rule")

    first = retained[0].date
    sample_days = np.array([(s.date - first).days for s in retained], dtype=float)
    sample_vals = np.array([s.fpar for s in retained])
    # the daily grid runs through the cutoff; np.interp holds the last sample
    # value over the short tail between the final sample and the cutoff
    n_days = (cutoff_date - first).days + 1
    grid = np.arange(n_days, dtype=float)
    raw = np.interp(grid, sample_days, sample_vals)

    trend = _savgol(raw, TREND_HALF_WINDOW, SG_DEGREE)
    deviation = np.abs(raw - trend)
    max_dev = deviation.max()
    if max_dev > 0:
        weights = np.where(raw >= trend, 1.0, 1.0 - deviation / max_dev)
    else:
        weights = np.ones_like(raw)

    current = np.maximum(raw, trend)
    best_fit = None
    best_index = np.inf
    for _ in range(MAX_ENVELOPE_ITERATIONS):
        fitted = _savgol(current, MAIN_HALF_WINDOW, SG_DEGREE)
        effect = float(np.sum(np.abs(fitted - raw) * weights))
        if effect >= best_index:
            break
        best_index = effect
        best_fit = fitted
        current = np.maximum(raw, fitted)

    dates = [first + dt.timedelta(days=int(d)) for d in grid]
    return dates, best_fit


def week_grid(year: int) -> list[tuple[dt.date, dt.date]]:
    """Monday-Sunday spans of the 38 data weeks (ISO weeks 13-50)."""
    spans = []
    for week in range(FIRST_WEEK_OF_YEAR, FIRST_WEEK_OF_YEAR + N_DATA_WEEKS):
        monday = dt.date.fromisocalendar(year, week, 1)
        sunday = dt.date.fromisocalendar(year, week, 7)
        spans.append((monday, sunday))
    return spans


def weekly_aggregate(days, year: int, fpar_daily=None) -> dict[str, np.ndarray]:
    """Weekly channels for one field: rainfall summed to mm/week, solar
    radiation converted to MJ/m^2/week through day length, accumulated degree
    days sampled at week end, and canopy fraction averaged over the week.

    ``fpar_daily`` is an optional (dates, values) daily series; weeks without
    full canopy coverage are left NaN (the in-season truncation), while the
    met record must cover every week in full.
    """
    spans = week_grid(year)
    by_date = {}
    for day in days:
        by_date[day.date] = day
    agdd_dates, agdd_series = accumulate_agdd(days, year)
    agdd_by_date = dict(zip(agdd_dates, agdd_series))

    fpar_by_date = {}
    if fpar_daily is not None:
        fpar_by_date = dict(zip(fpar_daily[0], np.asarray(fpar_daily[1])))

    rain = np.zeros(N_DATA_WEEKS)
    srad = np.zeros(N_DATA_WEEKS)
    agdd = np.zeros(N_DATA_WEEKS)
    fpar = np.full(N_DATA_WEEKS, np.nan)
    for w, (monday, sunday) in enumerate(spans):
        week_days = []
        for offset in range(7):
            date = monday + dt.timedelta(days=offset)
            rec = by_date.get(date)
            if rec is None:
                raise DataError(f"missing met record for {date} (week {w + 1})")
            week_days.append(rec)
        rain[w] = sum(d.rain for d in week_days)
        srad[w] = sum(d.srad * d.daylength for d in week_days) * 1e-6
        agdd[w] = agdd_by_date.get(sunday, 0.0)
        week_fpar = [fpar_by_date[monday + dt.timedelta(days=o)]
                     for o in range(7)
                     if monday + dt.timedelta(days=o) in fpar_by_date]
        if len(week_fpar) == 7:
            fpar[w] = float(np.mean(week_fpar))
    return {"rain": rain, "srad": srad, "agdd": agdd, "fpar": fpar}


def asd_aggregate(fpar, agdd, srad, rain, cond, bd) -> np.ndarray:
    """District channels from per-field weekly series: mean and standard
    deviation across fields (median for rainfall), population std throughout.
    Returns [weeks, 12]; weeks where any field lacks canopy data stay NaN in
    the fpar channels."""
    agdd = np.atleast_2d(np.asarray(agdd, dtype=np.float64))
    if agdd.shape[0] < 1:
        raise DataError("district must contain at least one field")
    fpar = np.atleast_2d(np.asarray(fpar, dtype=np.float64))
    srad = np.atleast_2d(np.asarray(srad, dtype=np.float64))
    rain = np.atleast_2d(np.asarray(rain, dtype=np.float64))
    cond = np.asarray(cond, dtype=np.float64)
    bd = np.asarray(bd, dtype=np.float64)

    n_weeks = agdd.shape[1]
    block = np.full((n_weeks, N_FEATURES), np.nan)
    block[:, 0] = fpar.mean(axis=0)
    block[:, 1] = fpar.std(axis=0)
    block[:, 2] = agdd.mean(axis=0)
    block[:, 3] = agdd.std(axis=0)
    block[:, 4] = srad.mean(axis=0)
    block[:, 5] = srad.std(axis=0)
    block[:, 6] = np.median(rain, axis=0)
    block[:, 7] = rain.std(axis=0)
    block[:, 8] = cond.mean()
    block[:, 9] = cond.std()
    block[:, 10] = bd.mean()
    block[:, 11] = bd.std()
    return block


@dataclass
class ScalingStats:
    """Channel scaling fitted on training seasons only: z-score for solar
    radiation and rainfall, min-max for canopy, degree days, and soil."""

    mean: np.ndarray
    std: np.ndarray
    minimum: np.ndarray
    maximum: np.ndarray

    def apply(self, values: np.ndarray, channel: int) -> np.ndarray:
        if channel in ZSCORE_CHANNELS:
            return (values - self.mean[channel]) / self.std[channel]
        return (values - self.minimum[channel]) / (
            self.maximum[channel] - self.minimum[channel]
        )

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "ScalingStats":
        return cls(*(np.asarray(data[k], dtype=np.float64)
                     for k in ("mean", "std", "minimum", "maximum")))


def fit_scaling(blocks) -> ScalingStats:
    """Fit per-channel statistics over the in-season rows of full-season
    training blocks ([39, 12] each, data rows 1..38)."""
    stacked = np.concatenate([np.asarray(b)[1:, :] for b in blocks], axis=0)
    if np.isnan(stacked).any():
        raise ScalingError("training blocks must be fully observed")
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    minimum = stacked.min(axis=0)
    maximum = stacked.max(axis=0)
    for ch in ZSCORE_CHANNELS:
        if std[ch] == 0.0:
            raise ScalingError(f"zero variance in channel {CHANNELS[ch]}")
    for ch in MINMAX_CHANNELS:
        if maximum[ch] == minimum[ch]:
            raise ScalingError(f"zero range in channel {CHANNELS[ch]}")
    return ScalingStats(mean, std, minimum, maximum)


@dataclass
class SeasonFeatures:
    """One scaled in-season input block: 39 x 12 features, a one-hot district
    slot, and the cutoff index (0 = pre-season, 1..38 = data weeks)."""

    weeks: np.ndarray
    location: np.ndarray
    cutoff_week: int

    def __post_init__(self):
        self.weeks = np.asarray(self.weeks, dtype=np.float64)
        self.location = np.asarray(self.location, dtype=np.float64)
        if self.weeks.shape != (N_WEEKS, N_FEATURES):
            raise DataError(f"feature block must be [{N_WEEKS}, {N_FEATURES}]")
        one_hot = (self.location.shape == (N_LOCATIONS,)
                   and np.count_nonzero(self.location) == 1
                   and self.location.max() == 1.0)
        if not one_hot:
            raise DataError("location must be a one-hot vector of length 9")
        if not 0 <= self.cutoff_week <= N_DATA_WEEKS:
            raise DataError("cutoff week must lie in 0..38")


def standardize_and_pad(channels: np.ndarray, cutoff_week: int,
                        scaling: ScalingStats, location_index: int) -> SeasonFeatures:
    """Scale the observed rows of a [39, 12] channel block and replace
    everything after the cutoff with the pad values (0 for z-scored channels,
    0.5 for min-max channels). Soil channels are season constants and are
    scaled and replicated across all 39 rows instead of padded."""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.shape != (N_WEEKS, N_FEATURES):
        raise DataError(f"channel block must be [{N_WEEKS}, {N_FEATURES}]")
    scaled = np.empty_like(channels)
    for ch in range(N_FEATURES):
        pad = PAD_ZSCORE if ch in ZSCORE_CHANNELS else PAD_MINMAX
        if ch in SOIL_CHANNELS:
            soil_value = channels[1, ch]
            scaled[:, ch] = scaling.apply(np.full(N_WEEKS, soil_value), ch)
            continue
        scaled[:, ch] = pad
        if cutoff_week >= 1:
            observed = channels[1:cutoff_week + 1, ch]
            if np.isnan(observed).any():
                raise DataError(f"unobserved value before cutoff in {CHANNELS[ch]}")
            scaled[1:cutoff_week + 1, ch] = scaling.apply(observed, ch)
    location = np.zeros(N_LOCATIONS)
    location[location_index] = 1.0
    return SeasonFeatures(scaled, location, cutoff_week)


def occupancy_from_cumulative(cumulative) -> np.ndarray:
    """Per-stage occupancy from cumulative reached-stage fractions by
    differencing adjacent curves; the pre-emergence curve is identically 1."""
    cum = np.asarray(cumulative, dtype=np.float64)
    if cum.shape[-1] != N_STAGES:
        raise DataError(f"need {N_STAGES} cumulative stage fractions")
    if np.any(np.diff(cum) > 1e-9):
        raise DataError("cumulative stage fractions must be ordered")
    occ = np.empty_like(cum)
    occ[..., :-1] = cum[..., :-1] - cum[..., 1:]
    occ[..., -1] = cum[..., -1]
    occ = np.clip(occ, 0.0, 1.0)
    return occ / occ.sum(axis=-1, keepdims=True)


@dataclass
class SeasonInputs:
    """Raw per-district season: one met/fpar series and soil record per
    field, plus the weekly cumulative progress table [38, 6]."""

    year: int
    asd: int
    met: list          # list over fields of DailyMet lists
    fpar: list         # list over fields of FparSample lists
    soil: list[SoilProps]
    progress: np.ndarray

    def __post_init__(self):
        if not (len(self.met) == len(self.fpar) == len(self.soil)):
            raise DataError("met, fpar, and soil must cover the same fields")
        if len(self.met) == 0:
            raise DataError(f"year {self.year} asd {self.asd}: no fields")
        self.progress = np.asarray(self.progress, dtype=np.float64)
        if self.progress.shape != (N_DATA_WEEKS, N_STAGES):
            raise DataError("progress table must be [38, 6]")


class SeasonAssembler:
    """Caches the cutoff-independent weekly channels for one district season
    and recomputes the canopy channels for each in-season cutoff."""

    def __init__(self, inputs: SeasonInputs):
        self.inputs = inputs
        self.year = inputs.year
        self.asd = inputs.asd
        self.n_fields = len(inputs.met)
        self._spans = week_grid(inputs.year)
        static = [weekly_aggregate(days, inputs.year) for days in inputs.met]
        self._agdd = np.array([s["agdd"] for s in static])
        self._srad = np.array([s["srad"] for s in static])
        self._rain = np.array([s["rain"] for s in static])
        self._cond = np.array([s.sat_conductivity for s in inputs.soil])
        self._bd = np.array([s.bulk_density for s in inputs.soil])
        self._retained_fpar = [reject_fpar_spikes(sorted(f, key=lambda s: s.date))
                               for f in inputs.fpar]

    def _fpar_weekly(self, cutoff_week: int) -> np.ndarray:
        """Weekly canopy means per field, smoothed with data up to the
        cutoff week's Sunday only."""
        out = np.full((self.n_fields, N_DATA_WEEKS), np.nan)
        if cutoff_week < 1:
            return out
        sunday = self._spans[cutoff_week - 1][1]
        for i, samples in enumerate(self._retained_fpar):
            dates, values = sg_smooth_fpar(samples, sunday)
            daily = dict(zip(dates, values))
            for w in range(cutoff_week):
                monday = self._spans[w][0]
                week_vals = [daily[monday + dt.timedelta(days=o)]
                             for o in range(7)
                             if monday + dt.timedelta(days=o) in daily]
                if len(week_vals) == 7:
                    out[i, w] = float(np.mean(week_vals))
        return out

    def channels_for_cutoff(self, cutoff_week: int) -> np.ndarray:
        """Unscaled [39, 12] block; rows after the cutoff (and the pre-season
        row) stay NaN except for the constant soil channels."""
        fpar = self._fpar_weekly(cutoff_week)
        data = asd_aggregate(fpar, self._agdd, self._srad, self._rain,
                             self._cond, self._bd)
        block = np.full((N_WEEKS, N_FEATURES), np.nan)
        block[1:, :] = data
        for ch in SOIL_CHANNELS:
            block[0, ch] = block[1, ch]
        if cutoff_week < N_DATA_WEEKS:
            for ch in range(N_FEATURES):
                if ch not in SOIL_CHANNELS:
                    block[cutoff_week + 1:, ch] = np.nan
        return block

    def full_channels(self) -> np.ndarray:
        return self.channels_for_cutoff(N_DATA_WEEKS)

    def occupancy(self) -> np.ndarray:
        """True stage occupancy [39, 6]; the pre-season row is entirely
        pre-emergence."""
        occ = np.zeros((N_WEEKS, N_STAGES))
        occ[0, 0] = 1.0
        occ[1:, :] = occupancy_from_cumulative(self.inputs.progress)
        return occ


@dataclass
class StageDataset:
    """Model-ready in-season items plus the scaling and district weights
    needed for evaluation."""

    features: np.ndarray    # [n, 39, 12]
    locations: np.ndarray   # [n, 9]
    targets: np.ndarray     # [n, 6]
    cutoffs: np.ndarray     # [n]
    years: np.ndarray       # [n]
    asds: np.ndarray        # [n]
    field_counts: np.ndarray  # [9]
    scaling: ScalingStats
    train_years: list[int] = field(default_factory=list)
    test_years: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset_years(self, years) -> "StageDataset":
        mask = np.isin(self.years, list(years))
        return StageDataset(
            self.features[mask], self.locations[mask], self.targets[mask],
            self.cutoffs[mask], self.years[mask], self.asds[mask],
            self.field_counts, self.scaling, self.train_years, self.test_years,
        )


def build_dataset(season_inputs, train_years, scaling: ScalingStats | None = None,
                  test_years=None) -> StageDataset:
    """All 39 cutoff variants for every district season, scaled with
    statistics fitted on the training years only."""
    train_years = sorted(train_years)
    assemblers = [SeasonAssembler(si) for si in season_inputs]
    if scaling is None:
        train_blocks = [a.full_channels() for a in assemblers
                        if a.year in train_years]
        if not train_blocks:
            raise DataError("no training seasons available to fit scaling")
        scaling = fit_scaling(train_blocks)

    features, locations, targets = [], [], []
    cutoffs, years, asds = [], [], []
    field_counts = np.zeros(N_LOCATIONS)
    for asm in assemblers:
        field_counts[asm.asd] = asm.n_fields
        occupancy = asm.occupancy()
        for cutoff in range(N_WEEKS):
            block = asm.channels_for_cutoff(cutoff)
            feats = standardize_and_pad(block, cutoff, scaling, asm.asd)
            features.append(feats.weeks)
            locations.append(feats.location)
            targets.append(occupancy[cutoff])
            cutoffs.append(cutoff)
            years.append(asm.year)
            asds.append(asm.asd)

    return StageDataset(
        np.array(features), np.array(locations), np.array(targets),
        np.array(cutoffs), np.array(years), np.array(asds),
        field_counts, scaling, list(train_years),
        sorted(test_years) if test_years else [],
    )
