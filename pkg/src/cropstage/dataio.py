"""Disk formats: the simulated-corpus CSV layout and the dataset container.

Corpus layout, one directory per season year and district::

    <root>/split.json                     train/test year lists
    <root>/year_<YYYY>/asd_<K>/met_<F>.csv      date,tmax,tmin,rain,srad,daylength
    <root>/year_<YYYY>/asd_<K>/fpar_<F>.csv     date,fpar
    <root>/year_<YYYY>/asd_<K>/soil.csv         cond,bd (one row per field)
    <root>/year_<YYYY>/asd_<K>/progress.csv     week + six cumulative stage %

Floats are written with ``repr`` so rereading reproduces them bit for bit.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import pathlib

import numpy as np

from .metrics import STAGES
from .preprocess import (DailyMet, DataError, FparSample, ScalingStats,
                         SeasonInputs, SoilProps, StageDataset,
                         FIRST_WEEK_OF_YEAR, N_DATA_WEEKS)

DATASET_FORMAT_VERSION = 1

MET_COLUMNS = ("date", "tmax", "tmin", "rain", "srad", "daylength")
FPAR_COLUMNS = ("date", "fpar")
SOIL_COLUMNS = ("cond", "bd")
PROGRESS_COLUMNS = ("week",) + STAGES


def _year_dir(root, year: int) -> pathlib.Path:
    return pathlib.Path(root) / f"year_{year}"


def _asd_dir(root, year: int, asd: int) -> pathlib.Path:
    return _year_dir(root, year) / f"asd_{asd}"


def write_corpus(seasons, split, out_dir) -> list[str]:
    """Write simulated seasons in the documented CSV layout; returns the
    relative paths written."""
    out_dir = pathlib.Path(out_dir)
    written: list[str] = []

    split_path = out_dir / "split.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(split_path, "w", encoding="utf-8") as fh:
        json.dump({"train_years": split.train_years,
                   "test_years": split.test_years,
                   "profiles": {str(y): p for y, p in split.profiles.items()}},
                  fh, sort_keys=True, indent=1)
    written.append("split.json")

    for season in seasons:
        asd_dir = _asd_dir(out_dir, season.year, season.asd)
        asd_dir.mkdir(parents=True, exist_ok=True)
        rel = asd_dir.relative_to(out_dir)
        for f_idx, field in enumerate(season.fields):
            met_path = asd_dir / f"met_{f_idx}.csv"
            with open(met_path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(MET_COLUMNS)
                for day in field.met:
                    writer.writerow([day.date.isoformat(), repr(day.tmax),
                                     repr(day.tmin), repr(day.rain),
                                     repr(day.srad), repr(day.daylength)])
            written.append(str(rel / met_path.name))

            fpar_path = asd_dir / f"fpar_{f_idx}.csv"
            with open(fpar_path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(FPAR_COLUMNS)
                for sample in field.fpar:
                    writer.writerow([sample.date.isoformat(), repr(sample.fpar)])
            written.append(str(rel / fpar_path.name))

        with open(asd_dir / "soil.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SOIL_COLUMNS)
            for field in season.fields:
                writer.writerow([repr(field.soil.sat_conductivity),
                                 repr(field.soil.bulk_density)])
        written.append(str(rel / "soil.csv"))

        with open(asd_dir / "progress.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(PROGRESS_COLUMNS)
            for w in range(N_DATA_WEEKS):
                row = [FIRST_WEEK_OF_YEAR + w]
                row += [repr(float(100.0 * season.progress[w, s]))
                        for s in range(len(STAGES))]
                writer.writerow(row)
        written.append(str(rel / "progress.csv"))
    return written


def _read_rows(path, expected_columns) -> list[dict]:
    path = pathlib.Path(path)
    if not path.exists():
        raise DataError(f"missing input file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(expected_columns):
            raise DataError(
                f"{path}: expected columns {expected_columns}, "
                f"got {reader.fieldnames}")
        rows = []
        for line, row in enumerate(reader, start=2):
            empty = [col for col, value in row.items() if value in (None, "")]
            if empty:
                raise DataError(f"{path} line {line}: empty columns {empty}")
            rows.append(row)
        return rows


def read_season(root, year: int, asd: int) -> SeasonInputs:
    asd_dir = _asd_dir(root, year, asd)
    if not asd_dir.is_dir():
        raise DataError(f"missing directory for year {year} asd {asd}: {asd_dir}")

    soil_rows = _read_rows(asd_dir / "soil.csv", SOIL_COLUMNS)
    n_fields = len(soil_rows)
    if n_fields == 0:
        raise DataError(f"year {year} asd {asd}: soil.csv lists no fields")
    soil = [SoilProps(float(r["cond"]), float(r["bd"])) for r in soil_rows]

    met, fpar = [], []
    for f_idx in range(n_fields):
        met_path = asd_dir / f"met_{f_idx}.csv"
        if not met_path.exists():
            raise DataError(f"year {year} asd {asd}: missing met file for "
                            f"field {f_idx}")
        days = []
        for row in _read_rows(met_path, MET_COLUMNS):
            days.append(DailyMet(
                dt.date.fromisoformat(row["date"]), float(row["tmax"]),
                float(row["tmin"]), float(row["rain"]), float(row["srad"]),
                float(row["daylength"])))
        met.append(days)

        fpar_path = asd_dir / f"fpar_{f_idx}.csv"
        if not fpar_path.exists():
            raise DataError(f"year {year} asd {asd}: missing fpar file for "
                            f"field {f_idx}")
        samples = [FparSample(dt.date.fromisoformat(r["date"]), float(r["fpar"]))
                   for r in _read_rows(fpar_path, FPAR_COLUMNS)]
        fpar.append(samples)

    progress_rows = _read_rows(asd_dir / "progress.csv", PROGRESS_COLUMNS)
    if len(progress_rows) != N_DATA_WEEKS:
        raise DataError(f"year {year} asd {asd}: progress.csv must list "
                        f"{N_DATA_WEEKS} weeks")
    progress = np.array([[float(r[s]) / 100.0 for s in STAGES]
                         for r in progress_rows])
    return SeasonInputs(year, asd, met, fpar, soil, progress)


def load_corpus(root) -> tuple[list[SeasonInputs], dict]:
    root = pathlib.Path(root)
    split_path = root / "split.json"
    if not split_path.exists():
        raise DataError(f"missing split file {split_path}")
    with open(split_path, encoding="utf-8") as fh:
        split = json.load(fh)

    seasons = []
    for year in sorted(split["train_years"] + split["test_years"]):
        year_dir = _year_dir(root, year)
        if not year_dir.is_dir():
            raise DataError(f"missing directory for year {year}: {year_dir}")
        asd_ids = sorted(int(p.name.split("_", 1)[1])
                         for p in year_dir.iterdir() if p.is_dir())
        for asd in asd_ids:
            seasons.append(read_season(root, year, asd))
    return seasons, split


def save_dataset(dataset: StageDataset, out_dir) -> None:
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "features.npy", dataset.features)
    np.save(out_dir / "locations.npy", dataset.locations)
    np.save(out_dir / "targets.npy", dataset.targets)
    np.save(out_dir / "index.npy",
            np.stack([dataset.cutoffs, dataset.years, dataset.asds], axis=1))
    with open(out_dir / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump({
            "format_version": DATASET_FORMAT_VERSION,
            "n_items": len(dataset),
            "field_counts": dataset.field_counts.tolist(),
            "scaling": dataset.scaling.to_dict(),
            "train_years": dataset.train_years,
            "test_years": dataset.test_years,
        }, fh, sort_keys=True, indent=1)


def load_dataset(in_dir) -> StageDataset:
    in_dir = pathlib.Path(in_dir)
    meta_path = in_dir / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"missing dataset manifest {meta_path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError("unsupported dataset format version")
    index = np.load(in_dir / "index.npy")
    return StageDataset(
        np.load(in_dir / "features.npy"),
        np.load(in_dir / "locations.npy"),
        np.load(in_dir / "targets.npy"),
        index[:, 0], index[:, 1], index[:, 2],
        np.asarray(meta["field_counts"], dtype=np.float64),
        ScalingStats.from_dict(meta["scaling"]),
        list(meta["train_years"]), list(meta["test_years"]),
    )
