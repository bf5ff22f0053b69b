"""Training protocol, evaluation reports, and activation export.

Training minimizes the KL divergence between target and estimated stage
distributions with Adam, monitors the loss on one held-out year at the end
of every epoch, stops after the configured patience without improvement, and
restores the best-monitor weights. All randomness (shuffling, dropout,
monitor-year selection, fold assignment) flows from named substreams of one
seed, so a fixed seed reproduces the history bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .metrics import (STAGES, cosine_similarity, nse, state_aggregate,
                      validate_distribution)
from .models import ParamStore, StageModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(RuntimeError):
    """A gradient or loss stopped being finite."""


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss; carries the history so far."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    max_epochs: int = 300
    patience: int = 30
    learning_rate: float = 1e-5
    dropout_rate: float = 0.2
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")


def desk_config(**overrides) -> TrainConfig:
    """Reduced training profile for the synthetic desk-scale benchmark; the
    defaults above mirror the full-scale protocol."""
    base = dict(max_epochs=30, patience=6, learning_rate=2e-3, batch_size=64)
    base.update(overrides)
    return TrainConfig(**base)


class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    def __init__(self, params: ParamStore):
        self.step = 0
        self.m = {name: np.zeros_like(node.value) for name, node in params}
        self.v = {name: np.zeros_like(node.value) for name, node in params}


def adam_step(params: ParamStore, state: AdamState,
              lr: float = 1e-5, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam update from the accumulated gradients."""
    for name, node in params:
        if not np.all(np.isfinite(node.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, node in params:
        g = node.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        node.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


def kld_with_logits(targets: np.ndarray, logits: Node) -> Node:
    """Mean KL divergence of a batch, computed against the log-softmax of the
    logits so confident-wrong outputs cannot overflow."""
    targets = np.asarray(targets, dtype=np.float64)
    batch = targets.shape[0]
    entropy = float(np.sum(np.where(targets > 0, targets * np.log(
        np.where(targets > 0, targets, 1.0)), 0.0)))
    shift = ad.constant(logits.value.max(axis=-1, keepdims=True))
    lse = ad.add(ad.log(ad.sum_axis(ad.exp(ad.sub(logits, shift)), -1)), shift)
    cross = ad.sum_all(ad.mul(ad.constant(targets), ad.sub(logits, lse)))
    return ad.scale(ad.sub(ad.constant(entropy), cross), 1.0 / batch)


@dataclass
class TrainResult:
    history: list           # (epoch, train loss, monitor loss) rows
    best_epoch: int
    stopped_epoch: int
    monitor_year: int


def _mean_monitor_loss(model: StageModel, features, locations, targets,
                       batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(targets), batch_size):
        sl = slice(start, start + batch_size)
        logits = model.logits(features[sl], locations[sl])
        total += kld_with_logits(targets[sl], logits).value * targets[sl].shape[0]
    return float(total) / len(targets)


def train(model: StageModel, dataset, monitor_year: int,
          config: TrainConfig | None = None, monitor_fn=None) -> TrainResult:
    """Fit one estimator. Items from ``monitor_year`` never contribute
    gradients; their loss after each epoch drives early stopping and best
    weights restoration. ``monitor_fn(model, epoch)`` may replace the
    monitor-loss computation (evaluation hooks and tests)."""
    config = config or TrainConfig()
    model.dropout_rate = config.dropout_rate
    update_mask = dataset.years != monitor_year
    monitor_mask = ~update_mask
    if monitor_fn is None and not monitor_mask.any():
        raise ValueError(f"monitor year {monitor_year} not present in dataset")
    feats, locs, targets = (dataset.features[update_mask],
                            dataset.locations[update_mask],
                            dataset.targets[update_mask])
    mon = (dataset.features[monitor_mask], dataset.locations[monitor_mask],
           dataset.targets[monitor_mask])

    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    optimizer = AdamState(model.params)

    history: list[tuple[int, float, float]] = []
    best_loss = math.inf
    best_epoch = 0
    best_weights = model.params.snapshot()
    bad_epochs = 0
    stopped_epoch = config.max_epochs

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(targets))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            model.params.zero_grad()
            logits = model.logits(feats[idx], locs[idx], train=True,
                                  rng=dropout_rng)
            loss = kld_with_logits(targets[idx], logits)
            ad.backward(loss)
            try:
                adam_step(model.params, optimizer, lr=config.learning_rate)
            except NumericalError as err:
                raise TrainingDiverged(str(err), history) from err
            epoch_loss += float(loss.value) * idx.size
        epoch_loss /= len(order)

        if monitor_fn is not None:
            monitor_loss = float(monitor_fn(model, epoch))
        else:
            monitor_loss = _mean_monitor_loss(model, *mon, config.batch_size)
        history.append((epoch, epoch_loss, monitor_loss))
        if not (math.isfinite(epoch_loss) and math.isfinite(monitor_loss)):
            raise TrainingDiverged(f"loss diverged at epoch {epoch}", history)

        if monitor_loss < best_loss:
            best_loss = monitor_loss
            best_epoch = epoch
            best_weights = model.params.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                stopped_epoch = epoch
                break

    model.params.load(best_weights)
    return TrainResult(history, best_epoch, stopped_epoch, monitor_year)


def write_history_csv(result: TrainResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "monitor_loss"])
        for epoch, train_loss, monitor_loss in result.history:
            writer.writerow([epoch, repr(float(train_loss)),
                             repr(float(monitor_loss))])


# ------------------------------------------------------------------ estimators

class NNEstimator:
    """Batched estimate surface over a trained network."""

    def __init__(self, model: StageModel, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def estimate_items(self, features, locations, cutoffs) -> np.ndarray:
        out = np.empty((len(features), len(STAGES)))
        for start in range(0, len(features), self.batch_size):
            sl = slice(start, start + self.batch_size)
            out[sl] = self.model.estimate(features[sl], locations[sl])
        return out


class HmmEnsembleEstimator:
    """Posterior-marginal estimates averaged over an ensemble of fitted
    chains; only weeks up to each item's cutoff are observed."""

    def __init__(self, models):
        from .hmm import hmm_estimate
        self._estimate = hmm_estimate
        self.models = models

    def estimate_items(self, features, locations, cutoffs) -> np.ndarray:
        out = np.empty((len(features), len(STAGES)))
        for i in range(len(features)):
            out[i] = self._estimate(self.models, features[i], int(cutoffs[i]))
        return out


# ------------------------------------------------------------------ evaluation

def weekly_state_series(estimator, dataset, year: int
                        ) -> tuple[np.ndarray, np.ndarray]:
    """State-level weekly estimate and truth matrices [39, 6] for one year:
    district estimates at every cutoff, combined with field-count weights."""
    mask = dataset.years == year
    if not mask.any():
        raise ValueError(f"year {year} not in dataset")
    asds = np.unique(dataset.asds[mask])
    weights = dataset.field_counts[asds]

    est_items = estimator.estimate_items(dataset.features[mask],
                                         dataset.locations[mask],
                                         dataset.cutoffs[mask])
    cutoffs = dataset.cutoffs[mask]
    item_asds = dataset.asds[mask]
    targets = dataset.targets[mask]

    est = np.zeros((39, len(STAGES)))
    true = np.zeros((39, len(STAGES)))
    for w in range(39):
        rows = [np.nonzero((cutoffs == w) & (item_asds == a))[0][0] for a in asds]
        est[w] = state_aggregate(est_items[rows], weights)
        true[w] = state_aggregate(targets[rows], weights)
    return est, true


def season_scores(est: np.ndarray, true: np.ndarray) -> dict:
    """Per-stage efficiency over the weekly series plus per-week cosine
    similarity between estimated and true stage mixes."""
    nse_values = {}
    for s, stage in enumerate(STAGES):
        value = nse(true[:, s], est[:, s])
        nse_values[stage] = None if math.isnan(value) else value
    cs_weekly = [cosine_similarity(est[w], true[w]) for w in range(est.shape[0])]
    return {"nse": nse_values, "cs_weekly": cs_weekly}


@dataclass
class MetricsReport:
    label: str
    weights: list
    per_year: dict
    nse_mean: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.nse_mean:
            self.nse_mean = {}
            for stage in STAGES:
                values = [y["nse"][stage] for y in self.per_year.values()
                          if y["nse"][stage] is not None]
                self.nse_mean[stage] = float(np.mean(values)) if values else None

    def mean_nse_across_stages(self) -> float:
        values = [v for v in self.nse_mean.values() if v is not None]
        return float(np.mean(values))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "stages": list(STAGES),
            "weights": [float(w) for w in self.weights],
            "per_year": {str(y): scores for y, scores in self.per_year.items()},
            "nse_mean": self.nse_mean,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        per_year = {int(y): scores for y, scores in data["per_year"].items()}
        return cls(data["label"], data["weights"], per_year, data["nse_mean"])


def evaluate(estimator, dataset, years, label: str
             ) -> tuple[MetricsReport, dict]:
    """Metrics report over the given years plus the weekly state series
    behind it (year -> (estimated, true) [39, 6] matrices)."""
    per_year = {}
    weekly = {}
    for year in sorted(years):
        est, true = weekly_state_series(estimator, dataset, year)
        weekly[int(year)] = (est, true)
        per_year[int(year)] = season_scores(est, true)
    report = MetricsReport(label, dataset.field_counts.tolist(), per_year)
    return report, weekly


def write_report_csvs(report: MetricsReport, weekly: dict, out_dir) -> None:
    """Plot-ready flat files: per-stage efficiency, per-week similarity, and
    cumulative-progress curves (estimated vs. true)."""
    import pathlib

    out_dir = pathlib.Path(out_dir)
    with open(out_dir / "nse_stages.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["year", "stage", "nse"])
        for year, scores in sorted(report.per_year.items()):
            for stage in STAGES:
                value = scores["nse"][stage]
                writer.writerow([year, stage,
                                 "" if value is None else repr(float(value))])
    with open(out_dir / "cs_weekly.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["year", "week_index", "cs"])
        for year, scores in sorted(report.per_year.items()):
            for w, value in enumerate(scores["cs_weekly"]):
                writer.writerow([year, w, repr(float(value))])
    with open(out_dir / "cumulative_progress.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["year", "week_index", "stage", "estimated", "actual"])
        for year, (est, true) in sorted(weekly.items()):
            est_cum = est[:, ::-1].cumsum(axis=1)[:, ::-1]
            true_cum = true[:, ::-1].cumsum(axis=1)[:, ::-1]
            for w in range(est.shape[0]):
                for s, stage in enumerate(STAGES):
                    writer.writerow([year, w, stage, repr(float(est_cum[w, s])),
                                     repr(float(true_cum[w, s]))])


# ------------------------------------------------------------ cross-validation

def partition_years(years, k: int, rng: np.random.Generator) -> list[list[int]]:
    years = list(years)
    if len(years) < k:
        raise ValueError(f"cannot split {len(years)} years into {k} folds")
    order = rng.permutation(len(years))
    folds: list[list[int]] = [[] for _ in range(k)]
    for i, idx in enumerate(order):
        folds[i % k].append(years[idx])
    return [sorted(f) for f in folds]


def cross_validate(builder, dataset, years, config: TrainConfig | None = None,
                   k: int = 5, seed: int = 0) -> list[dict]:
    """K-fold protocol over years: train on the out-of-fold years with one
    randomly selected monitor year among them, evaluate on the fold years."""
    config = config or TrainConfig()
    rng = np.random.default_rng([seed, 3])
    folds = partition_years(years, k, rng)
    results = []
    for i, fold_years in enumerate(folds):
        train_years = [y for y in years if y not in fold_years]
        monitor_year = int(rng.choice(train_years))
        model = builder(seed + i)
        fit_data = dataset.subset_years(train_years)
        result = train(model, fit_data, monitor_year, config)
        report, weekly = evaluate(NNEstimator(model), dataset, fold_years,
                                  label=f"fold{i}")
        results.append({
            "fold": i,
            "val_years": fold_years,
            "monitor_year": monitor_year,
            "train_result": result,
            "report": report,
            "weekly": weekly,
        })
    return results


# -------------------------------------------------------------- activation tap

def pca_2d(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two-component principal projection (scores, components, explained
    variance); components are orthonormal rows with a fixed sign convention."""
    matrix = np.asarray(matrix, dtype=np.float64)
    centered = matrix - matrix.mean(axis=0, keepdims=True)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    scores = centered @ components.T
    explained = (singular[:2] ** 2) / max(matrix.shape[0] - 1, 1)
    return scores, components, explained


@dataclass
class ActivationExport:
    tap: str
    activations_path: str
    pca_path: str
    components: np.ndarray
    explained: np.ndarray
    n_rows: int
    width: int


def export_activations(model: StageModel, dataset, tap: str, out_dir
                       ) -> ActivationExport:
    """Per-item activations at a tap point, written with their stage
    distributions as color keys, plus a two-component quick-look projection
    (external embedding tools take it from the same table)."""
    import pathlib

    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    taps: dict = {}
    model.logits(dataset.features[:1], dataset.locations[:1], taps=taps)
    if tap not in taps:
        raise KeyError(f"unknown tap {tap!r}; available: {sorted(taps)}")

    rows = []
    batch = 256
    for start in range(0, len(dataset), batch):
        sl = slice(start, start + batch)
        chunk_taps: dict = {}
        model.logits(dataset.features[sl], dataset.locations[sl],
                     taps=chunk_taps)
        rows.append(chunk_taps[tap].reshape(chunk_taps[tap].shape[0], -1))
    activations = np.concatenate(rows, axis=0)

    act_path = out_dir / f"activations_{tap}.csv"
    with open(act_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = (["index", "year", "asd", "cutoff"]
                  + [f"target_{s}" for s in STAGES]
                  + [f"a{i:04d}" for i in range(activations.shape[1])])
        writer.writerow(header)
        for i in range(activations.shape[0]):
            writer.writerow(
                [i, int(dataset.years[i]), int(dataset.asds[i]),
                 int(dataset.cutoffs[i])]
                + [repr(float(v)) for v in dataset.targets[i]]
                + [repr(float(v)) for v in activations[i]])

    scores, components, explained = pca_2d(activations)
    pca_path = out_dir / f"pca_{tap}.csv"
    with open(pca_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "pc1", "pc2"])
        for i in range(scores.shape[0]):
            writer.writerow([i, repr(float(scores[i, 0])),
                             repr(float(scores[i, 1]))])

    return ActivationExport(tap, str(act_path), str(pca_path), components,
                            explained, activations.shape[0], activations.shape[1])
