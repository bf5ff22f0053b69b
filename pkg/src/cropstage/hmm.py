"""Hidden-Markov baseline for stage estimation.

Six ordered states with a left-to-right transition structure (a stage can
persist or advance, never regress; by default it advances at most one step
per week), diagonal-Gaussian emissions over the scaled weekly feature
channels, and expectation-maximization fitting initialized from the weekly
progress statistics of the training years. Estimates are posterior state
marginals at the cutoff week, averaged over an ensemble of fitted runs to
damp the sensitivity of EM to initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .metrics import N_STAGES

VARIANCE_FLOOR = 1e-6
_TINY = 1e-300


class HmmError(ValueError):
    """Model parameters violate the chain's structural invariants."""


def left_to_right_mask(n_states: int = N_STAGES, max_jump: int = 1) -> np.ndarray:
    """Allowed transitions: stay, or advance by at most ``max_jump`` stages."""
    mask = np.zeros((n_states, n_states), dtype=bool)
    for i in range(n_states):
        for j in range(i, min(i + max_jump, n_states - 1) + 1):
            mask[i, j] = True
    return mask


@dataclass
class HmmModel:
    initial: np.ndarray        # [S]
    transitions: np.ndarray    # [S, S], rows sum to 1, zero below the diagonal
    means: np.ndarray          # [S, F]
    variances: np.ndarray      # [S, F], floored
    mask: np.ndarray           # [S, S] allowed-transition pattern

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.maximum(
            np.asarray(self.variances, dtype=np.float64), VARIANCE_FLOOR)
        self.mask = np.asarray(self.mask, dtype=bool)
        n = self.initial.shape[0]
        if self.transitions.shape != (n, n) or self.mask.shape != (n, n):
            raise HmmError("transition matrix shape mismatch")
        if abs(self.initial.sum() - 1.0) > 1e-9:
            raise HmmError("initial distribution must sum to 1")
        if np.any(np.abs(self.transitions.sum(axis=1) - 1.0) > 1e-9):
            raise HmmError("transition rows must sum to 1")
        if np.any(np.tril(self.transitions, -1) != 0.0):
            raise HmmError("transitions must be left-to-right")
        if np.any(self.transitions[~self.mask] != 0.0):
            raise HmmError("transitions outside the allowed mask")

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]

    def to_dict(self) -> dict:
        return {
            "initial": self.initial.tolist(),
            "transitions": self.transitions.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "mask": self.mask.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HmmModel":
        return cls(
            np.asarray(data["initial"]), np.asarray(data["transitions"]),
            np.asarray(data["means"]), np.asarray(data["variances"]),
            np.asarray(data["mask"], dtype=bool),
        )


def emission_loglik(model: HmmModel, obs: np.ndarray) -> np.ndarray:
    """Per-step, per-state diagonal-Gaussian log-likelihoods, [T, S]."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    diff = obs[:, None, :] - model.means[None, :, :]
    return -0.5 * np.sum(
        diff * diff / model.variances[None] + np.log(2 * np.pi * model.variances)[None],
        axis=-1,
    )


def forward_backward(model: HmmModel, obs: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, float]:
    """Scaled forward-backward over one observation sequence.

    Returns (state marginals [T, S], pairwise marginals [T-1, S, S], log
    likelihood). Emission likelihoods are max-shifted per step in log space,
    and the scaling constants are floored, so an observation that is nearly
    impossible under every state degrades gracefully instead of dividing by
    zero.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    n_steps = obs.shape[0]
    if n_steps < 1:
        raise HmmError("need at least one observation")
    loglik_obs = emission_loglik(model, obs)
    shifts = loglik_obs.max(axis=1)
    # floor the shifted likelihoods so a step that is impossible under every
    # reachable state degrades to the prior instead of zeroing the recursion
    b = np.maximum(np.exp(loglik_obs - shifts[:, None]), 1e-12)

    n = model.n_states
    alpha = np.zeros((n_steps, n))
    scales = np.zeros(n_steps)
    alpha[0] = model.initial * b[0]
    scales[0] = max(alpha[0].sum(), _TINY)
    alpha[0] /= scales[0]
    for t in range(1, n_steps):
        alpha[t] = (alpha[t - 1] @ model.transitions) * b[t]
        scales[t] = max(alpha[t].sum(), _TINY)
        alpha[t] /= scales[t]

    beta = np.zeros((n_steps, n))
    beta[-1] = 1.0
    for t in range(n_steps - 2, -1, -1):
        beta[t] = model.transitions @ (b[t + 1] * beta[t + 1]) / scales[t + 1]

    gamma = alpha * beta
    gamma /= np.maximum(gamma.sum(axis=1, keepdims=True), _TINY)

    xi = np.zeros((max(n_steps - 1, 0), n, n))
    for t in range(n_steps - 1):
        block = (alpha[t][:, None] * model.transitions
                 * (b[t + 1] * beta[t + 1])[None, :]) / scales[t + 1]
        xi[t] = block / max(block.sum(), _TINY)

    loglik = float(np.sum(np.log(scales) + shifts))
    return gamma, xi, loglik


def posterior_at_cutoff(model: HmmModel, features: np.ndarray,
                        cutoff_week: int) -> np.ndarray:
    """Posterior stage marginal at the cutoff week of a [39, F] feature
    block; only rows 1..cutoff are observed. The pre-season cutoff (0) falls
    back to the initial distribution."""
    if cutoff_week == 0:
        return model.initial.copy()
    gamma, _, _ = forward_backward(model, features[1:cutoff_week + 1])
    return gamma[-1]


def hmm_estimate(models, features: np.ndarray, cutoff_week: int) -> np.ndarray:
    """Stage distribution at the cutoff week, averaged over fitted runs."""
    if isinstance(models, HmmModel):
        models = [models]
    est = np.mean([posterior_at_cutoff(m, features, cutoff_week) for m in models],
                  axis=0)
    return est / est.sum()


# ------------------------------------------------------------------ EM fitting

def _masked_normalize(matrix: np.ndarray, mask: np.ndarray,
                      fallback: np.ndarray) -> np.ndarray:
    out = np.where(mask, np.maximum(matrix, 0.0), 0.0)
    sums = out.sum(axis=1)
    for i, s in enumerate(sums):
        out[i] = out[i] / s if s > 0 else fallback[i]
    return out


def em_step(model: HmmModel, sequences: list,
            reestimate_transitions: bool = True) -> tuple[HmmModel, float]:
    """One Baum-Welch update over multiple sequences. The left-to-right zero
    pattern is preserved structurally: forbidden entries have zero pairwise
    mass and stay zero after renormalization."""
    n, n_feat = model.means.shape
    pi_acc = np.zeros(n)
    xi_acc = np.zeros((n, n))
    gamma_occ = np.zeros(n)
    mean_acc = np.zeros((n, n_feat))
    sq_acc = np.zeros((n, n_feat))
    weight_acc = np.zeros(n)
    total_loglik = 0.0

    for obs in sequences:
        gamma, xi, loglik = forward_backward(model, obs)
        total_loglik += loglik
        pi_acc += gamma[0]
        if xi.size:
            xi_acc += xi.sum(axis=0)
            gamma_occ += gamma[:-1].sum(axis=0)
        weight_acc += gamma.sum(axis=0)
        mean_acc += gamma.T @ obs
        sq_acc += gamma.T @ (obs * obs)

    if reestimate_transitions:
        new_pi = pi_acc / pi_acc.sum()
        new_a = _masked_normalize(xi_acc, model.mask, model.transitions)
    else:
        new_pi = model.initial.copy()
        new_a = model.transitions.copy()

    safe = np.maximum(weight_acc, _TINY)[:, None]
    new_means = np.where(weight_acc[:, None] > 0, mean_acc / safe, model.means)
    new_vars = np.where(
        weight_acc[:, None] > 0,
        sq_acc / safe - new_means ** 2,
        model.variances,
    )
    new_model = HmmModel(new_pi, new_a, new_means,
                         np.maximum(new_vars, VARIANCE_FLOOR), model.mask)
    return new_model, total_loglik


def em_run(model: HmmModel, sequences: list, max_iterations: int = 50,
           tol: float = 1e-6, reestimate_transitions: bool = True
           ) -> tuple[HmmModel, list[float]]:
    """Iterate EM until the log likelihood stalls; the history is the data
    log likelihood of the model entering each iteration and never decreases
    beyond scaling slack."""
    history: list[float] = []
    for _ in range(max_iterations):
        model, loglik = em_step(model, sequences, reestimate_transitions)
        if not np.isfinite(loglik):
            raise FloatingPointError("non-finite likelihood during EM")
        if history and abs(loglik - history[-1]) < tol * abs(history[-1]):
            history.append(loglik)
            break
        history.append(loglik)
    return model, history


def sequence_loglik(model: HmmModel, sequences: list) -> float:
    return float(sum(forward_backward(model, obs)[2] for obs in sequences))


def initial_model_from_progress(observations: list, occupancies: list,
                                mask: np.ndarray | None = None) -> HmmModel:
    """Statistics-informed starting point: the initial distribution from
    first-week occupancy, transitions from the empirical weekly stage flows,
    and emissions from occupancy-weighted feature moments."""
    mask = left_to_right_mask() if mask is None else mask
    occ = np.stack(occupancies)            # [R, T, S]
    obs = np.stack(observations)           # [R, T, F]
    n = occ.shape[2]

    pi = occ[:, 0, :].mean(axis=0)
    pi = np.maximum(pi, 1e-3)
    pi /= pi.sum()

    # weekly flows: inflow to stage s+1 equals the growth of its cumulative
    # curve; the remainder of stage s stays put
    cum = occ[:, :, ::-1].cumsum(axis=2)[:, :, ::-1]
    counts = np.zeros((n, n))
    for r in range(occ.shape[0]):
        for t in range(occ.shape[1] - 1):
            for s in range(n):
                inflow = cum[r, t + 1, s + 1] - cum[r, t, s + 1] if s + 1 < n else 0.0
                inflow = max(0.0, min(inflow, occ[r, t, s]))
                counts[s, s] += occ[r, t, s] - inflow
                if s + 1 < n:
                    counts[s, s + 1] += inflow
    fallback = np.eye(n)
    transitions = _masked_normalize(counts + 1e-3 * mask, mask, fallback)

    weights = occ.reshape(-1, n)           # soft state labels from the targets
    flat_obs = obs.reshape(-1, obs.shape[2])
    wsum = np.maximum(weights.sum(axis=0), _TINY)[:, None]
    means = weights.T @ flat_obs / wsum
    variances = weights.T @ (flat_obs * flat_obs) / wsum - means ** 2
    return HmmModel(pi, transitions, means,
                    np.maximum(variances, VARIANCE_FLOOR), mask)


def _jitter(model: HmmModel, rng: np.random.Generator) -> HmmModel:
    pi = model.initial * rng.uniform(0.7, 1.3, model.n_states)
    pi /= pi.sum()
    trans = model.transitions * rng.uniform(0.7, 1.3, model.transitions.shape)
    trans = _masked_normalize(trans, model.mask, model.transitions)
    spread = np.sqrt(model.variances)
    means = model.means + rng.normal(0.0, 0.25, model.means.shape) * spread
    variances = model.variances * rng.uniform(0.6, 1.6, model.variances.shape)
    return HmmModel(pi, trans, means, variances, model.mask)


@dataclass
class HmmFit:
    models: list[HmmModel]
    val_logliks: np.ndarray
    protocol: dict

    def best(self) -> HmmModel:
        return self.models[int(np.argmax(self.val_logliks))]

    def top(self, k: int = 10) -> list[HmmModel]:
        order = np.argsort(self.val_logliks)[::-1]
        return [self.models[i] for i in order[:k]]

    def to_dict(self) -> dict:
        return {
            "models": [m.to_dict() for m in self.models],
            "val_logliks": self.val_logliks.tolist(),
            "protocol": self.protocol,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HmmFit":
        return cls([HmmModel.from_dict(m) for m in data["models"]],
                   np.asarray(data["val_logliks"], dtype=np.float64),
                   data["protocol"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "HmmFit":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def em_fit(observations: list, occupancies: list, years: list, runs: int = 100,
           val_years: int = 4, seed: int = 0, max_iterations: int = 50,
           reestimate_transitions: bool = True) -> HmmFit:
    """The full fitting protocol: for each run, hold out a random subset of
    training years for validation, fit EM from a jittered statistics-informed
    start on the rest, and score the run by held-out likelihood. Runs whose
    likelihood turns non-finite are restarted with a fresh perturbation.
    """
    years = np.asarray(years)
    unique_years = np.unique(years)
    if unique_years.size < 5:
        raise HmmError("need at least 5 training years")
    base = initial_model_from_progress(observations, occupancies)
    rng = np.random.default_rng(seed)

    models: list[HmmModel] = []
    scores: list[float] = []
    for _ in range(runs):
        held = rng.choice(unique_years, size=val_years, replace=False)
        train_idx = [i for i, y in enumerate(years) if y not in held]
        val_idx = [i for i, y in enumerate(years) if y in held]
        train_seqs = [observations[i] for i in train_idx]
        val_seqs = [observations[i] for i in val_idx]
        for _attempt in range(3):
            try:
                model, _ = em_run(_jitter(base, rng), train_seqs,
                                  max_iterations=max_iterations,
                                  reestimate_transitions=reestimate_transitions)
                break
            except FloatingPointError:
                continue
        else:
            continue
        models.append(model)
        scores.append(sequence_loglik(model, val_seqs))

    if not models:
        raise HmmError("every EM run failed to produce a finite likelihood")
    return HmmFit(models, np.asarray(scores), {
        "runs": runs, "val_years": val_years, "seed": seed,
        "reestimate_transitions": reestimate_transitions,
        "max_iterations": max_iterations,
    })


def season_sequences(dataset) -> tuple[list, list, list]:
    """Full-season observation sequences, occupancy tables, and years from a
    stage dataset (rows 1..38 of each district season's cutoff-38 item)."""
    observations, occupancies, years = [], [], []
    full = np.nonzero(dataset.cutoffs == 38)[0]
    for idx in full:
        year, asd = dataset.years[idx], dataset.asds[idx]
        observations.append(dataset.features[idx][1:, :])
        season_occ = np.zeros((38, N_STAGES))
        for w in range(1, 39):
            match = np.nonzero((dataset.years == year) & (dataset.asds == asd)
                               & (dataset.cutoffs == w))[0]
            season_occ[w - 1] = dataset.targets[match[0]]
        occupancies.append(season_occ)
        years.append(int(year))
    return observations, occupancies, years
