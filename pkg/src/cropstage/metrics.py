"""Evaluation metrics and distribution helpers for stage estimates.

Stage distributions are 6-vectors over (pre-emergence, emerged, silking,
grainfill, mature, harvested), each entry in [0, 1], summing to 1.
"""

from __future__ import annotations

import math

import numpy as np

STAGES = ("pre_emergence", "emerged", "silking", "grainfill", "mature", "harvested")
N_STAGES = len(STAGES)

KLD_FLOOR = 1e-7


def validate_distribution(dist, tol: float = 1e-9) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[-1] != N_STAGES:
        raise ValueError(f"stage distribution must have {N_STAGES} entries")
    if np.any(dist < -tol) or np.any(dist > 1 + tol):
        raise ValueError("stage fractions must lie in [0, 1]")
    if np.any(np.abs(dist.sum(axis=-1) - 1.0) > tol):
        raise ValueError("stage fractions must sum to 1")
    return dist


def kld_loss(target, estimate) -> float:
    """Kullback-Leibler divergence sum(P * log(P / Q)) between two stage
    distributions; terms with P = 0 contribute nothing. Q entries are floored
    at 1e-7 so a confident-wrong estimate yields a finite loss.
    """
    p = validate_distribution(target)
    q = validate_distribution(estimate)
    q = np.maximum(q, KLD_FLOOR)
    mask = p > 0.0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def nse(observed, modeled) -> float:
    """Nash-Sutcliffe efficiency: 1 - SSE(model) / SSE(observed mean).

    1 means a perfect description of the observed series, 0 means no better
    than the observed mean, negative means worse than the mean. A constant
    observed series leaves the ratio undefined; NaN is returned as the
    explicit marker for that case.
    """
    observed = np.asarray(observed, dtype=np.float64)
    modeled = np.asarray(modeled, dtype=np.float64)
    if observed.shape != modeled.shape or observed.ndim != 1 or observed.size < 2:
        raise ValueError("nse needs two equal-length series of at least 2 points")
    denom = np.sum((observed - observed.mean()) ** 2)
    if denom == 0.0:
        return math.nan
    return float(1.0 - np.sum((modeled - observed) ** 2) / denom)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def state_aggregate(estimates, field_counts) -> np.ndarray:
    """District estimates combined into one distribution, weighted by the
    number of fields contributing to each district."""
    estimates = np.asarray(estimates, dtype=np.float64)
    weights = np.asarray(field_counts, dtype=np.float64)
    if estimates.ndim != 2 or estimates.shape[0] != weights.shape[0]:
        raise ValueError("need one weight per district estimate")
    if np.any(weights < 0):
        raise ValueError("field counts must be non-negative")
    total = weights.sum()
    if total == 0.0:
        raise ValueError("at least one district must have fields")
    for row in estimates:
        validate_distribution(row)
    return (weights[:, None] * estimates).sum(axis=0) / total
