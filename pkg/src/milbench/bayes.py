"""Closed-form Bayes posterior p(y=1 | h, S) for the Shifted Mean process.

The uniform p(S) factor is identical under both classes and cancels, so it
is never evaluated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataMismatchError, ParameterError
from .numerics import log_gaussian_pdf, log_sum_exp
from .synthgen import Bag, GeneratorParams

# log-odds beyond this saturate the posterior to exactly 0 or 1
LOG_ODDS_CLAMP = 700.0


@dataclass(frozen=True)
class PosteriorResult:
    posterior: float
    log_lik_neg: float
    log_lik_pos: float


def _embeddings(bag, params: GeneratorParams) -> np.ndarray:
    h = bag.embeddings if isinstance(bag, Bag) else np.asarray(bag, dtype=float)
    if h.ndim != 2 or h.shape[1] != params.m:
        raise ParameterError(f"bag shape {h.shape} does not match m={params.m}")
    return h


def log_likelihood_negative(bag, params: GeneratorParams) -> float:
    h = _embeddings(bag, params)
    return float(np.sum(log_gaussian_pdf(h, params.mu, params.sigma)))


def segment_log_ratios(h: np.ndarray, params: GeneratorParams) -> np.ndarray:
    """Per-instance log N(h|mu+delta) - log N(h|mu), summed over shifted features."""
    x = h[:, :params.k] - params.mu
    d = params.delta
    return np.sum(2.0 * d * x - d * d, axis=1) / (2.0 * params.sigma ** 2)


def _window_term(h: np.ndarray, params: GeneratorParams) -> float:
    # log mean_u exp(sum of per-instance log ratios over the window at u)
    s, r = h.shape[0], params.r
    if s < r:
        raise ParameterError(f"bag has S={s} < r={r}")
    c = np.concatenate([[0.0], np.cumsum(segment_log_ratios(h, params))])
    windows = c[r:] - c[:-r]
    return log_sum_exp(windows) - math.log(s - r + 1)


def log_likelihood_positive(bag, params: GeneratorParams) -> float:
    h = _embeddings(bag, params)
    return log_likelihood_negative(h, params) + _window_term(h, params)


def posterior(bag, params: GeneratorParams) -> PosteriorResult:
    q = params.q_pos
    if q in (0.0, 1.0):
        return PosteriorResult(float(q), math.nan, math.nan)
    h = _embeddings(bag, params)
    ll_neg = log_likelihood_negative(h, params)
    window = _window_term(h, params)
    ll_pos = ll_neg + window
    # ll_pos - ll_neg is formed from the window term directly, avoiding
    # cancellation between two large log-likelihoods
    log_odds = window + math.log(q) - math.log1p(-q)
    log_odds = min(max(log_odds, -LOG_ODDS_CLAMP), LOG_ODDS_CLAMP)
    return PosteriorResult(1.0 / (1.0 + math.exp(-log_odds)), ll_neg, ll_pos)


def oracle_scores(dataset: Sequence[Bag], params: GeneratorParams) -> np.ndarray:
    for i, bag in enumerate(dataset):
        if bag.embeddings.shape[1] != params.m:
            raise DataMismatchError(f"bag {i} has {bag.embeddings.shape[1]} features, params say {params.m}")
    return np.array([posterior(bag, params).posterior for bag in dataset])
