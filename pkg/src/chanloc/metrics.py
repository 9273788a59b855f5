"""Evaluation metrics: channel NMSE, scatterer localization quality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def nmse(h_hat, h_true) -> float:
    """Frobenius ratio ||Hhat - H||^2 / ||H||^2 (linear scale)."""
    h_hat = np.asarray(h_hat)
    h_true = np.asarray(h_true)
    if h_hat.shape != h_true.shape:
        raise ValueError("shape mismatch")
    denom = float(np.sum(np.abs(h_true) ** 2))
    if denom == 0:
        raise ValueError("reference channel has zero norm")
    return float(np.sum(np.abs(h_hat - h_true) ** 2)) / denom


def nmse_db(h_hat, h_true) -> float:
    return 10.0 * np.log10(max(nmse(h_hat, h_true), 1e-300))


@dataclass(frozen=True)
class LocalizationMetrics:
    rmse_m: float  # NaN when nothing matched
    miss_rate: float
    false_alarm_rate: float
    n_matched: int


def localization_metrics(estimated, truth, match_radius) -> LocalizationMetrics:
    """Greedy nearest-pair matching within a radius.

    Candidate pairs are consumed in order of increasing distance; each truth
    and each estimate matches at most once.  Misses are unmatched truths,
    false alarms unmatched estimates, RMSE is over matched pairs (NaN when
    none matched).
    """
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    estimated = np.asarray(estimated, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    n_est, n_true = len(estimated), len(truth)
    if n_true == 0:
        return LocalizationMetrics(float("nan"), 0.0, 1.0 if n_est else 0.0, 0)
    if n_est == 0:
        return LocalizationMetrics(float("nan"), 1.0, 0.0, 0)
    dist = np.linalg.norm(estimated[:, None, :] - truth[None, :, :], axis=-1)
    pairs = [
        (dist[i, j], i, j)
        for i in range(n_est)
        for j in range(n_true)
        if dist[i, j] <= match_radius
    ]
    pairs.sort()
    used_est = set()
    used_true = set()
    sq = 0.0
    for d, i, j in pairs:
        if i in used_est or j in used_true:
            continue
        used_est.add(i)
        used_true.add(j)
        sq += d * d
    n_matched = len(used_true)
    rmse = np.sqrt(sq / n_matched) if n_matched else float("nan")
    return LocalizationMetrics(
        rmse_m=float(rmse),
        miss_rate=(n_true - n_matched) / n_true,
        false_alarm_rate=(n_est - n_matched) / n_est,
        n_matched=n_matched,
    )


def mean_and_ci95(values):
    """Sample mean and normal-approximation 95% CI half-width."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float("nan"), float("nan")
    mean = float(values.mean())
    if values.size == 1:
        return mean, float("inf")
    half = 1.96 * float(values.std(ddof=1)) / np.sqrt(values.size)
    return mean, half
