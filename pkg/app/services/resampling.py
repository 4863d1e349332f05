"""Seeded bootstrap summaries for per-path statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from app.core.config import config

# resampled rows kept in memory at once by bootstrap_mean_series
_SERIES_BATCH_CELLS = 20_000_000


@dataclass(frozen=True)
class BootstrapSummary:
    estimate: float
    se: float
    ci_low: float
    ci_high: float

    def contains(self, value: float = 0.0) -> bool:
        return self.ci_low <= value <= self.ci_high

    def as_dict(self) -> dict:
        return {"est": self.estimate, "se": self.se, "ci": [self.ci_low, self.ci_high]}


def bootstrap_mean(
    samples: np.ndarray,
    seed: int,
    n_resamples: int | None = None,
    confidence: float = 0.95,
) -> BootstrapSummary:
    """Percentile bootstrap of the mean of a 1-D real sample."""
    samples = np.asarray(samples, dtype=float).ravel()
    n_resamples = n_resamples or config.bootstrap_resamples
    estimate = float(np.mean(samples))
    if samples.size < 2 or np.ptp(samples) == 0.0:
        return BootstrapSummary(estimate, 0.0, estimate, estimate)
    batch = max(1, min(n_resamples, _SERIES_BATCH_CELLS // samples.size))
    res = stats.bootstrap(
        (samples,),
        np.mean,
        n_resamples=n_resamples,
        batch=batch,
        vectorized=True,
        confidence_level=confidence,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    return BootstrapSummary(
        estimate,
        float(res.standard_error),
        float(res.confidence_interval.low),
        float(res.confidence_interval.high),
    )


@dataclass(frozen=True, eq=False)
class SeriesBootstrap:
    mean: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray


def bootstrap_mean_series(
    samples: np.ndarray,
    seed: int,
    n_resamples: int | None = None,
    confidence: float = 0.95,
) -> SeriesBootstrap:
    """Bootstrap the path mean of an ``N x S`` real array, resampling whole paths.

    Every resample reweights rows by their multiplicity, so all columns of a
    path move together.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, s = samples.shape
    n_resamples = n_resamples or config.bootstrap_resamples
    rng = np.random.default_rng(seed)
    batch = max(1, min(n_resamples, _SERIES_BATCH_CELLS // max(n, 1)))
    means = np.empty((n_resamples, s))
    done = 0
    while done < n_resamples:
        size = min(batch, n_resamples - done)
        counts = np.stack(
            [np.bincount(rng.integers(0, n, size=n), minlength=n) for _ in range(size)]
        ).astype(float)
        means[done : done + size] = counts @ samples / n
        done += size
    alpha = (1.0 - confidence) / 2.0
    return SeriesBootstrap(
        mean=samples.mean(axis=0),
        se=means.std(axis=0, ddof=1),
        ci_low=np.quantile(means, alpha, axis=0),
        ci_high=np.quantile(means, 1.0 - alpha, axis=0),
    )
