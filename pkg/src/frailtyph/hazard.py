"""Piecewise-exponential baseline hazard and its Poisson data expansion.

The time axis is partitioned at cut-points ``0 = a_0 < a_1 < ... < a_K``
with the baseline hazard constant on each interval ``(a_{k-1}, a_k]``.
Under that assumption the proportional-hazards likelihood factorizes into
independent Poisson terms, one per (observation, interval) pseudo-row,
which is what the sampler consumes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset

__all__ = [
    "CutPoints",
    "PiecewiseHazard",
    "PoissonExpansion",
    "quantile_cutpoints",
    "explicit_cutpoints",
    "cumulative_hazard",
    "expand_poisson",
    "poisson_loglik",
]


@dataclass(frozen=True)
class CutPoints:
    """Strictly increasing positive cut-points; ``a[-1]`` covers the data.

    The implicit left endpoint is ``a_0 = 0``.
    """

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        object.__setattr__(self, "a", a)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("cut-points must be a non-empty 1-d vector")
        if a[0] <= 0 or np.any(np.diff(a) <= 0):
            raise ValueError("cut-points must be positive and strictly increasing")

    @property
    def n_intervals(self) -> int:
        return self.a.size

    def interval_index(self, t) -> np.ndarray:
        """0-based index of the interval containing t: min{k : a_k >= t}.

        Times beyond the last cut-point are clamped to the last interval
        (extrapolation with the final hazard height).
        """
        return np.minimum(np.searchsorted(self.a, t, side="left"), self.a.size - 1)

    def interval_widths(self, t) -> np.ndarray:
        """Exposure widths ``Delta_k(t) = min(a_k, t) - a_{k-1}``, shape (.., K).

        Entries for intervals beyond the one containing t are zero; for
        t > a_K the final entry includes the extrapolated exposure.
        """
        t = np.asarray(t, dtype=float)
        edges = np.concatenate([[0.0], self.a])
        w = np.clip(np.minimum(edges[1:], t[..., None]) - edges[:-1], 0.0, None)
        # extrapolation beyond a_K: extend the last interval
        w[..., -1] += np.clip(t - self.a[-1], 0.0, None)
        return w


@dataclass(frozen=True)
class PiecewiseHazard:
    """Baseline hazard: cut-points plus per-interval log heights."""

    cuts: CutPoints
    log_heights: np.ndarray

    def __post_init__(self):
        lh = np.asarray(self.log_heights, dtype=float)
        object.__setattr__(self, "log_heights", lh)
        if lh.shape != (self.cuts.n_intervals,):
            raise ValueError("log_heights must have one entry per interval")
        if not np.all(np.isfinite(np.exp(lh))):
            raise ValueError("hazard heights must be finite and positive")

    @property
    def heights(self) -> np.ndarray:
        return np.exp(self.log_heights)


def quantile_cutpoints(dataset: Dataset, n_intervals: int, events_only: bool = False) -> CutPoints:
    """Cut-points at the k/K empirical quantiles of the follow-up times.

    Events and censored times are pooled by default (``events_only`` limits
    the quantile pool to event times; the final cut-point is always the
    overall max time).  Duplicate quantiles are collapsed by moving each
    repeat to the midpoint with the next distinct value, preserving strict
    monotonicity.
    """
    if n_intervals < 1:
        raise ValueError("need at least one interval")
    pool = dataset.times[dataset.events == 1] if events_only else dataset.times
    if pool.size == 0:
        raise ValueError("no times available for quantile cut-points")
    t_max = float(dataset.times.max())
    pool = np.sort(pool)
    k = np.arange(1, n_intervals + 1)
    idx = np.ceil(k * pool.size / n_intervals).astype(int) - 1
    a = pool[np.clip(idx, 0, pool.size - 1)].astype(float)
    a[-1] = t_max

    out = [a[0]]
    for v in a[1:]:
        if v > out[-1]:
            out.append(v)
            continue
        nxt = next((u for u in a if u > out[-1]), None)
        if nxt is None:
            raise ValueError(
                f"cannot build {n_intervals} strictly increasing cut-points: "
                f"only {len(np.unique(pool))} distinct times"
            )
        out.append(0.5 * (out[-1] + nxt))
    return CutPoints(np.array(out))


def explicit_cutpoints(a, dataset: Dataset) -> CutPoints:
    """Validate a user-supplied cut-point vector against the data.

    If the final cut-point does not reach the maximum observed time it is
    extended there with a warning (this changes the number of intervals'
    meaning when a single cut-point was meant to give an exponential
    baseline over the original horizon).
    """
    a = np.array(a, dtype=float).ravel()
    if a.size == 0 or a[0] <= 0 or np.any(np.diff(a) <= 0):
        raise ValueError("cut-points must be positive and strictly increasing")
    t_max = float(dataset.times.max())
    if a[-1] < t_max:
        warnings.warn(
            f"final cut-point {a[-1]} is below the maximum observed time {t_max}; "
            f"extending it to {t_max}. With a single cut-point this alters the "
            "intended exponential-baseline horizon.",
            stacklevel=2,
        )
        a = a.copy()
        a[-1] = t_max
    return CutPoints(a)


def cumulative_hazard(h: PiecewiseHazard, t) -> np.ndarray | float:
    """Baseline cumulative hazard at t (scalar or array), zero at t = 0.

    Beyond the last cut-point the final interval's height is extended.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("time must be nonnegative")
    w = h.cuts.interval_widths(t_arr)
    out = w @ h.heights
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


@dataclass(frozen=True)
class PoissonExpansion:
    """Pseudo-rows of the Poisson reformulation of the PH likelihood.

    One row per (observation, interval k <= K(t)): pseudo-response y,
    design row ``z = (interval indicators, w)``, log exposure offset, and
    back-pointers to the originating observation, cluster and interval.
    """

    y: np.ndarray
    design: np.ndarray
    log_offsets: np.ndarray
    obs_index: np.ndarray
    cluster_index: np.ndarray
    interval: np.ndarray
    n_intervals: int
    n_covariates: int
    n_clusters: int
    n_obs: int

    @property
    def n_rows(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.n_intervals + self.n_covariates


def expand_poisson(dataset: Dataset, cuts: CutPoints) -> PoissonExpansion:
    """Expand observations into Poisson pseudo-rows over hazard intervals.

    Defensive handling for zero-width exposures (a follow-up time landing
    exactly on a cut boundary): such rows are dropped, and an event carried
    by a dropped row is reassigned to the last retained interval, the one
    containing the time's left neighborhood.
    """
    t = dataset.times
    if cuts.a[-1] < t.max():
        raise ValueError("cut-points do not cover the data: a_K < max time")
    K = cuts.n_intervals
    kidx = cuts.interval_index(t)  # 0-based K(t)-1
    widths = cuts.interval_widths(t)  # (N, K)

    n_rows_per_obs = kidx + 1
    R = int(n_rows_per_obs.sum())
    obs_index = np.repeat(np.arange(t.size), n_rows_per_obs)
    interval = np.concatenate([np.arange(k + 1) for k in kidx]) if t.size else np.empty(0, int)
    delta_w = widths[obs_index, interval]
    y = np.where(
        (interval == kidx[obs_index]) & (dataset.events[obs_index] == 1), 1.0, 0.0
    )

    drop = delta_w <= 0.0
    if np.any(drop):
        # reassign event mass from a dropped row to the previous retained row
        for r in np.nonzero(drop & (y == 1.0))[0]:
            left = r - 1
            while left >= 0 and obs_index[left] == obs_index[r] and drop[left]:
                left -= 1
            if left >= 0 and obs_index[left] == obs_index[r]:
                y[left] = 1.0
        keep = ~drop
        obs_index, interval, delta_w, y = (
            obs_index[keep],
            interval[keep],
            delta_w[keep],
            y[keep],
        )
        R = obs_index.size

    W = dataset.design_matrix()
    design = np.zeros((R, K + W.shape[1]))
    design[np.arange(R), interval] = 1.0
    design[:, K:] = W[obs_index]

    return PoissonExpansion(
        y=y,
        design=design,
        log_offsets=np.log(delta_w),
        obs_index=obs_index,
        cluster_index=dataset.cluster_index[obs_index],
        interval=interval,
        n_intervals=K,
        n_covariates=W.shape[1],
        n_clusters=dataset.n_clusters,
        n_obs=t.size,
    )


def poisson_loglik(expansion: PoissonExpansion, gamma, frailties) -> float:
    """Log-likelihood of (gamma, frailties) over the expansion rows.

    Equals the proportional-hazards conditional log-likelihood exactly:
    ``sum_rows [y * (z'gamma + e) - exp(z'gamma + e + log Delta)]``.
    """
    gamma = np.asarray(gamma, dtype=float)
    frailties = np.asarray(frailties, dtype=float)
    if gamma.shape != (expansion.dim,):
        raise ValueError(
            f"gamma has dimension {gamma.shape}, expected ({expansion.dim},)"
        )
    if frailties.shape != (expansion.n_clusters,):
        raise ValueError(
            f"frailties have dimension {frailties.shape}, expected ({expansion.n_clusters},)"
        )
    eta = expansion.design @ gamma + frailties[expansion.cluster_index]
    return float(expansion.y @ eta - np.exp(eta + expansion.log_offsets).sum())


def per_observation_loglik(expansion: PoissonExpansion, gamma, frailties) -> np.ndarray:
    """Per-observation PH log-likelihood contributions, shape (n_obs,)."""
    gamma = np.asarray(gamma, dtype=float)
    frailties = np.asarray(frailties, dtype=float)
    eta = expansion.design @ gamma + frailties[expansion.cluster_index]
    terms = expansion.y * eta - np.exp(eta + expansion.log_offsets)
    return np.bincount(expansion.obs_index, weights=terms, minlength=expansion.n_obs)


def write_expansion(expansion: PoissonExpansion, path, delimiter=","):
    """Dump the expansion rows as delimited text for debugging."""
    K = expansion.n_intervals
    header = (
        ["obs", "cluster", "interval", "y", "log_offset"]
        + [f"z{k + 1}" for k in range(K)]
        + [f"w{j + 1}" for j in range(expansion.n_covariates)]
    )
    with open(path, "w") as fh:
        fh.write(delimiter.join(header) + "\n")
        for r in range(expansion.n_rows):
            row = [
                str(int(expansion.obs_index[r])),
                str(int(expansion.cluster_index[r])),
                str(int(expansion.interval[r]) + 1),
                repr(float(expansion.y[r])),
                repr(float(expansion.log_offsets[r])),
            ] + [repr(float(v)) for v in expansion.design[r]]
            fh.write(delimiter.join(row) + "\n")
