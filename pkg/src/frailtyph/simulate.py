"""Simulation benchmarking: scenario generators, truth oracles, ISE scoring.

Scenario I draws cluster frailties from a two-component normal mixture
whose modes separate as the cluster covariate grows; Scenario II draws
positive-stable frailties whose shape parameter follows a logit in the
cluster covariate, so the implied marginal survival is exactly
exponential-in-the-linear-predictor.  Both admit closed-form or
quadrature truth survival functions used as ISE references.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data import ClusterInfo, Dataset, SurvivalRecord
from .hazard import quantile_cutpoints
from .inference import survival_draws
from .sampler import ChainControls, Hyperparameters, ModelSpec, run_chain

__all__ = [
    "ScenarioSpec",
    "StudyMethod",
    "ReplicateResult",
    "StudyResult",
    "sample_positive_stable",
    "generate_scenario_I",
    "generate_scenario_II",
    "generate_dataset",
    "weighted_ise",
    "run_study",
]


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one simulation scenario."""

    scenario: str = "I"
    n_clusters: int = 100
    cluster_size: int = 10
    xi: tuple = (1.0, 0.5, 1.0)
    eta: tuple = (1.0, 0.5)
    censoring: tuple = (0.25, 4.0)
    replicates: int = 200
    seed: int = 0
    custom_generator: object = None

    def __post_init__(self):
        if self.scenario not in ("I", "II", "custom"):
            raise ValueError("scenario must be 'I', 'II' or 'custom'")
        if self.scenario == "custom" and self.custom_generator is None:
            raise ValueError("custom scenario needs a generator callable")


def sample_positive_stable(alpha, rng, size=None):
    """Positive stable draw(s) with Laplace transform exp(-s^alpha).

    Kanter's construction: with U uniform and W unit exponential,
    ``X = [sin(a pi U) sin((1-a) pi U)^((1-a)/a) / sin(pi U)^(1/a)]
    * W^(-(1-a)/a)``.  ``alpha`` may be an array, broadcast against
    ``size``.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0.0) or np.any(alpha >= 1.0):
        raise ValueError("alpha must lie strictly inside (0, 1)")
    shape = np.broadcast_shapes(alpha.shape, () if size is None else tuple(np.atleast_1d(size)))
    u = rng.uniform(size=shape)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    w = rng.exponential(size=shape)
    ratio = (1.0 - alpha) / alpha
    x = (
        np.sin(alpha * np.pi * u)
        * np.sin((1.0 - alpha) * np.pi * u) ** ratio
        / np.sin(np.pi * u) ** (1.0 / alpha)
    ) * w**-ratio
    if size is None and alpha.ndim == 0:
        return float(x)
    return x


class MixtureFrailtyTruth:
    """Truth handle for Scenario I: conditional survival by quadrature.

    S(t | w) integrates exp(-t e^{w'xi + e}) against the frailty mixture
    0.5 N(-mu, 1) + 0.5 N(mu, 1), mu = exp(0.4 x), with x the last profile
    entry; 200-point Gauss-Legendre per component over +-9 component sds.
    """

    def __init__(self, xi, n_points=200):
        self.xi = np.asarray(xi, dtype=float)
        gl_x, gl_w = np.polynomial.legendre.leggauss(n_points)
        self._gl = (gl_x, gl_w)

    def _component_nodes(self, center):
        gl_x, gl_w = self._gl
        half = 9.0
        nodes = center + half * gl_x
        dens = np.exp(-0.5 * (nodes - center) ** 2) / math.sqrt(2 * math.pi)
        return nodes, half * gl_w * dens

    def _mix_nodes(self, profile):
        mu = math.exp(0.4 * profile[-1])
        n1, w1 = self._component_nodes(-mu)
        n2, w2 = self._component_nodes(mu)
        nodes = np.concatenate([n1, n2])
        weights = 0.5 * np.concatenate([w1, w2])
        return np.exp(nodes + float(self.xi @ profile)), weights

    def survival(self, t, profile):
        rate, weights = self._mix_nodes(np.asarray(profile, float))
        t = np.asarray(t, dtype=float)
        return np.exp(-np.multiply.outer(t, rate)) @ weights / weights.sum()

    def density(self, t, profile):
        rate, weights = self._mix_nodes(np.asarray(profile, float))
        t = np.asarray(t, dtype=float)
        return (np.exp(-np.multiply.outer(t, rate)) * rate) @ weights / weights.sum()

    def inverse_survival(self, s, profile):
        """Smallest t with S(t) = s, by bracketed root-finding."""
        s = float(s)
        if not 0.0 < s < 1.0:
            raise ValueError("s must be in (0, 1)")
        hi = 1.0
        while self.survival(hi, profile) > s:
            hi *= 2.0
            if hi > 1e12:
                raise RuntimeError("failed to bracket the survival quantile")
        return brentq(lambda t: float(self.survival(t, profile)) - s, 0.0, hi, xtol=1e-12)


class StableMarginalTruth:
    """Truth handle for Scenario II: the positive-stable frailty integrates
    out exactly, leaving S(t | w) = exp(-t e^{w~'eta}) with w~ the
    subject-covariate part of the profile."""

    def __init__(self, eta):
        self.eta = np.asarray(eta, dtype=float)

    def _rate(self, profile):
        profile = np.asarray(profile, dtype=float)
        return math.exp(float(self.eta @ profile[: self.eta.size]))

    def survival(self, t, profile):
        return np.exp(-np.asarray(t, dtype=float) * self._rate(profile))

    def density(self, t, profile):
        r = self._rate(profile)
        return r * np.exp(-np.asarray(t, dtype=float) * r)

    def inverse_survival(self, s, profile):
        if not 0.0 < s < 1.0:
            raise ValueError("s must be in (0, 1)")
        return -math.log(s) / self._rate(profile)


def _assemble_dataset(times, events, w1, w2, x):
    n, ni = w1.shape
    clusters = [ClusterInfo(str(i + 1), (float(x[i]),)) for i in range(n)]
    records = []
    for i in range(n):
        for j in range(ni):
            records.append(
                SurvivalRecord(
                    float(times[i, j]),
                    int(events[i, j]),
                    (float(w1[i, j]), float(w2[i, j])),
                    str(i + 1),
                )
            )
    return Dataset(records, clusters, ("w1", "w2"), ("x",))


def generate_scenario_I(spec: ScenarioSpec, rng) -> tuple[Dataset, MixtureFrailtyTruth]:
    """Clustered data with mixture frailties under a unit baseline hazard.

    Event times invert the conditional exponential law: T = E / exp(w'xi + e).
    """
    n, ni = spec.n_clusters, spec.cluster_size
    xi = np.asarray(spec.xi, dtype=float)
    x = rng.uniform(-3.0, 3.0, size=n)
    mu = np.exp(0.4 * x)
    component = rng.integers(0, 2, size=n)
    e = rng.normal(np.where(component == 1, mu, -mu), 1.0)
    w1 = rng.normal(size=(n, ni))
    w2 = rng.integers(0, 2, size=(n, ni)).astype(float)
    lin = xi[0] * w1 + xi[1] * w2 + (xi[2] * x + e)[:, None]
    t_event = rng.exponential(size=(n, ni)) / np.exp(lin)
    c = rng.uniform(spec.censoring[0], spec.censoring[1], size=(n, ni))
    times = np.minimum(t_event, c)
    events = (t_event <= c).astype(int)
    return _assemble_dataset(times, events, w1, w2, x), MixtureFrailtyTruth(xi)


def generate_scenario_II(spec: ScenarioSpec, rng) -> tuple[Dataset, StableMarginalTruth]:
    """Clustered data with positive-stable frailties of covariate-driven
    shape; cluster baselines satisfy Lambda_i(t) = t^(1/alpha_i) so the
    marginal model is a unit-baseline PH model in the subject covariates.
    """
    n, ni = spec.n_clusters, spec.cluster_size
    eta = np.asarray(spec.eta, dtype=float)
    x = rng.uniform(0.0, 2.0, size=n)
    alpha = expit(0.5 + 0.5 * x)
    v = sample_positive_stable(alpha, rng)
    w1 = rng.normal(size=(n, ni))
    w2 = rng.integers(0, 2, size=(n, ni)).astype(float)
    lin_tilde = eta[0] * w1 + eta[1] * w2
    exposure = v[:, None] * np.exp(lin_tilde / alpha[:, None])
    t_event = (rng.exponential(size=(n, ni)) / exposure) ** alpha[:, None]
    c = rng.uniform(spec.censoring[0], spec.censoring[1], size=(n, ni))
    times = np.minimum(t_event, c)
    events = (t_event <= c).astype(int)
    return _assemble_dataset(times, events, w1, w2, x), StableMarginalTruth(eta)


def generate_dataset(spec: ScenarioSpec, rng):
    if spec.scenario == "I":
        return generate_scenario_I(spec, rng)
    if spec.scenario == "II":
        return generate_scenario_II(spec, rng)
    return spec.custom_generator(spec, rng)


_U_NODES = None


def _u_quadrature(n_points=200):
    global _U_NODES
    if _U_NODES is None or _U_NODES[0].size != n_points:
        gl_x, gl_w = np.polynomial.legendre.leggauss(n_points)
        _U_NODES = (0.5 * (gl_x + 1.0), 0.5 * gl_w)
    return _U_NODES


def weighted_ise(fitted, truth, profile, n_points=200) -> float:
    """Integrated squared survival error weighted by the true event density.

    Substituting u = 1 - S(t | w) makes the weight exact:
    ``integral (S_hat - S)^2 f_T dt = integral_0^1 (S_hat(t(u)) - (1-u))^2 du``,
    evaluated by Gauss-Legendre on (0, 1) with t(u) from the truth handle's
    survival inverse.  ``fitted`` maps a time vector to survival values and
    must be nonincreasing.
    """
    u, w = _u_quadrature(n_points)
    t = np.array([truth.inverse_survival(1.0 - ui, profile) for ui in u])
    s_hat = np.asarray(fitted(t), dtype=float)
    if np.any(np.diff(s_hat) > 1e-10):
        raise ValueError("fitted survival curve is not nonincreasing")
    return float(w @ (s_hat - (1.0 - u)) ** 2)


@dataclass(frozen=True)
class StudyMethod:
    """One fitting recipe entered in a simulation study."""

    name: str
    frailty: str = "ldtfp"
    n_intervals: int = 10
    depth: int = 4
    hyper: Hyperparameters = field(default_factory=Hyperparameters)


@dataclass
class ReplicateResult:
    """Outcome of fitting every profile of one method on one replicate."""

    replicate: int
    method: str
    status: str
    seed: int
    runtime_s: float
    estimates: dict
    ise: dict


@dataclass
class StudyResult:
    scenario: ScenarioSpec
    methods: list
    profiles: list
    results: list

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.results if r.status != "ok")

    def table(self) -> list[dict]:
        """Flat rows, one per (replicate, method, profile).

        Wall-clock runtimes are deliberately left out: the table must be
        bit-identical across reruns and worker counts.
        """
        rows = []
        for r in self.results:
            for profile_key, ise in (r.ise or {None: float("nan")}).items():
                rows.append(
                    {
                        "replicate": r.replicate,
                        "method": r.method,
                        "profile": profile_key,
                        "status": r.status,
                        "ise": ise,
                        "seed": r.seed,
                    }
                )
        return rows

    def aggregate(self) -> dict:
        """Bias / MEAN-SD / SD-MEAN / CP per coefficient and ISE moments per
        profile, by method, over successful replicates."""
        out = {"n_failed": self.n_failed, "methods": {}}
        true_xi = (
            np.asarray(self.scenario.xi, dtype=float)
            if self.scenario.scenario == "I"
            else None
        )
        for method in self.methods:
            ok = [r for r in self.results if r.method == method.name and r.status == "ok"]
            entry = {"n_ok": len(ok), "coefficients": {}, "ise": {}}
            if ok:
                names = list(ok[0].estimates)
                for idx, name in enumerate(names):
                    est = np.array([r.estimates[name]["estimate"] for r in ok])
                    sd = np.array([r.estimates[name]["sd"] for r in ok])
                    row = {
                        "mean_estimate": float(est.mean()),
                        "mean_sd": float(sd.mean()),
                        "sd_mean": float(est.std(ddof=1)) if len(ok) > 1 else 0.0,
                    }
                    if true_xi is not None and idx < true_xi.size:
                        row["true"] = float(true_xi[idx])
                        row["bias"] = float(est.mean() - true_xi[idx])
                        row["cp"] = float(
                            np.mean([r.estimates[name]["covered"] for r in ok])
                        )
                    entry["coefficients"][name] = row
                for key in ok[0].ise:
                    vals = np.array([r.ise[key] for r in ok])
                    entry["ise"][key] = {
                        "mean": float(vals.mean()),
                        "sd": float(vals.std(ddof=1)) if len(ok) > 1 else 0.0,
                    }
            out["methods"][method.name] = entry
        return out


def _default_profiles(scenario):
    if scenario == "I":
        return [(2.0, 1.0, -2.0), (0.0, 1.0, 2.0)]
    return [(2.0, 1.0, 0.5), (0.0, 1.0, 1.5)]


def _replicate_seed(master, r, j):
    return int(np.random.SeedSequence(entropy=master, spawn_key=(r, j)).generate_state(1)[0])


def _run_replicate(payload):
    scenario, methods, controls, profiles, r = payload
    rng = np.random.default_rng(np.random.SeedSequence(entropy=scenario.seed, spawn_key=(r, 0)))
    data, truth = generate_dataset(scenario, rng)
    true_xi = np.asarray(scenario.xi, dtype=float) if scenario.scenario == "I" else None
    rows = []
    for j, method in enumerate(methods):
        seed = _replicate_seed(scenario.seed, r, j + 1)
        start = time.perf_counter()
        try:
            spec = ModelSpec(
                dataset=data,
                cuts=quantile_cutpoints(data, method.n_intervals),
                frailty=method.frailty,
                depth=method.depth,
                hyper=method.hyper,
            )
            chain = run_chain(spec, replace(controls, seed=seed))
            coefs = chain.coefficients()
            estimates = {}
            for idx, name in enumerate(chain.covariate_names):
                draws = coefs[:, idx]
                lo, hi = np.percentile(draws, [2.5, 97.5])
                row = {
                    "estimate": float(draws.mean()),
                    "sd": float(draws.std(ddof=1)),
                    "lower": float(lo),
                    "upper": float(hi),
                }
                if true_xi is not None and idx < true_xi.size:
                    row["covered"] = bool(lo <= true_xi[idx] <= hi)
                estimates[name] = row
            ise = {}
            for profile in profiles:
                key = "(" + ",".join(f"{v:g}" for v in profile) + ")"
                ise[key] = weighted_ise(
                    lambda t: survival_draws(chain, np.asarray(profile), t).mean(axis=0),
                    truth,
                    np.asarray(profile, dtype=float),
                )
            rows.append(
                ReplicateResult(
                    r, method.name, "ok", seed, time.perf_counter() - start, estimates, ise
                )
            )
        except Exception as exc:  # a failed fit is recorded, never dropped
            rows.append(
                ReplicateResult(
                    r,
                    method.name,
                    f"failed: {type(exc).__name__}: {exc}",
                    seed,
                    time.perf_counter() - start,
                    {},
                    {},
                )
            )
    return rows


def run_study(
    scenario: ScenarioSpec,
    methods: list[StudyMethod],
    controls: ChainControls,
    jobs: int | None = None,
    profiles=None,
) -> StudyResult:
    """Generate-fit-score over independent replicates.

    Replicates run in parallel with per-replicate seeds derived from the
    master seed by indexed seed-sequence spawning, so results are identical
    for any ``jobs`` value; results are merged sorted by replicate id.
    """
    profiles = [tuple(p) for p in (profiles or _default_profiles(scenario.scenario))]
    payloads = [(scenario, list(methods), controls, profiles, r) for r in range(scenario.replicates)]
    results = []
    if scenario.replicates == 0:
        return StudyResult(scenario, list(methods), profiles, [])
    if jobs is None:
        import os

        jobs = min(os.cpu_count() or 1, scenario.replicates)
    if jobs <= 1:
        chunks = [_run_replicate(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_replicate, payloads))
    for chunk in sorted(chunks, key=lambda rows: rows[0].replicate if rows else -1):
        results.extend(chunk)
    return StudyResult(scenario, list(methods), profiles, results)
