"""Metropolis-within-Gibbs sampler for the frailty PH model.

One sweep updates, in fixed order: the hazard/regression block gamma, the
cluster frailties, the tailfree node coefficients (all at once; their full
conditionals are independent given the frailty paths), the centering scale
theta, and the precision c (conjugate).  Random-walk proposals adapt during
burn-in only (Haario covariance for gamma, Robbins-Monro scale tuning
everywhere) and are frozen afterwards so the chain stays ergodic.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky

from . import ldtfp
from .data import Dataset
from .hazard import CutPoints, PoissonExpansion, expand_poisson

__all__ = [
    "Hyperparameters",
    "ModelSpec",
    "ChainControls",
    "SamplerState",
    "PosteriorChain",
    "ChainInitializationError",
    "ChainDivergenceError",
    "AdaptiveRWMetropolis",
    "init_state",
    "update_gamma",
    "update_frailties",
    "update_forest",
    "run_chain",
    "prior_replication_check",
    "save_chain",
    "load_chain",
]


class ChainInitializationError(RuntimeError):
    """The log posterior is not finite at the starting state."""


class ChainDivergenceError(RuntimeError):
    """The chain reached a non-finite state mid-run."""

    def __init__(self, iteration):
        super().__init__(f"non-finite state at iteration {iteration}")
        self.iteration = iteration


@dataclass
class Hyperparameters:
    """Prior settings for the hierarchical model.

    ``tau2=None`` resolves at fit time to ``tau1 * s2`` where ``s2`` is a
    crude per-cluster event-rate variance estimate from the frailty-free
    ridge Poisson fit (floored at 0.05), mirroring the convention of
    centering the scale prior at an initial frailty-variance estimate.
    ``s0`` may be a scalar prior variance or a full covariance matrix.
    """

    tau1: float = 1.001
    tau2: float | None = None
    a_c: float = 1.0
    b_c: float = 1.0
    gamma0: np.ndarray | None = None
    s0: float | np.ndarray = 1000.0


@dataclass
class ModelSpec:
    """Everything that defines one model fit, apart from chain controls."""

    dataset: Dataset
    cuts: CutPoints
    frailty: str = "ldtfp"
    depth: int = 4
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    rho: object = ldtfp.default_rho

    def __post_init__(self):
        if self.frailty not in ldtfp.FRAILTY_VARIANTS:
            raise ValueError(
                f"unknown frailty variant {self.frailty!r}; choose from {ldtfp.FRAILTY_VARIANTS}"
            )
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def dim(self) -> int:
        return self.cuts.n_intervals + self.dataset.n_covariates


@dataclass(frozen=True)
class ChainControls:
    iterations: int = 55_000
    burn_in: int = 5_000
    thin: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (self.iterations > self.burn_in >= 0):
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if (self.iterations - self.burn_in) < self.thin:
            raise ValueError("no draws would be retained with these controls")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


class AdaptiveRWMetropolis:
    """Multivariate random-walk Metropolis block with adaptation.

    Proposal: x + s L z with L the Cholesky factor of the running sample
    covariance (Haario) regularized by a small diagonal, and s tuned by
    Robbins-Monro toward the target acceptance rate.  ``freeze`` stops all
    adaptation.
    """

    def __init__(self, dim, rng, init_cov_diag=None, target_rate=None, batch=25):
        self.dim = dim
        self.rng = rng
        self.target_rate = target_rate if target_rate is not None else (
            0.44 if dim == 1 else 0.234
        )
        self.log_scale = math.log(2.38 / math.sqrt(dim))
        diag = np.ones(dim) if init_cov_diag is None else np.asarray(init_cov_diag, float)
        self._chol = np.diag(np.sqrt(diag))
        self.adapting = True
        self.batch = batch
        self._acc = 0
        self._tries = 0
        self._nbatch = 0
        self._n = 0
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))
        self._min_samples = max(20, 2 * dim)
        self.accepted_total = 0
        self.tries_total = 0

    def step(self, x, lp_x, logpost):
        """One Metropolis step from (x, lp_x); returns (x, lp_x, accepted)."""
        prop = x + math.exp(self.log_scale) * (self._chol @ self.rng.standard_normal(self.dim))
        lp_prop = logpost(prop)
        accept = lp_prop - lp_x > math.log(self.rng.uniform()) if np.isfinite(lp_prop) else False
        if accept:
            x, lp_x = prop, lp_prop
        self.tries_total += 1
        self.accepted_total += int(accept)
        if self.adapting:
            self._observe(x, accept)
        return x, lp_x, accept

    def _observe(self, x, accepted):
        self._n += 1
        d = x - self._mean
        self._mean += d / self._n
        self._m2 += np.outer(d, x - self._mean)
        self._acc += int(accepted)
        self._tries += 1
        if self._tries >= self.batch:
            self._nbatch += 1
            rate = self._acc / self._tries
            self.log_scale += (rate - self.target_rate) / math.sqrt(self._nbatch)
            self.log_scale = min(max(self.log_scale, -12.0), 4.0)
            self._acc = 0
            self._tries = 0
            if self._n >= self._min_samples:
                cov = self._m2 / (self._n - 1)
                reg = 1e-8 * max(np.trace(cov) / self.dim, 1e-12)
                try:
                    self._chol = cholesky(cov + reg * np.eye(self.dim), lower=True)
                except np.linalg.LinAlgError:
                    pass

    def freeze(self):
        self.adapting = False

    def snapshot(self):
        return (self.log_scale, self._chol.copy())


class _VectorScalarRW:
    """Independent scalar random-walk chains with per-chain adapted scales."""

    def __init__(self, n, rng, init_scale=0.5, target_rate=0.44, batch=25):
        self.n = n
        self.rng = rng
        self.target_rate = target_rate
        self.log_scales = np.full(n, math.log(init_scale))
        self.adapting = True
        self.batch = batch
        self._acc = np.zeros(n)
        self._tries = 0
        self._nbatch = 0
        self.accepted_total = 0.0
        self.tries_total = 0

    def propose(self, x):
        return x + np.exp(self.log_scales) * self.rng.standard_normal(self.n)

    def observe(self, accepted):
        self.tries_total += 1
        self.accepted_total += float(np.mean(accepted)) if self.n else 0.0
        if not self.adapting:
            return
        self._acc += accepted
        self._tries += 1
        if self._tries >= self.batch:
            self._nbatch += 1
            rates = self._acc / self._tries
            self.log_scales += (rates - self.target_rate) / math.sqrt(self._nbatch)
            np.clip(self.log_scales, -12.0, 4.0, out=self.log_scales)
            self._acc[:] = 0.0
            self._tries = 0

    def freeze(self):
        self.adapting = False

    def snapshot(self):
        return self.log_scales.copy()


class SamplerState:
    """Mutable chain state: parameters, per-block proposal tuners, caches."""

    def __init__(self, spec, expansion, rng, likelihood_on=True):
        self.rng = rng
        self.iteration = 0
        self.likelihood_on = likelihood_on
        self.spec = spec
        self.expansion = expansion
        ds = spec.dataset
        self.n = ds.n_clusters
        self.q = ds.n_cluster_covariates
        self.cluster_design1 = np.hstack([np.ones((self.n, 1)), ds.cluster_design])
        self.depth = spec.depth
        self.n_nodes = ldtfp.n_internal_nodes(spec.depth)
        self.node_levels = ldtfp.node_levels(spec.depth)
        self.rho_vec = np.array([spec.rho(j) for j in self.node_levels])
        # free coefficient columns per node: all for ldtfp, intercept only
        # for the exchangeable law, none for the Gaussian limit
        if spec.frailty == "ldtfp":
            self.free_cols = np.arange(self.q + 1)
        elif spec.frailty == "exchangeable_tailfree":
            self.free_cols = np.arange(1)
        else:
            self.free_cols = np.arange(0)
        self.update_nodes = spec.frailty != "gaussian" and self.n_nodes > 0 and self.free_cols.size > 0

        # parameters
        self.gamma = None  # set by init_state
        self.frailties = np.zeros(self.n)
        self.beta = np.zeros((self.n_nodes, self.q + 1))
        self.theta = 1.0
        self.c = spec.hyper.a_c / spec.hyper.b_c

        # z-scale boundary grid of the finest partition (scaled by sqrt(theta))
        from scipy.special import ndtri

        self.z_finest = ndtri(np.arange(1, 1 << spec.depth) / (1 << spec.depth))

        # caches filled by init_state
        self.eta = None          # design @ gamma, per pseudo-row
        self.exp_eta_off = None  # exp(eta + log_offset)
        self.exp_e_row = None    # exp(frailty) gathered per pseudo-row
        self.lp_gamma = None     # cached gamma-block log target
        self.node_lp = None      # (n_nodes, n) linear predictors
        self.events_by_cluster = None

    # ---- likelihood pieces -------------------------------------------------

    def refresh_gamma_caches(self):
        ex = self.expansion
        self.eta = ex.design @ self.gamma
        with np.errstate(over="ignore"):
            self.exp_eta_off = np.exp(self.eta + ex.log_offsets)
        self.exp_e_row = np.exp(self.frailties)[ex.cluster_index]

    def cluster_exposure(self):
        """Per-cluster exposure sum_k exp(z'gamma + log Delta)."""
        return np.bincount(
            self.expansion.cluster_index, weights=self.exp_eta_off, minlength=self.n
        )

    def gamma_log_target(self, gamma, eta=None, exp_eta_off=None):
        """Poisson + prior terms that vary with gamma (frailty sums excluded)."""
        ex = self.expansion
        if eta is None:
            eta = ex.design @ gamma
            with np.errstate(over="ignore"):
                exp_eta_off = np.exp(eta + ex.log_offsets)
        lik = 0.0
        if self.likelihood_on and ex.n_rows:
            lik = ex.y @ eta - exp_eta_off @ self.exp_e_row
        return lik + self._gamma_log_prior(gamma), eta, exp_eta_off

    def _gamma_log_prior(self, gamma):
        d = gamma - self._gamma0
        if self._s0_chol is not None:
            w = cho_solve(self._s0_chol, d)
            return -0.5 * float(d @ w)
        return -0.5 * float(d @ d) / self._s0_scalar

    # ---- frailty law pieces ------------------------------------------------

    def refresh_node_lp(self):
        self.node_lp = (
            self.beta @ self.cluster_design1.T if self.n_nodes else np.zeros((0, self.n))
        )

    def finest_index(self, e, theta=None):
        theta = self.theta if theta is None else theta
        return np.searchsorted(math.sqrt(theta) * self.z_finest, e, side="left")

    def path_terms(self, m):
        """(ancestor flat node ids, child bits) per level for finest indices m."""
        J = self.depth
        out = []
        for j in range(1, J):
            anc = m >> (J - j)
            bit = (m >> (J - j - 1)) & 1
            out.append((ldtfp.node_offset(j) + anc, bit))
        return out

    def frailty_log_density(self, e, theta=None):
        """log g(e_i | x_i) for the n frailties under the current forest."""
        theta = self.theta if theta is None else theta
        lp = -0.5 * (math.log(2 * math.pi * theta)) - 0.5 * e * e / theta
        lp = lp + self.depth * math.log(2.0) + math.log(0.5)
        if self.n_nodes:
            m = self.finest_index(e, theta)
            cols = np.arange(self.n)
            for rows, bit in self.path_terms(m):
                d = self.node_lp[rows, cols]
                lp += -np.logaddexp(0.0, np.where(bit == 0, -d, d))
        return lp


def _resolve_hyper(spec, expansion, gamma_init):
    """Fill in defaults; auto tau2 from a crude frailty-variance estimate."""
    h = spec.hyper
    dim = spec.dim
    gamma0 = np.zeros(dim) if h.gamma0 is None else np.asarray(h.gamma0, float)
    if gamma0.shape != (dim,):
        raise ValueError(f"gamma0 has shape {gamma0.shape}, expected ({dim},)")
    s0 = h.s0
    if np.ndim(s0) == 2:
        s0 = np.asarray(s0, float)
        if s0.shape != (dim, dim):
            raise ValueError(f"s0 has shape {s0.shape}, expected ({dim}, {dim})")
    elif not float(s0) > 0:
        raise ValueError("s0 must be positive")
    tau2 = h.tau2
    if tau2 is None:
        eta = expansion.design @ gamma_init + expansion.log_offsets
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            expected = np.bincount(
                expansion.cluster_index, weights=np.exp(eta), minlength=expansion.n_clusters
            )
            observed = np.bincount(
                expansion.cluster_index, weights=expansion.y, minlength=expansion.n_clusters
            )
            crude = np.log((observed + 0.5) / (expected + 0.5))
        crude = crude[np.isfinite(crude)]
        s2 = max(float(np.var(crude)) if crude.size else 0.0, 0.05)
        tau2 = h.tau1 * s2
    for name, v in (("tau1", h.tau1), ("tau2", tau2), ("a_c", h.a_c), ("b_c", h.b_c)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    return Hyperparameters(h.tau1, float(tau2), h.a_c, h.b_c, gamma0, s0)


def _ridge_poisson_fit(expansion, gamma0, s0, max_iter=60, tol=1e-10):
    """Posterior-mode Poisson fit with zero frailties; returns the mode and
    the diagonal of the inverse curvature (initial proposal variances)."""
    D = expansion.dim
    if np.ndim(s0) == 2:
        s0_inv = np.linalg.inv(s0)
    else:
        s0_inv = np.eye(D) / float(s0)
    Z, y, off = expansion.design, expansion.y, expansion.log_offsets
    gamma = gamma0.copy()

    def objective(g):
        eta = np.clip(Z @ g + off, -700, 60)
        d = g - gamma0
        return float(y @ (Z @ g) - np.exp(eta).sum() - 0.5 * d @ s0_inv @ d)

    obj = objective(gamma)
    hess = None
    for _ in range(max_iter):
        eta = np.clip(Z @ gamma + off, -700, 60)
        mu = np.exp(eta)
        grad = Z.T @ (y - mu) - s0_inv @ (gamma - gamma0)
        hess = (Z * mu[:, None]).T @ Z + s0_inv
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        for _ in range(40):
            cand = gamma + scale * step
            cand_obj = objective(cand)
            if cand_obj >= obj - 1e-12:
                break
            scale *= 0.5
        gamma = gamma + scale * step
        improved = cand_obj - obj
        obj = cand_obj
        if abs(improved) < tol and float(np.max(np.abs(scale * step))) < 1e-8:
            break
    var_diag = np.diag(np.linalg.inv(hess)) if hess is not None else np.ones(D)
    return gamma, np.clip(var_diag, 1e-10, None)


def init_state(spec: ModelSpec, expansion: PoissonExpansion, rng, likelihood_on=True) -> SamplerState:
    """Build the starting state: gamma at the frailty-free ridge Poisson
    mode, zero frailties and node coefficients, prior-implied theta."""
    state = SamplerState(spec, expansion, rng, likelihood_on=likelihood_on)

    dim = spec.dim
    h0 = spec.hyper
    gamma0 = np.zeros(dim) if h0.gamma0 is None else np.asarray(h0.gamma0, float)
    if gamma0.shape != (dim,):
        raise ValueError(f"gamma0 has shape {gamma0.shape}, expected ({dim},)")
    s0 = h0.s0
    if np.ndim(s0) == 2:
        s0 = np.asarray(s0, float)
        if s0.shape != (dim, dim):
            raise ValueError(f"s0 has shape {s0.shape}, expected ({dim}, {dim})")
    elif not float(s0) > 0:
        raise ValueError("s0 must be positive")
    if likelihood_on and expansion.n_rows:
        gamma_init, var_diag = _ridge_poisson_fit(expansion, gamma0, s0)
    else:
        gamma_init = gamma0.copy()
        var_diag = (
            np.diag(np.asarray(s0, float)) if np.ndim(s0) == 2 else np.full(dim, float(s0))
        )
    hyper = _resolve_hyper(spec, expansion, gamma_init)
    state.hyper = hyper
    state._gamma0 = hyper.gamma0
    if np.ndim(hyper.s0) == 2:
        state._s0_chol = cho_factor(hyper.s0)
        state._s0_scalar = None
    else:
        state._s0_chol = None
        state._s0_scalar = float(hyper.s0)

    state.gamma = gamma_init
    state.theta = math.sqrt(hyper.tau2 / hyper.tau1)
    state.c = hyper.a_c / hyper.b_c
    state.refresh_gamma_caches()
    state.refresh_node_lp()
    state.events_by_cluster = np.bincount(
        expansion.cluster_index, weights=expansion.y, minlength=state.n
    )

    state.gamma_block = AdaptiveRWMetropolis(dim, rng, init_cov_diag=var_diag)
    state.frailty_block = _VectorScalarRW(state.n, rng, init_scale=0.5)
    node_dim = state.free_cols.size
    state.node_block = _VectorScalarRW(
        state.n_nodes if state.update_nodes else 0,
        rng,
        init_scale=0.5,
        target_rate=0.44 if node_dim <= 1 else 0.234,
    )
    state.theta_block = AdaptiveRWMetropolis(1, rng, init_cov_diag=[0.05])

    state.lp_gamma, _, _ = state.gamma_log_target(
        state.gamma, state.eta, state.exp_eta_off
    )
    lp_frail = state.frailty_log_density(state.frailties)
    if not (np.isfinite(state.lp_gamma) and np.all(np.isfinite(lp_frail))):
        raise ChainInitializationError(
            "log posterior is not finite at the starting state; consider "
            "standardizing covariates (standardize=True / --standardize) or "
            "rescaling the time axis"
        )
    return state


def update_gamma(state: SamplerState, expansion: PoissonExpansion, spec: ModelSpec) -> SamplerState:
    """Adaptive random-walk Metropolis step for the joint (log hazard
    heights, regression coefficients) block."""
    store = {}

    def logpost(g):
        lp, eta, exp_eta_off = state.gamma_log_target(g)
        store["eta"], store["exp"] = eta, exp_eta_off
        return lp

    lp_cur, _, _ = state.gamma_log_target(state.gamma, state.eta, state.exp_eta_off)
    new_gamma, lp_new, accepted = state.gamma_block.step(state.gamma, lp_cur, logpost)
    if accepted:
        state.gamma = new_gamma
        state.eta = store["eta"]
        state.exp_eta_off = store["exp"]
    state.lp_gamma = lp_new
    return state


def update_frailties(state: SamplerState, expansion: PoissonExpansion, spec: ModelSpec) -> SamplerState:
    """Independent scalar Metropolis steps for every cluster frailty,
    proposed and accepted in parallel."""
    e = state.frailties
    if state.n == 0:
        return state
    A = state.events_by_cluster if state.likelihood_on else 0.0
    B = state.cluster_exposure() if state.likelihood_on else 0.0
    prop = state.frailty_block.propose(e)
    with np.errstate(over="ignore"):
        lp_cur = state.frailty_log_density(e)
        lp_prop = state.frailty_log_density(prop)
        if state.likelihood_on:
            lp_cur = lp_cur + A * e - B * np.exp(e)
            lp_prop = lp_prop + A * prop - B * np.exp(prop)
    ratio = lp_prop - lp_cur
    accept = np.where(
        np.isfinite(ratio), np.log(state.rng.uniform(size=state.n)) < ratio, False
    )
    e = np.where(accept, prop, e)
    state.frailties = e
    state.exp_e_row = np.exp(e)[expansion.cluster_index]
    state.frailty_block.observe(accept.astype(float))
    return state


def _node_path_loglik(state, m, node_lp):
    """Per-node log-likelihood of the observed branch choices, vectorized
    over nodes via bincount on flat node ids."""
    total = np.zeros(state.n_nodes)
    cols = np.arange(state.n)
    for rows, bit in state.path_terms(m):
        d = node_lp[rows, cols]
        contrib = -np.logaddexp(0.0, np.where(bit == 0, -d, d))
        total += np.bincount(rows, weights=contrib, minlength=state.n_nodes)
    return total


def update_forest(state: SamplerState, spec: ModelSpec) -> SamplerState:
    """Update node coefficients (joint independent Metropolis), the
    centering scale theta (random walk on log theta), and the precision c
    (conjugate gamma draw)."""
    hyper = state.hyper
    e = state.frailties

    if state.update_nodes:
        m = state.finest_index(e)
        prior_var = 2.0 * state.n / (state.c * state.rho_vec)
        beta_prop = state.beta.copy()
        noise = state.rng.standard_normal((state.n_nodes, state.free_cols.size))
        beta_prop[:, state.free_cols] += np.exp(state.node_block.log_scales)[:, None] * noise
        lp_cur = _node_path_loglik(state, m, state.node_lp)
        node_lp_prop = beta_prop @ state.cluster_design1.T
        lp_prop = _node_path_loglik(state, m, node_lp_prop)
        ss_cur = (state.beta[:, state.free_cols] ** 2).sum(axis=1)
        ss_prop = (beta_prop[:, state.free_cols] ** 2).sum(axis=1)
        ratio = lp_prop - lp_cur - 0.5 * (ss_prop - ss_cur) / prior_var
        accept = np.log(state.rng.uniform(size=state.n_nodes)) < ratio
        if np.any(accept):
            state.beta[accept] = beta_prop[accept]
            state.refresh_node_lp()
        state.node_block.observe(accept.astype(float))

    # theta: scale of the centering law; moving it relocates the partition
    # boundaries, so path terms enter the ratio alongside the normal terms
    def theta_logpost(log_theta_vec):
        theta = math.exp(float(log_theta_vec[0]))
        lp = float(np.sum(state.frailty_log_density(e, theta)))
        return lp - 2.0 * hyper.tau1 * math.log(theta) - hyper.tau2 * theta**-2

    cur = np.array([math.log(state.theta)])
    lp_cur = theta_logpost(cur)
    new, _, _ = state.theta_block.step(cur, lp_cur, theta_logpost)
    state.theta = math.exp(float(new[0]))

    # precision: conjugate full conditional
    if state.update_nodes:
        ss = float(
            (state.beta[:, state.free_cols] ** 2 * (state.rho_vec / (4.0 * state.n))[:, None]).sum()
        )
        d_total = state.n_nodes * state.free_cols.size
        state.c = state.rng.gamma(hyper.a_c + 0.5 * d_total, 1.0 / (hyper.b_c + ss))
    else:
        state.c = state.rng.gamma(hyper.a_c, 1.0 / hyper.b_c)
    return state


def _freeze_all(state):
    state.gamma_block.freeze()
    state.frailty_block.freeze()
    state.node_block.freeze()
    state.theta_block.freeze()


def _adaptation_snapshot(state):
    return {
        "gamma": state.gamma_block.snapshot(),
        "frailties": state.frailty_block.snapshot(),
        "nodes": state.node_block.snapshot(),
        "theta": state.theta_block.snapshot(),
    }


@dataclass
class PosteriorChain:
    """Retained draws plus everything needed to evaluate predictions."""

    gamma: np.ndarray          # (M, K + p)
    frailties: np.ndarray      # (M, n)
    theta: np.ndarray          # (M,)
    c: np.ndarray              # (M,)
    beta: np.ndarray           # (M, n_nodes, q + 1)
    loglik_obs: np.ndarray     # (M, N) conditional per-observation log-likelihood
    cuts: np.ndarray
    depth: int
    frailty_variant: str
    n_clusters: int
    n_cluster_covariates: int
    covariate_names: tuple
    cluster_ids: tuple
    controls: ChainControls
    hyper: dict
    acceptance: dict
    adaptation_frozen_equal: bool
    transform: object = None

    @property
    def n_retained(self) -> int:
        return self.gamma.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.cuts.size

    @property
    def n_covariates(self) -> int:
        return self.gamma.shape[1] - self.cuts.size

    def log_heights(self) -> np.ndarray:
        return self.gamma[:, : self.n_intervals]

    def coefficients(self) -> np.ndarray:
        return self.gamma[:, self.n_intervals :]

    def forest_at(self, m: int) -> ldtfp.TailfreeForest:
        """Materialize draw m's frailty law as a TailfreeForest."""
        return ldtfp.TailfreeForest(
            ldtfp.build_partition(self.depth, float(self.theta[m])),
            self.beta[m],
            float(self.c[m]) if self.c[m] > 0 else 1.0,
            self.n_clusters,
        )


def _snapshots_equal(a, b):
    def eq(u, v):
        if isinstance(u, tuple):
            return all(eq(x, y) for x, y in zip(u, v))
        return bool(np.array_equal(np.asarray(u), np.asarray(v)))

    return all(eq(a[k], b[k]) for k in a)


def run_chain(spec: ModelSpec, controls: ChainControls, _prior_only=False) -> PosteriorChain:
    """Run one chain and collect retained draws.

    Deterministic for a given seed.  ``_prior_only`` disables every
    likelihood term so the chain targets the joint prior (used by
    prior_replication_check).
    """
    rng = np.random.default_rng(controls.seed)
    expansion = expand_poisson(spec.dataset, spec.cuts)
    state = init_state(spec, expansion, rng, likelihood_on=not _prior_only)

    M = controls.n_retained
    n_obs = expansion.n_obs
    out_gamma = np.empty((M, spec.dim))
    out_e = np.empty((M, state.n))
    out_theta = np.empty(M)
    out_c = np.empty(M)
    out_beta = np.empty((M, state.n_nodes, state.q + 1))
    out_ll = np.empty((M, n_obs))

    frozen_snapshot = None
    if controls.burn_in == 0:
        _freeze_all(state)
        frozen_snapshot = _adaptation_snapshot(state)
    m_out = 0
    for it in range(1, controls.iterations + 1):
        state.iteration = it
        update_gamma(state, expansion, spec)
        update_frailties(state, expansion, spec)
        update_forest(state, spec)

        if not (np.isfinite(state.lp_gamma) and math.isfinite(state.theta)):
            raise ChainDivergenceError(it)

        if it == controls.burn_in:
            _freeze_all(state)
            frozen_snapshot = _adaptation_snapshot(state)

        if it > controls.burn_in and (it - controls.burn_in) % controls.thin == 0:
            out_gamma[m_out] = state.gamma
            out_e[m_out] = state.frailties
            out_theta[m_out] = state.theta
            out_c[m_out] = state.c
            if state.n_nodes:
                out_beta[m_out] = state.beta
            e_row = state.frailties[expansion.cluster_index]
            row_terms = (
                expansion.y * (state.eta + e_row) - state.exp_eta_off * state.exp_e_row
            )
            out_ll[m_out] = np.bincount(
                expansion.obs_index, weights=row_terms, minlength=n_obs
            )
            if not np.all(np.isfinite(out_ll[m_out])):
                raise ChainDivergenceError(it)
            m_out += 1

    final_snapshot = _adaptation_snapshot(state)

    acceptance = {
        "gamma": state.gamma_block.accepted_total / max(state.gamma_block.tries_total, 1),
        "frailties": state.frailty_block.accepted_total / max(state.frailty_block.tries_total, 1),
        "nodes": state.node_block.accepted_total / max(state.node_block.tries_total, 1),
        "theta": state.theta_block.accepted_total / max(state.theta_block.tries_total, 1),
    }
    hyper = state.hyper
    return PosteriorChain(
        gamma=out_gamma,
        frailties=out_e,
        theta=out_theta,
        c=out_c,
        beta=out_beta,
        loglik_obs=out_ll,
        cuts=spec.cuts.a.copy(),
        depth=spec.depth,
        frailty_variant=spec.frailty,
        n_clusters=state.n,
        n_cluster_covariates=state.q,
        covariate_names=tuple(spec.dataset.covariate_names),
        cluster_ids=spec.dataset.cluster_ids(),
        controls=controls,
        hyper={
            "tau1": hyper.tau1,
            "tau2": hyper.tau2,
            "a_c": hyper.a_c,
            "b_c": hyper.b_c,
            "s0": hyper.s0.tolist() if np.ndim(hyper.s0) == 2 else float(hyper.s0),
            "gamma0": np.asarray(hyper.gamma0).tolist(),
        },
        acceptance=acceptance,
        adaptation_frozen_equal=_snapshots_equal(frozen_snapshot, final_snapshot),
        transform=spec.dataset.transform,
    )


# ---- prior replication diagnostic ---------------------------------------


def _batch_se(x, n_batches=50):
    """Monte Carlo standard error of the mean by batch means."""
    x = np.asarray(x, float)
    nb = min(n_batches, max(2, x.size // 10))
    size = x.size // nb
    means = x[: nb * size].reshape(nb, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(nb))


@dataclass
class PriorCheckReport:
    """Moment comparison of prior-only chain draws against their priors."""

    theta_inv2_mean: float
    theta_inv2_expected: float
    theta_inv2_se: float
    c_mean: float
    c_expected: float
    c_se: float
    beta_var_ratio: float | None
    n_draws: int

    @property
    def theta_ok(self) -> bool:
        return abs(self.theta_inv2_mean - self.theta_inv2_expected) <= 3 * self.theta_inv2_se

    @property
    def c_ok(self) -> bool:
        return abs(self.c_mean - self.c_expected) <= 3 * self.c_se

    @property
    def beta_ok(self) -> bool:
        return self.beta_var_ratio is None or 0.9 <= self.beta_var_ratio <= 1.1

    @property
    def passed(self) -> bool:
        return self.theta_ok and self.c_ok and self.beta_ok

    def summary(self) -> str:
        lines = [
            f"theta^-2 mean {self.theta_inv2_mean:.4f} vs {self.theta_inv2_expected:.4f} "
            f"(se {self.theta_inv2_se:.4f}): {'ok' if self.theta_ok else 'FAIL'}",
            f"c mean {self.c_mean:.4f} vs {self.c_expected:.4f} "
            f"(se {self.c_se:.4f}): {'ok' if self.c_ok else 'FAIL'}",
        ]
        if self.beta_var_ratio is not None:
            lines.append(
                f"beta standardized variance {self.beta_var_ratio:.4f} in [0.9, 1.1]: "
                f"{'ok' if self.beta_ok else 'FAIL'}"
            )
        return "\n".join(lines)


def prior_replication_check(spec: ModelSpec, controls: ChainControls) -> PriorCheckReport:
    """Sampler validity check: with all likelihood terms disabled the chain
    must reproduce the joint prior, so the marginal draws of theta^-2, c and
    the node coefficients are compared against their prior laws."""
    chain = run_chain(spec, controls, _prior_only=True)
    hyper = chain.hyper
    u = chain.theta**-2.0
    ratio = None
    if spec.frailty != "gaussian" and chain.beta.size:
        levels = ldtfp.node_levels(chain.depth)
        rho_vec = np.array([spec.rho(j) for j in levels])
        n_free = 1 if spec.frailty == "exchangeable_tailfree" else chain.beta.shape[2]
        z2 = (
            chain.beta[:, :, :n_free] ** 2
            * (chain.c[:, None, None] * rho_vec[None, :, None])
            / (2.0 * chain.n_clusters)
        )
        ratio = float(z2.mean())
    return PriorCheckReport(
        theta_inv2_mean=float(u.mean()),
        theta_inv2_expected=hyper["tau1"] / hyper["tau2"],
        theta_inv2_se=_batch_se(u),
        c_mean=float(chain.c.mean()),
        c_expected=hyper["a_c"] / hyper["b_c"],
        c_se=_batch_se(chain.c),
        beta_var_ratio=ratio,
        n_draws=chain.n_retained,
    )


# ---- chain persistence ----------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def save_chain(chain: PosteriorChain, directory, loglik_format="npy"):
    """Persist a chain: one delimited file per parameter block, the
    per-observation log-likelihood matrix (binary by default), and a JSON
    metadata document."""
    os.makedirs(directory, exist_ok=True)
    K = chain.n_intervals
    gamma_names = [f"loghaz_{k + 1}" for k in range(K)] + [
        f"coef_{name}" for name in chain.covariate_names
    ]
    _write_csv(os.path.join(directory, "gamma.csv"), gamma_names, chain.gamma)
    _write_csv(
        os.path.join(directory, "frailties.csv"),
        [f"cluster_{cid}" for cid in chain.cluster_ids],
        chain.frailties,
    )
    _write_csv(
        os.path.join(directory, "scalars.csv"),
        ["theta", "c"],
        np.column_stack([chain.theta, chain.c]),
    )
    with open(os.path.join(directory, "forest.csv"), "w") as fh:
        q1 = chain.beta.shape[2] if chain.beta.size else 1
        fh.write("draw,path,level," + ",".join(f"b{i}" for i in range(q1)) + "\n")
        if chain.beta.size:
            levels = ldtfp.node_levels(chain.depth)
            paths = [
                ldtfp.node_path(j, i - ldtfp.node_offset(j))
                for i, j in zip(range(len(levels)), levels)
            ]
            for m in range(chain.n_retained):
                for r, (path, level) in enumerate(zip(paths, levels)):
                    vals = ",".join(repr(float(v)) for v in chain.beta[m, r])
                    fh.write(f"{m},{path},{level},{vals}\n")
    if loglik_format == "npy":
        np.save(os.path.join(directory, "loglik.npy"), chain.loglik_obs)
    elif loglik_format == "csv":
        _write_csv(
            os.path.join(directory, "loglik.csv"),
            [f"obs_{j}" for j in range(chain.loglik_obs.shape[1])],
            chain.loglik_obs,
        )
    else:
        raise ValueError(f"unknown loglik format {loglik_format!r}")
    meta = {
        "cuts": chain.cuts.tolist(),
        "depth": chain.depth,
        "frailty_variant": chain.frailty_variant,
        "n_clusters": chain.n_clusters,
        "n_cluster_covariates": chain.n_cluster_covariates,
        "covariate_names": list(chain.covariate_names),
        "cluster_ids": list(chain.cluster_ids),
        "controls": {
            "iterations": chain.controls.iterations,
            "burn_in": chain.controls.burn_in,
            "thin": chain.controls.thin,
            "seed": chain.controls.seed,
        },
        "hyper": chain.hyper,
        "acceptance": chain.acceptance,
        "adaptation_frozen_equal": chain.adaptation_frozen_equal,
        "loglik_format": loglik_format,
        "transform": None
        if chain.transform is None
        else {
            "names": list(chain.transform.names),
            "center": list(chain.transform.center),
            "scale": list(chain.transform.scale),
        },
    }
    with open(os.path.join(directory, "chain_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def _read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = data.reshape(0, len(header))
    return header, data


def load_chain(directory) -> PosteriorChain:
    """Inverse of save_chain."""
    with open(os.path.join(directory, "chain_meta.json")) as fh:
        meta = json.load(fh)
    _, gamma = _read_csv(os.path.join(directory, "gamma.csv"))
    _, frail = _read_csv(os.path.join(directory, "frailties.csv"))
    _, scalars = _read_csv(os.path.join(directory, "scalars.csv"))
    M = gamma.shape[0]
    depth = meta["depth"]
    q1 = meta["n_cluster_covariates"] + 1
    beta = np.zeros((M, ldtfp.n_internal_nodes(depth), q1))
    with open(os.path.join(directory, "forest.csv")) as fh:
        header = fh.readline()
        for line in fh:
            parts = line.strip().split(",")
            m = int(parts[0])
            level, index = ldtfp.parse_node_path(parts[1])
            r = ldtfp.node_offset(level) + index
            beta[m, r] = [float(v) for v in parts[3:]]
    if meta["loglik_format"] == "npy":
        ll = np.load(os.path.join(directory, "loglik.npy"))
    else:
        _, ll = _read_csv(os.path.join(directory, "loglik.csv"))
    transform = None
    if meta["transform"] is not None:
        from .data import CovariateTransform

        transform = CovariateTransform(
            tuple(meta["transform"]["names"]),
            tuple(meta["transform"]["center"]),
            tuple(meta["transform"]["scale"]),
        )
    return PosteriorChain(
        gamma=gamma,
        frailties=frail,
        theta=scalars[:, 0],
        c=scalars[:, 1],
        beta=beta,
        loglik_obs=ll,
        cuts=np.array(meta["cuts"]),
        depth=depth,
        frailty_variant=meta["frailty_variant"],
        n_clusters=meta["n_clusters"],
        n_cluster_covariates=meta["n_cluster_covariates"],
        covariate_names=tuple(meta["covariate_names"]),
        cluster_ids=tuple(meta["cluster_ids"]),
        controls=ChainControls(**meta["controls"]),
        hyper=meta["hyper"],
        acceptance=meta["acceptance"],
        adaptation_frozen_equal=meta["adaptation_frozen_equal"],
        transform=transform,
    )
