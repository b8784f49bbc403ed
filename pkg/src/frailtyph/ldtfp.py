"""Covariate-dependent frailty law built on a dyadic tailfree construction.

The real line is split into nested binary partitions at normal quantiles of
the centering law N(0, theta).  Conditional split probabilities at each
internal node follow a logistic regression on cluster-level covariates, so
the frailty density can change shape (skew, spread, modality) with the
covariates while staying centered:

* the root split is fixed at 1/2, making every conditional law median-zero;
* all node regressions at zero recover N(0, theta) exactly;
* intercept-only nodes give an exchangeable (covariate-free) nonparametric
  law; all coefficients pinned at zero give the Gaussian special case.

Within finest-level sets the density follows the centering law's shape, so
depth J truncates the construction after J binary levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, ndtr, ndtri

__all__ = [
    "PartitionTree",
    "TailfreeForest",
    "FRAILTY_VARIANTS",
    "default_rho",
    "build_partition",
    "conditional_density",
    "conditional_cdf",
    "sample_prior",
    "log_prior_density",
    "finest_set_probs",
    "node_levels",
    "node_path",
]

# frailty law variants: full covariate-dependent law, covariate-free
# tailfree law (intercept-only nodes), and the parametric Gaussian limit
FRAILTY_VARIANTS = ("ldtfp", "exchangeable_tailfree", "gaussian")

_LOG2PI = math.log(2.0 * math.pi)


def default_rho(level: int) -> float:
    """Level-weight for node-coefficient prior variances; j^2 keeps the
    random law absolutely continuous in the infinite-depth limit."""
    return float(level * level)


def n_internal_nodes(depth: int) -> int:
    """Coefficient-bearing nodes: all of levels 1..J-1 (root excluded,
    finest level carries none)."""
    return (1 << depth) - 2


def node_levels(depth: int) -> np.ndarray:
    """Level of each flat node index, level-major ordering."""
    return np.concatenate(
        [np.full(1 << j, j, dtype=int) for j in range(1, depth)]
    ) if depth > 1 else np.empty(0, dtype=int)


def node_offset(level: int) -> int:
    """Flat index of the first node at a level."""
    return (1 << level) - 2


def node_path(level: int, index: int) -> str:
    """Binary path string, e.g. level 3 index 5 (binary 101) -> 'RLR'."""
    return "".join("R" if (index >> (level - 1 - b)) & 1 else "L" for b in range(level))


def parse_node_path(path: str) -> tuple[int, int]:
    """Inverse of node_path: 'RLR' -> (3, 5)."""
    level = len(path)
    index = 0
    for ch in path:
        index = (index << 1) | (1 if ch == "R" else 0)
    return level, index


@dataclass(frozen=True)
class PartitionTree:
    """Nested dyadic partition of the real line under N(0, theta).

    Level j has 2^j sets delimited by sqrt(theta) * Phi^{-1}(m / 2^j); each
    level-j set has centering probability exactly 2^{-j}.
    """

    depth: int
    theta: float

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.theta > 0:
            raise ValueError("theta must be positive")

    def level_boundaries(self, level: int) -> np.ndarray:
        """Interior boundaries of the level-j partition (2^j - 1 values)."""
        m = np.arange(1, 1 << level)
        return math.sqrt(self.theta) * ndtri(m / (1 << level))

    @property
    def finest_boundaries(self) -> np.ndarray:
        return self.level_boundaries(self.depth)

    def finest_index(self, e) -> np.ndarray:
        """Index of the finest-level set containing e, sets right-closed."""
        return np.searchsorted(self.finest_boundaries, e, side="left")


def build_partition(depth: int, theta: float) -> PartitionTree:
    """Construct the J-level dyadic partition for centering scale theta."""
    return PartitionTree(depth, float(theta))


@dataclass
class TailfreeForest:
    """A realization of the frailty law: partition plus node regressions.

    ``node_coeffs`` has one row per internal node at levels 1..J-1 in
    level-major order, columns (intercept, cluster covariates).  The prior
    for each coefficient is N(0, 2 n / (c rho(level))) with n the number of
    clusters and c the precision.
    """

    tree: PartitionTree
    node_coeffs: np.ndarray
    precision: float
    n_clusters: int
    rho: object = default_rho

    def __post_init__(self):
        self.node_coeffs = np.atleast_2d(np.asarray(self.node_coeffs, dtype=float))
        expected = n_internal_nodes(self.tree.depth)
        if expected == 0:
            q1 = self.node_coeffs.shape[-1] if self.node_coeffs.size else 1
            self.node_coeffs = np.zeros((0, q1))
        elif self.node_coeffs.shape[0] != expected:
            raise ValueError(
                f"expected {expected} node coefficient rows for depth "
                f"{self.tree.depth}, got {self.node_coeffs.shape[0]}"
            )
        if not self.precision > 0:
            raise ValueError("precision must be positive")

    @property
    def depth(self) -> int:
        return self.tree.depth

    @property
    def theta(self) -> float:
        return self.tree.theta

    @property
    def n_cluster_covariates(self) -> int:
        return self.node_coeffs.shape[1] - 1

    def node_predictors(self, x) -> np.ndarray:
        """Linear predictors (1, x') beta at every node for one covariate x."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.size != self.n_cluster_covariates:
            raise ValueError(
                f"covariate has dimension {x.size}, expected {self.n_cluster_covariates}"
            )
        return self.node_coeffs[:, 0] + self.node_coeffs[:, 1:] @ x


def finest_probs_from_predictors(predictors, depth: int) -> np.ndarray:
    """Finest-set masses from precomputed node linear predictors.

    The masses telescope to 1 by construction: each split distributes its
    parent's mass between the two children, starting from the fixed 1/2
    root split.
    """
    probs = np.array([0.5, 0.5])
    if depth == 1:
        return probs
    h = expit(np.asarray(predictors, dtype=float))
    for j in range(1, depth):
        hj = h[node_offset(j) : node_offset(j) + (1 << j)]
        children = np.empty(2 << j)
        children[0::2] = probs * hj
        children[1::2] = probs * (1.0 - hj)
        probs = children
    return probs


def finest_set_probs(forest: TailfreeForest, x) -> np.ndarray:
    """Conditional masses of the 2^J finest sets given covariates x."""
    if forest.depth == 1:
        return np.array([0.5, 0.5])
    return finest_probs_from_predictors(forest.node_predictors(x), forest.depth)


def _centering_logpdf(e, theta):
    return -0.5 * (_LOG2PI + math.log(theta)) - 0.5 * e * e / theta


def conditional_density(forest: TailfreeForest, e, x) -> np.ndarray | float:
    """Density g(e | x) of the frailty law at covariates x.

    Within the finest set containing e the density equals the centering
    normal shape rescaled by the set's path mass: the centering mass 2^{-J}
    is replaced by the covariate-dependent product of split probabilities.
    """
    e_arr = np.asarray(e, dtype=float)
    probs = finest_set_probs(forest, x)
    m = forest.tree.finest_index(e_arr)
    g = probs[m] * (1 << forest.depth) * np.exp(_centering_logpdf(e_arr, forest.theta))
    return float(g) if e_arr.ndim == 0 else g


def conditional_cdf(forest: TailfreeForest, e, x) -> np.ndarray | float:
    """CDF of g(. | x); piecewise analytic.  G_x(0) = 1/2 for every forest
    and x because the root split is fixed (median-zero constraint)."""
    e_arr = np.asarray(e, dtype=float)
    probs = finest_set_probs(forest, x)
    below = np.concatenate([[0.0], np.cumsum(probs)[:-1]])
    m = forest.tree.finest_index(e_arr)
    # fraction of the containing set's centering mass lying left of e
    frac = (ndtr(e_arr / math.sqrt(forest.theta)) - m / (1 << forest.depth)) * (
        1 << forest.depth
    )
    out = below[m] + probs[m] * np.clip(frac, 0.0, 1.0)
    out = np.where(e_arr == 0.0, 0.5, out)  # exact by the fixed root split
    return float(out) if e_arr.ndim == 0 else out


def sample_prior(
    depth: int,
    n_clusters: int,
    n_cluster_covariates: int,
    rng: np.random.Generator,
    *,
    tau1: float,
    tau2: float,
    a_c: float = 1.0,
    b_c: float = 1.0,
    c_fixed: float | None = None,
    rho=default_rho,
) -> TailfreeForest:
    """Draw a forest from its prior.

    theta^{-2} ~ Gamma(tau1, tau2), c ~ Gamma(a_c, b_c) (or pinned at
    ``c_fixed``; an infinite value collapses all node coefficients to zero,
    the Gaussian limit), then coefficients N(0, 2 n / (c rho(level))).
    """
    for name, v in (("tau1", tau1), ("tau2", tau2), ("a_c", a_c), ("b_c", b_c)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    theta = float(rng.gamma(tau1, 1.0 / tau2)) ** -0.5
    if c_fixed is not None:
        c = float(c_fixed)
    else:
        c = float(rng.gamma(a_c, 1.0 / b_c))
    n_nodes = n_internal_nodes(depth)
    coeffs = np.zeros((n_nodes, n_cluster_covariates + 1))
    if n_nodes and np.isfinite(c):
        sd = np.sqrt(2.0 * n_clusters / (c * np.array([rho(j) for j in node_levels(depth)])))
        coeffs = rng.standard_normal(coeffs.shape) * sd[:, None]
    return TailfreeForest(build_partition(depth, theta), coeffs, c, n_clusters, rho)


def _gamma_logpdf(x, shape, rate):
    return shape * math.log(rate) - gammaln(shape) + (shape - 1.0) * math.log(x) - rate * x


def log_prior_density(
    forest: TailfreeForest, *, tau1: float, tau2: float, a_c: float, b_c: float
) -> float:
    """Joint log prior density of (node coefficients, theta^{-2}, c)."""
    total = _gamma_logpdf(forest.theta**-2, tau1, tau2)
    total += _gamma_logpdf(forest.precision, a_c, b_c)
    if forest.node_coeffs.size:
        var = 2.0 * forest.n_clusters / (
            forest.precision * np.array([forest.rho(j) for j in node_levels(forest.depth)])
        )
        b2 = (forest.node_coeffs**2).sum(axis=1)
        d = forest.node_coeffs.shape[1]
        total += float(
            np.sum(-0.5 * d * (_LOG2PI + np.log(var)) - 0.5 * b2 / var)
        )
    return float(total)


def quadrature_panels(theta: float, depth: int, n_points: int = 32, tail: float = 8.0):
    """Gauss-Legendre nodes/weights over the finest sets, truncated at
    ``tail`` centering standard deviations.

    Returns (nodes, weights, panel_index) where panel_index maps each node
    to its finest set; the mass beyond the truncation points is
    ``Phi(-tail)`` per side under the centering law and is handled
    analytically by callers.
    """
    root = math.sqrt(theta)
    inner = root * ndtri(np.arange(1, 1 << depth) / (1 << depth))
    edges = np.concatenate([[-tail * root], inner, [tail * root]])
    gl_x, gl_w = np.polynomial.legendre.leggauss(n_points)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * gl_x[None, :]).ravel()
    weights = (half[:, None] * gl_w[None, :]).ravel()
    panel = np.repeat(np.arange(1 << depth), n_points)
    return nodes, weights, panel
