"""Clustered right-censored survival data: ingestion, validation, summaries.

Subjects live in clusters (e.g. patients within counties).  Each subject
carries its own covariates; each cluster carries cluster-level covariates.
The model design vector for a subject is the concatenation
``w = (subject covariates, cluster covariates)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SurvivalRecord",
    "ClusterInfo",
    "CovariateTransform",
    "Dataset",
    "SchemaError",
    "RowValidationError",
    "ReferentialError",
    "GammaResult",
    "load_dataset",
    "goodman_kruskal_gamma",
    "summarize",
    "format_summary",
]


class SchemaError(ValueError):
    """A required column is missing or the schema is malformed."""


class RowValidationError(ValueError):
    """A data row violates an invariant (reported with its row index)."""


class ReferentialError(ValueError):
    """A subject references a cluster id that does not exist."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject's follow-up: time, event indicator, covariates, cluster key."""

    time: float
    event: int
    subject_covariates: tuple[float, ...]
    cluster_id: str

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise RowValidationError(f"follow-up time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise RowValidationError(f"event indicator must be 0 or 1, got {self.event}")


@dataclass(frozen=True)
class ClusterInfo:
    """A cluster and its cluster-level covariate vector."""

    cluster_id: str
    cluster_covariates: tuple[float, ...]


@dataclass(frozen=True)
class CovariateTransform:
    """Affine standardization ``z = (w - center) / scale`` recorded per column.

    Kept alongside a standardized Dataset so fitted coefficients can be
    reported on the raw scale: ``coef_raw = coef_std / scale`` and the
    baseline log-hazards shift by ``sum(coef_std * center / scale)``.
    """

    names: tuple[str, ...]
    center: tuple[float, ...]
    scale: tuple[float, ...]


class Dataset:
    """Validated clustered survival data with dense array views.

    Subject rows are joined to clusters on ``cluster_id``; clusters are kept
    in order of first appearance in the cluster list and only if referenced
    by at least one record.
    """

    def __init__(
        self,
        records: list[SurvivalRecord],
        clusters: list[ClusterInfo],
        subject_covariate_names: tuple[str, ...] = (),
        cluster_covariate_names: tuple[str, ...] = (),
        transform: CovariateTransform | None = None,
    ):
        if not records:
            raise RowValidationError("dataset has no subject records")
        by_id = {}
        for c in clusters:
            if c.cluster_id in by_id:
                raise RowValidationError(f"duplicate cluster id {c.cluster_id!r}")
            by_id[c.cluster_id] = c
        q = len(cluster_covariate_names)
        for c in clusters:
            if len(c.cluster_covariates) != q:
                raise RowValidationError(
                    f"cluster {c.cluster_id!r} has {len(c.cluster_covariates)} covariates, expected {q}"
                )
        referenced = []
        seen = set()
        for r in records:
            if r.cluster_id not in by_id:
                raise ReferentialError(
                    f"record references unknown cluster id {r.cluster_id!r}"
                )
            if r.cluster_id not in seen:
                seen.add(r.cluster_id)
        for c in clusters:
            if c.cluster_id in seen:
                referenced.append(c)
        p_sub = len(subject_covariate_names)
        for i, r in enumerate(records):
            if len(r.subject_covariates) != p_sub:
                raise RowValidationError(
                    f"record {i} has {len(r.subject_covariates)} subject covariates, expected {p_sub}"
                )

        self.records = list(records)
        self.clusters = referenced
        self.subject_covariate_names = tuple(subject_covariate_names)
        self.cluster_covariate_names = tuple(cluster_covariate_names)
        self.transform = transform

        index_of = {c.cluster_id: i for i, c in enumerate(self.clusters)}
        self.times = np.array([r.time for r in records], dtype=float)
        self.events = np.array([r.event for r in records], dtype=float)
        self.cluster_index = np.array([index_of[r.cluster_id] for r in records], dtype=int)
        self.subject_design = np.array(
            [r.subject_covariates for r in records], dtype=float
        ).reshape(len(records), p_sub)
        self.cluster_design = np.array(
            [c.cluster_covariates for c in self.clusters], dtype=float
        ).reshape(len(self.clusters), q)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        """Names of the concatenated design ``w`` (subject then cluster)."""
        return self.subject_covariate_names + self.cluster_covariate_names

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n_records(self) -> int:
        return len(self.records)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def n_cluster_covariates(self) -> int:
        return len(self.cluster_covariate_names)

    def design_matrix(self) -> np.ndarray:
        """Per-record full design ``w = (subject covs, cluster covs)``, shape (N, p)."""
        return np.hstack(
            [self.subject_design, self.cluster_design[self.cluster_index]]
        )

    def cluster_ids(self) -> tuple[str, ...]:
        return tuple(c.cluster_id for c in self.clusters)


def _read_delimited(path, delimiter):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, expected a header row")
        rows = list(reader)
    return [name.strip() for name in reader.fieldnames], rows


def _require(columns, name, path):
    if name not in columns:
        raise SchemaError(f"{path}: missing required column {name!r}")


def _parse_float(value, what, row_idx):
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise RowValidationError(f"row {row_idx}: non-numeric {what} {value!r}") from None
    if not math.isfinite(x):
        raise RowValidationError(f"row {row_idx}: non-finite {what}")
    return x


def load_dataset(
    subject_file,
    cluster_file,
    schema: dict,
    delimiter: str = ",",
    standardize: bool = False,
) -> Dataset:
    """Load subject and cluster files, join on cluster id, validate.

    ``schema`` maps roles to column names:
    ``{"time": ..., "event": ..., "cluster": ...,
    "subject_covariates": [...], "cluster_covariates": [...]}``.
    Missing covariate values are a hard error.  With ``standardize=True``
    every covariate column is centered and scaled by its standard deviation
    and the transform is recorded on the returned Dataset.
    """
    for key in ("time", "event", "cluster"):
        if key not in schema:
            raise SchemaError(f"schema is missing the {key!r} role")
    sub_names = tuple(schema.get("subject_covariates", ()))
    clu_names = tuple(schema.get("cluster_covariates", ()))

    columns, rows = _read_delimited(subject_file, delimiter)
    for col in (schema["time"], schema["event"], schema["cluster"], *sub_names):
        _require(columns, col, subject_file)
    ccolumns, crows = _read_delimited(cluster_file, delimiter)
    for col in (schema["cluster"], *clu_names):
        _require(ccolumns, col, cluster_file)

    clusters = []
    for i, row in enumerate(crows):
        cid = row[schema["cluster"]].strip()
        covs = tuple(_parse_float(row[c], f"cluster covariate {c!r}", i) for c in clu_names)
        clusters.append(ClusterInfo(cid, covs))
    known = {c.cluster_id for c in clusters}

    records = []
    for i, row in enumerate(rows):
        time = _parse_float(row[schema["time"]], "time", i)
        if time <= 0:
            raise RowValidationError(f"row {i}: non-positive time {time}")
        event_raw = _parse_float(row[schema["event"]], "event", i)
        if event_raw not in (0.0, 1.0):
            raise RowValidationError(f"row {i}: event must be 0 or 1, got {event_raw}")
        cid = row[schema["cluster"]].strip()
        if cid not in known:
            raise ReferentialError(
                f"row {i}: cluster id {cid!r} not present in {cluster_file}"
            )
        covs = tuple(_parse_float(row[c], f"covariate {c!r}", i) for c in sub_names)
        records.append(SurvivalRecord(time, int(event_raw), covs, cid))

    ds = Dataset(records, clusters, sub_names, clu_names)
    if standardize:
        ds = standardize_dataset(ds)
    return ds


def standardize_dataset(ds: Dataset) -> Dataset:
    """Return a copy of ``ds`` with all covariates centered and scaled.

    Columns with zero variance keep scale 1 (centered only).
    """
    W = ds.design_matrix()
    center = W.mean(axis=0)
    scale = W.std(axis=0, ddof=0)
    scale[scale == 0.0] = 1.0
    p_sub = len(ds.subject_covariate_names)

    clu_center = center[p_sub:]
    clu_scale = scale[p_sub:]
    new_clusters = [
        ClusterInfo(
            c.cluster_id,
            tuple((np.asarray(c.cluster_covariates) - clu_center) / clu_scale),
        )
        for c in ds.clusters
    ]
    sub_center = center[:p_sub]
    sub_scale = scale[:p_sub]
    new_records = [
        SurvivalRecord(
            r.time,
            r.event,
            tuple((np.asarray(r.subject_covariates) - sub_center) / sub_scale),
            r.cluster_id,
        )
        for r in ds.records
    ]
    transform = CovariateTransform(ds.covariate_names, tuple(center), tuple(scale))
    return Dataset(
        new_records,
        new_clusters,
        ds.subject_covariate_names,
        ds.cluster_covariate_names,
        transform=transform,
    )


@dataclass(frozen=True)
class GammaResult:
    """Goodman-Kruskal gamma with its 95% asymptotic confidence interval."""

    gamma: float
    ci95: tuple[float, float]
    concordant: float
    discordant: float


def _contingency(row_var, col_var):
    r_levels, r_codes = np.unique(row_var, return_inverse=True)
    c_levels, c_codes = np.unique(col_var, return_inverse=True)
    table = np.zeros((len(r_levels), len(c_levels)))
    np.add.at(table, (r_codes, c_codes), 1.0)
    return table


def goodman_kruskal_gamma(row_var, col_var) -> GammaResult:
    """Goodman-Kruskal gamma between two ordinal variables.

    gamma = (C - D) / (C + D) over concordant and discordant pairs; pairs
    tied on either variable are excluded from both counts.  The CI uses the
    standard asymptotic variance of the gamma statistic.  If C + D = 0 the
    statistic is 0 with a degenerate full-width interval.
    """
    row_var = np.asarray(row_var)
    col_var = np.asarray(col_var)
    if row_var.shape != col_var.shape or row_var.ndim != 1:
        raise ValueError("row_var and col_var must be 1-d vectors of equal length")
    if row_var.size < 2:
        raise ValueError("need at least 2 observations")
    if len(np.unique(row_var)) < 2 or len(np.unique(col_var)) < 2:
        raise ValueError("each variable needs at least 2 distinct ordered levels")

    n = _contingency(row_var, col_var)
    R, C_ = n.shape
    # A[i,j]: count of observations concordant with cell (i,j); B discordant.
    A = np.zeros_like(n)
    B = np.zeros_like(n)
    for i in range(R):
        for j in range(C_):
            A[i, j] = n[:i, :j].sum() + n[i + 1 :, j + 1 :].sum()
            B[i, j] = n[:i, j + 1 :].sum() + n[i + 1 :, :j].sum()
    conc = float((n * A).sum()) / 2.0
    disc = float((n * B).sum()) / 2.0
    if conc + disc == 0:
        return GammaResult(0.0, (-1.0, 1.0), conc, disc)
    g = (conc - disc) / (conc + disc)
    # asymptotic variance of the gamma statistic; conc/disc are pair counts
    # (half the sum of per-cell concordance scores), hence the factor 4
    var = (n * (disc * A - conc * B) ** 2).sum() * 4.0 / (conc + disc) ** 4
    half = 1.959963984540054 * math.sqrt(var)
    return GammaResult(g, (g - half, g + half), conc, disc)


def _is_categorical(values, max_levels=12):
    vals = np.unique(values)
    return len(vals) <= max_levels and np.allclose(vals, np.round(vals))


def summarize(dataset: Dataset, categorical: tuple[str, ...] | None = None) -> dict:
    """Descriptive summary: order statistics for continuous variables, level
    counts for categorical ones, event/censoring counts.

    Covariates whose values are all integral with at most 12 distinct levels
    are treated as categorical unless ``categorical`` lists them explicitly.
    """
    W = dataset.design_matrix()
    names = dataset.covariate_names
    out = {
        "n_records": dataset.n_records,
        "n_clusters": dataset.n_clusters,
        "continuous": {},
        "categorical": {},
        "status": {},
    }
    t = dataset.times
    out["continuous"]["time"] = {
        "min": float(np.min(t)),
        "median": float(np.median(t)),
        "max": float(np.max(t)),
    }
    n_event = int(dataset.events.sum())
    out["status"] = {
        "event": {"count": n_event, "proportion": n_event / dataset.n_records},
        "censored": {
            "count": dataset.n_records - n_event,
            "proportion": 1.0 - n_event / dataset.n_records,
        },
    }
    for j, name in enumerate(names):
        col = W[:, j]
        treat_cat = name in categorical if categorical is not None else _is_categorical(col)
        if treat_cat:
            levels, counts = np.unique(col, return_counts=True)
            out["categorical"][name] = {
                _level_key(v): {"count": int(c), "proportion": int(c) / dataset.n_records}
                for v, c in zip(levels, counts)
            }
        else:
            out["continuous"][name] = {
                "min": float(np.min(col)),
                "median": float(np.median(col)),
                "max": float(np.max(col)),
            }
    return out


def _level_key(v):
    return str(int(v)) if float(v) == int(v) else str(float(v))


def format_summary(summary: dict) -> str:
    """Render a summary dict as aligned text."""
    lines = [
        f"records: {summary['n_records']}    clusters: {summary['n_clusters']}",
        "",
        f"{'continuous':<22}{'min':>10}{'median':>10}{'max':>10}",
    ]
    for name, s in summary["continuous"].items():
        lines.append(f"{name:<22}{s['min']:>10.4g}{s['median']:>10.4g}{s['max']:>10.4g}")
    lines.append("")
    lines.append(f"{'categorical':<22}{'level':>10}{'count':>10}{'percent':>10}")
    status = summary["status"]
    for level, s in status.items():
        lines.append(
            f"{'status':<22}{level:>10}{s['count']:>10}{100 * s['proportion']:>9.1f}%"
        )
    for name, levels in summary["categorical"].items():
        for level, s in levels.items():
            lines.append(
                f"{name:<22}{level:>10}{s['count']:>10}{100 * s['proportion']:>9.1f}%"
            )
    return "\n".join(lines)
