"""Least-squares fits with collinearity handling and cluster-robust errors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import linalg

from .errors import DegenerateClusters, Inestimable, UnknownYear
from .panel import AnalysisFrame

COLLINEARITY_TOL = 1e-10


@dataclass(frozen=True)
class FitResult:
    coefficients: dict[str, float]
    dropped_columns: frozenset[str]
    n_rows: int
    residual_variance: float
    se_clustered: dict[str, float] | None = None
    retained: tuple[str, ...] = field(default=(), repr=False)

    def with_clustered_se(self, se: dict[str, float]) -> "FitResult":
        return FitResult(
            self.coefficients, self.dropped_columns, self.n_rows,
            self.residual_variance, se, self.retained,
        )

    def to_json(self) -> dict:
        out = {
            "coefficients": self.coefficients,
            "dropped_columns": sorted(self.dropped_columns),
            "n_rows": self.n_rows,
            "residual_variance": self.residual_variance,
        }
        if self.se_clustered is not None:
            out["se_clustered"] = self.se_clustered
        return out


def retained_columns(X: np.ndarray, tol: float = COLLINEARITY_TOL) -> np.ndarray:
    """Indices of columns that are not (numerically) spanned by earlier columns.

    Uses an unpivoted Householder QR: ``|R[k, k]|`` is the norm of the part of
    column ``k`` orthogonal to columns ``0..k-1``, so a column whose diagonal
    falls below ``tol`` times its own norm is dependent on columns listed
    before it and is the one dropped.
    """
    if X.shape[1] == 0:
        return np.arange(0)
    norms = np.linalg.norm(X, axis=0)
    cand = np.flatnonzero(norms > 0)
    while len(cand):
        r = linalg.qr(X[:, cand], mode="r", check_finite=False)[0]
        k = min(X.shape[0], len(cand))
        bad = np.abs(np.diag(r)[:k]) <= tol * norms[cand[:k]]
        if bad.any():
            # dependent columns add nothing to the span, so every flagged
            # column among the first k can go at once; re-run for the tail
            cand = np.concatenate([cand[:k][~bad], cand[k:]])
            continue
        # first k columns independent: any further column lies in their span
        return cand[:k]
    return cand


def ols(X: np.ndarray, y: np.ndarray, columns) -> FitResult:
    """Least squares on a raw design; see :func:`fit_ols`."""
    columns = tuple(columns)
    n = X.shape[0]
    if n == 0:
        raise Inestimable("no rows")
    keep = retained_columns(X)
    if len(keep) == 0:
        raise Inestimable("design has rank 0")
    if n <= len(keep):
        raise Inestimable(f"{n} rows for {len(keep)} retained columns")
    Xk = X[:, keep]
    q, r = linalg.qr(Xk, mode="economic", check_finite=False)
    beta = linalg.solve_triangular(r, q.T @ y, check_finite=False)
    resid = y - Xk @ beta
    retained = tuple(columns[i] for i in keep)
    return FitResult(
        coefficients=dict(zip(retained, (float(b) for b in beta))),
        dropped_columns=frozenset(columns) - frozenset(retained),
        n_rows=n,
        residual_variance=float(resid @ resid) / (n - len(keep)),
        retained=retained,
    )


def fit_ols(frame: AnalysisFrame) -> FitResult:
    """Gaussian maximum likelihood (ordinary least squares) for ``frame``.

    Columns linearly dependent on earlier-listed columns (relative tolerance
    1e-10) are dropped and reported in ``dropped_columns``.

    Raises:
        Inestimable: when no column survives or the retained design has at
            least as many columns as rows.
    """
    return ols(frame.X, frame.response, frame.columns)


def predict(frame: AnalysisFrame, fit: FitResult) -> np.ndarray:
    idx = [frame.columns.index(c) for c in fit.retained]
    return frame.X[:, idx] @ np.array([fit.coefficients[c] for c in fit.retained])


def clustered_se(frame: AnalysisFrame, fit: FitResult) -> dict[str, float]:
    """Cluster-robust sandwich standard errors with clusters = entities.

    Uses the usual finite-sample factor ``G/(G-1) * (N-1)/(N-K)``; with one
    row per cluster this reduces to the HC1 heteroskedasticity-robust
    estimator.
    """
    _, clusters = np.unique(frame.cluster_id, return_inverse=True)
    G = int(clusters.max()) + 1 if len(clusters) else 0
    if G < 2:
        raise DegenerateClusters(f"need at least 2 clusters, found {G}")
    idx = [frame.columns.index(c) for c in fit.retained]
    X = frame.X[:, idx]
    beta = np.array([fit.coefficients[c] for c in fit.retained])
    resid = frame.response - X @ beta
    n, k = X.shape
    scores = np.zeros((G, k))
    np.add.at(scores, clusters, X * resid[:, None])
    r = linalg.qr(X, mode="r", check_finite=False)[0][:k]
    rinv = linalg.solve_triangular(r, np.eye(k), check_finite=False)
    bread = rinv @ rinv.T
    meat = scores.T @ scores
    scale = G / (G - 1) * (n - 1) / (n - k)
    cov = scale * bread @ meat @ bread
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return dict(zip(fit.retained, (float(s) for s in se)))


@dataclass(frozen=True)
class YearPath:
    fits: dict[int, FitResult | None]
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(self.fits)

    @property
    def estimable(self) -> dict[int, bool]:
        return {t: f is not None for t, f in self.fits.items()}

    def coefficient(self, name: str) -> dict[int, float]:
        """Per-year estimate of ``name``; NaN where inestimable or dropped."""
        return {
            t: (f.coefficients.get(name, np.nan) if f is not None else np.nan)
            for t, f in self.fits.items()
        }


def fit_per_year(frame: AnalysisFrame, years: Iterable[int] | None = None) -> YearPath:
    """Fit the model separately within each requested year."""
    present = np.unique(frame.year)
    years = sorted(int(t) for t in (present if years is None else years))
    absent = [t for t in years if t not in set(present.tolist())]
    if absent:
        raise UnknownYear(f"years {absent} are not in the frame")
    order = np.argsort(frame.year, kind="stable")
    sorted_years = frame.year[order]
    fits, errors = {}, {}
    for t in years:
        lo, hi = np.searchsorted(sorted_years, [t, t + 1])
        rows = order[lo:hi]
        try:
            fits[t] = ols(frame.X[rows], frame.response[rows], frame.columns)
        except Inestimable as exc:
            fits[t] = None
            errors[t] = exc.reason
    return YearPath(fits, errors)


def group_coefficient(
    X: np.ndarray,
    y: np.ndarray,
    columns,
    coefficient: str,
    groups: np.ndarray,
    n_groups: int,
) -> np.ndarray:
    """Estimate one coefficient within each group ``0..n_groups-1``.

    Returns NaN for groups whose fit is inestimable or in which the
    coefficient's column was dropped as collinear.
    """
    columns = tuple(columns)
    out = np.full(n_groups, np.nan)
    order = np.argsort(groups, kind="stable")
    bounds = np.searchsorted(groups[order], np.arange(n_groups + 1))
    for g in range(n_groups):
        rows = order[bounds[g]:bounds[g + 1]]
        try:
            fit = ols(X[rows], y[rows], columns)
        except Inestimable:
            continue
        out[g] = fit.coefficients.get(coefficient, np.nan)
    return out
