"""Differentially private verification of regression coefficients and trends.

Each measure splits the entities into ``M`` random partitions, fits the model
in every partition, marks whether the partition's estimate lands in the
analyst's interval, and releases the Laplace-noised count of hits. The exact
count and the per-partition marks stay inside :class:`VerificationRaw`;
only :class:`Release` objects are meant to leave the process.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dp import BudgetLedger, KeyedRandom, LaplaceSpec, laplace_sample
from .errors import DegenerateSlope, Inestimable, QueryError, UnknownYear
from .panel import AnalysisFrame, ModelFormula, PanelDataset, build_frame
from .partition import partition_entities, philox
from .posterior import RPosterior, posterior_count, posterior_r
from .regression import FitResult, group_coefficient

MARK_ZERO, MARK_ONE, MARK_ERR = 0, 1, -1
ERROR_VARIANT_SENSITIVITY = 2.0


@dataclass(frozen=True)
class Interval:
    """Real interval, closed at its finite ends."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise QueryError(f"invalid interval [{self.lower}, {self.upper}]")
        if lo == math.inf or hi == -math.inf:
            raise QueryError("interval is empty")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        out = (x >= self.lower) & (x <= self.upper)
        return out if out.ndim else bool(out)

    @classmethod
    def parse(cls, text: str) -> "Interval":
        """Parse ``neg``, ``pos``, or a pair like ``(-0.031,-0.010)``.

        Brackets are accepted in either style; finite ends are always closed.
        """
        text = text.strip()
        if text == "neg":
            return cls(-math.inf, 0.0)
        if text == "pos":
            return cls(0.0, math.inf)
        m = re.fullmatch(r"[\[(]\s*([^,]+?)\s*,\s*([^,]+?)\s*[\])]", text)
        if not m:
            raise QueryError(f"cannot parse interval {text!r}")
        try:
            return cls(float(m.group(1)), float(m.group(2)))
        except ValueError:
            raise QueryError(f"cannot parse interval {text!r}") from None

    def to_json(self) -> dict:
        return {
            "lower": None if math.isinf(self.lower) else self.lower,
            "upper": None if math.isinf(self.upper) else self.upper,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Interval":
        lo, hi = doc.get("lower"), doc.get("upper")
        return cls(-math.inf if lo is None else lo, math.inf if hi is None else hi)

    def __str__(self):
        lo = "(-inf" if math.isinf(self.lower) else f"[{self.lower:g}"
        hi = "inf)" if math.isinf(self.upper) else f"{self.upper:g}]"
        return f"{lo}, {hi}"


def _check_common(M, epsilon):
    if not isinstance(M, (int, np.integer)) or M < 2:
        raise QueryError(f"M must be an integer >= 2, got {M!r}")
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and epsilon > 0):
        raise QueryError(f"epsilon must be positive, got {epsilon!r}")


@dataclass(frozen=True)
class CoefficientQuery:
    formula: ModelFormula
    coefficient: str
    interval: Interval
    M: int = 50
    epsilon: float = 1.0
    gamma1: float | None = None

    def __post_init__(self):
        _check_common(self.M, self.epsilon)
        if self.gamma1 is not None and not 0 < self.gamma1 < 1:
            raise QueryError("gamma1 must lie in (0, 1)")


@dataclass(frozen=True)
class TrendQuery:
    """Slope verification over K periods, each an inclusive ``(first, last)`` year range.

    Adjacent periods may share their boundary year but must not overlap
    beyond it.
    """

    formula: ModelFormula
    coefficient: str
    periods: tuple[tuple[int, int], ...]
    intervals: tuple[Interval, ...]
    mode: str = "separate"
    M: int = 50
    epsilon: float = 1.0

    def __post_init__(self):
        _check_common(self.M, self.epsilon)
        periods = tuple((int(a), int(b)) for a, b in self.periods)
        object.__setattr__(self, "periods", periods)
        object.__setattr__(self, "intervals", tuple(self.intervals))
        if not periods:
            raise QueryError("at least one period is required")
        if len(self.intervals) != len(periods):
            raise QueryError("need one interval per period")
        if self.mode not in ("separate", "composite"):
            raise QueryError(f"unknown trend mode {self.mode!r}")
        check_periods(periods)

    @property
    def K(self) -> int:
        return len(self.periods)

    @property
    def epsilon_total(self) -> float:
        return self.epsilon * (self.K if self.mode == "separate" else 1)


def check_periods(periods: Sequence[tuple[int, int]]) -> None:
    for first, last in periods:
        if last - first < 1:
            raise QueryError(f"period {first}-{last} needs at least two years")
    for (a0, a1), (b0, b1) in zip(periods, periods[1:]):
        if b0 < a1:
            raise QueryError(f"periods {a0}-{a1} and {b0}-{b1} overlap")
        if b0 > a1 + 1:
            raise QueryError(f"periods {a0}-{a1} and {b0}-{b1} are not consecutive")


@dataclass(frozen=True)
class Release:
    """The part of a verification that may leave the protected boundary."""

    label: str
    S_noisy: float
    M: int
    epsilon: float
    sensitivity: float = 1.0
    err_noisy: float | None = None

    def posterior(self) -> RPosterior | None:
        """Posterior of ``r`` (pure post-processing of the noisy counts).

        For an error-variant release the error count is estimated first
        (posterior mode under a uniform prior) and ``r`` then refers to the
        fraction of ones among partitions without errors.
        """
        M = self.M
        if self.err_noisy is not None:
            M -= int(np.argmax(posterior_count(self.err_noisy, self.M, self.epsilon, self.sensitivity)))
            if M < 1:
                return None
        return posterior_r(self.S_noisy, M, self.epsilon, self.sensitivity)

    def errors_mode(self) -> int | None:
        if self.err_noisy is None:
            return None
        return int(np.argmax(posterior_count(self.err_noisy, self.M, self.epsilon, self.sensitivity)))

    def to_json(self, full_density: bool = False) -> dict:
        post = self.posterior()
        out = {
            "label": self.label,
            "S_noisy": self.S_noisy,
            "M": self.M,
            "epsilon": self.epsilon,
            "sensitivity": self.sensitivity,
            "posterior": None if post is None else post.to_json(full=full_density),
        }
        if self.err_noisy is not None:
            out["err_noisy"] = self.err_noisy
            out["errors_mode"] = self.errors_mode()
        return out


@dataclass(frozen=True)
class VerificationRaw:
    W: tuple[int, ...] = field(repr=False)
    S: int = field(repr=False)
    S_noisy: float
    err_noisy: float | None
    epsilon_spent: float
    M: int
    sensitivity: float = 1.0
    label: str = ""

    def release(self) -> Release:
        return Release(
            label=self.label,
            S_noisy=self.S_noisy,
            M=self.M,
            epsilon=self.epsilon_spent,
            sensitivity=self.sensitivity,
            err_noisy=self.err_noisy,
        )


# ---------------------------------------------------------------------------


def _noise(scale: float, rng: np.random.Generator, noiseless: bool) -> float:
    if noiseless:
        return 0.0
    return float(laplace_sample(LaplaceSpec(1.0, 1.0 / scale), rng))


def error_variant_counts(W, epsilon: float, rng: np.random.Generator | None = None,
                         noiseless: bool = False) -> tuple[float, float]:
    """Noisy (ones, errors) counts for marks in {0, 1, err}.

    Moving one partition between categories changes two counts by one each,
    so the count vector has L1 sensitivity 2 and each count gets Laplace
    noise of scale ``2 / epsilon``.
    """
    W = np.asarray(W)
    if not np.isin(W, (MARK_ZERO, MARK_ONE, MARK_ERR)).all():
        raise ValueError("marks must be 0, 1 or err")
    scale = ERROR_VARIANT_SENSITIVITY / epsilon
    ones = float((W == MARK_ONE).sum()) + _noise(scale, rng, noiseless)
    errs = float((W == MARK_ERR).sum()) + _noise(scale, rng, noiseless)
    return ones, errs


def marks_from_estimates(estimates, interval: Interval) -> np.ndarray:
    est = np.asarray(estimates, dtype=float)
    marks = np.where(interval.contains(est), MARK_ONE, MARK_ZERO)
    return np.where(np.isnan(est), MARK_ERR, marks).astype(np.int8)


def _release_marks(W, epsilon, rng, noiseless, label, epsilon_spent, M) -> VerificationRaw:
    W = np.asarray(W)
    S = int((W == MARK_ONE).sum())
    if (W == MARK_ERR).any():
        ones, errs = error_variant_counts(W, epsilon, rng, noiseless)
        return VerificationRaw(tuple(int(w) for w in W), S, ones, errs, epsilon_spent, M,
                               ERROR_VARIANT_SENSITIVITY, label)
    S_noisy = S + _noise(1.0 / epsilon, rng, noiseless)
    return VerificationRaw(tuple(int(w) for w in W), S, S_noisy, None, epsilon_spent, M, 1.0, label)


def _generators(rng, entry_id):
    """(partition generator, noise generator) for one verification."""
    if isinstance(rng, KeyedRandom):
        return rng.generator(entry_id, "partition"), rng.generator(entry_id, "noise")
    gen = philox(rng if rng is not None else np.random.SeedSequence())
    return philox(int(gen.integers(2**63))), gen


def _check_coefficient(data: PanelDataset, formula: ModelFormula, coefficient: str):
    columns = formula.design_columns(data)
    if coefficient not in columns:
        raise QueryError(f"coefficient {coefficient!r} is not in the model (columns: {list(columns)})")
    return columns


def _partition_estimates(frame: AnalysisFrame, groups: np.ndarray, M: int, coefficient: str,
                         fitter: Callable | None) -> np.ndarray:
    if fitter is None:
        return group_coefficient(frame.X, frame.response, frame.columns, coefficient, groups, M)
    out = np.full(M, np.nan)
    for g in range(M):
        try:
            fit = fitter(frame.subset(np.flatnonzero(groups == g)))
        except Inestimable:
            continue
        coefs = fit.coefficients if isinstance(fit, FitResult) else fit
        out[g] = coefs.get(coefficient, np.nan)
    return out


def coef_verify(
    data: PanelDataset,
    query: CoefficientQuery,
    ledger: BudgetLedger | None = None,
    rng=None,
    *,
    analysis_id: str = "sandbox",
    scope_key: str | None = None,
    digest: str = "",
    inflation_index: Mapping[int, float] | None = None,
    fitter: Callable | None = None,
    noiseless: bool = False,
) -> VerificationRaw:
    """Verify whether a coefficient lies in ``query.interval``.

    The budget is debited before any partitioning or fitting. If some
    partition cannot be fitted, the release switches to the three-category
    error variant. ``rng`` is a :class:`KeyedRandom` (streams keyed by the
    ledger entry), a seed, or a Generator. ``fitter`` and ``noiseless`` are
    test hooks and are never reachable from the server.
    """
    _check_coefficient(data, query.formula, query.coefficient)
    entry_id = None
    if ledger is not None:
        entry_id = ledger.debit(analysis_id, scope_key, query.epsilon, digest).entry_id
    part_rng, noise_rng = _generators(rng, entry_id)
    frame = build_frame(data, query.formula, inflation_index)
    plan = partition_entities(data, query.M, part_rng)
    groups = plan.rows_of(frame.cluster_id)
    estimates = _partition_estimates(frame, groups, query.M, query.coefficient, fitter)
    W = marks_from_estimates(estimates, query.interval)
    return _release_marks(W, query.epsilon, noise_rng, noiseless, query.coefficient,
                          query.epsilon, query.M)


def trend_slope(points) -> float:
    """OLS slope of ``b`` on ``t`` through the points ``[(t, b), ...]``."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise DegenerateSlope("need at least two (t, b) points")
    t, b = pts[:, 0], pts[:, 1]
    tc = t - t.mean()
    ss = tc @ tc
    if ss == 0:
        raise DegenerateSlope("all t values are equal")
    return float(tc @ (b - b.mean()) / ss)


def _slopes(years: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise OLS slope of ``B[l, :]`` on ``years``; NaN rows propagate."""
    tc = years - years.mean()
    return (B - B.mean(axis=1, keepdims=True)) @ tc / (tc @ tc)


def trend_verify(
    data: PanelDataset,
    query: TrendQuery,
    ledger: BudgetLedger | None = None,
    rng=None,
    *,
    analysis_id: str = "sandbox",
    scope_key: str | None = None,
    digest: str = "",
    inflation_index: Mapping[int, float] | None = None,
    noiseless: bool = False,
) -> list[VerificationRaw]:
    """Verify the sign (or interval) of per-period slopes of a yearly coefficient.

    One partition plan serves every year. Separate mode returns K releases
    and spends ``K * epsilon``; composite mode returns one release for the
    product of the period indicators and spends ``epsilon``.
    """
    _check_coefficient(data, query.formula, query.coefficient)
    present = set(data.distinct_years)
    period_years = []
    for first, last in query.periods:
        yrs = [t for t in range(first, last + 1) if t in present]
        if len(yrs) < 2:
            raise UnknownYear(f"period {first}-{last} has fewer than two years in the data")
        period_years.append(yrs)
    all_years = np.array(sorted(set().union(*period_years)))

    entry_ids = [None] * query.K
    if ledger is not None:
        eps = [query.epsilon] * (query.K if query.mode == "separate" else 1)
        entries = ledger.debit_many(analysis_id, scope_key, eps, digest)
        entry_ids = [e.entry_id for e in entries]
    part_rng, _ = _generators(rng, entry_ids[0])
    frame = build_frame(data, query.formula, inflation_index)
    in_years = np.isin(frame.year, all_years)
    frame = frame.subset(np.flatnonzero(in_years))
    plan = partition_entities(data, query.M, part_rng)

    Y = len(all_years)
    year_idx = np.searchsorted(all_years, frame.year)
    keys = plan.rows_of(frame.cluster_id) * Y + year_idx
    B = group_coefficient(frame.X, frame.response, frame.columns, query.coefficient,
                          keys, query.M * Y).reshape(query.M, Y)

    period_marks = []
    for yrs, interval in zip(period_years, query.intervals):
        cols = np.searchsorted(all_years, yrs)
        period_marks.append(marks_from_estimates(_slopes(np.asarray(yrs, float), B[:, cols]), interval))

    if query.mode == "composite":
        W = np.prod(np.stack(period_marks), axis=0)
        W = np.where((np.stack(period_marks) == MARK_ERR).any(axis=0), MARK_ERR, W)
        _, noise_rng = _generators(rng, entry_ids[0])
        label = f"{query.coefficient} composite " + ",".join(f"{a}-{b}" for a, b in query.periods)
        return [_release_marks(W, query.epsilon, noise_rng, noiseless, label, query.epsilon, query.M)]

    out = []
    noise_streams = _noise_streams(rng, entry_ids, part_rng)
    for (first, last), W, noise_rng in zip(query.periods, period_marks, noise_streams):
        label = f"{query.coefficient} {first}-{last}"
        out.append(_release_marks(W, query.epsilon, noise_rng, noiseless, label, query.epsilon, query.M))
    return out


def _noise_streams(rng, entry_ids, part_rng):
    if isinstance(rng, KeyedRandom):
        return [rng.generator(eid, "noise") for eid in entry_ids]
    # one partition draw was already taken from the parent; derive children
    return [philox(int(part_rng.integers(2**63))) for _ in entry_ids]
