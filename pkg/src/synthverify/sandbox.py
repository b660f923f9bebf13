"""Simulated wage panels and local query calibration.

Nothing here touches a server or a budget: noise is drawn locally, so
analysts can rehearse a query on synthetic data and choose ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from .panel import ModelFormula, PanelDataset, VariableSchema
from .partition import philox
from .verify import CoefficientQuery, Interval, TrendQuery, coef_verify, trend_verify

RACE_LEVELS = ("white", "black")

WAGE_SCHEMA = (
    VariableSchema("id", "entity-id"),
    VariableSchema("year", "year"),
    VariableSchema("race", "categorical", RACE_LEVELS),
    VariableSchema("pay", "numeric"),
)

# log(pay) on a black-vs-white indicator; the coefficient of interest is the gap
WAGE_FORMULA = ModelFormula(response="log(pay)", terms=("dummy(race, ref=white)",))
GAP = "race[black]"


def simulate_wage_panel(
    n_entities: int,
    coefficient_path,
    rng=None,
    *,
    noise_sd: float = 0.3,
    minority_share: float = 0.5,
    base_log_pay: float = 11.0,
    year_trend: float = 0.01,
    first_year: int = 1,
) -> PanelDataset:
    """Balanced panel with a known race gap in log pay.

    ``coefficient_path`` is either a scalar (constant gap) or one value per
    year. Race is fixed per entity; log pay is a year intercept plus the
    year's gap for minority entities plus independent Gaussian noise.
    """
    gen = philox(rng if rng is not None else 0)
    path = np.atleast_1d(np.asarray(coefficient_path, dtype=float))
    n_years = len(path)
    years = np.arange(first_year, first_year + n_years)
    minority = gen.random(n_entities) < minority_share
    ids = np.repeat(np.arange(n_entities), n_years)
    year_col = np.tile(years, n_entities)
    black = np.repeat(minority, n_years)
    intercept = base_log_pay + year_trend * (year_col - first_year)
    log_pay = intercept + path[year_col - first_year] * black + noise_sd * gen.standard_normal(len(ids))
    race = pd.Categorical.from_codes(black.astype(np.int8), categories=list(RACE_LEVELS))
    return PanelDataset.from_columns(
        WAGE_SCHEMA, {"id": ids, "year": year_col, "race": race, "pay": np.exp(log_pay)}
    )


def gap_query(gamma0: float = -0.01, M: int = 50, epsilon: float = 1.0) -> CoefficientQuery:
    return CoefficientQuery(WAGE_FORMULA, GAP, Interval(upper=gamma0), M=M, epsilon=epsilon)


def v_shaped_path(n_years: int = 24, turn: int = 9, slope: float = 0.002,
                  start: float = -0.02) -> np.ndarray:
    """Gap that falls by ``slope`` per year through year ``turn`` then rises."""
    t = np.arange(1, n_years + 1)
    return np.where(t <= turn, start - slope * (t - 1), start - slope * (turn - 1) + slope * (t - turn))


@dataclass(frozen=True)
class CalibrationRow:
    M: int
    modes: tuple[float, ...]

    @property
    def median(self) -> float:
        return float(np.median(self.modes))

    @property
    def mean(self) -> float:
        return float(np.mean(self.modes))

    def quantiles(self, qs=(0.1, 0.5, 0.9)) -> tuple[float, ...]:
        return tuple(float(q) for q in np.quantile(self.modes, qs))

    def share_at_least(self, x: float) -> float:
        return float(np.mean(np.asarray(self.modes) >= x))

    def to_json(self) -> dict:
        q10, q50, q90 = self.quantiles()
        return {"M": self.M, "mean": self.mean, "q10": q10, "median": q50, "q90": q90,
                "modes": list(self.modes)}


def calibrate_m(
    data: PanelDataset,
    query: CoefficientQuery | TrendQuery,
    candidates: Sequence[int],
    replications: int,
    seed=0,
    inflation_index=None,
) -> list[CalibrationRow]:
    """Posterior-mode distribution of a query per candidate ``M``.

    Each replication redraws the partition and the noise; for a separate-mode
    trend query every period's mode is collected. Deterministic given ``seed``.
    """
    root = np.random.SeedSequence(seed)
    rows = []
    for M, child in zip(candidates, root.spawn(len(candidates))):
        q = replace(query, M=int(M))
        modes = []
        for rep_seed in child.spawn(replications):
            if isinstance(q, TrendQuery):
                raws = trend_verify(data, q, None, rep_seed, inflation_index=inflation_index)
            else:
                raws = [coef_verify(data, q, None, rep_seed, inflation_index=inflation_index)]
            for raw in raws:
                post = raw.release().posterior()
                modes.append(np.nan if post is None else post.mode)
        rows.append(CalibrationRow(int(M), tuple(modes)))
    return rows


WORKFORCE_AGENCIES = ("A", "B", "C")
WORKFORCE_GRADES = ("g1", "g2", "g3")
WORKFORCE_RACES = ("white", "black", "asian")
GRADE_TRANSITIONS = np.array([[0.7, 0.25, 0.05], [0.1, 0.7, 0.2], [0.05, 0.15, 0.8]])

WORKFORCE_SCHEMA = (
    VariableSchema("id", "entity-id"),
    VariableSchema("year", "year"),
    VariableSchema("agency", "categorical", WORKFORCE_AGENCIES),
    VariableSchema("gender", "categorical", ("male", "female")),
    VariableSchema("race", "categorical", WORKFORCE_RACES),
    VariableSchema("grade", "categorical", WORKFORCE_GRADES),
    VariableSchema("pay", "numeric"),
)


def simulate_workforce(n_entities: int, n_years: int = 24, rng=None, *, first_year: int = 1988,
                       p_move: float = 0.08, p_race_change: float = 0.03) -> PanelDataset:
    """Training panel with careers, demographics, a lag-one grade and pay.

    Careers move between agencies and spells of not working; gender is
    fixed; race changes for a small share of entities; grade follows
    :data:`GRADE_TRANSITIONS` between consecutive working years; log pay
    is determined by grade exactly (a deterministic relationship).
    """
    gen = philox(rng if rng is not None else 0)
    states = ("0",) + WORKFORCE_AGENCIES
    cols = {k: [] for k in ("id", "year", "agency", "gender", "race", "grade", "pay")}
    for e in range(n_entities):
        gender = "female" if gen.random() < 0.45 else "male"
        race = WORKFORCE_RACES[gen.choice(3, p=[0.6, 0.25, 0.15])]
        changes = gen.random() < p_race_change
        state = states[gen.choice(4, p=[0.3, 0.3, 0.25, 0.15])]
        grade = int(gen.choice(3, p=[0.5, 0.3, 0.2]))
        started = False
        for t in range(n_years):
            if t and gen.random() < p_move:
                state = states[gen.choice([i for i in range(4) if states[i] != state])]
            if state == "0":
                continue
            if started:
                grade = int(gen.choice(3, p=GRADE_TRANSITIONS[grade]))
            started = True
            if changes and gen.random() < 0.2:
                race = WORKFORCE_RACES[gen.integers(3)]
            cols["id"].append(e)
            cols["year"].append(first_year + t)
            cols["agency"].append(state)
            cols["gender"].append(gender)
            cols["race"].append(race)
            cols["grade"].append(WORKFORCE_GRADES[grade])
            cols["pay"].append(float(np.exp(10.5 + 0.3 * grade)))
    return PanelDataset.from_columns(WORKFORCE_SCHEMA, cols)
