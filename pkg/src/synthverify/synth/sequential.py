"""Sequential conditional synthesis of a whole panel.

Variables are synthesized in plan order, each from a model conditioned on
variables already synthesized. The career (the agency worked for in each
year, or not working) always comes first and fixes which entity-years exist
in the synthetic panel. Strategies:

``constant-demographic``
    one value per entity, CART on entity-level predictors.
``cart-cross-sectional``
    one value per working year, CART on current values of earlier variables.
``cart-lag-one``
    as above, plus the entity's value in its previous working year; the
    first working year uses a separate model without the lag.
``change-indicator``
    for attributes that almost never change: a CART-drawn flag says whether
    the entity's value changes at all; stable entities get one CART-drawn
    value for every year, changing entities are synthesized lag-one.

Predictors may also name derived features: ``year``, ``career.G`` (distinct
labels, not working included), ``career.moves`` (number of transitions),
``career.years_worked``, ``career.first`` (first agency worked for) and
``career.tenure`` (working years so far, counting the current one).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from ..config import read_toml
from ..errors import PlanOrder, SamplingStalled, SchemaError
from ..panel import PanelDataset, VariableSchema
from ..partition import philox
from .career import NOT_WORKING, careers_from_panel, decompose, fit_career_model, sample_careers
from .cart import CartModel, fit_cart

STRATEGIES = ("career", "constant-demographic", "cart-cross-sectional", "cart-lag-one", "change-indicator")
ENTITY_FEATURES = ("career.G", "career.moves", "career.years_worked", "career.first")
ROW_FEATURES = ("year", "career.tenure")
ENTITY_LEVEL = ("constant-demographic", "change-indicator")


@dataclass(frozen=True)
class PlanStep:
    variable: str
    strategy: str
    predictors: tuple[str, ...] = ()
    min_leaf: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if self.strategy not in STRATEGIES:
            raise PlanOrder(f"{self.variable}: unknown strategy {self.strategy!r}")
        if self.strategy == "career" and self.predictors:
            raise PlanOrder("the career step takes no predictors")


@dataclass(frozen=True)
class SynthesisPlan:
    steps: tuple[PlanStep, ...]
    min_leaf: int = 30
    alpha: float = 0.05
    not_working: str = NOT_WORKING

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps or self.steps[0].strategy != "career":
            raise PlanOrder("the first step must be the career")
        if sum(s.strategy == "career" for s in self.steps) != 1:
            raise PlanOrder("exactly one career step is allowed")
        names = [s.variable for s in self.steps]
        if len(set(names)) != len(names):
            raise PlanOrder("a variable appears twice in the plan")
        entity_level = set(ENTITY_FEATURES)
        available = set(ENTITY_FEATURES) | set(ROW_FEATURES) | {self.career.variable}
        for step in self.steps[1:]:
            allowed = entity_level if step.strategy in ENTITY_LEVEL else available
            for p in step.predictors:
                if p == step.variable:
                    raise PlanOrder(f"{step.variable}: a variable cannot predict itself")
                if p not in allowed:
                    kind = "entity-level " if step.strategy in ENTITY_LEVEL else ""
                    raise PlanOrder(
                        f"{step.variable}: predictor {p!r} is not an earlier {kind}variable or feature"
                    )
            available.add(step.variable)
            if step.strategy == "constant-demographic":
                entity_level.add(step.variable)

    @property
    def career(self) -> PlanStep:
        return self.steps[0]

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "SynthesisPlan":
        settings = doc.get("synthesis", {})
        steps = [
            PlanStep(
                variable=s["variable"],
                strategy=s["strategy"],
                predictors=tuple(s.get("predictors", ())),
                min_leaf=s.get("min_leaf"),
            )
            for s in doc.get("step", ())
        ]
        return cls(
            steps=tuple(steps),
            min_leaf=int(settings.get("min_leaf", 30)),
            alpha=float(settings.get("alpha", 0.05)),
            not_working=str(settings.get("not_working", NOT_WORKING)),
        )

    def check_schema(self, schema: Sequence[VariableSchema]) -> None:
        by_name = {v.name: v for v in schema}
        for step in self.steps:
            var = by_name.get(step.variable)
            if var is None:
                raise PlanOrder(f"plan variable {step.variable!r} is not in the schema")
            if var.kind in ("entity-id", "year"):
                raise PlanOrder(f"{step.variable!r} is the {var.kind} variable and cannot be synthesized")
            if step.strategy in ("career", "change-indicator") and var.kind != "categorical":
                raise PlanOrder(f"{step.variable!r}: strategy {step.strategy} needs a categorical variable")
        if self.not_working in by_name[self.career.variable].levels:
            raise SchemaError(f"career variable has a level equal to the not-working label {self.not_working!r}")


def load_plan(path) -> SynthesisPlan:
    """Read a plan document: a ``[synthesis]`` table and ordered ``[[step]]`` tables."""
    return SynthesisPlan.from_mapping(read_toml(path))


# -- feature tables ----------------------------------------------------------


def _entity_table(careers, not_working) -> pd.DataFrame:
    rows = []
    for c in careers:
        t = decompose(c)
        working = [lbl for lbl in c if lbl != not_working]
        rows.append({
            "career.G": float(t.G),
            "career.moves": float(len(t.Z)),
            "career.years_worked": float(len(working)),
            "career.first": working[0] if working else not_working,
        })
    return pd.DataFrame(rows, columns=list(ENTITY_FEATURES))


def _row_table(careers, first_year, career_var, not_working) -> pd.DataFrame:
    """One row per working entity-year, ordered by entity then year."""
    grid = np.asarray(careers, dtype=object)
    working = grid != not_working
    ent, slot = np.nonzero(working)
    tenure = np.cumsum(working, axis=1)[ent, slot]
    return pd.DataFrame({
        "entity": ent,
        "year": (first_year + slot).astype(float),
        "career.tenure": tenure.astype(float),
        career_var: grid[ent, slot],
    })


def _training_tables(data: PanelDataset, plan: SynthesisPlan):
    careers, t0 = careers_from_panel(data, plan.career.variable, plan.not_working)
    entities = _entity_table(careers, plan.not_working)
    rows = _row_table(careers, t0, plan.career.variable, plan.not_working)
    # attach observed values to the working rows
    span = data.year_range[1] - t0 + 1
    keys = data.entity_codes * span + (data.years - t0)
    order = np.argsort(keys)
    wanted = rows["entity"].to_numpy() * span + (rows["year"].to_numpy().astype(np.int64) - t0)
    source = order[np.searchsorted(keys[order], wanted)]
    for step in plan.steps[1:]:
        var = data.variable(step.variable)
        vals = data.values(step.variable)[source]
        rows[step.variable] = vals.astype(float) if var.kind == "numeric" else pd.Series(vals, dtype=object)
    rows = _with_entity(rows, entities)
    return careers, t0, entities, rows


def _missing(series: pd.Series) -> np.ndarray:
    return series.isna().to_numpy()


def _complete(frame: pd.DataFrame, columns) -> pd.DataFrame:
    mask = np.ones(len(frame), dtype=bool)
    for c in columns:
        mask &= ~_missing(frame[c])
    return frame[mask]


def _lag(rows: pd.DataFrame, variable: str) -> pd.Series:
    """Value in the entity's previous working year (NaN/None for the first)."""
    prev = rows[variable].shift(1)
    first = rows["entity"].ne(rows["entity"].shift(1)).to_numpy()
    prev = prev.astype(object) if prev.dtype == object else prev
    prev[first] = None if prev.dtype == object else np.nan
    return prev


def _rank(rows: pd.DataFrame) -> np.ndarray:
    return rows.groupby("entity").cumcount().to_numpy()


# -- fitted step models -------------------------------------------------------


@dataclass
class _StepModel:
    step: PlanStep
    categorical: bool
    main: CartModel | None = None  # entity-level value / cross-sectional / first year
    lagged: CartModel | None = None  # lag-one transition
    indicator: CartModel | None = None  # change-indicator flag


@dataclass
class FittedSynthesizer:
    plan: SynthesisPlan
    schema: tuple[VariableSchema, ...]
    first_year: int
    horizon: int
    career_model: object = field(repr=False)
    step_models: list = field(repr=False)


def _fit(frame, target, predictors, min_leaf, categorical) -> CartModel:
    train = _complete(frame, (target,) + tuple(predictors))
    return fit_cart(train, target, predictors, min_leaf=min_leaf, categorical_target=categorical)


def fit_synthesizer(data: PanelDataset, plan: SynthesisPlan) -> FittedSynthesizer:
    plan.check_schema(data.schema)
    careers, t0, entities, rows = _training_tables(data, plan)
    career_model = fit_career_model(careers, alpha=plan.alpha)
    models = []
    for step in plan.steps[1:]:
        categorical = data.variable(step.variable).kind == "categorical"
        min_leaf = step.min_leaf or plan.min_leaf
        preds = step.predictors
        v = step.variable
        if step.strategy == "constant-demographic":
            entities[v] = _first_observed(rows, v, len(entities))
            models.append(_StepModel(step, categorical, main=_fit(entities, v, preds, min_leaf, categorical)))
        elif step.strategy == "cart-cross-sectional":
            models.append(_StepModel(step, categorical, main=_fit(rows, v, preds, min_leaf, categorical)))
        elif step.strategy == "cart-lag-one":
            lagged = rows.assign(**{f"{v}.prev": _lag(rows, v)})
            first = lagged[_rank(rows) == 0]
            models.append(_StepModel(
                step, categorical,
                main=_fit(first, v, preds, min_leaf, categorical),
                lagged=_fit(lagged, v, preds + (f"{v}.prev",), min_leaf, categorical),
            ))
        else:  # change-indicator
            ent = entities.assign(**{v: _first_observed(rows, v, len(entities)),
                                     "changes": _changes(rows, v, len(entities))})
            indicator = _fit(ent, "changes", preds, min_leaf, True)
            first = _fit(ent, v, preds, min_leaf, categorical)
            changers = np.flatnonzero(ent["changes"].to_numpy() == "yes")
            lagged = None
            if len(changers):
                sub = rows[rows["entity"].isin(changers)].reset_index(drop=True)
                sub[f"{v}.prev"] = _lag(sub, v).to_numpy()
                lagged = _fit(sub, v, preds + (f"{v}.prev",), min_leaf, categorical)
            models.append(_StepModel(step, categorical, main=first, lagged=lagged, indicator=indicator))
    plan_vars = {s.variable for s in plan.steps}
    schema = tuple(v for v in data.schema if v.kind in ("entity-id", "year") or v.name in plan_vars)
    return FittedSynthesizer(plan, schema, t0, career_model.horizon, career_model, models)


def _first_observed(rows: pd.DataFrame, variable: str, n_entities: int) -> pd.Series:
    ok = rows[~_missing(rows[variable])]
    firsts = ok.groupby("entity")[variable].first()
    out = pd.Series([None] * n_entities, dtype=object)
    out.iloc[firsts.index.to_numpy()] = firsts.to_numpy()
    return out


def _changes(rows: pd.DataFrame, variable: str, n_entities: int) -> pd.Series:
    ok = rows[~_missing(rows[variable])]
    distinct = ok.groupby("entity")[variable].nunique()
    out = pd.Series([None] * n_entities, dtype=object)
    out.iloc[distinct.index.to_numpy()] = np.where(distinct.to_numpy() > 1, "yes", "no")
    return out


# -- synthesis ----------------------------------------------------------------


def _sample_lag_one(rows, v, first_model, lagged_model, gen, first_values=None):
    """Fill ``rows[v]`` year by year; ``first_values`` overrides the first-year model."""
    rank = _rank(rows)
    values = np.empty(len(rows), dtype=object)
    for k in range(int(rank.max()) + 1 if len(rank) else 0):
        at = np.flatnonzero(rank == k)
        if k == 0:
            if first_values is not None:
                values[at] = first_values
            else:
                values[at] = first_model.sample(rows.iloc[at], gen)
            continue
        rec = rows.iloc[at].copy()
        rec[f"{v}.prev"] = values[at - 1]
        if not first_model.categorical_target:
            rec[f"{v}.prev"] = rec[f"{v}.prev"].astype(float)
        values[at] = lagged_model.sample(rec, gen)
    return values


def synthesize(fitted: FittedSynthesizer, count: int, rng) -> PanelDataset:
    gen = philox(rng)
    plan = fitted.plan
    careers = _working_careers(fitted, count, gen)
    entities = _entity_table(careers, plan.not_working)
    rows = _row_table(careers, fitted.first_year, plan.career.variable, plan.not_working)
    ent_of_row = rows["entity"].to_numpy()
    for model in fitted.step_models:
        v = model.step.variable
        if model.step.strategy == "constant-demographic":
            entities[v] = model.main.sample(entities, gen)
            rows[v] = entities[v].to_numpy()[ent_of_row]
        elif model.step.strategy == "cart-cross-sectional":
            rows[v] = model.main.sample(_with_entity(rows, entities), gen)
        elif model.step.strategy == "cart-lag-one":
            values = _sample_lag_one(_with_entity(rows, entities), v, model.main, model.lagged, gen)
            rows[v] = values if model.categorical else values.astype(float)
        else:
            flags = model.indicator.sample(entities, gen)
            first = model.main.sample(entities, gen)
            values = first[ent_of_row].astype(object)
            changing = np.flatnonzero(flags == "yes")
            if model.lagged is not None and len(changing):
                sel = np.isin(ent_of_row, changing)
                sub = _with_entity(rows[sel].reset_index(drop=True), entities)
                firsts = first[sub.groupby("entity").head(1)["entity"].to_numpy()]
                values[sel] = _sample_lag_one(sub, v, model.main, model.lagged, gen, first_values=firsts)
            rows[v] = values
    return _to_panel(fitted, rows)


def _working_careers(fitted: FittedSynthesizer, count: int, gen, max_rounds: int = 100):
    """Sample careers, redrawing any that never work (they would have no rows)."""
    nw = fitted.plan.not_working
    out = []
    for _ in range(max_rounds):
        need = count - len(out)
        if need <= 0:
            return out
        drawn = sample_careers(fitted.career_model, need + need // 10 + 1, gen)
        out.extend(c for c in drawn if any(lbl != nw for lbl in c))
        del out[count:]
    if len(out) < count:
        raise SamplingStalled("sampled careers almost never include a working year",
                              {"wanted": count, "drawn": len(out)})
    return out


def _with_entity(rows: pd.DataFrame, entities: pd.DataFrame) -> pd.DataFrame:
    feats = entities.iloc[rows["entity"].to_numpy()].reset_index(drop=True)
    overlap = [c for c in feats.columns if c in rows.columns]
    return pd.concat([rows.reset_index(drop=True), feats.drop(columns=overlap)], axis=1)


def _to_panel(fitted: FittedSynthesizer, rows: pd.DataFrame) -> PanelDataset:
    data = {}
    for var in fitted.schema:
        if var.kind == "entity-id":
            data[var.name] = rows["entity"].to_numpy() + 1
        elif var.kind == "year":
            data[var.name] = rows["year"].to_numpy().astype(np.int64)
        elif var.kind == "numeric":
            data[var.name] = rows[var.name].to_numpy(dtype=float)
        else:
            data[var.name] = rows[var.name].to_numpy(dtype=object)
    return PanelDataset.from_columns(fitted.schema, data)


def synthesize_sequential(data: PanelDataset, plan: SynthesisPlan, count: int, rng) -> PanelDataset:
    """Fit every plan step to ``data`` and draw a synthetic panel of ``count`` entities.

    The output holds the entity and year variables plus the plan variables,
    with rows only for synthetic working years.
    """
    return synthesize(fit_synthesizer(data, plan), count, rng)
