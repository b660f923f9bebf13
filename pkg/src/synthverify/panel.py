"""Typed, immutable entity-by-year panel storage and analysis-frame construction.

A :class:`PanelDataset` is held column-wise: categorical cells as integer codes
(``-1`` marks a missing cell), numeric cells as floats (``NaN`` marks a missing
cell), years as integers, and entities as integer codes into a sorted label
array. Arrays are flagged read-only after construction.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .config import read_toml
from .errors import (
    DuplicateKey,
    FormulaError,
    LevelViolation,
    SchemaError,
    TransformDomain,
    TypeViolation,
)

KINDS = ("categorical", "numeric", "year", "entity-id")
INTERCEPT = "(Intercept)"


@dataclass(frozen=True)
class VariableSchema:
    name: str
    kind: str
    levels: tuple[str, ...] = ()
    missing_token: str = ""

    def __post_init__(self):
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_.]*", self.name or ""):
            raise SchemaError(f"invalid variable name {self.name!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.kind == "categorical":
            if not self.levels:
                raise SchemaError(f"{self.name}: categorical variable needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"{self.name}: duplicate category levels")
        elif self.levels:
            raise SchemaError(f"{self.name}: levels only apply to categorical variables")


def validate_schema(schema: Iterable[VariableSchema]) -> tuple[VariableSchema, ...]:
    schema = tuple(schema)
    names = [v.name for v in schema]
    if len(set(names)) != len(names):
        raise SchemaError("variable names must be unique")
    for kind in ("entity-id", "year"):
        count = sum(v.kind == kind for v in schema)
        if count != 1:
            raise SchemaError(f"schema needs exactly one {kind} variable, found {count}")
    return schema


def load_schema(path) -> tuple[VariableSchema, ...]:
    """Read a schema document (a TOML file with one ``[[variable]]`` table per column)."""
    doc = read_toml(path)
    return schema_from_mapping(doc)


def schema_from_mapping(doc: Mapping) -> tuple[VariableSchema, ...]:
    try:
        entries = doc["variable"]
    except KeyError:
        raise SchemaError("schema document has no [[variable]] entries") from None
    return validate_schema(
        VariableSchema(
            name=e["name"],
            kind=e["kind"],
            levels=tuple(e.get("levels", ())),
            missing_token=str(e.get("missing_token", "")),
        )
        for e in entries
    )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class PanelDataset:
    """Immutable long-format panel: one row per (entity, year).

    Build one with :func:`load_csv` or :meth:`PanelDataset.from_columns`.
    """

    def __init__(self, schema, columns, entity_labels):
        self.schema = validate_schema(schema)
        self._vars = {v.name: v for v in self.schema}
        self._columns = {k: _readonly(v) for k, v in columns.items()}
        self.entity_labels = _readonly(np.asarray(entity_labels))
        lengths = {len(c) for c in self._columns.values()}
        if len(lengths) > 1:
            raise SchemaError("columns have unequal lengths")
        self.n_rows = lengths.pop() if lengths else 0
        self._entity_index = None
        self._check_keys()

    # -- construction -----------------------------------------------------

    @classmethod
    def from_columns(cls, schema, data: Mapping[str, Sequence]) -> "PanelDataset":
        """Build a dataset from per-variable value sequences.

        Categorical columns take labels (``None``, ``NaN`` or the missing token
        mark a missing cell) or a :class:`pandas.Categorical` whose categories
        equal the schema levels. Numeric columns take floats with ``NaN`` or
        ``None`` for missing.
        """
        schema = validate_schema(schema)
        if set(data) != {v.name for v in schema}:
            raise SchemaError(
                f"columns {sorted(data)} do not match schema {[v.name for v in schema]}"
            )
        columns = {}
        entity_labels = None
        for var in schema:
            values = data[var.name]
            if var.kind == "entity-id":
                values = np.asarray(values)
                if pd.isna(values).any():
                    raise TypeViolation(int(np.flatnonzero(pd.isna(values))[0]) + 1, var.name)
                codes, uniques = pd.factorize(values, sort=True)
                columns[var.name] = codes.astype(np.int64)
                entity_labels = np.asarray(uniques)
            elif var.kind == "year":
                arr = np.asarray(values)
                if arr.dtype.kind not in "iu":
                    try:
                        as_float = arr.astype(float)
                    except (TypeError, ValueError):
                        raise TypeViolation(None, var.name) from None
                    bad = ~np.isfinite(as_float) | (as_float != np.round(as_float))
                    if bad.any():
                        row = int(np.flatnonzero(bad)[0])
                        raise TypeViolation(row + 1, var.name, arr[row])
                    arr = as_float
                columns[var.name] = arr.astype(np.int64)
            elif var.kind == "numeric":
                columns[var.name] = _numeric_values(var, values)
            else:
                columns[var.name] = _categorical_codes(var, values)
        return cls(schema, columns, entity_labels)

    def _check_keys(self):
        if self.n_rows == 0:
            return
        ent = self._columns[self.entity_var.name]
        yr = self._columns[self.year_var.name]
        span = int(yr.max() - yr.min()) + 1
        key = ent * span + (yr - yr.min())
        uniq, counts = np.unique(key, return_counts=True)
        if (counts > 1).any():
            k = uniq[np.argmax(counts > 1)]
            raise DuplicateKey(self.entity_labels[k // span], int(k % span + yr.min()))

    # -- accessors --------------------------------------------------------

    @property
    def entity_var(self) -> VariableSchema:
        return next(v for v in self.schema if v.kind == "entity-id")

    @property
    def year_var(self) -> VariableSchema:
        return next(v for v in self.schema if v.kind == "year")

    def variable(self, name: str) -> VariableSchema:
        try:
            return self._vars[name]
        except KeyError:
            raise FormulaError(f"unknown variable {name!r}") from None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.schema)

    @property
    def n_entities(self) -> int:
        return len(self.entity_labels)

    @property
    def entity_codes(self) -> np.ndarray:
        return self._columns[self.entity_var.name]

    @property
    def years(self) -> np.ndarray:
        return self._columns[self.year_var.name]

    @property
    def year_range(self) -> tuple[int, int]:
        return int(self.years.min()), int(self.years.max())

    @property
    def distinct_years(self) -> tuple[int, ...]:
        return tuple(int(y) for y in np.unique(self.years))

    def column(self, name: str) -> np.ndarray:
        """Raw storage array (codes for categorical and entity variables)."""
        self.variable(name)
        return self._columns[name]

    def missing(self, name: str) -> np.ndarray:
        var = self.variable(name)
        col = self._columns[name]
        if var.kind == "categorical":
            return col < 0
        if var.kind == "numeric":
            return np.isnan(col)
        return np.zeros(self.n_rows, dtype=bool)

    def values(self, name: str) -> np.ndarray:
        """Decoded column: labels (``None`` if missing) for categorical variables."""
        var = self.variable(name)
        col = self._columns[name]
        if var.kind == "entity-id":
            return self.entity_labels[col]
        if var.kind == "categorical":
            labels = np.array(var.levels + (None,), dtype=object)
            return labels[col]
        return col.copy()

    @property
    def entity_index(self) -> dict:
        """Entity label -> sorted array of row indices."""
        if self._entity_index is None:
            order = np.argsort(self.entity_codes, kind="stable")
            bounds = np.searchsorted(self.entity_codes[order], np.arange(self.n_entities + 1))
            self._entity_index = {
                self.entity_labels[e]: _readonly(order[bounds[e]:bounds[e + 1]])
                for e in range(self.n_entities)
            }
        return self._entity_index

    def cell(self, row: int, name: str):
        value = self.values(name)[row]
        if isinstance(value, float) and math.isnan(value):
            return None
        return value.item() if hasattr(value, "item") else value

    def take(self, rows) -> "PanelDataset":
        rows = np.asarray(rows)
        columns = {k: v[rows] for k, v in self._columns.items()}
        ent = self.entity_var.name
        codes, uniques = pd.factorize(columns[ent], sort=True)
        columns[ent] = codes.astype(np.int64)
        return PanelDataset(self.schema, columns, self.entity_labels[uniques])

    def equals(self, other: "PanelDataset") -> bool:
        if self.schema != other.schema or self.n_rows != other.n_rows:
            return False
        for name in self.names:
            a, b = self.values(name), other.values(name)
            if self.variable(name).kind == "numeric":
                if not np.array_equal(a, b, equal_nan=True):
                    return False
            elif not all(x == y for x, y in zip(a.astype(str), b.astype(str))):
                return False
        return True

    def to_csv(self, path) -> None:
        decoded = [self.values(v.name) for v in self.schema]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
            writer.writerow(self.names)
            for i in range(self.n_rows):
                writer.writerow(
                    _format_cell(var, col[i]) for var, col in zip(self.schema, decoded)
                )

    def __repr__(self):
        return (
            f"PanelDataset(n_rows={self.n_rows}, n_entities={self.n_entities}, "
            f"years={self.year_range if self.n_rows else None})"
        )


def _numeric_values(var: VariableSchema, values) -> np.ndarray:
    if isinstance(values, np.ndarray) and values.dtype.kind in "fiu":
        return values.astype(float)
    out = np.empty(len(values), dtype=float)
    for i, v in enumerate(values):
        if v is None or v == var.missing_token:
            out[i] = np.nan
            continue
        try:
            out[i] = float(v)
        except (TypeError, ValueError):
            raise TypeViolation(i + 1, var.name, v) from None
    return out


def _categorical_codes(var: VariableSchema, values) -> np.ndarray:
    if isinstance(values, pd.Categorical):
        if tuple(str(c) for c in values.categories) != var.levels:
            raise LevelViolation(var.name, list(values.categories))
        return np.asarray(values.codes, dtype=np.int32)
    raw = pd.Series(values, dtype=object)
    missing = raw.isna() | (raw.astype(str) == var.missing_token)
    cat = pd.Categorical(raw.where(~missing).astype(object).map(
        lambda v: v if v is None or (isinstance(v, float) and math.isnan(v)) else str(v)
    ), categories=var.levels)
    codes = np.asarray(cat.codes, dtype=np.int32)
    unknown = (codes < 0) & ~missing.to_numpy()
    if unknown.any():
        row = int(np.flatnonzero(unknown)[0])
        raise LevelViolation(var.name, raw.iloc[row], row + 1)
    return codes


def _format_cell(var: VariableSchema, value) -> str:
    if var.kind == "numeric":
        return var.missing_token if math.isnan(value) else repr(float(value))
    if var.kind == "categorical":
        return var.missing_token if value is None else value
    return str(value)


def load_csv(path, schema: Sequence[VariableSchema]) -> PanelDataset:
    """Load a long-format UTF-8 CSV and validate every cell against ``schema``."""
    schema = validate_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if sorted(header) != sorted(v.name for v in schema):
            raise SchemaError(f"{path}: header {header} does not match schema")
        pos = {name: i for i, name in enumerate(header)}
        cells = {v.name: [] for v in schema}
        for lineno, record in enumerate(reader, start=1):
            if len(record) != len(header):
                raise TypeViolation(lineno, None, record)
            for var in schema:
                cells[var.name].append(_parse_cell(var, record[pos[var.name]], lineno))
    return PanelDataset.from_columns(schema, cells)


def _parse_cell(var: VariableSchema, text: str, row: int):
    if var.kind in ("numeric", "categorical") and text == var.missing_token:
        return None
    if var.kind == "entity-id":
        if text == "":
            raise TypeViolation(row, var.name, text)
        return text
    if var.kind == "year":
        try:
            return int(text)
        except ValueError:
            raise TypeViolation(row, var.name, text) from None
    if var.kind == "numeric":
        try:
            value = float(text)
        except ValueError:
            raise TypeViolation(row, var.name, text) from None
        if math.isnan(value):
            raise TypeViolation(row, var.name, text)
        return value
    if text not in var.levels:
        raise LevelViolation(var.name, text, row)
    return text


# ---------------------------------------------------------------------------
# model formulas


@dataclass(frozen=True)
class Expr:
    """A parsed term expression: a bare variable or a function call."""

    fn: str | None
    args: tuple = ()
    kwargs: tuple = ()
    name: str | None = None

    def __str__(self):
        if self.fn is None:
            return self.name
        parts = [str(a) for a in self.args] + [f"{k}={v}" for k, v in self.kwargs]
        return f"{self.fn}({', '.join(parts)})"

    def variables(self) -> set[str]:
        if self.fn is None:
            return {self.name}
        out = set()
        for a in self.args:
            out |= a.variables()
        return out


_TOKEN = re.compile(r"\s*(?:([A-Za-z_][A-Za-z0-9_.]*)|(-?[0-9][0-9.eE+-]*)|([(),=]))")


def parse_expr(text: str) -> Expr:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise FormulaError(f"cannot parse {text!r} at position {pos}")
        tokens.append(m.group(1) or m.group(2) or m.group(3))
        pos = m.end()
    expr, rest = _parse_tokens(tokens, text)
    if rest:
        raise FormulaError(f"trailing input in {text!r}")
    return expr


def _parse_tokens(tokens, text):
    if not tokens or not re.match(r"[A-Za-z_]", tokens[0]):
        raise FormulaError(f"expected a name in {text!r}")
    head, rest = tokens[0], tokens[1:]
    if not rest or rest[0] != "(":
        return Expr(fn=None, name=head), rest
    rest = rest[1:]
    args, kwargs = [], []
    while True:
        if rest and rest[0] == ")":
            rest = rest[1:]
            break
        if len(rest) >= 2 and rest[1] == "=":
            if len(rest) < 3:
                raise FormulaError(f"incomplete keyword argument in {text!r}")
            kwargs.append((rest[0], rest[2]))
            rest = rest[3:]
        else:
            arg, rest = _parse_tokens(rest, text)
            args.append(arg)
        if rest and rest[0] == ",":
            rest = rest[1:]
        elif not rest or rest[0] != ")":
            raise FormulaError(f"unbalanced parentheses in {text!r}")
    return Expr(fn=head, args=tuple(args), kwargs=tuple(kwargs)), rest


NUMERIC_TRANSFORMS = ("log", "square", "adjust")
_FILTER = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.]*)\s*(==|!=|>=|<=|>|<)\s*(.+?)\s*$")


@dataclass(frozen=True)
class RowFilter:
    variable: str
    op: str
    value: str

    @classmethod
    def parse(cls, text: str) -> "RowFilter":
        m = _FILTER.match(text)
        if not m:
            raise FormulaError(f"cannot parse filter {text!r}")
        return cls(m.group(1), m.group(2), m.group(3).strip("\"'"))

    def __str__(self):
        return f"{self.variable} {self.op} {self.value}"


@dataclass(frozen=True)
class ModelFormula:
    """Regression model declaration shared by client and server.

    ``response`` and each entry of ``terms`` are expressions such as
    ``log(adjust(pay))``, ``square(age)`` or ``dummy(race, ref=white)``.
    A bare categorical variable in ``terms`` is dummy-encoded against its
    first level.
    """

    response: str
    terms: tuple[str, ...] = ()
    filters: tuple[str, ...] = ()
    intercept: bool = True
    drop_invalid: bool = False
    _response: Expr = field(init=False, repr=False, compare=False)
    _terms: tuple = field(init=False, repr=False, compare=False)
    _filters: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "filters", tuple(self.filters))
        response = parse_expr(self.response)
        terms = tuple(parse_expr(t) for t in self.terms)
        for expr in (response, *terms):
            _check_expr(expr, top=expr is not response)
        if response.fn == "dummy":
            raise FormulaError("the response cannot be dummy-encoded")
        object.__setattr__(self, "_response", response)
        object.__setattr__(self, "_terms", terms)
        object.__setattr__(self, "_filters", tuple(RowFilter.parse(f) for f in self.filters))

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "ModelFormula":
        unknown = set(doc) - {"response", "terms", "filters", "intercept", "drop_invalid"}
        if unknown:
            raise FormulaError(f"unknown formula keys {sorted(unknown)}")
        if "response" not in doc:
            raise FormulaError("formula needs a response")
        return cls(
            response=doc["response"],
            terms=tuple(doc.get("terms", ())),
            filters=tuple(doc.get("filters", ())),
            intercept=bool(doc.get("intercept", True)),
            drop_invalid=bool(doc.get("drop_invalid", False)),
        )

    def to_mapping(self) -> dict:
        return {
            "response": self.response,
            "terms": list(self.terms),
            "filters": list(self.filters),
            "intercept": self.intercept,
            "drop_invalid": self.drop_invalid,
        }

    def with_filter(self, text: str) -> "ModelFormula":
        return ModelFormula(
            self.response, self.terms, self.filters + (text,), self.intercept, self.drop_invalid
        )

    def variables(self) -> set[str]:
        used = self._response.variables()
        for t in self._terms:
            used |= t.variables()
        return used | {f.variable for f in self._filters}

    def design_columns(self, data: PanelDataset) -> tuple[str, ...]:
        """Column names of the design matrix, derived from schema and year set only."""
        for name in self.variables():
            data.variable(name)
        cols = [INTERCEPT] if self.intercept else []
        for term in self._terms:
            var, ref = _dummy_target(term, data)
            if var is None:
                _numeric_kind_check(term, data)
                cols.append(str(term))
            else:
                cols.extend(f"{var.name}[{lvl}]" for lvl in _levels(var, data) if lvl != ref)
        if len(set(cols)) != len(cols):
            raise FormulaError("formula produces duplicate design columns")
        return tuple(cols)


def load_formula(path) -> ModelFormula:
    doc = read_toml(path)
    return ModelFormula.from_mapping(doc.get("model", doc))


def _check_expr(expr: Expr, top: bool):
    if expr.fn is None:
        return
    if expr.fn == "dummy":
        if not top:
            raise FormulaError("dummy() may only appear as a whole term")
        if len(expr.args) != 1 or expr.args[0].fn is not None:
            raise FormulaError("dummy() takes exactly one variable")
        if any(k != "ref" for k, _ in expr.kwargs):
            raise FormulaError("dummy() only accepts ref=")
        return
    if expr.fn not in NUMERIC_TRANSFORMS:
        raise FormulaError(f"unknown transform {expr.fn!r}")
    if len(expr.args) != 1 or expr.kwargs:
        raise FormulaError(f"{expr.fn}() takes exactly one argument")
    _check_expr(expr.args[0], top=False)


def _levels(var: VariableSchema, data: PanelDataset) -> tuple[str, ...]:
    if var.kind == "year":
        return tuple(str(y) for y in data.distinct_years)
    return var.levels


def _dummy_target(term: Expr, data: PanelDataset):
    if term.fn == "dummy":
        var = data.variable(term.args[0].name)
        if var.kind not in ("categorical", "year"):
            raise FormulaError(f"cannot dummy-encode {var.kind} variable {var.name!r}")
        levels = _levels(var, data)
        ref = dict(term.kwargs).get("ref", levels[0] if levels else None)
        if ref not in levels:
            raise LevelViolation(var.name, ref)
        return var, ref
    if term.fn is None and data.variable(term.name).kind == "categorical":
        var = data.variable(term.name)
        return var, var.levels[0]
    return None, None


def _numeric_kind_check(expr: Expr, data: PanelDataset):
    for name in expr.variables():
        kind = data.variable(name).kind
        if kind not in ("numeric", "year"):
            raise FormulaError(f"{name!r} ({kind}) cannot be used as a numeric term")


# ---------------------------------------------------------------------------
# analysis frames


@dataclass(frozen=True)
class AnalysisFrame:
    response: np.ndarray
    X: np.ndarray
    columns: tuple[str, ...]
    cluster_id: np.ndarray
    year: np.ndarray
    provenance: tuple[str, ...] = ()
    source_rows: np.ndarray | None = None
    entity_labels: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return len(self.response)

    @property
    def predictors(self) -> dict[str, np.ndarray]:
        return {name: self.X[:, i] for i, name in enumerate(self.columns)}

    def subset(self, rows) -> "AnalysisFrame":
        return AnalysisFrame(
            response=self.response[rows],
            X=self.X[rows],
            columns=self.columns,
            cluster_id=self.cluster_id[rows],
            year=self.year[rows],
            provenance=self.provenance,
            source_rows=None if self.source_rows is None else self.source_rows[rows],
            entity_labels=self.entity_labels,
        )

    def to_csv(self, path) -> None:
        table = pd.DataFrame(self.X, columns=list(self.columns))
        table.insert(0, "response", self.response)
        table.insert(0, "year", self.year)
        labels = self.cluster_id if self.entity_labels is None else self.entity_labels[self.cluster_id]
        table.insert(0, "cluster", labels)
        table.to_csv(path, index=False)


def _filter_mask(data: PanelDataset, flt: RowFilter) -> np.ndarray:
    var = data.variable(flt.variable)
    col = data.column(flt.variable)
    if var.kind == "categorical":
        if flt.op not in ("==", "!="):
            raise FormulaError(f"filter {flt}: only == and != apply to categorical variables")
        if flt.value not in var.levels:
            raise LevelViolation(var.name, flt.value)
        code = var.levels.index(flt.value)
        hit = col == code
        return (hit if flt.op == "==" else ~hit) & (col >= 0)
    if var.kind == "entity-id":
        labels = data.entity_labels.astype(str)
        hit = labels[col] == flt.value
        return hit if flt.op == "==" else ~hit
    try:
        value = float(flt.value)
    except ValueError:
        raise FormulaError(f"filter {flt}: {flt.value!r} is not a number") from None
    x = col.astype(float)
    with np.errstate(invalid="ignore"):
        return {
            "==": x == value, "!=": x != value, ">": x > value,
            ">=": x >= value, "<": x < value, "<=": x <= value,
        }[flt.op]


def _eval_numeric(expr: Expr, data: PanelDataset, rows, index, invalid):
    if expr.fn is None:
        return data.column(expr.name)[rows].astype(float)
    inner = _eval_numeric(expr.args[0], data, rows, index, invalid)
    if expr.fn == "log":
        bad = ~(inner > 0)
        invalid |= bad
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(np.where(bad, 1.0, inner))
    if expr.fn == "square":
        return inner * inner
    if index is None:
        raise TransformDomain("adjust() needs an inflation index table")
    years = data.years[rows]
    lookup = np.array([index.get(int(y), np.nan) for y in np.unique(years)])
    factors = lookup[np.searchsorted(np.unique(years), years)]
    if np.isnan(factors).any() or (factors <= 0).any():
        missing = sorted({int(y) for y in years[~(factors > 0)]})
        raise TransformDomain(f"inflation index has no positive entry for years {missing}")
    return inner / factors


def build_frame(
    data: PanelDataset,
    formula: ModelFormula,
    inflation_index: Mapping[int, float] | None = None,
) -> AnalysisFrame:
    """Apply filters, available-case deletion and transforms to produce a design."""
    columns = formula.design_columns(data)
    log = []
    keep = np.ones(data.n_rows, dtype=bool)
    for flt in formula._filters:
        mask = _filter_mask(data, flt)
        log.append(f"filter {flt}: excluded {int((keep & ~mask).sum())} rows")
        keep &= mask
    missing = np.zeros(data.n_rows, dtype=bool)
    for name in sorted(formula.variables()):
        missing |= data.missing(name)
    log.append(f"available cases: excluded {int((keep & missing).sum())} rows with missing values")
    keep &= ~missing
    rows = np.flatnonzero(keep)

    invalid = np.zeros(len(rows), dtype=bool)
    y = _eval_numeric(formula._response, data, rows, inflation_index, invalid)
    parts = [np.ones((len(rows), 1))] if formula.intercept else []
    for term in formula._terms:
        var, ref = _dummy_target(term, data)
        if var is None:
            parts.append(_eval_numeric(term, data, rows, inflation_index, invalid)[:, None])
            continue
        levels = _levels(var, data)
        col = data.column(var.name)[rows]
        if var.kind == "year":
            codes = np.searchsorted(np.asarray(data.distinct_years), col)
        else:
            codes = col
        keep_levels = [i for i, lvl in enumerate(levels) if lvl != ref]
        parts.append((codes[:, None] == np.asarray(keep_levels)[None, :]).astype(float))
        log.append(f"dummy {var.name}: reference level {ref}")
    if invalid.any():
        if not formula.drop_invalid:
            raise TransformDomain(
                f"{int(invalid.sum())} rows fall outside a transform's domain (e.g. log of a non-positive value)"
            )
        log.append(f"drop invalid: excluded {int(invalid.sum())} rows outside transform domain")
    ok = ~invalid
    X = np.hstack(parts) if parts else np.empty((len(rows), 0))
    log.append(f"response {formula.response}")
    return AnalysisFrame(
        response=y[ok],
        X=X[ok],
        columns=columns,
        cluster_id=data.entity_codes[rows][ok],
        year=data.years[rows][ok],
        provenance=tuple(log),
        source_rows=rows[ok],
        entity_labels=data.entity_labels,
    )
