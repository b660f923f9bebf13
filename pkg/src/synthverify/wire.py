"""JSON wire format shared by the server and the client.

Both sides validate envelopes against the versioned schema documents in
``synthverify/schemas`` and convert them with the same functions, so the
client rejects locally everything the server would reject on shape alone.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import jsonschema

from .errors import FormulaError, QueryError, SynthVerifyError
from .panel import ModelFormula
from .verify import CoefficientQuery, Interval, TrendQuery

WIRE_VERSION = 1
SCHEMAS = ("query", "release", "budget", "error")


class WireError(SynthVerifyError):
    """An envelope does not match its schema or does not describe a valid query."""


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(name)
    text = resources.files("synthverify").joinpath("schemas", f"{name}.v{WIRE_VERSION}.json").read_text()
    return json.loads(text)


@lru_cache(maxsize=None)
def _validator(name: str):
    doc = schema(name)
    cls = jsonschema.validators.validator_for(doc)
    cls.check_schema(doc)
    return cls(doc)


def validate(name: str, doc) -> None:
    errors = sorted(_validator(name).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "(root)"
        raise WireError(f"{name} envelope invalid at {where}: {e.message}")


def interval_from_wire(doc) -> Interval:
    try:
        return Interval.from_json(doc)
    except QueryError as exc:
        raise WireError(str(exc)) from None


@dataclass(frozen=True)
class QueryEnvelope:
    analysis_id: str
    kind: str
    query: CoefficientQuery | TrendQuery
    scope_key: str | None = None

    @property
    def digest(self) -> str:
        return query_digest(to_wire(self))


def from_wire(doc, default_epsilon: float = 1.0, default_M: int = 50) -> QueryEnvelope:
    """Validate an envelope and build the query it describes.

    ``epsilon`` and ``M`` fall back to the given defaults when absent.
    """
    validate("query", doc)
    p = doc["payload"]
    try:
        formula = ModelFormula.from_mapping(p["formula"])
        common = dict(
            formula=formula,
            coefficient=p["coefficient"],
            M=int(p.get("M", default_M)),
            epsilon=float(p.get("epsilon", default_epsilon)),
        )
        if doc["kind"] == "coef_verify":
            query = CoefficientQuery(interval=interval_from_wire(p["interval"]), gamma1=p.get("gamma1"), **common)
        else:
            query = TrendQuery(
                periods=tuple(tuple(pr) for pr in p["periods"]),
                intervals=tuple(interval_from_wire(i) for i in p["intervals"]),
                mode=p.get("mode", "separate"),
                **common,
            )
    except (FormulaError, QueryError) as exc:
        raise WireError(str(exc)) from None
    return QueryEnvelope(doc["analysis_id"], doc["kind"], query, doc.get("scope_key"))


def to_wire(env: QueryEnvelope) -> dict:
    q = env.query
    payload = {
        "formula": q.formula.to_mapping(),
        "coefficient": q.coefficient,
        "M": q.M,
        "epsilon": q.epsilon,
    }
    if isinstance(q, CoefficientQuery):
        payload["interval"] = q.interval.to_json()
        if q.gamma1 is not None:
            payload["gamma1"] = q.gamma1
    else:
        payload["periods"] = [list(pr) for pr in q.periods]
        payload["intervals"] = [i.to_json() for i in q.intervals]
        payload["mode"] = q.mode
    doc = {"version": WIRE_VERSION, "analysis_id": env.analysis_id, "kind": env.kind, "payload": payload}
    if env.scope_key is not None:
        doc["scope_key"] = env.scope_key
    return doc


def query_digest(doc) -> str:
    """SHA-256 of the canonical JSON form of an envelope."""
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canonical.encode()).hexdigest()


def dumps(doc) -> bytes:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x

    return json.dumps(clean(doc), allow_nan=False).encode()
