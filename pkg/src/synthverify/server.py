"""Verification server: holds the confidential panel and answers queries with DP releases.

Endpoints (JSON over HTTP):

``POST /v1/verify``
    body: a query envelope (``schemas/query.v1.json``); reply: a release
    envelope (``schemas/release.v1.json``).
``GET /v1/budget/{analysis_id}``
    the ledger view for one analysis.
``GET /v1/health``
    liveness.

Every request names an analysis and must carry ``Authorization: Bearer
<token>`` with that analysis's token. The budget is debited (and journaled)
before any partitioning, fitting or noise; a refused query touches nothing.
"""

from __future__ import annotations

import hmac
import json
import logging
import os
import re
import time
from dataclasses import dataclass, field, replace
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Mapping

from . import wire
from .config import read_toml
from .dp import BudgetLedger, KeyedRandom, parse_scope
from .errors import (
    BudgetExhausted,
    FormulaError,
    LevelViolation,
    QueryError,
    SynthVerifyError,
    TransformDomain,
    UnknownYear,
)
from .panel import PanelDataset, load_csv, load_schema
from .verify import CoefficientQuery, coef_verify, trend_verify

log = logging.getLogger("synthverify.server")

MAX_BODY = 1 << 20


@dataclass(frozen=True)
class ServerConfig:
    data_csv: Path
    schema: Path
    secret: str
    tokens: Mapping[str, str]
    journal: Path | None = None
    cap: float = 20.0
    default_epsilon: float = 1.0
    default_M: int = 50
    disjointness_variable: str | None = None
    global_cap: bool = False
    inflation_index: Mapping[int, float] | None = None
    host: str = "127.0.0.1"
    port: int = 8750

    @classmethod
    def load(cls, path) -> "ServerConfig":
        """Read a TOML server configuration; relative paths resolve against its directory."""
        path = Path(path)
        doc = read_toml(path)
        base = path.parent

        def resolve(p):
            return None if p is None else (base / p).resolve()

        srv, data, budget = doc.get("server", {}), doc.get("data", {}), doc.get("budget", {})
        secret = srv.get("secret") or os.environ.get(srv.get("secret_env", "SYNTHVERIFY_SECRET"), "")
        if not secret:
            raise SynthVerifyError("server configuration needs a secret (or secret_env)")
        index = data.get("inflation_index")
        return cls(
            data_csv=resolve(data["csv"]),
            schema=resolve(data["schema"]),
            secret=secret,
            tokens=dict(doc.get("tokens", {})),
            journal=resolve(budget.get("journal")),
            cap=float(budget.get("cap", 20.0)),
            default_epsilon=float(budget.get("default_epsilon", 1.0)),
            default_M=int(budget.get("default_M", 50)),
            disjointness_variable=budget.get("disjointness_variable"),
            global_cap=bool(budget.get("global_cap", False)),
            inflation_index={int(k): float(v) for k, v in index.items()} if index else None,
            host=srv.get("host", "127.0.0.1"),
            port=int(srv.get("port", 8750)),
        )


@dataclass
class Response:
    status: int
    body: dict


def _error(status: HTTPStatus, kind: str, message: str, **extra) -> Response:
    return Response(int(status), {"error": kind, "message": message, **extra})


@dataclass
class VerificationService:
    """Transport-independent request handling.

    ``observer`` is an in-process test hook that receives the raw
    verification results; it cannot be set from the wire.
    """

    data: PanelDataset
    ledger: BudgetLedger
    rng: KeyedRandom
    tokens: Mapping[str, str] = field(default_factory=dict)
    default_epsilon: float = 1.0
    default_M: int = 50
    inflation_index: Mapping[int, float] | None = None
    observer: Callable | None = None

    @classmethod
    def from_config(cls, cfg: ServerConfig) -> "VerificationService":
        data = load_csv(cfg.data_csv, load_schema(cfg.schema))
        ledger = BudgetLedger(cfg.cap, cfg.disjointness_variable, cfg.journal, cfg.global_cap)
        return cls(data, ledger, KeyedRandom(cfg.secret), cfg.tokens, cfg.default_epsilon,
                   cfg.default_M, cfg.inflation_index)

    def authorized(self, analysis_id: str, token: str | None) -> bool:
        expected = self.tokens.get(analysis_id)
        return expected is not None and token is not None and _same(expected, token)

    # -- handlers -------------------------------------------------------

    def handle_verify(self, doc, token: str | None = None) -> Response:
        aid = doc.get("analysis_id") if isinstance(doc, dict) else None
        if self.tokens and not (isinstance(aid, str) and self.authorized(aid, token)):
            return _error(HTTPStatus.UNAUTHORIZED, "unauthorized", "missing or invalid token for analysis")
        try:
            env = wire.from_wire(doc, self.default_epsilon, self.default_M)
            query = self._prepare(env)
        except (wire.WireError, FormulaError, QueryError, LevelViolation, UnknownYear) as exc:
            return _error(HTTPStatus.BAD_REQUEST, "validation", str(exc))
        digest = wire.query_digest(doc)
        try:
            if env.kind == "coef_verify":
                raws = [coef_verify(self.data, query, self.ledger, self.rng, analysis_id=env.analysis_id,
                                    scope_key=env.scope_key, digest=digest,
                                    inflation_index=self.inflation_index)]
            else:
                raws = trend_verify(self.data, query, self.ledger, self.rng, analysis_id=env.analysis_id,
                                    scope_key=env.scope_key, digest=digest,
                                    inflation_index=self.inflation_index)
        except BudgetExhausted as exc:
            return _error(HTTPStatus.FORBIDDEN, "budget_exhausted", "privacy budget exhausted",
                          analysis_id=exc.analysis_id, requested=exc.requested, remaining=exc.remaining)
        except TransformDomain:
            # raised after the debit; the message would describe the data, so it is withheld
            log.warning("verify failed after debit: transform domain", extra={"analysis_id": env.analysis_id})
            return _error(HTTPStatus.INTERNAL_SERVER_ERROR, "internal",
                          "the model could not be evaluated on the confidential data; the debit stands")
        if self.observer is not None:
            self.observer(env, raws)
        spent = sum(r.epsilon_spent for r in raws)
        body = {
            "version": wire.WIRE_VERSION,
            "analysis_id": env.analysis_id,
            "kind": env.kind,
            "scope_key": env.scope_key,
            "releases": [r.release().to_json() for r in raws],
            "epsilon_spent": spent,
            "spent": self.ledger.spent(env.analysis_id),
            "remaining": self.ledger.remaining(env.analysis_id),
            "timestamp": time.time(),
            "digest": digest,
        }
        if env.kind == "trend_verify":
            body["mode"] = query.mode
        return Response(int(HTTPStatus.OK), body)

    def _prepare(self, env: wire.QueryEnvelope):
        """Checks that need the schema but not the data values; run before any debit."""
        q = env.query
        # design columns depend on schema and year set only
        if q.coefficient not in q.formula.design_columns(self.data):
            raise QueryError(f"coefficient {q.coefficient!r} is not in the model")
        if q.M > self.data.n_entities:
            raise QueryError(f"M={q.M} exceeds the number of entities")
        if env.scope_key is not None:
            scope = parse_scope(env.scope_key)
            dv = self.ledger.disjointness_variable
            if dv is None or scope is None or scope[0] != dv:
                raise QueryError(f"scope_key must have the form '{dv or '<disjointness variable>'}=<level>'")
            var = self.data.variable(dv)
            if var.kind == "categorical" and scope[1] not in var.levels:
                raise LevelViolation(dv, scope[1])
            # restrict the analysis to the declared scope so disjointness holds by construction
            formula = q.formula.with_filter(f"{dv} == {scope[1]}")
            q = replace(q, formula=formula)
        if not isinstance(q, CoefficientQuery):
            present = set(self.data.distinct_years)
            for first, last in q.periods:
                if sum(t in present for t in range(first, last + 1)) < 2:
                    raise UnknownYear(f"period {first}-{last} has fewer than two years in the data")
        return q

    def handle_budget_status(self, analysis_id: str, token: str | None = None) -> Response:
        if self.tokens and not self.authorized(analysis_id, token):
            return _error(HTTPStatus.UNAUTHORIZED, "unauthorized", "missing or invalid token for analysis")
        return Response(int(HTTPStatus.OK), self.ledger.status(analysis_id))


def _same(a: str, b: str) -> bool:
    return hmac.compare_digest(a.encode(), b.encode())


_BUDGET_PATH = re.compile(r"^/v1/budget/([A-Za-z0-9_.:-]{1,128})$")


class _Handler(BaseHTTPRequestHandler):
    service: VerificationService  # set on the subclass built by make_server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging, never bodies
        log.debug("%s %s", self.address_string(), fmt % args)

    def _token(self):
        auth = self.headers.get("Authorization", "")
        return auth[7:].strip() if auth.startswith("Bearer ") else None

    def _send(self, resp: Response):
        payload = wire.dumps(resp.body)
        self.send_response(resp.status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):
        if self.path == "/v1/health":
            return self._send(Response(200, {"status": "ok", "version": wire.WIRE_VERSION}))
        m = _BUDGET_PATH.match(self.path)
        if not m:
            return self._send(_error(HTTPStatus.NOT_FOUND, "not_found", "unknown endpoint"))
        resp = self.service.handle_budget_status(m.group(1), self._token())
        log.info("budget", extra={"analysis_id": m.group(1), "status": resp.status})
        self._send(resp)

    def do_POST(self):
        if self.path != "/v1/verify":
            return self._send(_error(HTTPStatus.NOT_FOUND, "not_found", "unknown endpoint"))
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if not 0 < length <= MAX_BODY:
            return self._send(_error(HTTPStatus.BAD_REQUEST, "validation", "missing or oversized body"))
        try:
            doc = json.loads(self.rfile.read(length))
        except (json.JSONDecodeError, UnicodeDecodeError):
            return self._send(_error(HTTPStatus.BAD_REQUEST, "validation", "body is not JSON"))
        started = time.perf_counter()
        try:
            resp = self.service.handle_verify(doc, self._token())
        except Exception:  # never echo internals to the client
            log.exception("unhandled error in verify")
            resp = _error(HTTPStatus.INTERNAL_SERVER_ERROR, "internal", "internal error")
        # structured log: identifiers and outcome only, no payload values
        log.info("verify", extra={
            "analysis_id": doc.get("analysis_id") if isinstance(doc, dict) else None,
            "kind": doc.get("kind") if isinstance(doc, dict) else None,
            "status": resp.status,
            "epsilon_spent": resp.body.get("epsilon_spent"),
            "digest": resp.body.get("digest"),
            "elapsed": round(time.perf_counter() - started, 4),
        })
        self._send(resp)


def make_server(service: VerificationService, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class _JsonFormatter(logging.Formatter):
    FIELDS = ("analysis_id", "kind", "status", "epsilon_spent", "digest", "elapsed")

    def format(self, record):
        out = {"ts": round(record.created, 3), "level": record.levelname, "event": record.getMessage()}
        out.update({k: getattr(record, k) for k in self.FIELDS if hasattr(record, k)})
        return json.dumps(out)


def configure_logging(level=logging.INFO) -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(_JsonFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level)


def serve(cfg: ServerConfig) -> None:
    configure_logging()
    service = VerificationService.from_config(cfg)
    server = make_server(service, cfg.host, cfg.port)
    log.info("listening on %s:%d" % server.server_address[:2])
    try:
        server.serve_forever()
    finally:
        server.server_close()
