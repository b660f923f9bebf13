"""HTTP client for the verification server."""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import quote, urlparse

from . import wire
from .config import read_toml
from .errors import SynthVerifyError


class TransportError(SynthVerifyError):
    """The server could not be reached or did not answer."""


class ProtocolError(SynthVerifyError):
    """The server answered with something that is not a valid envelope."""


class ServerRefusal(SynthVerifyError):
    def __init__(self, status: int, body: dict):
        super().__init__(body.get("message", f"server refused with status {status}"))
        self.status = status
        self.body = body

    @property
    def kind(self) -> str:
        return self.body.get("error", "unknown")


@dataclass(frozen=True)
class ClientConfig:
    url: str = "http://127.0.0.1:8750"
    token: str = ""
    analysis_id: str = ""
    output: str = "table"
    default_epsilon: float = 1.0
    default_M: int = 50
    timeout: float = 600.0

    def __post_init__(self):
        parsed = urlparse(self.url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise SynthVerifyError(f"malformed server URL {self.url!r}")
        if self.output not in ("table", "json"):
            raise SynthVerifyError(f"output must be 'table' or 'json', not {self.output!r}")

    @classmethod
    def load(cls, path, **overrides) -> "ClientConfig":
        doc = read_toml(path).get("client", {}) if path is not None and Path(path).exists() else {}
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        known.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**known)

    def require_remote(self) -> None:
        if not self.token:
            raise SynthVerifyError("a token is required for remote commands")
        if not self.analysis_id:
            raise SynthVerifyError("an analysis id is required for remote commands")


class Client:
    def __init__(self, config: ClientConfig):
        self.config = config

    def _request(self, method: str, path: str, body: dict | None = None) -> dict:
        data = None if body is None else wire.dumps(body)
        req = urllib.request.Request(self.config.url.rstrip("/") + path, data=data, method=method)
        req.add_header("Accept", "application/json")
        if data is not None:
            req.add_header("Content-Type", "application/json")
        if self.config.token:
            req.add_header("Authorization", f"Bearer {self.config.token}")
        try:
            with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                return _decode(resp.read())
        except urllib.error.HTTPError as exc:
            raise ServerRefusal(exc.code, _decode(exc.read())) from None
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(f"cannot reach {self.config.url}: {getattr(exc, 'reason', exc)}") from None

    def verify(self, envelope: wire.QueryEnvelope) -> dict:
        doc = wire.to_wire(envelope)
        wire.from_wire(doc)  # same checks the server applies to the shape
        out = self._request("POST", "/v1/verify", doc)
        try:
            wire.validate("release", out)
        except wire.WireError as exc:
            raise ProtocolError(str(exc)) from None
        return out

    def budget(self, analysis_id: str) -> dict:
        return self._request("GET", f"/v1/budget/{quote(analysis_id, safe='')}")

    def health(self) -> dict:
        return self._request("GET", "/v1/health")


def _decode(raw: bytes) -> dict:
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ProtocolError("server reply is not JSON") from None
    if not isinstance(doc, dict):
        raise ProtocolError("server reply is not a JSON object")
    return doc
