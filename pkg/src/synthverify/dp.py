"""Laplace mechanism primitives and the privacy-budget ledger.

Composition rules applied by :class:`BudgetLedger`:

* releases on the same data add up (sequential composition);
* releases scoped to distinct levels of the configured disjointness variable
  touch disjoint entity sets, so across levels only the largest level total
  counts (parallel composition);
* post-processing a release costs nothing and never reaches the ledger.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetExhausted

# absorbs float rounding in sums like 50 * 0.1 against a cap of 5.0
_CAP_SLACK = 1e-9


@dataclass(frozen=True)
class LaplaceSpec:
    sensitivity: float
    epsilon: float

    def __post_init__(self):
        if not self.sensitivity >= 0:
            raise ValueError("sensitivity must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def scale(self) -> float:
        return self.sensitivity / self.epsilon


def laplace_inverse_cdf(u, scale):
    """Map ``u`` uniform on (-1/2, 1/2) to a Laplace(0, scale) draw."""
    u = np.asarray(u, dtype=float)
    out = -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return out if out.ndim else float(out)


def _uniform_centered(rng: np.random.Generator, size=None):
    u = rng.random(size) - 0.5
    # -0.5 maps to an infinite draw; resample it
    while np.any(u == -0.5):
        fresh = rng.random(np.shape(u)) - 0.5
        u = np.where(u == -0.5, fresh, u)
    return u


def laplace_sample(spec: LaplaceSpec, rng: np.random.Generator, size=None):
    return laplace_inverse_cdf(_uniform_centered(rng, size), spec.scale)


def laplace_logpdf(x, center, scale):
    if not scale > 0:
        raise ValueError("scale must be positive")
    return -np.log(2.0 * scale) - np.abs(np.asarray(x, dtype=float) - center) / scale


class KeyedRandom:
    """Noise streams keyed by a server secret and a label (e.g. a ledger entry id).

    Every label gets an independent Philox stream, so no draw is reused
    across queries.
    """

    def __init__(self, secret: str | bytes):
        self._secret = secret.encode() if isinstance(secret, str) else bytes(secret)

    def generator(self, *labels) -> np.random.Generator:
        h = hashlib.sha256(self._secret)
        for label in labels:
            h.update(b"\x00" + str(label).encode())
        words = np.frombuffer(h.digest(), dtype=np.uint32)
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(words.tolist())))


@dataclass(frozen=True)
class LedgerEntry:
    entry_id: int
    analysis_id: str
    scope_key: str | None
    epsilon: float
    timestamp: float
    digest: str = ""
    spent_after: float = 0.0


def parse_scope(scope_key: str | None):
    if not scope_key or "=" not in scope_key:
        return None
    var, level = scope_key.split("=", 1)
    return var.strip(), level.strip()


def compute_spent(
    entries: Iterable[LedgerEntry],
    analysis_id: str,
    disjointness_variable: str | None = None,
) -> float:
    """Privacy loss of one analysis, recomputed from the entry list."""
    sequential = []
    per_level: dict[str, list[float]] = {}
    for e in entries:
        if e.analysis_id != analysis_id:
            continue
        scope = parse_scope(e.scope_key)
        if disjointness_variable and scope and scope[0] == disjointness_variable:
            per_level.setdefault(scope[1], []).append(e.epsilon)
        else:
            sequential.append(e.epsilon)
    parallel = max((math.fsum(v) for v in per_level.values()), default=0.0)
    return math.fsum(sequential) + parallel


class BudgetLedger:
    """Append-only record of epsilon expenditures with an atomic check-and-debit.

    Args:
        cap: maximum epsilon per analysis (or overall, with ``global_cap``).
        disjointness_variable: the one variable whose levels count as
            provably disjoint scopes.
        journal: optional path of a newline-delimited JSON journal. Existing
            entries are replayed on open; each debit is fsynced before
            :meth:`debit` returns.
        global_cap: enforce ``cap`` on the sum over all analyses.
    """

    def __init__(self, cap: float = 20.0, disjointness_variable: str | None = None,
                 journal=None, global_cap: bool = False):
        if not cap > 0:
            raise ValueError("cap must be positive")
        self.cap = float(cap)
        self.disjointness_variable = disjointness_variable
        self.global_cap = global_cap
        self.journal = Path(journal) if journal is not None else None
        self._entries: list[LedgerEntry] = []
        self._spent: dict[str, float] = {}
        self._lock = threading.Lock()
        if self.journal is not None and self.journal.exists():
            _truncate_torn_tail(self.journal)
            self._entries = read_journal(self.journal)
            for aid in {e.analysis_id for e in self._entries}:
                self._spent[aid] = self._recompute(self._entries, aid)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def _recompute(self, entries, analysis_id):
        return compute_spent(entries, analysis_id, self.disjointness_variable)

    def spent(self, analysis_id: str) -> float:
        with self._lock:
            return self._spent.get(analysis_id, 0.0)

    def total_spent(self) -> float:
        with self._lock:
            return math.fsum(self._spent.values())

    def remaining(self, analysis_id: str) -> float:
        with self._lock:
            used = math.fsum(self._spent.values()) if self.global_cap else self._spent.get(analysis_id, 0.0)
        return max(self.cap - used, 0.0)

    def debit(self, analysis_id: str, scope_key: str | None, epsilon: float,
              digest: str = "") -> LedgerEntry:
        """Record one release; see :meth:`debit_many`."""
        return self.debit_many(analysis_id, scope_key, [epsilon], digest)[0]

    def debit_many(self, analysis_id: str, scope_key: str | None,
                   epsilons: Sequence[float], digest: str = "") -> list[LedgerEntry]:
        """Atomically record several releases, or none.

        Raises:
            BudgetExhausted: if the resulting total would exceed the cap. The
                ledger (and its journal) is untouched in that case.
        """
        if not analysis_id:
            raise ValueError("analysis_id must be non-empty")
        epsilons = [float(e) for e in epsilons]
        if not epsilons or any(not e > 0 or not math.isfinite(e) for e in epsilons):
            raise ValueError("epsilon must be positive and finite")
        with self._lock:
            now = time.time()
            next_id = len(self._entries) + 1
            new = [
                LedgerEntry(next_id + i, analysis_id, scope_key, e, now, digest)
                for i, e in enumerate(epsilons)
            ]
            trial = self._entries + new
            spent = self._recompute(trial, analysis_id)
            if self.global_cap:
                others = math.fsum(v for k, v in self._spent.items() if k != analysis_id)
                used_before = math.fsum(self._spent.values())
                used_after = others + spent
            else:
                used_before = self._spent.get(analysis_id, 0.0)
                used_after = spent
            if used_after > self.cap + _CAP_SLACK:
                raise BudgetExhausted(analysis_id, math.fsum(epsilons), max(self.cap - used_before, 0.0))
            new = [LedgerEntry(**{**asdict(e), "spent_after": spent}) for e in new]
            if self.journal is not None:
                _append_journal(self.journal, new)
            self._entries.extend(new)
            self._spent[analysis_id] = spent
            return new

    def status(self, analysis_id: str) -> dict:
        entries = [e for e in self.entries if e.analysis_id == analysis_id]
        return {
            "analysis_id": analysis_id,
            "spent": self.spent(analysis_id),
            "cap": self.cap,
            "remaining": self.remaining(analysis_id),
            "global_cap": self.global_cap,
            "entries": [
                {"entry_id": e.entry_id, "scope_key": e.scope_key, "epsilon": e.epsilon,
                 "timestamp": e.timestamp, "digest": e.digest}
                for e in entries
            ],
        }


def _append_journal(path: Path, entries: Sequence[LedgerEntry]) -> None:
    lines = "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in entries)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(lines)
        fh.flush()
        os.fsync(fh.fileno())


def read_journal(path) -> list[LedgerEntry]:
    """Replay a journal, ignoring a torn final line (a crash mid-append).

    A torn line's debit never completed, so nothing was released against it.
    """
    data = Path(path).read_bytes()
    end = data.rfind(b"\n") + 1
    return [
        LedgerEntry(**json.loads(line))
        for line in data[:end].decode("utf-8").splitlines()
        if line.strip()
    ]


def _truncate_torn_tail(path: Path) -> None:
    data = path.read_bytes()
    end = data.rfind(b"\n") + 1
    if end < len(data):
        with open(path, "r+b") as fh:
            fh.truncate(end)
            fh.flush()
            os.fsync(fh.fileno())
