"""Career sequences and their (G, Z, W) encoding.

A career is a fixed-length sequence of labels, one per year, with a reserved
label for not working. It is encoded as

* ``G``: number of distinct labels visited (not working included);
* ``Z``: the 1-based years in which the label differs from the year before;
* ``W``: the visited labels with consecutive repeats collapsed.

For example ``0 0 A A 0 0 C C C C`` encodes as ``G=3, Z=(3, 5, 7),
W=(0, A, 0, C)``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import InvalidTriple, NoData, SamplingStalled
from ..partition import philox

NOT_WORKING = "0"


@dataclass(frozen=True)
class CareerTriple:
    G: int
    Z: tuple[int, ...]
    W: tuple[str, ...]

    def __post_init__(self):
        Z, W = tuple(int(z) for z in self.Z), tuple(str(w) for w in self.W)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "W", W)
        if len(W) != len(Z) + 1:
            raise InvalidTriple(f"|W| = {len(W)} but |Z| = {len(Z)}")
        if any(b <= a for a, b in zip(Z, Z[1:])):
            raise InvalidTriple(f"transition years {Z} are not strictly increasing")
        if Z and Z[0] < 2:
            raise InvalidTriple("the first transition year is at least 2")
        if any(a == b for a, b in zip(W, W[1:])):
            raise InvalidTriple(f"W {W} repeats a label consecutively")
        if self.G != len(set(W)):
            raise InvalidTriple(f"G = {self.G} but W has {len(set(W))} distinct labels")


def _as_labels(career) -> tuple[str, ...]:
    if isinstance(career, str):
        career = career.split()
    return tuple(str(c) for c in career)


def decompose(career) -> CareerTriple:
    """Encode a career (label sequence, or a whitespace-separated string)."""
    labels = _as_labels(career)
    if not labels:
        raise InvalidTriple("empty career")
    Z = tuple(t + 1 for t in range(1, len(labels)) if labels[t] != labels[t - 1])
    W = (labels[0],) + tuple(labels[t - 1] for t in Z)
    return CareerTriple(len(set(W)), Z, W)


def reconstruct(triple: CareerTriple, horizon: int) -> tuple[str, ...]:
    """Inverse of :func:`decompose` for a career of ``horizon`` years."""
    if triple.Z and triple.Z[-1] > horizon:
        raise InvalidTriple(f"transition year {triple.Z[-1]} is beyond horizon {horizon}")
    bounds = (1,) + triple.Z + (horizon + 1,)
    out = []
    for label, start, stop in zip(triple.W, bounds, bounds[1:]):
        out.extend([label] * (stop - start))
    return tuple(out)


def careers_from_panel(data, agency: str, not_working: str = NOT_WORKING):
    """One career per entity over the panel's full year range.

    Years without a row, or with a missing agency, count as not working.
    Returns ``(careers, first_year)`` where ``careers[e]`` belongs to entity
    code ``e``.
    """
    if not_working in data.variable(agency).levels:
        raise ValueError(f"{agency!r} has a level equal to the not-working label {not_working!r}")
    t0, t1 = data.year_range
    grid = np.full((data.n_entities, t1 - t0 + 1), not_working, dtype=object)
    labels = data.values(agency)
    present = ~data.missing(agency)
    grid[data.entity_codes[present], data.years[present] - t0] = labels[present]
    return [tuple(row) for row in grid], t0


@dataclass(frozen=True)
class CareerModel:
    """Fitted sub-models for G, Z given G, and W given (G, |Z|).

    ``transition`` has a zero diagonal and rows summing to one. A label that
    was never observed to be left gets a uniform row over the other labels.
    The first label of W is drawn from ``initial_by_g[G]``, the first labels
    seen among training careers with that G (``initial`` pools all of them),
    so for example careers that never work arise only if some were observed.
    """

    horizon: int
    g_values: np.ndarray
    g_probs: np.ndarray
    z_patterns: dict = field(repr=False)  # G -> (tuple of patterns, probabilities)
    z_lengths: dict = field(repr=False)  # G -> (lengths, probabilities)
    alpha: float = 0.05
    labels: tuple[str, ...] = ()
    initial: np.ndarray = field(default=None, repr=False)
    transition: np.ndarray = field(default=None, repr=False)
    max_attempts: int = 10_000
    initial_by_g: dict = field(default_factory=dict, repr=False)

    def g_distribution(self) -> dict[int, float]:
        return {int(g): float(p) for g, p in zip(self.g_values, self.g_probs)}


def _empirical(items):
    counts = Counter(items)
    keys = sorted(counts)
    freq = np.array([counts[k] for k in keys], dtype=float)
    return tuple(keys), freq / freq.sum()


def fit_career_model(careers: Sequence, alpha: float = 0.05, max_attempts: int = 10_000) -> CareerModel:
    """Fit the career model to label sequences of equal length."""
    careers = [_as_labels(c) for c in careers]
    if not careers:
        raise NoData("no careers to fit")
    horizon = len(careers[0])
    if any(len(c) != horizon for c in careers):
        raise ValueError("careers must all have the same length")
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    triples = [decompose(c) for c in careers]

    g_values, g_probs = _empirical(t.G for t in triples)
    by_g: dict[int, list] = {}
    for t in triples:
        by_g.setdefault(t.G, []).append(t.Z)
    z_patterns = {g: _empirical(zs) for g, zs in by_g.items()}
    z_lengths = {g: _empirical(len(z) for z in zs) for g, zs in by_g.items()}

    labels = tuple(sorted({w for t in triples for w in t.W}))
    index = {lbl: i for i, lbl in enumerate(labels)}
    k = len(labels)
    initial = np.bincount([index[t.W[0]] for t in triples], minlength=k).astype(float)
    initial_by_g = {}
    for g in g_values:
        first = np.bincount([index[t.W[0]] for t in triples if t.G == g], minlength=k).astype(float)
        initial_by_g[int(g)] = first / first.sum()
    counts = np.zeros((k, k))
    for t in triples:
        for a, b in zip(t.W, t.W[1:]):
            counts[index[a], index[b]] += 1
    rows = counts.sum(axis=1, keepdims=True)
    transition = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    if k > 1:
        unseen = rows[:, 0] == 0
        transition[unseen] = (1.0 - np.eye(k)[unseen]) / (k - 1)
    return CareerModel(
        horizon=horizon,
        g_values=np.asarray(g_values),
        g_probs=g_probs,
        z_patterns=z_patterns,
        z_lengths=z_lengths,
        alpha=alpha,
        labels=labels,
        initial=initial / initial.sum(),
        transition=transition,
        max_attempts=max_attempts,
        initial_by_g=initial_by_g,
    )


def sample_chain(initial, transition, length: int, size: int, rng) -> np.ndarray:
    """``size`` paths of a first-order chain as an int array ``(size, length)``.

    Paths that reach a state with an all-zero row are marked with -1 from
    that step on.
    """
    gen = philox(rng)
    initial = np.asarray(initial, dtype=float)
    cum = np.cumsum(np.asarray(transition, dtype=float), axis=1)
    out = np.empty((size, length), dtype=np.int64)
    out[:, 0] = np.searchsorted(np.cumsum(initial), gen.random(size) * initial.sum(), side="right")
    dead = np.zeros(size, dtype=bool)
    for step in range(1, length):
        prev = np.where(dead, 0, out[:, step - 1])
        row_total = cum[prev, -1]
        dead |= row_total <= 0
        u = gen.random(size) * row_total
        nxt = (cum[prev] <= u[:, None]).sum(axis=1)
        out[:, step] = np.where(dead, -1, np.minimum(nxt, cum.shape[1] - 1))
    return out


def _distinct_per_row(paths: np.ndarray) -> np.ndarray:
    s = np.sort(paths, axis=1)
    return 1 + (np.diff(s, axis=1) != 0).sum(axis=1)


def _sample_z(model: CareerModel, g: int, count: int, gen) -> list[tuple[int, ...]]:
    patterns, probs = model.z_patterns[g]
    lengths, length_probs = model.z_lengths[g]
    observed = set(patterns)
    out = []
    fresh = gen.random(count) < model.alpha
    picks = gen.choice(len(patterns), size=count, p=probs)
    for i in range(count):
        if not fresh[i]:
            out.append(patterns[picks[i]])
            continue
        k = int(gen.choice(lengths, p=length_probs))
        z = None
        # a uniform draw from the valid patterns of this length, excluding
        # observed ones; if every pattern of that length was observed, fall
        # back to the observed distribution
        for _ in range(64):
            cand = tuple(int(v) for v in np.sort(gen.choice(np.arange(2, model.horizon + 1), k, replace=False)))
            if cand not in observed:
                z = cand
                break
        out.append(z if z is not None else patterns[picks[i]])
    return out


def _sample_w(model: CareerModel, g: int, length: int, count: int, gen) -> np.ndarray:
    out = np.empty((count, length), dtype=np.int64)
    todo = np.arange(count)
    attempts = 0
    while len(todo):
        attempts += 1
        if attempts > model.max_attempts:
            raise SamplingStalled(
                f"could not draw W with {g} distinct labels and length {length}",
                {"G": g, "length": length, "remaining": len(todo), "attempts": attempts - 1},
            )
        batch = max(4 * len(todo), 256)
        paths = sample_chain(model.initial_by_g.get(g, model.initial), model.transition, length, batch, gen)
        ok = (paths >= 0).all(axis=1) & (_distinct_per_row(paths) == g)
        good = paths[ok][: len(todo)]
        out[todo[: len(good)]] = good
        todo = todo[len(good):]
    return out


def sample_triples(model: CareerModel, count: int, rng) -> list[CareerTriple]:
    gen = philox(rng)
    gs = gen.choice(model.g_values, size=count, p=model.g_probs)
    triples: list[CareerTriple | None] = [None] * count
    for g in np.unique(gs):
        where = np.flatnonzero(gs == g)
        zs = _sample_z(model, int(g), len(where), gen)
        by_len: dict[int, list[int]] = {}
        for i, z in zip(where, zs):
            by_len.setdefault(len(z), []).append(i)
        z_of = dict(zip(where.tolist(), zs))
        for k, idx in sorted(by_len.items()):
            ws = _sample_w(model, int(g), k + 1, len(idx), gen)
            for i, w in zip(idx, ws):
                triples[i] = CareerTriple(int(g), z_of[i], tuple(model.labels[j] for j in w))
    return triples


def sample_careers(model: CareerModel, count: int, rng) -> list[tuple[str, ...]]:
    """Draw ``count`` synthetic careers: G, then Z given G, then W by rejection."""
    return [reconstruct(t, model.horizon) for t in sample_triples(model, count, rng)]
