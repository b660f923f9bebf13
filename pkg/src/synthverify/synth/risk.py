"""Attribute disclosure risk of a synthetic panel.

An intruder who knows an entity's key variables looks up every synthetic
record with the same key combination and guesses the sensitive category
from their frequencies. An entity counts as at risk when the synthetic
frequency of its true category reaches the threshold. Each entity is
represented by its most recent record.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import FormulaError
from ..panel import PanelDataset


@dataclass(frozen=True)
class RiskReport:
    threshold: float
    n_entities: int
    n_at_risk: int
    n_no_match: int
    combinations: list = field(repr=False, default_factory=list)

    @property
    def fraction_at_risk(self) -> float:
        return self.n_at_risk / self.n_entities if self.n_entities else 0.0

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "n_entities": self.n_entities,
            "n_at_risk": self.n_at_risk,
            "fraction_at_risk": self.fraction_at_risk,
            "n_no_match": self.n_no_match,
            "combinations": self.combinations,
        }


def latest_records(data: PanelDataset) -> np.ndarray:
    """Row index of each entity's last year."""
    order = np.lexsort((data.years, data.entity_codes))
    codes = data.entity_codes[order]
    last = np.r_[codes[1:] != codes[:-1], True]
    return order[last]


def _keyed(data: PanelDataset, key_vars, sensitive_var):
    rows = latest_records(data)
    keys = list(zip(*(data.values(k)[rows] for k in key_vars))) if key_vars else [()] * len(rows)
    sens = data.values(sensitive_var)[rows]
    keep = [i for i, s in enumerate(sens) if s is not None]
    return [tuple(keys[i]) for i in keep], [sens[i] for i in keep]


def assess_attribute_risk(
    confidential: PanelDataset,
    synthetic: PanelDataset,
    key_vars: Sequence[str],
    sensitive_var: str,
    threshold: float,
) -> RiskReport:
    """Count confidential entities whose true sensitive category is guessable.

    Entities whose key combination never occurs in the synthetic panel are
    reported in ``n_no_match`` and never counted as at risk. Entities with a
    missing sensitive value are left out.
    """
    for data in (confidential, synthetic):
        for name in (*key_vars, sensitive_var):
            data.variable(name)
    if confidential.variable(sensitive_var).kind != "categorical":
        raise FormulaError(f"{sensitive_var!r} is not categorical")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")

    syn_keys, syn_sens = _keyed(synthetic, key_vars, sensitive_var)
    freq: dict[tuple, Counter] = {}
    for k, s in zip(syn_keys, syn_sens):
        freq.setdefault(k, Counter())[s] += 1

    conf_keys, conf_sens = _keyed(confidential, key_vars, sensitive_var)
    at_risk = no_match = 0
    per_combo: dict[tuple, dict] = {}
    for k, s in zip(conf_keys, conf_sens):
        entry = per_combo.setdefault(k, {"n_confidential": 0, "n_at_risk": 0})
        entry["n_confidential"] += 1
        counts = freq.get(k)
        if counts is None:
            no_match += 1
            continue
        if counts[s] / sum(counts.values()) >= threshold:
            at_risk += 1
            entry["n_at_risk"] += 1

    combos = []
    for k in sorted(per_combo, key=lambda t: tuple(map(str, t))):
        counts = freq.get(k)
        total = sum(counts.values()) if counts else 0
        combos.append({
            "key": dict(zip(key_vars, k)),
            "n_confidential": per_combo[k]["n_confidential"],
            "n_at_risk": per_combo[k]["n_at_risk"],
            "n_synthetic": total,
            "synthetic_frequencies": {c: n / total for c, n in sorted(counts.items())} if counts else None,
        })
    return RiskReport(threshold, len(conf_sens), at_risk, no_match, combos)
