from collections import Counter

import numpy as np
import pytest

from synthverify.errors import FormulaError
from synthverify.panel import PanelDataset, VariableSchema
from synthverify.synth.risk import assess_attribute_risk, latest_records

SCHEMA = (
    VariableSchema("id", "entity-id"),
    VariableSchema("year", "year"),
    VariableSchema("agency", "categorical", ("A", "B", "C")),
    VariableSchema("gender", "categorical", ("male", "female")),
    VariableSchema("race", "categorical", ("white", "black", "asian")),
)


def panel(rows):
    cols = list(zip(*rows))
    return PanelDataset.from_columns(SCHEMA, dict(zip(("id", "year", "agency", "gender", "race"), map(list, cols))))


def one_year(ids, agency, gender, race, year=1):
    return panel([(f"e{i}", year, a, g, r) for i, a, g, r in zip(ids, agency, gender, race)])


def test_uniform_synthetic_reaches_nobody():
    conf = one_year(range(30), ["A"] * 30, ["male"] * 30, ["white", "black", "asian"] * 10)
    syn = one_year(range(90), ["A"] * 90, ["male"] * 90, ["white", "black", "asian"] * 30)
    report = assess_attribute_risk(conf, syn, ["agency", "gender"], "race", 0.5)
    assert report.n_at_risk == 0 and report.n_no_match == 0


def test_single_category_combination():
    conf = one_year(range(5), ["B"] * 5, ["female"] * 5, ["asian"] * 5)
    syn = one_year(range(8), ["B"] * 8, ["female"] * 8, ["asian"] * 8)
    report = assess_attribute_risk(conf, syn, ["agency", "gender"], "race", 0.9)
    assert report.n_at_risk == 5 and report.fraction_at_risk == 1.0
    (combo,) = report.to_json()["combinations"]
    assert combo["synthetic_frequencies"] == {"asian": 1.0}


def test_unmatched_keys_are_reported_separately():
    conf = one_year(range(4), ["A", "A", "C", "C"], ["male"] * 4, ["white"] * 4)
    syn = one_year(range(3), ["A"] * 3, ["male"] * 3, ["white"] * 3)
    report = assess_attribute_risk(conf, syn, ["agency"], "race", 0.5)
    assert (report.n_at_risk, report.n_no_match, report.n_entities) == (2, 2, 4)


def test_latest_record_represents_entity():
    conf = panel([("e0", 1, "A", "male", "white"), ("e0", 2, "B", "male", "white")])
    assert latest_records(conf).tolist() == [1]
    syn = one_year([0], ["B"], ["male"], ["white"])
    assert assess_attribute_risk(conf, syn, ["agency"], "race", 1.0).n_at_risk == 1


def brute_force(conf_rows, syn_rows, threshold):
    def last(rows):
        by_id = {}
        for r in sorted(rows, key=lambda r: r[1]):
            by_id[r[0]] = r
        return list(by_id.values())

    syn = last(syn_rows)
    hits = 0
    for _, _, a, g, r in last(conf_rows):
        match = [s[4] for s in syn if (s[2], s[3]) == (a, g)]
        if match and Counter(match)[r] / len(match) >= threshold:
            hits += 1
    return hits


@pytest.mark.parametrize("threshold", [0.3, 0.5, 0.8])
def test_random_instance_matches_brute_force(threshold):
    rng = np.random.default_rng(11)

    def rows(n, prefix):
        out = []
        for i in range(n):
            for t in range(1, rng.integers(1, 4) + 1):
                out.append((f"{prefix}{i}", t, rng.choice(["A", "B", "C"]), rng.choice(["male", "female"]),
                            rng.choice(["white", "black", "asian"], p=[0.6, 0.3, 0.1])))
        return out

    conf, syn = rows(1000, "c"), rows(300, "s")
    report = assess_attribute_risk(panel(conf), panel(syn), ["agency", "gender"], "race", threshold)
    assert report.n_at_risk == brute_force(conf, syn, threshold)
    assert report.n_entities == 1000


def test_argument_checks():
    data = one_year([0], ["A"], ["male"], ["white"])
    with pytest.raises(ValueError):
        assess_attribute_risk(data, data, ["agency"], "race", 0.0)
    with pytest.raises(FormulaError):
        assess_attribute_risk(data, data, ["agency"], "year", 0.5)
