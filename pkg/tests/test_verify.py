import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_small_panel
from synthverify.dp import BudgetLedger, KeyedRandom
from synthverify.errors import BudgetExhausted, DegenerateSlope, QueryError, UnknownYear
from synthverify.panel import ModelFormula, PanelDataset, VariableSchema
from synthverify.regression import FitResult
from synthverify.sandbox import GAP, WAGE_FORMULA, gap_query, simulate_wage_panel, v_shaped_path
from synthverify.verify import (
    MARK_ERR,
    CoefficientQuery,
    Interval,
    TrendQuery,
    check_periods,
    coef_verify,
    error_variant_counts,
    marks_from_estimates,
    trend_slope,
    trend_verify,
)

FORMULA = ModelFormula("y", terms=("x",))


def stub_fitter(values):
    """Fitter returning a fixed estimate per call, in call (partition) order."""
    it = iter(values)

    def fit(frame):
        return {"x": next(it)}

    return fit


def test_stub_estimates_count():
    data = random_small_panel(np.random.default_rng(0), 20, 2)
    query = CoefficientQuery(FORMULA, "x", Interval(upper=-0.01), M=5)
    raw = coef_verify(data, query, rng=1, fitter=stub_fitter([-0.02, -0.02, -0.02, 0.01, 0.01]), noiseless=True)
    assert raw.S == 3 and raw.S_noisy == 3.0
    assert raw.err_noisy is None and raw.sensitivity == 1.0
    raw = coef_verify(data, query, rng=1, fitter=stub_fitter([-1.0] * 5), noiseless=True)
    assert raw.S == 5


def test_fitter_may_return_fit_results():
    data = random_small_panel(np.random.default_rng(0), 10, 1)
    fit = FitResult({"x": 0.0}, frozenset(), 5, 1.0)
    raw = coef_verify(data, CoefficientQuery(FORMULA, "x", Interval(-1, 1), M=2), rng=0,
                      fitter=lambda f: fit, noiseless=True)
    assert raw.W == (1, 1)


def test_interval_is_closed():
    assert marks_from_estimates([-0.01, -0.0100001, 0.0, np.nan], Interval(upper=-0.01)).tolist() == [1, 1, 0, MARK_ERR]
    assert Interval(0.2, 0.4).contains(0.4) and Interval(0.2, 0.4).contains(0.2)
    with pytest.raises(QueryError):
        Interval(1.0, 0.0)


def test_interval_parsing_round_trip():
    assert Interval.parse("neg") == Interval(upper=0.0)
    assert Interval.parse("pos") == Interval(lower=0.0)
    assert Interval.parse("(-0.031,-0.010)") == Interval(-0.031, -0.010)
    for iv in (Interval(upper=-0.01), Interval(0.1, 0.2), Interval()):
        assert Interval.from_json(iv.to_json()) == iv


def test_error_variant_counts():
    assert error_variant_counts([1, 1, 0, MARK_ERR, MARK_ERR], 1.0, noiseless=True) == (2.0, 2.0)
    assert error_variant_counts([MARK_ERR] * 4, 1.0, noiseless=True) == (0.0, 4.0)
    with pytest.raises(ValueError):
        error_variant_counts([2], 1.0, noiseless=True)


def test_error_variant_noise_scale():
    rng = np.random.default_rng(0)
    draws = np.array([error_variant_counts([1, 0], 0.5, rng) for _ in range(40_000)])
    # each count gets Laplace(2 / eps) noise: variance 2 * 4^2 = 32
    assert draws[:, 0].var() == pytest.approx(32.0, rel=0.05)
    assert draws[:, 1].var() == pytest.approx(32.0, rel=0.05)


def test_inestimable_partition_switches_to_error_variant():
    # with one row per entity and 2 entities per partition, each partition has 2 rows: inestimable
    data = random_small_panel(np.random.default_rng(1), 6, 1)
    raw = coef_verify(data, CoefficientQuery(FORMULA, "x", Interval(), M=3), rng=0, noiseless=True)
    assert raw.W == (MARK_ERR,) * 3
    assert raw.sensitivity == 2.0 and raw.err_noisy == 3.0
    rel = raw.release()
    assert rel.errors_mode() == 3
    assert rel.posterior() is None


def test_error_variant_posterior_uses_remaining_partitions():
    data = random_small_panel(np.random.default_rng(2), 40, 2)
    query = CoefficientQuery(FORMULA, "x", Interval(lower=0.0), M=4)

    def fit(frame):
        raise_err = fit.calls < 1
        fit.calls += 1
        if raise_err:
            from synthverify.errors import Inestimable
            raise Inestimable("stub")
        return {"x": 1.0}

    fit.calls = 0
    raw = coef_verify(data, query, rng=0, fitter=fit, noiseless=True)
    assert sorted(raw.W) == [MARK_ERR, 1, 1, 1]
    post = raw.release().posterior()
    assert post.inputs[1] == 3


def test_budget_checked_before_any_work():
    data = random_small_panel(np.random.default_rng(3), 10, 1)
    ledger = BudgetLedger(cap=0.5)
    calls = []
    with pytest.raises(BudgetExhausted):
        coef_verify(data, CoefficientQuery(FORMULA, "x", Interval(), M=2, epsilon=1.0), ledger,
                    rng=0, fitter=lambda f: calls.append(1))
    assert calls == [] and ledger.entries == ()


def test_unknown_coefficient_costs_nothing():
    data = random_small_panel(np.random.default_rng(3), 10, 1)
    ledger = BudgetLedger(cap=5)
    with pytest.raises(QueryError):
        coef_verify(data, CoefficientQuery(FORMULA, "z", Interval(), M=2), ledger, rng=0)
    assert ledger.entries == ()


def test_deterministic_given_seed_and_keyed_streams():
    data = random_small_panel(np.random.default_rng(4), 60, 2)
    query = CoefficientQuery(FORMULA, "x", Interval(0.3, 0.7), M=6)
    assert coef_verify(data, query, rng=9).S_noisy == coef_verify(data, query, rng=9).S_noisy
    a = coef_verify(data, query, BudgetLedger(cap=5), KeyedRandom("k"))
    b = coef_verify(data, query, BudgetLedger(cap=5), KeyedRandom("k"))
    assert (a.S, a.S_noisy) == (b.S, b.S_noisy)
    ledger = BudgetLedger(cap=5)
    first = coef_verify(data, query, ledger, KeyedRandom("k"))
    second = coef_verify(data, query, ledger, KeyedRandom("k"))
    assert first.S_noisy != second.S_noisy  # entry ids differ, so the streams do


def test_raw_repr_hides_protected_fields():
    data = random_small_panel(np.random.default_rng(5), 30, 2)
    raw = coef_verify(data, CoefficientQuery(FORMULA, "x", Interval(), M=3), rng=0)
    text = repr(raw)
    assert "W=" not in text and "S=" not in text
    doc = raw.release().to_json()
    assert "W" not in doc and "S" not in doc
    assert doc["S_noisy"] != raw.S


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_one_entity_sign_flip_moves_S_by_at_most_one(seed):
    rng = np.random.default_rng(seed)
    data = random_small_panel(rng, int(rng.integers(8, 25)), int(rng.integers(2, 4)))
    victim = int(rng.integers(data.n_entities))
    y = data.column("y").copy()
    rows = data.entity_codes == victim
    y[rows] = -y[rows]
    flipped = PanelDataset.from_columns(data.schema, {
        "id": data.values("id"), "year": data.column("year"),
        "x": data.column("x"), "y": y,
    })
    query = CoefficientQuery(FORMULA, "x", Interval(lower=0.4), M=int(rng.integers(2, 5)))
    a = coef_verify(data, query, rng=seed, noiseless=True)
    b = coef_verify(flipped, query, rng=seed, noiseless=True)
    assert abs(a.S - b.S) <= 1


def test_trend_slope():
    assert trend_slope([(1, 1), (2, 2), (3, 3)]) == pytest.approx(1.0)
    assert trend_slope([(1, 5), (2, 5), (4, 5)]) == 0.0
    assert trend_slope([(2, 1.0), (5, 7.0)]) == pytest.approx(2.0)
    with pytest.raises(DegenerateSlope):
        trend_slope([(3, 1), (3, 2)])
    with pytest.raises(DegenerateSlope):
        trend_slope([(1, 1)])


def test_period_checks():
    check_periods([(1, 9), (9, 24)])
    check_periods([(1, 9), (10, 24)])
    for bad in ([(1, 1)], [(1, 9), (8, 24)], [(1, 5), (7, 9)]):
        with pytest.raises(QueryError):
            check_periods(bad)


def test_trend_query_shape():
    q = TrendQuery(WAGE_FORMULA, GAP, ((1, 9), (10, 24)), (Interval(upper=0), Interval(lower=0)), mode="composite")
    assert q.K == 2 and q.epsilon_total == 1.0
    q = TrendQuery(WAGE_FORMULA, GAP, ((1, 9), (10, 24)), (Interval(upper=0), Interval(lower=0)), epsilon=0.5)
    assert q.epsilon_total == 1.0
    with pytest.raises(QueryError):
        TrendQuery(WAGE_FORMULA, GAP, ((1, 9),), (Interval(), Interval()))


def test_composite_is_product_of_separate_marks():
    data = simulate_wage_panel(600, v_shaped_path(12, turn=5, slope=0.01), rng=3, noise_sd=0.2)
    periods = ((1, 5), (6, 12))
    intervals = (Interval(upper=0.0), Interval(lower=0.0))
    sep = trend_verify(data, TrendQuery(WAGE_FORMULA, GAP, periods, intervals, M=10), rng=4, noiseless=True)
    (comp,) = trend_verify(data, TrendQuery(WAGE_FORMULA, GAP, periods, intervals, mode="composite", M=10),
                           rng=4, noiseless=True)
    expected = np.prod([r.W for r in sep], axis=0)
    assert comp.W == tuple(expected.tolist())
    assert 0 < comp.S < 10  # a mixed case, so the product is exercised


def test_trend_budget_accounting():
    data = simulate_wage_panel(200, np.zeros(9), rng=0)
    periods = ((1, 3), (3, 6), (6, 9))
    ivs = (Interval(),) * 3
    ledger = BudgetLedger(cap=10)
    out = trend_verify(data, TrendQuery(WAGE_FORMULA, GAP, periods, ivs, M=4, epsilon=1.0), ledger, KeyedRandom("s"))
    assert len(out) == 3 and ledger.spent("sandbox") == 3.0
    out = trend_verify(data, TrendQuery(WAGE_FORMULA, GAP, periods, ivs, mode="composite", M=4), ledger,
                       KeyedRandom("s"))
    assert len(out) == 1 and ledger.spent("sandbox") == 4.0


def test_trend_unknown_years_cost_nothing():
    data = simulate_wage_panel(50, np.zeros(4), rng=0)
    ledger = BudgetLedger(cap=10)
    with pytest.raises(UnknownYear):
        trend_verify(data, TrendQuery(WAGE_FORMULA, GAP, ((1, 4), (4, 9)), (Interval(), Interval()), M=2), ledger)
    assert ledger.entries == ()


def test_inestimable_year_marks_partition_err():
    # year 2 has a single entity, so every partition but one lacks data in that year
    schema = (VariableSchema("id", "entity-id"), VariableSchema("year", "year"),
              VariableSchema("x", "numeric"), VariableSchema("y", "numeric"))
    rng = np.random.default_rng(0)
    ids = list(range(20)) * 2 + [0]
    years = [1] * 20 + [3] * 20 + [2]
    data = PanelDataset.from_columns(schema, {"id": ids, "year": years, "x": rng.standard_normal(41),
                                              "y": rng.standard_normal(41)})
    query = TrendQuery(ModelFormula("y", terms=("x",)), "x", ((1, 3),), (Interval(),), M=2)
    (raw,) = trend_verify(data, query, rng=0, noiseless=True)
    assert raw.W == (MARK_ERR, MARK_ERR)


def test_strong_gap_gives_full_count():
    hits = 0
    for rep in range(20):
        data = simulate_wage_panel(100_000, np.full(24, -0.02), rng=[1, rep])
        hits += coef_verify(data, gap_query(), rng=[2, rep], noiseless=True).S == 50
    assert hits >= 19


@pytest.mark.slow
def test_strong_gap_full_count_in_most_replications():
    hits = 0
    for rep in range(200):
        data = simulate_wage_panel(100_000, np.full(24, -0.02), rng=[3, rep])
        hits += coef_verify(data, gap_query(), rng=[4, rep], noiseless=True).S == 50
    assert hits / 200 >= 0.95


def test_v_shape_composite_full_count():
    query = TrendQuery(WAGE_FORMULA, GAP, ((1, 9), (10, 24)), (Interval(upper=0), Interval(lower=0)),
                       mode="composite")
    full = 0
    for rep in range(50):
        data = simulate_wage_panel(20_000, v_shaped_path(), rng=[5, rep], noise_sd=0.02)
        full += trend_verify(data, query, rng=[6, rep], noiseless=True)[0].S == 50
    assert full / 50 >= 0.9


def test_zero_slope_share_near_half():
    query = TrendQuery(WAGE_FORMULA, GAP, ((1, 24),), (Interval(lower=0),))
    shares = []
    for rep in range(50):
        data = simulate_wage_panel(20_000, np.full(24, -0.02), rng=[7, rep], noise_sd=0.02)
        shares.append(trend_verify(data, query, rng=[8, rep], noiseless=True)[0].S / 50)
    shares = np.array(shares)
    assert np.mean(np.abs(shares - 0.5) <= 0.15) >= 0.9
    assert abs(shares.mean() - 0.5) <= 0.05
