import math

import numpy as np
import pytest

from superrep.cone import CostMatrix, build_polar_section
from superrep.errors import NumericFailure
from superrep.market import MarketModel, simulate
from superrep.payoff import catalog_payoff
from superrep.pricer import (PriceOptions, bracket_right, first_order_residual, golden_section,
                             initial_cost, objective, prepare, price, price_with_offset)

from conftest import CALL_ATM, E2_DELTA, barrier_call, example_cost, example_model

SMALL = PriceOptions(n_paths=20_000, n_sf=201, n_sc=81, seed=3)


def pair_section(l12, l21):
    return build_polar_section(CostMatrix(1, [[0.0, l12], [l21, 0.0]]))


# -------------------------------------------------------------- cost term

def test_initial_cost_examples():
    sec = pair_section(0.1, 0.05)
    c = initial_cost([0.0], sec, [10.0])
    assert c.value == 0.0 and np.array_equal(c.vertex, sec.vertices[0])
    c = initial_cost([2.0], sec, [10.0])
    assert c.value == pytest.approx(22.0, abs=1e-12)
    assert np.allclose(c.vertex, [1.0, 1.1])
    c = initial_cost([-1.0], sec, [10.0])
    assert c.value == pytest.approx(-10 / 1.05, abs=1e-12)
    assert c.value == pytest.approx(-9.5238, abs=1e-4)
    assert np.allclose(c.vertex, [1.0, 1 / 1.05])


# -------------------------------------------------------------- 1-D search

def test_golden_section_on_known_minimum():
    f = lambda x: (x - 0.3) ** 2 + abs(x - 0.3)  # noqa: E731
    x, fx, _ = golden_section(f, 0.0, 2.0, 1e-10, 1e-14)
    assert x == pytest.approx(0.3, abs=1e-8)


def test_bracket_contains_minimizer():
    for m in (0.1, 3.7, 1000.0):
        a, b = bracket_right(lambda x, m=m: (x - m) ** 2, 0.0)
        assert a <= m <= b


def test_bracket_detects_unbounded_objective():
    with pytest.raises(NumericFailure) as err:
        bracket_right(lambda x: -x, 0.0)
    assert err.value.kind == "unbounded-below"


# -------------------------------------------------------------- objective

def test_zero_payoff_prices_to_zero():
    m = example_model(10.0)
    r = price(catalog_payoff("zero"), m, example_cost(), SMALL)
    assert r.price == 0.0 and r.delta_hat == [0.0]


def test_objective_at_zero_is_call_price(e1):
    o = e1.setup.objective
    m, se, cost = o.parts([0.0])
    assert cost.value == 0.0
    assert abs(m - CALL_ATM) < 3 * se
    assert objective([0.0], e1.setup.grid, e1.setup.batch, e1.setup.section, [100.0]) == o([0.0])


def test_short_costly_position_is_infinite(e2):
    assert math.isinf(e2.setup.objective([-0.01]))


def test_optimum_dominated_by_sampled_holdings(e2):
    o = e2.setup.objective
    p = e2.report.price
    for d in np.linspace(0.0, 1.5, 61):
        assert o([d]) >= p - 1e-12


def test_objective_deterministic_under_common_paths(e2):
    o = e2.setup.objective
    assert o([0.3]) == o([0.3])


def test_monotone_in_payoff():
    m = example_model(10.0)
    cost = example_cost()
    batch = simulate(m, 20_000, 1, seed=4)
    lo = price(catalog_payoff("free-call", K=110.0), m, cost, SMALL, batch=batch)
    hi = price(catalog_payoff("free-call", K=100.0), m, cost, SMALL, batch=batch)
    assert hi.price >= lo.price - 3 * max(hi.mc_stderr, lo.mc_stderr)


# -------------------------------------------------------------- reports

def test_regimes(e1, e2):
    assert e1.report.regime == "boundary-zero" and e1.report.delta_hat == [0.0]
    assert e2.report.regime == "interior" and e2.report.delta_hat[0] > 0
    assert e2.report.xi_hat == [1.0, 1.1]
    assert not e2.report.flat_minimum


def test_report_serializes(e2):
    d = e2.report.to_dict()
    assert d["n_paths"] == 200_000 and d["seed"] == 12345
    assert {"axis", "delta", "objective"} <= set(d["objective_curve"][0])


def test_superlinear_claim_fails_cleanly():
    with pytest.raises(NumericFailure) as err:
        price(catalog_payoff("costly-square"), example_model(10.0), example_cost(), SMALL)
    assert err.value.kind == "no-finite-domain"


def test_physical_delivery_has_shifted_domain():
    m = example_model(100.0)
    r = price(catalog_payoff("costly-call-physical", K=100.0), m, example_cost(), SMALL)
    assert r.delta_hat[0] >= 1.0
    # never more than buying the unit outright at the ask
    assert r.price <= 1.1 * 100.0 + 1e-9


def test_two_costly_assets():
    lam = np.array([[0, 0.1, 0.1], [0.05, 0, 0.1], [0.05, 0.1, 0]])
    cost = CostMatrix(2, lam)
    m = MarketModel(1, 2, 1.0, np.array([100.0, 10.0, 20.0]), np.diag([0.2, 0.3, 0.25]))
    g = catalog_payoff("digital-barrier-call", df=1, dc=2, K1=100.0, K2=100.0)
    opts = PriceOptions(n_paths=4000, n_sf=201, n_sc=41)
    setup = prepare(g, m, cost, opts)
    r = price(g, m, cost, opts, setup=setup)
    o = setup.objective
    # the second costly asset does not enter the claim, so holding it only costs
    assert r.delta_hat[1] == 0.0
    rng = np.random.default_rng(0)
    for d in rng.uniform([0.0, 0.0], [0.8, 0.3], (200, 2)):
        assert o(d) >= r.price - 1e-12
    for a in np.linspace(0.2, 0.35, 151):
        assert o([a, 0.0]) >= r.price - 1e-12


# -------------------------------------------------------------- residual and offset

def test_first_order_residual_cases():
    g, cost = barrier_call(), example_cost()
    e1m, e2m = example_model(100.0), example_model(10.0)
    big = first_order_residual(50.0, g, e2m, cost)
    assert big.closed_form == pytest.approx(1.1 * 10.0, abs=1e-9)
    assert math.isnan(big.mc)
    assert first_order_residual(0.0, g, e1m, cost).closed_form >= 0.0
    assert abs(first_order_residual(E2_DELTA, g, e2m, cost).closed_form) <= 1e-6
    with pytest.raises(ValueError):
        first_order_residual(0.0, catalog_payoff("zero"), e1m, cost)


def test_zero_offset_reproduces_price():
    g, cost, m = barrier_call(), example_cost(), example_model(10.0)
    batch = simulate(m, 20_000, 1, seed=8)
    a = price(g, m, cost, SMALL, batch=batch)
    b = price_with_offset(g, m, cost, [0.0, 0.0], SMALL, batch=batch)
    assert b.price == a.price and b.delta_hat == a.delta_hat and b.offset == [0.0, 0.0]


def test_costly_endowment_lowers_price(e2):
    r = e2.report
    d = r.delta_hat[0]
    x = [0.0, d * 10.0]
    off = price_with_offset(e2.payoff, e2.model, e2.cost, x, e2.options, batch=e2.setup.batch)
    assert off.price <= r.price - d * 10.0 / (1 + e2.cost.lam[1, 0]) + 3 * r.mc_stderr
