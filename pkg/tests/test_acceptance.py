"""One pass/fail line per acceptance criterion, at its stated tolerance."""

import time

import numpy as np
import pytest

from scipy.optimize import linprog

from superrep.cone import (CostMatrix, build_polar_section, cone_geq, liquidation_value,
                           polar_constraints)
from superrep.hedger import LatticeOptions, build_schedule, verify_dominance
from superrep.market import simulate
from superrep.payoff import build_grid, catalog_payoff, concave_envelope, conjugate_nodes
from superrep.pricer import first_order_residual, price_with_offset

from conftest import CALL_ATM, E2_DELTA, E2_PRICE, Case
from test_cone import halfspace_vertices, random_cost, same_set
from test_payoff import chord_majorant


def verdict(n, ok, detail):
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def within(x, want, se, rel=0.005):
    return abs(x - want) <= max(3 * se, rel * abs(want))


def test_criterion_1_boundary_regime():
    t = time.perf_counter()
    e1 = Case(100.0)
    elapsed = time.perf_counter() - t
    r = e1.report
    ok = r.delta_hat == [0.0] and r.regime == "boundary-zero" and within(r.price, CALL_ATM, r.mc_stderr)
    ok = ok and r.n_paths == 200_000 and elapsed < 30
    verdict(1, ok, f"delta_hat={r.delta_hat} p={r.price:.5f} oracle={CALL_ATM:.5f} "
                   f"se={r.mc_stderr:.4f} runtime={elapsed:.1f}s")


def test_criterion_2_interior_regime(e2):
    r = e2.report
    d = r.delta_hat[0]
    res = first_order_residual(d, e2.payoff, e2.model, e2.cost, batch=e2.setup.batch)
    ok = (abs(d - E2_DELTA) <= 1e-2 * E2_DELTA and within(r.price, E2_PRICE, r.mc_stderr)
          and abs(res.mc) <= 3 * res.mc_stderr)
    verdict(2, ok, f"delta_hat={d:.5f} oracle={E2_DELTA:.5f} p={r.price:.5f} oracle={E2_PRICE:.5f} "
                   f"se={r.mc_stderr:.4f} residual={res.mc:.4f}+-{res.mc_stderr:.4f}")


def test_criterion_3_hedging_dominance(e2):
    t = time.perf_counter()
    s = build_schedule(e2.report, e2.setup.grid, e2.model, LatticeOptions(n_steps=256),
                       payoff=e2.payoff, cost=e2.cost)
    b = simulate(e2.model, 10_000, 256, seed=12345)
    rep = verify_dominance(s, b, e2.payoff, e2.setup.section, e2.report.price, probe_eps=0.01)
    elapsed = time.perf_counter() - t
    v, pv = rep.violation_fraction, rep.tightness_probe["violation_fraction"]
    tight = pv > 0 and pv >= 10 * v
    ok = v <= 1e-3 and tight and elapsed < 120
    verdict(3, ok, f"violation={v:.4%} at tol={rep.tolerance:.4f}; probe(p*0.99) violation={pv:.4%} "
                   f"(needs >0 and >=10x); runtime={elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_4_lower_bound_chain(e1, e2, e1_ladder, e2_ladder):
    lines, ok = [], True
    for name, case, lad in (("E1", e1, e1_ladder), ("E2", e2, e2_ladder)):
        p = case.report.price
        mono = all(b >= a for a, b in zip(lad.at, lad.at[1:]))
        below = all(v <= p + tol + 3 * case.report.mc_stderr for v, tol in zip(lad.at, lad.tol))
        gap = (p - lad.at[-1]) / p
        ok = ok and mono and below
        lines.append(f"{name}: v={[round(v, 4) for v in lad.at]} p={p:.4f} gap={gap:.1%}")
    gap2 = (e2.report.price - e2_ladder.at[-1]) / e2.report.price
    verdict(4, ok and gap2 <= 0.15, "; ".join(lines))


def random_payoff(rng):
    kind = rng.choice(["digital-barrier-call", "costly-put", "costly-call-physical", "free-call"])
    if kind == "digital-barrier-call":
        return catalog_payoff(kind, K1=rng.uniform(60, 140), K2=rng.uniform(60, 140))
    return catalog_payoff(kind, K=rng.uniform(60, 140))


def majorant_oracle(x, y, tail):
    """Smallest concave majorant on the nodes with every slope >= ``tail``.

    Subtracting ``tail * x`` turns the slope floor into monotonicity, and the
    smallest nondecreasing concave majorant is the chord majorant of the
    running maximum.
    """
    return chord_majorant(x, np.maximum.accumulate(y - tail * x)) + tail * x


def test_criterion_5_transform_suite():
    rng = np.random.default_rng(2024)
    worst = dict(majorant=0.0, concave=0.0, fenchel=0.0, oracle=0.0)
    for _ in range(50):
        g = random_payoff(rng)
        sec = build_polar_section(CostMatrix(1, [[0, rng.uniform(0.01, 0.3)], [rng.uniform(0, 0.3), 0]]))
        grid = build_grid(g, sec, [100.0], [rng.uniform(20, 150)], 0.5, n_sf=21, n_sc=81)
        grid = concave_envelope(g, sec, grid)
        x, G, H = grid.sc_axes[0], grid.G_values, grid.Ghat_values
        worst["majorant"] = max(worst["majorant"], float(np.max(G - H)))
        slopes = np.diff(H, axis=1) / np.diff(x)
        worst["concave"] = max(worst["concave"], float(np.max(np.diff(slopes, axis=1))))
        tail = float(grid.sc_slope[0])
        for d in tail + rng.uniform(0.0, 3.0, 20):
            C, _ = conjugate_nodes(grid, [d])
            worst["fenchel"] = max(worst["fenchel"], float(np.max(H - C[:, None] - d * x[None, :])))
        for row, gr in zip(H, G):
            worst["oracle"] = max(worst["oracle"], float(np.max(np.abs(row - majorant_oracle(x, gr, tail)))))
    ok = (worst["majorant"] <= 0 and worst["concave"] <= 1e-9 and worst["fenchel"] <= 1e-9
          and worst["oracle"] <= 1e-9)
    verdict(5, ok, " ".join(f"{k}={v:.2e}" for k, v in worst.items()))


def interval_oracle(cost):
    """dc = 1: the section is an interval; its ends by linear programming on
    the H-representation ``xi_j <= bound * xi_i`` with ``xi_0 = 1``."""
    A, b = [], []
    for h in polar_constraints(cost):
        # xi_1 coefficient and constant of xi_j - bound * xi_i
        a = (1.0 if h.j == 1 else 0.0) - (h.bound if h.i == 1 else 0.0)
        c = (1.0 if h.j == 0 else 0.0) - (h.bound if h.i == 0 else 0.0)
        A.append([a])
        b.append(-c)
    ends = [linprog([s], A_ub=A, b_ub=b, bounds=[(None, None)]).x[0] for s in (1.0, -1.0)]
    return np.array([[1.0, ends[0]], [1.0, ends[1]]])


def test_criterion_6_cone_suite():
    rng = np.random.default_rng(6)
    bad = []
    for k in range(200):
        dc = int(rng.integers(1, 4))
        cost = random_cost(rng, dc)
        sec = build_polar_section(cost)
        oracle = interval_oracle(cost) if dc == 1 else halfspace_vertices(cost)
        if not same_set(sec.vertices, oracle, 1e-8):
            bad.append(f"vertices#{k}")
        if dc == 1:
            want = sorted({1 / (1 + cost.lam[1, 0]), 1 + cost.lam[0, 1]})
            if not np.allclose(sec.vertices[:, 1], want, atol=1e-12, rtol=0):
                bad.append(f"endpoints#{k}")
        for x, y in rng.normal(size=(5, 2, dc + 1)):
            if cone_geq(x, y, sec) != (liquidation_value(x - y, sec) >= 0):
                bad.append(f"order#{k}")
    verdict(6, not bad, f"200 matrices, failures={bad[:5]}")


def test_criterion_7_convexity_in_delta(e2):
    o = e2.setup.objective
    rng = np.random.default_rng(7)
    slack = []
    for a, b in rng.uniform(0.0, 1.5, (100, 2)):
        slack.append(0.5 * (o([a]) + o([b])) - o([0.5 * (a + b)]))
    verdict(7, min(slack) >= -1e-12, f"min slack={min(slack):.3e} over 100 midpoints")


def test_criterion_8_offset_identity(e1, e2):
    parts, ok = [], True
    for name, case in (("E1", e1), ("E2", e2)):
        p = case.report.price
        r = price_with_offset(case.payoff, case.model, case.cost, [p, 0.0], case.options,
                              batch=case.setup.batch)
        ok = ok and abs(r.price) <= 3 * r.mc_stderr
        parts.append(f"{name}: offset price={r.price:.2e} se={r.mc_stderr:.4f}")
    verdict(8, ok, "; ".join(parts))
