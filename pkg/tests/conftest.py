import numpy as np
import pytest

from superrep.cone import CostMatrix
from superrep.market import MarketModel
from superrep.payoff import catalog_payoff
from superrep.pricer import PriceOptions, prepare, price

# Frozen oracle values, computed independently by quadrature of the
# lognormal density and bounded scalar minimization (not by this package).
CALL_ATM = 7.965567455405849  # E[(S(1) - 100)+], S0 = 100, vol 0.2
E2_DELTA = 0.2527055071  # argmin of call(100 + 100 d) + 1.1 * 10 * d
E2_PRICE = 4.2321357951675065
E2_PHI0 = 0.15232136495981252  # P^S(S(1) > 100 + 100 * E2_DELTA)
E1_PHI0 = 0.539827837277029  # at-the-money call delta


def barrier_call():
    return catalog_payoff("digital-barrier-call", K1=100.0, K2=100.0)


def example_cost():
    return CostMatrix(1, [[0.0, 0.1], [0.0, 0.0]])


def example_model(sc0):
    return MarketModel(1, 1, 1.0, [100.0, sc0], np.diag([0.2, 0.3]))


class Case:
    def __init__(self, sc0, n_paths=200_000, seed=12345):
        self.payoff = barrier_call()
        self.cost = example_cost()
        self.model = example_model(sc0)
        self.options = PriceOptions(n_paths=n_paths, seed=seed)
        self.setup = prepare(self.payoff, self.model, self.cost, self.options)
        self.report = price(self.payoff, self.model, self.cost, self.options, setup=self.setup)


@pytest.fixture(scope="session")
def e1():
    return Case(100.0)


@pytest.fixture(scope="session")
def e2():
    return Case(10.0)


@pytest.fixture(scope="session")
def e2_schedule(e2):
    from superrep.hedger import build_schedule
    return build_schedule(e2.report, e2.setup.grid, e2.model, payoff=e2.payoff, cost=e2.cost)


KAPPAS = (0.0, 1.0, 2.0, 5.0)


class Ladder:
    """Bounded-control values at the default lattice, with scheme tolerances."""

    def __init__(self, case):
        from superrep.hjb import ControlProblem, comparison_points, scheme_tolerance, solve_ladder
        self.points = comparison_points(case.model, case.setup.section)
        self.values = solve_ladder(KAPPAS, case.setup.grid, case.model)
        self.at = [float(v.at(self.points).max()) for v in self.values]
        self.tol = []
        for v in self.values:
            p = ControlProblem(v.kappa, v.z_axes, 100, v.mu_set)
            self.tol.append(scheme_tolerance(p, case.setup.grid, case.model, self.points, fine=v))


@pytest.fixture(scope="session")
def e1_ladder(e1):
    return Ladder(e1)


@pytest.fixture(scope="session")
def e2_ladder(e2):
    return Ladder(e2)
