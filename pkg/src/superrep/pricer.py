"""Minimal super-replication capital over buy-and-hold costly positions.

The price is ``min over delta`` of

    E[C(S_f(T); delta)] + max over xi of xi_c . (delta * sc0),

where ``delta`` is the (constant) number of units held in each costly asset.
The expectation is estimated on one shared path batch, so the objective is
a deterministic convex function of ``delta``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .cone import CostMatrix, PolarSection, build_polar_section, normalize_costs
from .errors import NumericFailure
from .market import MarketModel, PathBatch, lognormal_digital, simulate
from .payoff import (PayoffSpec, SfInterpolator, TransformGrid, build_grid, concave_envelope,
                     conjugate_samples, finite_domain, offset_payoff)

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
BRACKET_LIMIT = 2.0 ** 60


@dataclass
class PriceOptions:
    n_paths: int = 200_000
    seed: int = 12345
    n_steps: int = 1  # time steps for the pricing batch (ignored if a batch is given)
    n_sf: int = 801
    n_sc: int = 201
    sf_width_sd: float = 8.0  # free axis half-width in terminal log-sd units
    sc_ref: tuple | None = None  # reference level of each costly axis (default sc0)
    tol_objective: float = 1e-8
    tol_delta: float = 1e-6
    max_iter: int = 400
    curve_points: int = 41
    threads: int = 1


@dataclass
class PriceReport:
    price: float
    delta_hat: list
    xi_hat: list
    expectation_term: float
    cost_term: float
    mc_stderr: float
    regime: str
    objective_curve: list = field(default_factory=list)
    offset: list | None = None
    flat_minimum: bool = False
    normalized_costs: bool = False
    iterations: int = 0
    n_paths: int = 0
    seed: int = 0

    def to_dict(self):
        return asdict(self)


class CostTerm(NamedTuple):
    value: float
    vertex: np.ndarray


def initial_cost(delta, section: PolarSection, sc0) -> CostTerm:
    """Cost of setting up ``delta`` costly units, charged at the worst vertex.

    Ties go to the lexicographically smallest vertex.
    """
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    amounts = delta * np.asarray(sc0, dtype=float)
    vals = section.vertices[:, 1:] @ amounts
    top = vals.max()
    k = int(np.argmax(vals >= top - 1e-12 * max(1.0, abs(top))))
    return CostTerm(float(top), section.vertices[k])


def _mean_stderr(x, paired):
    n = len(x)
    if paired and n % 2 == 0 and n >= 4:
        x = 0.5 * (x[0::2] + x[1::2])
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
    return m, se


class Objective:
    """``delta -> E[C(S_f(T); delta)] + initial_cost(delta)`` on fixed paths."""

    def __init__(self, grid: TransformGrid, batch: PathBatch, section: PolarSection, sc0):
        self.grid = grid
        self.section = section
        self.sc0 = np.asarray(sc0, dtype=float)
        self.interp = SfInterpolator(grid.sf_axes, batch.sf_T)
        self.paired = batch.n_paths % 2 == 0
        self.n_evals = 0

    @property
    def lower(self):
        return np.asarray(self.grid.sc_slope, dtype=float)

    def parts(self, delta):
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        self.n_evals += 1
        cost = initial_cost(delta, self.section, self.sc0)
        if not finite_domain(self.grid, delta):
            return math.inf, 0.0, cost
        vals, _ = conjugate_samples(self.grid, self.interp, delta)
        m, se = _mean_stderr(vals, self.paired)
        return m, se, cost

    def __call__(self, delta):
        m, _, cost = self.parts(delta)
        return m + cost.value

    def samples(self, delta):
        """Per-path conjugate values at ``delta``."""
        return conjugate_samples(self.grid, self.interp, delta)[0]

    def subgradient(self, delta):
        """Samplewise envelope-theorem subgradient (right derivative at kinks)."""
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        if not finite_domain(self.grid, delta):
            return np.full(len(delta), np.nan)
        _, arg = conjugate_samples(self.grid, self.interp, delta)
        cost = initial_cost(delta, self.section, self.sc0)
        return -np.mean(arg, axis=0) + cost.vertex[1:] * self.sc0

    def right_derivative(self, delta, k):
        """One-sided derivative along ``+e_k``."""
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        _, arg = conjugate_samples(self.grid, self.interp, delta)
        expect = -float(np.mean(arg[:, k]))
        amounts = self.section.vertices[:, 1:] @ (delta * self.sc0)
        tied = amounts >= amounts.max() - 1e-12 * max(1.0, abs(amounts.max()))
        return expect + float(np.max(self.section.vertices[tied, 1 + k] * self.sc0[k]))


def objective(delta, grid, batch, section, sc0):
    """One evaluation of the pricing objective (``+inf`` off the finite domain)."""
    return Objective(grid, batch, section, sc0)(delta)


def golden_section(f, a, b, tol_x, tol_f, max_iter=400):
    """Minimize a convex ``f`` on ``[a, b]``; returns ``(x, f(x), iterations)``."""
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while it < max_iter:
        it += 1
        if abs(b - a) <= tol_x:
            break
        if abs(fc - fd) <= tol_f * max(1.0, abs(fc), abs(fd)) and abs(b - a) <= 1e3 * tol_x:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    x, fx = (c, fc) if fc <= fd else (d, fd)
    return x, fx, it


def bracket_right(f, lo):
    """Grow ``lo + 1, lo + 2, lo + 4, ...`` until ``f`` rises twice in a row.

    Returns ``(a, b)`` containing the minimizer of a convex ``f`` on
    ``[lo, inf)``.  Raises when no rise is seen before ``2**60`` units.
    """
    xs = [lo]
    fs = [f(lo)]
    step = 1.0
    rises = 0
    while rises < 2:
        x = lo + step
        if step > BRACKET_LIMIT:
            raise NumericFailure("unbounded-below",
                                 "objective keeps decreasing; check the claim's growth certificates")
        fx = f(x)
        rises = rises + 1 if fx > fs[-1] else 0
        xs.append(x)
        fs.append(fx)
        step *= 2.0
    # convexity: the minimizer lies left of the first rise
    first_rise = len(xs) - 2
    return xs[max(first_rise - 2, 0)], xs[first_rise]


def _minimize_1d(obj: Objective, opts: PriceOptions):
    lo = float(obj.lower[0])
    f = lambda x: obj(np.array([x]))
    if obj.right_derivative(np.array([lo]), 0) >= 0.0:
        return np.array([lo]), 1
    a, b = bracket_right(f, lo)
    x, fx, it = golden_section(f, a, b, opts.tol_delta, opts.tol_objective, opts.max_iter)
    if f(lo) <= fx:
        x = lo
    return np.array([x]), it


def _minimize_nd(obj: Objective, opts: PriceOptions):
    """Projected subgradient descent from the origin, then coordinate polishing."""
    lo = obj.lower
    x = np.maximum(0.0, lo)
    best_x, best_f = x.copy(), obj(x)
    scale = max(1.0, float(np.max(np.abs(x))))
    prev_f = best_f
    it = 0
    for it in range(1, opts.max_iter + 1):
        g = obj.subgradient(x)
        gn = float(np.linalg.norm(g))
        if gn == 0.0 or not np.isfinite(gn):
            break
        step = scale / math.sqrt(it)
        x_new = np.maximum(x - step * g / gn, lo)
        f_new = obj(x_new)
        if f_new < best_f:
            best_x, best_f = x_new.copy(), f_new
        moved = float(np.max(np.abs(x_new - x)))
        x = x_new
        if moved < opts.tol_delta and abs(prev_f - f_new) <= opts.tol_objective * max(1.0, abs(f_new)):
            break
        prev_f = f_new

    # Coordinate-wise golden sections from the best iterate.
    x = best_x
    for _ in range(20):
        before = best_f
        for k in range(len(x)):
            def fk(t, k=k):
                y = x.copy()
                y[k] = t
                return obj(y)
            if obj.right_derivative(np.where(np.arange(len(x)) == k, lo, x), k) >= 0 and fk(lo[k]) <= best_f:
                t = lo[k]
            else:
                a, b = bracket_right(fk, lo[k])
                t, _, n = golden_section(fk, a, b, opts.tol_delta, opts.tol_objective, opts.max_iter)
                it += n
                if fk(lo[k]) <= fk(t):
                    t = lo[k]
            ft = fk(t)
            if ft <= best_f:
                x = x.copy()
                x[k] = t
                best_f = ft
        if before - best_f <= opts.tol_objective * max(1.0, abs(best_f)):
            break
    return x, it


def _regime(delta, lower):
    if np.all(delta == 0.0):
        return "boundary-zero"
    if np.any((delta == lower) & (lower != 0.0)):
        return "infeasible-direction"
    return "interior"


def _curve(obj: Objective, delta, opts: PriceOptions):
    lo = obj.lower
    out = []
    for k in range(len(delta)):
        hi = lo[k] + max(2.0 * (delta[k] - lo[k]), 1.0)
        for t in np.linspace(lo[k], hi, opts.curve_points):
            y = delta.copy()
            y[k] = t
            out.append({"axis": k, "delta": y.tolist(), "objective": float(obj(y))})
    return out


def _is_flat(obj, delta, fmin):
    h = 1e-3 * max(1.0, float(np.max(np.abs(delta))))
    for k in range(len(delta)):
        for s in (-1.0, 1.0):
            y = delta.copy()
            y[k] += s * h
            if y[k] < obj.lower[k]:
                continue
            if abs(obj(y) - fmin) >= 1e-10:
                return False
    return True


@dataclass
class PricingSetup:
    """Everything the pricer builds before optimizing (reused by the hedger)."""
    cost: CostMatrix
    section: PolarSection
    grid: TransformGrid
    batch: PathBatch
    objective: Objective


def build_transform(payoff: PayoffSpec, model: MarketModel, cost: CostMatrix, opts: PriceOptions,
                    grid: TransformGrid | None = None):
    """Normalized costs, dual section and the enveloped transform grid."""
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        cost = normalize_costs(cost)
    section = build_polar_section(cost)
    if grid is None:
        sc0 = model.s0[model.df:]
        sc_ref = np.asarray(opts.sc_ref if opts.sc_ref is not None else sc0, dtype=float)
        hw = opts.sf_width_sd * model.free_vol_norm() * math.sqrt(model.T)
        hw = np.maximum(hw, 0.05)
        grid = build_grid(payoff, section, model.s0[: model.df], sc_ref, hw,
                          n_sf=opts.n_sf, n_sc=opts.n_sc, threads=opts.threads)
        grid = concave_envelope(payoff, section, grid, threads=opts.threads)
    return cost, section, grid


def prepare(payoff: PayoffSpec, model: MarketModel, cost: CostMatrix, opts: PriceOptions,
            batch: PathBatch | None = None, grid: TransformGrid | None = None) -> PricingSetup:
    cost, section, grid = build_transform(payoff, model, cost, opts, grid=grid)
    sc0 = model.s0[model.df:]
    if batch is None:
        batch = simulate(model, opts.n_paths, opts.n_steps, opts.seed, threads=opts.threads)
    return PricingSetup(cost, section, grid, batch, Objective(grid, batch, section, sc0))


def price(payoff: PayoffSpec, model: MarketModel, cost: CostMatrix, options: PriceOptions | None = None,
          batch: PathBatch | None = None, grid: TransformGrid | None = None,
          setup: PricingSetup | None = None) -> PriceReport:
    """Super-replication price and the optimal constant costly holdings.

    One costly asset: golden-section search on a bracket grown from the
    left end of the finite domain.  Several: projected subgradient descent
    followed by coordinate golden sections.  Raises ``NumericFailure`` with
    kind ``no-finite-domain`` or ``unbounded-below``.
    """
    opts = options or PriceOptions()
    if any(f == "superlinear" for f in payoff.sc_growth):
        raise NumericFailure("no-finite-domain", "every costly holding leaves an infinite residual claim")
    setup = setup or prepare(payoff, model, cost, opts, batch=batch, grid=grid)
    obj = setup.objective
    if not np.all(np.isfinite(obj.lower)):
        raise NumericFailure("no-finite-domain", "tail slopes are infinite")
    if payoff.dc == 1:
        delta, it = _minimize_1d(obj, opts)
    else:
        delta, it = _minimize_nd(obj, opts)
    m, se, cost_term = obj.parts(delta)
    p = m + cost_term.value
    if not np.isfinite(p):
        raise NumericFailure("no-finite-domain", "optimizer ended outside the finite domain")
    return PriceReport(
        price=float(p), delta_hat=delta.tolist(), xi_hat=cost_term.vertex.tolist(),
        expectation_term=float(m), cost_term=float(cost_term.value), mc_stderr=float(se),
        regime=_regime(delta, obj.lower), objective_curve=_curve(obj, delta, opts),
        flat_minimum=_is_flat(obj, delta, p), normalized_costs=setup.cost.normalized,
        iterations=int(it), n_paths=setup.batch.n_paths, seed=int(setup.batch.seed))


def price_with_offset(payoff: PayoffSpec, model: MarketModel, cost: CostMatrix, x,
                      options: PriceOptions | None = None, batch: PathBatch | None = None) -> PriceReport:
    """Price of the claim for an investor who already holds ``x``."""
    shifted = offset_payoff(payoff, x, model.s0[model.df:])
    report = price(shifted, model, cost, options, batch=batch)
    report.offset = [float(v) for v in np.asarray(x, dtype=float)]
    return report


class Residual(NamedTuple):
    closed_form: float
    mc: float
    mc_stderr: float


def first_order_residual(delta, payoff: PayoffSpec, model: MarketModel, cost: CostMatrix,
                         batch: PathBatch | None = None) -> Residual:
    """Derivative in ``delta`` of the single-asset barrier-call objective.

    ``-K2t P[S_f(T) - K1 >= delta K2t] + (1 + lam12) sc0`` with
    ``K2t = K2 / (1 + lam21)``; closed form under constant vol and, when a
    batch is given, a Monte Carlo estimate on its terminal prices.
    """
    if payoff.kind != "digital-barrier-call" or payoff.df != 1 or payoff.dc != 1:
        raise ValueError("first_order_residual needs the single-asset digital-barrier-call")
    K1, K2 = payoff.params["K1"], payoff.params["K2"]
    lam12, lam21 = float(cost.lam[0, 1]), float(cost.lam[1, 0])
    k2t = K2 / (1.0 + lam21)
    sf0, sc0 = model.s0
    sig = float(model.free_vol_norm()[0])
    strike = K1 + float(delta) * k2t
    cf = -k2t * lognormal_digital(sf0, strike, sig, model.T) + (1.0 + lam12) * sc0
    if batch is None:
        return Residual(cf, math.nan, math.nan)
    hit = (batch.sf_T[:, 0] - K1 >= float(delta) * k2t).astype(float)
    m, se = _mean_stderr(hit, batch.n_paths % 2 == 0)
    return Residual(cf, -k2t * m + (1.0 + lam12) * sc0, k2t * se)
