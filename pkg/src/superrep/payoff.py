"""Claims and the payoff transforms used by the pricer.

A claim ``g`` maps prices ``s`` (shape ``(..., df + dc)``) to a target
position of length ``1 + dc``: cash first, then the amount to hold in each
costly asset.  Three transforms are built on top of it:

* ``G``: worst case over the dual section of ``xi . g(s_f, s_c / xi)``,
* ``Ghat``: the concave envelope of ``G`` in the costly coordinates,
* ``C``: the conjugate ``sup_sc Ghat(s_f, sc) - delta . sc``.

All three live on a :class:`TransformGrid` (log-spaced free-price axes times
costly-price axes that start at 0).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cone import PolarSection, cone_geq
from .errors import InvariantError, NumericFailure

USC_EPS = 1e-9
SC_TRUNCATION = 50.0
GROWTH_KINDS = ("bounded", "linear", "superlinear")


@dataclass(frozen=True)
class Growth:
    """Admissibility certificate ``g(s) >= -(c + delta_f . s_f, delta * s_c)``."""

    c: float = 0.0
    delta_f: tuple = ()
    delta: float = 0.0


@dataclass(frozen=True)
class PayoffSpec:
    df: int
    dc: int
    kind: str
    params: dict
    growth: Growth
    sc_growth: tuple  # one of GROWTH_KINDS per costly asset
    sc_slope: tuple  # asymptotic slope of G in each costly price
    evaluate: Callable = field(repr=False, compare=False)
    sc_thresholds: tuple = ()  # s_c levels (before scaling by xi) where g may jump
    sf_breakpoints: tuple = ()  # free-price kinks, one tuple per free asset
    vertex_exact: bool = False  # xi-sup of G is attained at a vertex

    def __post_init__(self):
        if self.df < 1 or self.dc < 1:
            raise InvariantError("PayoffSpec: df and dc must be positive")
        if len(self.sc_growth) != self.dc or len(self.sc_slope) != self.dc:
            raise InvariantError("PayoffSpec: growth flags need one entry per costly asset")
        for flag in self.sc_growth:
            if flag not in GROWTH_KINDS:
                raise InvariantError(f"PayoffSpec: unknown growth flag {flag!r}")
        if len(self.growth.delta_f) not in (0, self.df):
            raise InvariantError("PayoffSpec: growth.delta_f must have df entries")

    @property
    def d(self):
        return self.df + self.dc

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return self.evaluate(s)

    def admissibility_floor(self, s):
        """``-(c + delta_f . s_f, delta * s_c)`` for prices ``s``."""
        s = np.asarray(s, dtype=float)
        dfv = np.asarray(self.growth.delta_f or (0.0,) * self.df)
        out = np.zeros(s.shape[:-1] + (1 + self.dc,))
        out[..., 0] = -(self.growth.c + s[..., :self.df] @ dfv)
        out[..., 1:] = -self.growth.delta * s[..., self.df:]
        return out


def check_admissibility(payoff: PayoffSpec, section: PolarSection, samples, tol=1e-9):
    """Verify the admissibility certificate on sampled prices.

    Raises :class:`InvariantError` naming the first failing sample.
    """
    samples = np.asarray(samples, dtype=float)
    ok = cone_geq(payoff(samples), payoff.admissibility_floor(samples), section, tol=tol)
    if not np.all(ok):
        bad = samples[np.argmin(ok)]
        raise InvariantError(f"PayoffSpec: admissibility bound fails at s={bad.tolist()}")


# ---------------------------------------------------------------- catalog

def _pos(x):
    return np.maximum(x, 0.0)


def _zero(df, dc):
    def g(s):
        return np.zeros(s.shape[:-1] + (1 + dc,))
    return dict(evaluate=g, sc_growth=("bounded",) * dc, sc_slope=(0.0,) * dc)


def _digital_barrier_call(df, dc, K1, K2):
    def g(s):
        out = np.zeros(s.shape[:-1] + (1 + dc,))
        out[..., 0] = _pos(s[..., 0] - K1) * (s[..., df] > K2)
        return out
    thr = [()] * dc
    thr[0] = (K2,)
    sfb = [()] * df
    sfb[0] = (K1,)
    return dict(evaluate=g, sc_growth=("bounded",) * dc, sc_slope=(0.0,) * dc,
                sc_thresholds=tuple(thr), sf_breakpoints=tuple(sfb))


def _free_call(df, dc, K):
    def g(s):
        out = np.zeros(s.shape[:-1] + (1 + dc,))
        out[..., 0] = _pos(s[..., 0] - K)
        return out
    sfb = [()] * df
    sfb[0] = (K,)
    return dict(evaluate=g, sc_growth=("bounded",) * dc, sc_slope=(0.0,) * dc,
                sf_breakpoints=tuple(sfb))


def _costly_call_physical(df, dc, K):
    # Deliver one unit of the first costly asset against K in cash.
    def g(s):
        out = np.zeros(s.shape[:-1] + (1 + dc,))
        hit = s[..., df] > K
        out[..., 0] = -K * hit
        out[..., 1] = s[..., df] * hit
        return out
    thr = [()] * dc
    thr[0] = (K,)
    slope = [0.0] * dc
    slope[0] = 1.0
    flags = ["bounded"] * dc
    flags[0] = "linear"
    return dict(evaluate=g, sc_growth=tuple(flags), sc_slope=tuple(slope),
                sc_thresholds=tuple(thr), growth=Growth(c=K))


def _costly_put(df, dc, K):
    def g(s):
        out = np.zeros(s.shape[:-1] + (1 + dc,))
        out[..., 0] = _pos(K - s[..., df])
        return out
    thr = [()] * dc
    thr[0] = (K,)
    return dict(evaluate=g, sc_growth=("bounded",) * dc, sc_slope=(0.0,) * dc,
                sc_thresholds=tuple(thr))


def _costly_square(df, dc, scale=1.0):
    def g(s):
        out = np.zeros(s.shape[:-1] + (1 + dc,))
        out[..., 0] = scale * s[..., df] ** 2
        return out
    flags = ["bounded"] * dc
    flags[0] = "superlinear"
    slope = [0.0] * dc
    slope[0] = np.inf
    return dict(evaluate=g, sc_growth=tuple(flags), sc_slope=tuple(slope))


CATALOG = {
    "zero": _zero,
    "digital-barrier-call": _digital_barrier_call,
    "free-call": _free_call,
    "costly-call-physical": _costly_call_physical,
    "costly-put": _costly_put,
    "costly-square": _costly_square,
}


def catalog_payoff(kind, df=1, dc=1, **params) -> PayoffSpec:
    """Build a catalog claim.

    >>> g = catalog_payoff("digital-barrier-call", K1=100.0, K2=100.0)
    >>> g([[150.0, 120.0]]).tolist()
    [[50.0, 0.0]]
    """
    try:
        maker = CATALOG[kind]
    except KeyError:
        raise InvariantError(f"PayoffSpec: unknown catalog entry {kind!r}") from None
    parts = maker(df, dc, **params)
    parts.setdefault("growth", Growth())
    parts.setdefault("sc_thresholds", ((),) * dc)
    parts.setdefault("sf_breakpoints", ((),) * df)
    # Every catalog entry depends on xi monotonically for each costly asset.
    return PayoffSpec(df=df, dc=dc, kind=kind, params=dict(params), vertex_exact=True, **parts)


def tabulated_payoff(axes, values, growth: Growth, sc_growth, sc_slope) -> PayoffSpec:
    """Claim given on a rectangular price grid.

    ``axes`` holds one increasing array per asset (free first), ``values``
    has shape ``(*map(len, axes), 1 + dc)``.  Multilinear interpolation
    inside the grid; linear extrapolation outside it.
    """
    from scipy.interpolate import RegularGridInterpolator

    axes = [np.asarray(a, dtype=float) for a in axes]
    values = np.asarray(values, dtype=float)
    dc = values.shape[-1] - 1
    df = len(axes) - dc
    if values.shape[:-1] != tuple(len(a) for a in axes):
        raise InvariantError("PayoffSpec: tabulated values do not match the axes")
    interp = RegularGridInterpolator(axes, values, method="linear",
                                     bounds_error=False, fill_value=None)

    def g(s):
        flat = s.reshape(-1, s.shape[-1])
        return interp(flat).reshape(s.shape[:-1] + (1 + dc,))

    return PayoffSpec(df=df, dc=dc, kind="tabulated", params={"shape": list(values.shape)},
                      growth=growth, sc_growth=tuple(sc_growth), sc_slope=tuple(sc_slope),
                      evaluate=g, sc_thresholds=((),) * dc, sf_breakpoints=((),) * df)


def offset_payoff(payoff: PayoffSpec, x, sc0) -> PayoffSpec:
    """Claim net of an initial endowment ``x`` (cash, then costly amounts).

    ``g(s; x) = g(s) - (x[0], s_c / sc0 * x[1:])``: the endowment in costly
    asset ``i`` is ``x[i] / sc0[i]`` units, carried to maturity.
    """
    x = np.asarray(x, dtype=float)
    sc0 = np.asarray(sc0, dtype=float)
    if x.shape != (1 + payoff.dc,) or sc0.shape != (payoff.dc,):
        raise InvariantError("offset: x must have 1 + dc entries and sc0 dc entries")
    units = x[1:] / sc0
    base = payoff.evaluate
    df = payoff.df

    def g(s):
        out = base(s).copy()
        out[..., 0] -= x[0]
        out[..., 1:] -= s[..., df:] * units
        return out

    # xi . (x0, s_c / xi * units) does not depend on xi, so G shifts by an
    # affine function of z_c and its asymptotic slopes drop by ``units``.
    slope = tuple(float(a - u) for a, u in zip(payoff.sc_slope, units))
    growth = Growth(c=payoff.growth.c + max(x[0], 0.0), delta_f=payoff.growth.delta_f,
                    delta=payoff.growth.delta + float(np.max(np.maximum(units, 0.0), initial=0.0)))
    return replace(payoff, kind=f"{payoff.kind}+offset", evaluate=g, sc_slope=slope,
                   growth=growth, params={**payoff.params, "offset": x.tolist()})


# ---------------------------------------------------------------- transform G

def _section_candidates(section: PolarSection, level):
    """Points of the section used for the xi-sup at refinement ``level``.

    Level 0 is the vertex set.  Level ``L >= 1`` adds a barycentric lattice
    with ``32 * 2**(L-1)`` subdivisions on each simplex of a triangulation
    of the section (so at least 33 points per free dimension); lattices are
    nested in ``L``.
    """
    verts = section.vertices
    if level <= 0:
        return verts
    m = 32 * 2 ** (level - 1)
    dc = section.dc
    if dc == 1:
        w = np.linspace(0.0, 1.0, m + 1)[:, None]
        return np.vstack([verts, (1 - w) * verts[0] + w * verts[-1]])
    from scipy.spatial import Delaunay, QhullError

    try:
        simplices = Delaunay(verts[:, 1:]).simplices
    except QhullError:
        simplices = np.array([np.arange(len(verts))])
    pts = [verts]
    for k in _barycentric_lattice(dc, m):
        w = np.asarray(k, dtype=float) / m
        pts.append(np.einsum("j,sjk->sk", w, verts[simplices][:, :len(w)]))
    return np.vstack(pts)


def _barycentric_lattice(dc, m):
    """Integer points ``k`` with ``len(k) = dc + 1`` and ``sum(k) = m``."""
    if dc == 0:
        yield (m,)
        return
    for first in range(m + 1):
        for rest in _barycentric_lattice(dc - 1, m - first):
            yield (first,) + rest


def _sup_over(payoff, z, xis):
    """``max_k xi_k . g(z_f, z_c / xi_k)`` and the maximizing index."""
    df = payoff.df
    best = np.full(z.shape[:-1], -np.inf)
    arg = np.zeros(z.shape[:-1], dtype=int)
    for k, xi in enumerate(xis):
        s = z.copy()
        s[..., df:] = z[..., df:] / xi[1:]
        val = payoff(s) @ xi
        better = val > best
        best = np.where(better, val, best)
        arg = np.where(better, k, arg)
    return best, arg


def transform_G(payoff: PayoffSpec, section: PolarSection, z, level=1, ascent=True):
    """Worst-case deflated payoff ``G(z) = sup_xi xi . g(z_f, z_c / xi)``.

    ``z`` has shape ``(..., d)`` with positive free prices.  The sup is taken
    over the candidates of every refinement level up to ``level`` and then
    improved by one coordinate-ascent pass, so the result is nondecreasing
    in ``level``.
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != payoff.d:
        raise ValueError(f"z has {z.shape[-1]} coordinates, expected {payoff.d}")
    best, _ = _sup_over(payoff, z, section.vertices)
    for lev in range(1, level + 1):
        xis = _section_candidates(section, lev)
        val, arg = _sup_over(payoff, z, xis)
        if ascent:
            val = np.maximum(val, _coordinate_ascent(payoff, section, z, xis[arg], val,
                                                     step=0.5 / (32 * 2 ** (lev - 1))))
        best = np.maximum(best, val)
    return best


def _coordinate_ascent(payoff, section, z, xi, val, step, rounds=6):
    df = payoff.df
    xi = xi.copy()
    val = val.copy()
    span = section.vertices[:, 1:].max(axis=0) - section.vertices[:, 1:].min(axis=0)
    for _ in range(rounds):
        for k in range(1, section.dc + 1):
            for sign in (1.0, -1.0):
                trial = xi.copy()
                trial[..., k] += sign * step * span[k - 1]
                ok = section.violation(trial) <= 1e-12
                s = z.copy()
                s[..., df:] = z[..., df:] / trial[..., 1:]
                tv = np.einsum("...i,...i->...", payoff(s), trial)
                better = ok & (tv > val)
                val = np.where(better, tv, val)
                xi = np.where(better[..., None], trial, xi)
        step /= 2.0
    return val


# ---------------------------------------------------------------- grids

@dataclass(frozen=True)
class TransformGrid:
    sf_axes: tuple  # one log-spaced array per free asset
    sc_axes: tuple  # one array per costly asset, first node 0
    G_values: np.ndarray  # (n_sf, n_sc)
    sc_slope: np.ndarray  # tail slopes used beyond the last costly node
    sc_bounds: tuple  # (lower, upper) truncation per costly asset
    Ghat_values: np.ndarray | None = None
    growth_constants: tuple | None = None
    meta: dict = field(default_factory=dict)

    @property
    def df(self):
        return len(self.sf_axes)

    @property
    def dc(self):
        return len(self.sc_axes)

    @property
    def sf_nodes(self):
        return _tensor_nodes(self.sf_axes)

    @property
    def sc_nodes(self):
        return _tensor_nodes(self.sc_axes)


def _tensor_nodes(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _with_breaks(pts, extra):
    """Insert ``extra`` into the sorted log-spaced ``pts``; a node closer than
    a quarter log-spacing is moved onto the break instead (no slivers)."""
    pts = np.array(pts, dtype=float)
    lp = np.log(pts[pts > 0])
    step = (lp[-1] - lp[0]) / max(len(lp) - 1, 1)
    add = []
    for e in extra:
        if e <= 0:
            add.append(e)
            continue
        j = int(np.argmin(np.abs(lp - np.log(e))))
        if abs(lp[j] - np.log(e)) < 0.25 * step:
            pts[np.flatnonzero(pts > 0)[j]] = e
        else:
            add.append(e)
    return np.unique(np.concatenate([pts, add]))


def _log_axis(ref, half_width, n, extra=()):
    lo, hi = np.log(ref) - half_width, np.log(ref) + half_width
    pts = np.exp(np.linspace(lo, hi, n))
    extra = [e for e in extra if np.exp(lo) < e < np.exp(hi)]
    return _with_breaks(pts, extra)


def sc_axis(ref, n, thresholds=(), xi_range=(1.0, 1.0)):
    """Costly-price axis: 0, then ``n`` log-spaced nodes on ``[ref/50, 50 ref]``.

    Scaled jump locations ``xi * threshold`` are inserted as nodes; the
    upper bound stretches to cover them.
    """
    lo, hi = ref / SC_TRUNCATION, ref * SC_TRUNCATION
    brk = [t * x for t in thresholds for x in xi_range]
    if brk:
        hi = max(hi, 2.0 * max(brk))
        lo = min(lo, 0.5 * min(b for b in brk if b > 0)) if any(b > 0 for b in brk) else lo
    pts = np.exp(np.linspace(np.log(lo), np.log(hi), n))
    return _with_breaks(np.concatenate([[0.0], pts]), brk)


def build_grid(payoff: PayoffSpec, section: PolarSection, sf_ref, sc_ref, sf_half_width,
               n_sf=401, n_sc=201, level=None, threads=1) -> TransformGrid:
    """Tabulate ``G`` on a product grid.

    ``sf_ref``/``sc_ref`` center the axes (one value per asset);
    ``sf_half_width`` is the half-width of the free axes in log units.  At
    costly nodes that sit on a jump location the upper-semicontinuous value
    is stored (max over a relative ``1e-9`` neighbourhood); any concave
    majorant must dominate it in the interior.
    """
    if section.dc != payoff.dc:
        raise InvariantError("payoff and cost matrix disagree on dc")
    sf_ref = np.broadcast_to(np.asarray(sf_ref, dtype=float), (payoff.df,))
    sc_ref = np.broadcast_to(np.asarray(sc_ref, dtype=float), (payoff.dc,))
    hw = np.broadcast_to(np.asarray(sf_half_width, dtype=float), (payoff.df,))
    if level is None:
        level = 0 if (payoff.vertex_exact and payoff.dc > 1) else 1
    verts = section.vertices
    sf_axes = tuple(_log_axis(sf_ref[i], hw[i], n_sf, payoff.sf_breakpoints[i])
                    for i in range(payoff.df))
    sc_axes = tuple(sc_axis(sc_ref[i], n_sc, payoff.sc_thresholds[i],
                            (verts[:, i + 1].min(), verts[:, i + 1].max()))
                    for i in range(payoff.dc))
    sf_nodes = _tensor_nodes(sf_axes)
    sc_nodes = _tensor_nodes(sc_axes)
    jumpy = np.zeros(len(sc_nodes), dtype=bool)
    for i in range(payoff.dc):
        for t in payoff.sc_thresholds[i]:
            for v in verts[:, i + 1]:
                jumpy |= np.isclose(sc_nodes[:, i], t * v, rtol=1e-12, atol=0.0)

    def fiber(sf):
        z = np.concatenate([np.broadcast_to(sf, (len(sc_nodes), payoff.df)), sc_nodes], axis=1)
        vals = transform_G(payoff, section, z, level=level)
        if jumpy.any():
            for f in (1.0 - USC_EPS, 1.0 + USC_EPS):
                zz = z[jumpy].copy()
                zz[:, payoff.df:] *= f
                vals[jumpy] = np.maximum(vals[jumpy], transform_G(payoff, section, zz, level=level))
        return vals

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(fiber, sf_nodes))
    else:
        rows = [fiber(sf) for sf in sf_nodes]
    lo_hi = tuple((float(a[1]), float(a[-1])) for a in sc_axes)
    return TransformGrid(sf_axes=sf_axes, sc_axes=sc_axes, G_values=np.array(rows),
                         sc_slope=np.asarray(payoff.sc_slope, dtype=float), sc_bounds=lo_hi,
                         meta={"payoff": payoff.kind, "params": payoff.params, "level": level,
                               "sc_growth": list(payoff.sc_growth)})


# ---------------------------------------------------------------- envelope

def upper_hull(x, y):
    """Indices of the upper concave hull of points sorted by ``x``
    (Andrew's monotone chain, collinear points dropped)."""
    hull = []
    for k in range(len(x)):
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            cross = (x[j] - x[i]) * (y[k] - y[i]) - (y[j] - y[i]) * (x[k] - x[i])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return hull


def hull_fiber(x, y, tail_slope):
    """Smallest concave majorant on the nodes ``x`` with slopes >= ``tail_slope``."""
    idx = upper_hull(x, y)
    h = np.interp(x, x[idx], y[idx])
    return tail_slope * x + np.maximum.accumulate(h - tail_slope * x)


def _axis_slopes(G, sc_axes, k, floor, cap=64):
    vals = G.reshape((G.shape[0],) + tuple(len(a) for a in sc_axes))
    dx = np.diff(sc_axes[k])
    sl = np.diff(vals, axis=1 + k) / dx.reshape((-1,) + (1,) * (len(sc_axes) - 1 - k))
    sl = np.unique(np.round(sl[np.isfinite(sl)], 12))
    sl = sl[sl >= floor]
    if len(sl) > cap - 1:
        sl = np.quantile(sl, np.linspace(0, 1, cap - 1))
    return np.unique(np.concatenate([[floor], sl]))


def concave_envelope(payoff: PayoffSpec, section: PolarSection, grid: TransformGrid,
                     threads=1) -> TransformGrid:
    """Concave envelope of ``G`` in the costly coordinates, fiber by fiber.

    One costly asset: monotone-chain upper hull over ``(sc, G)`` followed by
    the tail correction that forces every slope to be at least the
    certified asymptotic slope.  Several costly assets: discrete
    biconjugate over a product set of slopes (per-axis chord slopes of
    ``G`` not below the certified slopes); the result is a concave grid
    majorant, and the smallest one when the slope set contains the hull's
    facet slopes (exact for separable ``G``).
    """
    for i, flag in enumerate(payoff.sc_growth):
        if flag == "superlinear":
            raise NumericFailure("no-finite-envelope",
                                 f"claim grows superlinearly in costly asset {i + 1}")
    slope = np.asarray(grid.sc_slope, dtype=float)
    G = grid.G_values
    if grid.dc == 1:
        x = grid.sc_axes[0]

        def one(k):
            return hull_fiber(x, G[k], slope[0])
    else:
        X = grid.sc_nodes
        P = _tensor_nodes([_axis_slopes(G, grid.sc_axes, k, slope[k]) for k in range(grid.dc)])
        PX = P @ X.T  # (n_slopes, n_nodes)

        def one(k):
            conj = np.min(PX - G[k][None, :], axis=1)
            return np.min(PX - conj[:, None], axis=0)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(one, range(G.shape[0])))
    else:
        rows = [one(k) for k in range(G.shape[0])]
    Ghat = np.maximum(np.array(rows), G)  # round-off only
    return replace(grid, Ghat_values=Ghat, growth_constants=_growth_constants(grid, Ghat))


def _growth_constants(grid, Ghat):
    """``(a, b)`` with ``|Ghat(z)| <= a + b |z|`` on the grid (``a = b``)."""
    norm = np.linalg.norm(np.concatenate([
        np.repeat(grid.sf_nodes, len(grid.sc_nodes), axis=0),
        np.tile(grid.sc_nodes, (len(grid.sf_nodes), 1))], axis=1), axis=1)
    b = float(np.max(np.abs(Ghat).ravel() / (1.0 + norm)))
    return (b, b)


# ---------------------------------------------------------------- conjugate

def finite_domain(grid: TransformGrid, delta):
    """``True`` where the conjugate is finite (``delta >= tail slopes``)."""
    delta = np.asarray(delta, dtype=float)
    return bool(np.all(delta >= grid.sc_slope))


def conjugate_nodes(grid: TransformGrid, delta):
    """``C`` on the free-price nodes and the maximizing costly node.

    Returns ``(values, argmax_sc)``; ``values`` is ``+inf`` everywhere when
    ``delta`` is below a tail slope.  Ties go to the smallest costly node,
    which makes ``-argmax_sc`` the right derivative in ``delta``.
    """
    if grid.Ghat_values is None:
        raise ValueError("TransformGrid has no envelope; run concave_envelope first")
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (grid.dc,))
    X = grid.sc_nodes
    if not finite_domain(grid, delta):
        return np.full(len(grid.sf_nodes), np.inf), np.full((len(grid.sf_nodes), grid.dc), np.nan)
    vals = grid.Ghat_values - (X @ delta)[None, :]
    top = vals.max(axis=1)
    scale = np.maximum(1.0, np.abs(top))
    arg = np.argmax(vals >= (top - 1e-12 * scale)[:, None], axis=1)
    return top, X[arg]


class SfInterpolator:
    """Multilinear interpolation in log free prices with precomputed weights.

    Outside the grid the weights extrapolate linearly.
    """

    def __init__(self, sf_axes, sf):
        sf = np.atleast_2d(np.asarray(sf, dtype=float))
        if sf.shape[-1] != len(sf_axes):
            sf = sf.reshape(-1, len(sf_axes))
        shape = tuple(len(a) for a in sf_axes)
        idx_w = []
        for k, ax in enumerate(sf_axes):
            lx = np.log(ax)
            x = np.log(sf[:, k])
            i = np.clip(np.searchsorted(lx, x) - 1, 0, len(lx) - 2)
            w = (x - lx[i]) / (lx[i + 1] - lx[i])
            idx_w.append((i, w))
        cols, weights = [], []
        for corner in range(2 ** len(sf_axes)):
            flat = np.zeros(len(sf), dtype=int)
            wt = np.ones(len(sf))
            for k, (i, w) in enumerate(idx_w):
                up = (corner >> k) & 1
                flat = flat * shape[k] + i + up
                wt = wt * (w if up else 1.0 - w)
            cols.append(flat)
            weights.append(wt)
        self.cols = np.stack(cols, axis=1)
        self.weights = np.stack(weights, axis=1)

    def __call__(self, node_values):
        node_values = np.asarray(node_values)
        return np.einsum("nk,nk...->n...", self.weights, node_values[self.cols])


def conjugate_samples(grid: TransformGrid, interp: SfInterpolator, delta):
    """``C`` and its maximizing costly price at the samples behind ``interp``.

    The envelope fibers are interpolated in log-sf first and maximized
    afterwards, so kinks of ``C`` in ``sf`` are not snapped to grid nodes.
    With one costly asset the maximizer of a convex combination of concave
    fibers lies between the fibers' own maximizers, so only that index range
    is scanned; samples outside the grid (extrapolation weights) are
    scanned in full.  Several costly assets fall back to interpolating the
    node-wise conjugate.  Ties go to the smallest costly node.
    """
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (grid.dc,))
    n = len(interp.cols)
    if not finite_domain(grid, delta):
        return np.full(n, np.inf), np.full((n, grid.dc), np.nan)
    if grid.dc > 1:
        vals, arg = conjugate_nodes(grid, delta)
        return interp(vals), interp(arg)
    x = grid.sc_axes[0]
    node_vals = grid.Ghat_values - delta[0] * x[None, :]
    top = node_vals.max(axis=1)
    node_arg = np.argmax(node_vals >= (top - 1e-12 * np.maximum(1.0, np.abs(top)))[:, None], axis=1)
    cand = node_arg[interp.cols]
    w, cols = interp.weights, interp.cols
    best, arg = _scan(node_vals, w, cols, cand.min(axis=1), cand.max(axis=1))
    outside = np.flatnonzero(np.any((w < 0.0) | (w > 1.0), axis=1))
    if len(outside):
        full = np.einsum("nk,nkj->nj", w[outside], node_vals[cols[outside]])
        ftop = full.max(axis=1)
        best[outside] = ftop
        arg[outside] = np.argmax(full >= (ftop - 1e-12 * np.maximum(1.0, np.abs(ftop)))[:, None], axis=1)
    return best, x[arg][:, None]


def _scan(node_vals, w, cols, lo, hi):
    """Max over costly indices ``lo..hi`` of the interpolated fibers.

    Each fiber is concave in the costly index, so the first index whose
    forward difference is nonpositive is the (smallest) maximizer; it is
    found by bisection, vectorized over samples.
    """
    def at(j):
        return np.einsum("nk,nk->n", w, node_vals[cols, j[:, None]])

    lo, hi = lo.copy(), hi.copy()
    while True:
        open_ = lo < hi
        if not open_.any():
            break
        mid = (lo + hi) // 2
        idx = np.flatnonzero(open_)
        m = mid[idx]
        a = np.einsum("nk,nk->n", w[idx], node_vals[cols[idx], m[:, None]])
        b = np.einsum("nk,nk->n", w[idx], node_vals[cols[idx], m[:, None] + 1])
        down = b <= a + 1e-12 * np.maximum(1.0, np.abs(a))
        hi[idx] = np.where(down, m, hi[idx])
        lo[idx] = np.where(down, lo[idx], m + 1)
    return at(lo), lo


def conjugate_C(grid: TransformGrid, sf, delta):
    """``C(sf; delta) = sup_sc Ghat(sf, sc) - delta . sc`` at free prices ``sf``.

    ``+inf`` (not an overflow) when some ``delta_i`` is below the certified
    asymptotic slope of ``Ghat`` in ``sc_i``.
    """
    sf = np.asarray(sf, dtype=float)
    out_shape = sf.shape if grid.df == 1 and sf.ndim <= 1 else sf.shape[:-1]
    interp = SfInterpolator(grid.sf_axes, sf.reshape(-1, grid.df))
    vals, _ = conjugate_samples(grid, interp, delta)
    return vals.reshape(out_shape)


def ghat_at(grid: TransformGrid, sf, sc):
    """Evaluate the envelope at arbitrary ``(sf, sc)`` pairs.

    Linear in log-sf between free nodes, linear in sc between costly nodes,
    continued with the tail slope beyond the last costly node.
    """
    sf = np.asarray(sf, dtype=float).reshape(-1, grid.df)
    sc = np.asarray(sc, dtype=float).reshape(-1, grid.dc)
    interp = SfInterpolator(grid.sf_axes, sf)
    rows = interp(grid.Ghat_values)  # (n, n_sc) fiber per sample
    if grid.dc == 1:
        x = grid.sc_axes[0]
        j = np.clip(np.searchsorted(x, sc[:, 0]) - 1, 0, len(x) - 2)
        w = (sc[:, 0] - x[j]) / (x[j + 1] - x[j])
        n = np.arange(len(sc))
        val = rows[n, j] * (1 - w) + rows[n, j + 1] * w
        beyond = sc[:, 0] > x[-1]
        val[beyond] = rows[beyond, -1] + grid.sc_slope[0] * (sc[beyond, 0] - x[-1])
        return val
    from scipy.interpolate import RegularGridInterpolator

    shape = tuple(len(a) for a in grid.sc_axes)
    out = np.empty(len(sc))
    for k in range(len(sc)):
        f = RegularGridInterpolator(grid.sc_axes, rows[k].reshape(shape),
                                    bounds_error=False, fill_value=None)
        out[k] = f(sc[k][None, :])[0]
    return out


# ---------------------------------------------------------------- persistence

def save_grid(grid: TransformGrid, directory):
    """Write ``header.json`` plus ``values.csv`` (one row per grid node)."""
    os.makedirs(directory, exist_ok=True)
    header = {
        "sf_axes": [a.tolist() for a in grid.sf_axes],
        "sc_axes": [a.tolist() for a in grid.sc_axes],
        "sc_slope": grid.sc_slope.tolist(),
        "sc_bounds": [list(b) for b in grid.sc_bounds],
        "growth_constants": list(grid.growth_constants) if grid.growth_constants else None,
        "meta": grid.meta,
    }
    with open(os.path.join(directory, "header.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    sf = np.repeat(grid.sf_nodes, len(grid.sc_nodes), axis=0)
    sc = np.tile(grid.sc_nodes, (len(grid.sf_nodes), 1))
    cols = [sf, sc, grid.G_values.reshape(-1, 1)]
    names = [f"sf{k + 1}" for k in range(grid.df)] + [f"sc{k + 1}" for k in range(grid.dc)] + ["G"]
    if grid.Ghat_values is not None:
        cols.append(grid.Ghat_values.reshape(-1, 1))
        names.append("Ghat")
    np.savetxt(os.path.join(directory, "values.csv"), np.hstack(cols), delimiter=",",
               header=",".join(names), comments="", fmt="%.17g")


def load_grid(directory) -> TransformGrid:
    with open(os.path.join(directory, "header.json")) as fh:
        h = json.load(fh)
    data = np.loadtxt(os.path.join(directory, "values.csv"), delimiter=",", skiprows=1, ndmin=2)
    sf_axes = tuple(np.array(a) for a in h["sf_axes"])
    sc_axes = tuple(np.array(a) for a in h["sc_axes"])
    n_sf = int(np.prod([len(a) for a in sf_axes]))
    n_sc = int(np.prod([len(a) for a in sc_axes]))
    k = len(sf_axes) + len(sc_axes)
    G = data[:, k].reshape(n_sf, n_sc)
    Ghat = data[:, k + 1].reshape(n_sf, n_sc) if data.shape[1] > k + 1 else None
    gc = tuple(h["growth_constants"]) if h["growth_constants"] else None
    return TransformGrid(sf_axes=sf_axes, sc_axes=sc_axes, G_values=G,
                         sc_slope=np.array(h["sc_slope"]), sc_bounds=tuple(map(tuple, h["sc_bounds"])),
                         Ghat_values=Ghat, growth_constants=gc, meta=h["meta"])
