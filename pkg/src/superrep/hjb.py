"""Bounded-control lower bound for the super-replication price.

For one free and one costly asset the value

    v_kappa(t, z) = sup_{|mu| <= kappa} E[Ghat(Z^mu(T))],

where ``Z^mu`` follows the free price and ``dZ_c = Z_c mu . dW``, solves

    v_t + 1/2 sup_mu Tr[sigma_mu' D^2 v sigma_mu] = 0,   v(T) = Ghat.

With ``x = log z`` the generator reads
``1/2 [a11 (v_11 - v_1) + 2 a12 v_12 + a22 (v_22 - v_2)]`` with
``a11 = |sigma_f|^2``, ``a12 = sigma_f . mu`` and ``a22 = |mu|^2``.  It is
stepped backwards with an explicit scheme: central differences, the
seven-point cross stencil matching the sign of ``a12``, and boundary
values extrapolated linearly in ``z``.  Any fixed control is admissible,
so ``v_kappa(0, S_f(0), xi * S_c(0)) <= p`` for every dual vertex ``xi``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantError
from .market import MarketModel, _antithetic
from .payoff import TransformGrid, ghat_at

CFL_SAFETY = 0.9


def control_directions():
    """Unit vectors of the nonzero sign patterns in ``{-1, 0, 1}^2``."""
    dirs = [np.array(s, dtype=float) for s in itertools.product((-1, 0, 1), repeat=2) if any(s)]
    return np.array([d / np.linalg.norm(d) for d in dirs])


def mu_ladder(kappa, ladder=(), fractions=(0.5, 1.0)):
    """Controls ``{0} U {f * k * dir}`` over ladder levels ``k <= kappa``.

    Taking the union over the ladder makes the sets nested in ``kappa``.
    """
    levels = sorted({float(k) for k in tuple(ladder) + (kappa,) if k <= kappa})
    mags = sorted({f * k for k in levels for f in fractions if f * k > 0})
    mus = [np.zeros(2)] + [m * d for m in mags for d in control_directions()]
    return np.array(mus)


@dataclass(frozen=True)
class ControlProblem:
    kappa: float
    z_axes: tuple  # (free axis, costly axis), log-spaced, in price units
    t_steps: int
    mu_set: np.ndarray  # (n_controls, 2): relative vol row of the costly price

    def __post_init__(self):
        mu = np.asarray(self.mu_set, dtype=float)
        if mu.ndim != 2 or mu.shape[1] != 2:
            raise InvariantError("ControlProblem: controls must be 1 x 2 rows (df = dc = 1)")
        if not np.any(np.all(mu == 0.0, axis=1)):
            raise InvariantError("ControlProblem: control set must contain 0")
        if np.any(np.linalg.norm(mu, axis=1) > self.kappa * (1 + 1e-12) + 1e-15):
            raise InvariantError("ControlProblem: control magnitude exceeds kappa")
        if len(self.z_axes) != 2 or any(len(a) < 5 for a in self.z_axes):
            raise InvariantError("ControlProblem: need two axes with at least 5 nodes")
        object.__setattr__(self, "mu_set", mu)


def make_problem(kappa, model: MarketModel, n_nodes=(81, 81), free_width_sd=5.0,
                 costly_center=None, costly_half_width=math.log(50.0), t_steps=100,
                 ladder=()) -> ControlProblem:
    """Lattice centred on the initial prices; the costly axis spans
    ``center * exp(+-costly_half_width)``."""
    if model.df != 1 or model.dc != 1:
        raise InvariantError("hjb: only df = dc = 1 is supported")
    hw = max(free_width_sd * float(model.free_vol_norm()[0]) * math.sqrt(model.T), 0.5)
    c = float(costly_center if costly_center is not None else model.s0[1])
    ax1 = np.exp(np.linspace(math.log(model.s0[0]) - hw, math.log(model.s0[0]) + hw, n_nodes[0]))
    ax2 = np.exp(np.linspace(math.log(c) - costly_half_width, math.log(c) + costly_half_width, n_nodes[1]))
    return ControlProblem(float(kappa), (ax1, ax2), int(t_steps), mu_ladder(kappa, ladder))


@dataclass
class ValueGrid:
    kappa: float
    z_axes: tuple
    values0: np.ndarray  # v(0, .) on the lattice
    slices: list  # [(t, values)] at a few dates, ending with v(T) = Ghat
    policy_times: np.ndarray
    policy: np.ndarray = field(repr=False)  # (n_policy, n1, n2) indices into mu_set
    mu_set: np.ndarray = field(repr=False)
    dt: float = 0.0
    n_steps: int = 0
    cfl_ratio: float = 0.0  # dt / stability bound
    refined: bool = False  # time step was reduced to satisfy the bound
    monotone_controls: float = 0.0  # share of controls whose stencil weights are all >= 0
    nonmonotone_share: float = 0.0  # share of node updates that used such a control
    boundary: str = "linear-in-z extrapolation"

    def at(self, z, values=None):
        """Bilinear interpolation in log coordinates (clamped to the lattice)."""
        v = self.values0 if values is None else values
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.empty(len(z))
        lx = [np.log(a) for a in self.z_axes]
        idx, wts = [], []
        for k in range(2):
            x = np.clip(np.log(z[:, k]), lx[k][0], lx[k][-1])
            i = np.clip(np.searchsorted(lx[k], x) - 1, 0, len(lx[k]) - 2)
            idx.append(i)
            wts.append((x - lx[k][i]) / (lx[k][i + 1] - lx[k][i]))
        (i, j), (u, w) = idx, wts
        out[:] = ((1 - u) * (1 - w) * v[i, j] + u * (1 - w) * v[i + 1, j]
                  + (1 - u) * w * v[i, j + 1] + u * w * v[i + 1, j + 1])
        return out

    def to_csv(self, path, values=None):
        v = self.values0 if values is None else values
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z_free", "z_costly", "value"])
            for a, row in zip(self.z_axes[0], v):
                for b, x in zip(self.z_axes[1], row):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(x))])


def _coefficients(a11, a12, a22, h1, h2):
    """Off-centre stencil weights of the generator (both drift signs)."""
    c = abs(a12) / (2 * h1 * h2)
    return np.array([
        0.5 * (a11 / h1 ** 2 - a11 / (2 * h1)) - c,
        0.5 * (a11 / h1 ** 2 + a11 / (2 * h1)) - c,
        0.5 * (a22 / h2 ** 2 - a22 / (2 * h2)) - c,
        0.5 * (a22 / h2 ** 2 + a22 / (2 * h2)) - c,
        c,
    ])


def stability_bound(problem: ControlProblem, sig_f):
    """Largest explicit time step for which no node weight turns negative
    through the centre term, over all controls."""
    lx = [np.log(a) for a in problem.z_axes]
    h1, h2 = lx[0][1] - lx[0][0], lx[1][1] - lx[1][0]
    a11 = float(sig_f @ sig_f)
    worst = 0.0
    for mu in problem.mu_set:
        a12, a22 = float(sig_f @ mu), float(mu @ mu)
        worst = max(worst, a11 / h1 ** 2 + a22 / h2 ** 2 + abs(a12) / (h1 * h2))
    return CFL_SAFETY / worst if worst > 0 else math.inf


def _extrapolate(V, z1, z2):
    """Boundary rows/columns linear in ``z`` from the two adjacent nodes."""
    def lin(za, zb, zc, va, vb):
        return va + (vb - va) * (zc - za) / (zb - za)

    V[0, :] = lin(z1[1], z1[2], z1[0], V[1, :], V[2, :])
    V[-1, :] = lin(z1[-2], z1[-3], z1[-1], V[-2, :], V[-3, :])
    V[:, 0] = lin(z2[1], z2[2], z2[0], V[:, 1], V[:, 2])
    V[:, -1] = lin(z2[-2], z2[-3], z2[-1], V[:, -2], V[:, -3])


def solve_hjb(problem: ControlProblem, grid: TransformGrid, model: MarketModel, dt=None,
              n_slices=5, n_policy=256) -> ValueGrid:
    """Explicit backward stepping of the bounded-control equation.

    ``dt`` defaults to ``T / t_steps``; if that exceeds the stability bound
    the step count is raised (``refined=True``).  Pass a common ``dt`` to
    share one time grid across a ladder of ``kappa``.
    """
    if model.df != 1 or model.dc != 1 or grid.df != 1 or grid.dc != 1:
        raise InvariantError("hjb: only df = dc = 1 is supported")
    if not model.constant_vol:
        raise InvariantError("hjb: the lattice solver needs constant vol")
    z1, z2 = problem.z_axes
    lx1, lx2 = np.log(z1), np.log(z2)
    h1, h2 = lx1[1] - lx1[0], lx2[1] - lx2[0]
    sig_f = np.asarray(model.vol[0], dtype=float)
    bound = stability_bound(problem, sig_f)
    dt_req = model.T / problem.t_steps if dt is None else float(dt)
    refined = dt_req > bound
    n_steps = int(math.ceil(model.T / min(dt_req, bound) - 1e-9))
    dt = model.T / n_steps

    mu = problem.mu_set
    a11 = float(sig_f @ sig_f)
    a12 = mu @ sig_f
    a22 = np.einsum("ij,ij->i", mu, mu)
    mono = np.array([np.all(_coefficients(a11, b, c, h1, h2) >= -1e-14) for b, c in zip(a12, a22)])

    Z1, Z2 = np.meshgrid(z1, z2, indexing="ij")
    V = ghat_at(grid, Z1.reshape(-1, 1), Z2.reshape(-1, 1)).reshape(Z1.shape)
    terminal = V.copy()
    slice_steps = set(np.linspace(0, n_steps, n_slices).round().astype(int).tolist())
    policy_steps = np.linspace(0, n_steps - 1, min(n_policy, n_steps)).round().astype(int)
    policy_set = {int(k): r for r, k in enumerate(policy_steps)}
    policy = np.zeros((len(policy_steps),) + V.shape, dtype=np.int16)
    slices = [(model.T, terminal)]
    nonmono = 0.0

    c = slice(1, -1)
    for k in range(n_steps - 1, -1, -1):
        C = V[c, c]
        E, W = V[2:, c], V[:-2, c]
        N, S = V[c, 2:], V[c, :-2]
        v1 = (E - W) / (2 * h1)
        v11 = (E - 2 * C + W) / h1 ** 2
        v2 = (N - S) / (2 * h2)
        v22 = (N - 2 * C + S) / h2 ** 2
        base = 2 * C - E - W - N - S
        v12p = (V[2:, 2:] + V[:-2, :-2] + base) / (2 * h1 * h2)
        v12m = -(V[2:, :-2] + V[:-2, 2:] + base) / (2 * h1 * h2)
        diff2 = v22 - v2
        ham = (np.where(a12[:, None, None] >= 0, a12[:, None, None] * v12p[None], a12[:, None, None] * v12m[None])
               + 0.5 * a22[:, None, None] * diff2[None])
        best = np.argmax(ham, axis=0)
        H = np.take_along_axis(ham, best[None], axis=0)[0]
        nonmono += float(np.mean(~mono[best]))
        V[c, c] = C + dt * (0.5 * a11 * (v11 - v1) + H)
        _extrapolate(V, z1, z2)
        if k in policy_set:
            full = np.zeros(V.shape, dtype=np.int16)
            full[c, c] = best
            policy[policy_set[k]] = full
        if k in slice_steps and k > 0:
            slices.append((k * dt, V.copy()))
    slices.append((0.0, V.copy()))
    slices.sort(key=lambda s: s[0])
    return ValueGrid(kappa=problem.kappa, z_axes=problem.z_axes, values0=V, slices=slices,
                     policy_times=policy_steps * dt, policy=policy, mu_set=mu, dt=dt,
                     n_steps=n_steps, cfl_ratio=dt / bound if np.isfinite(bound) else 0.0,
                     refined=bool(refined), monotone_controls=float(np.mean(mono)),
                     nonmonotone_share=nonmono / n_steps)


def solve_ladder(kappas, grid: TransformGrid, model: MarketModel, **problem_kw):
    """Solve every ``kappa`` with nested control sets and one shared time step."""
    kappas = sorted(float(k) for k in kappas)
    problems = [make_problem(k, model, ladder=kappas, **problem_kw) for k in kappas]
    sig_f = np.asarray(model.vol[0], dtype=float)
    dt = min(min(stability_bound(p, sig_f) for p in problems), model.T / problems[0].t_steps)
    return [solve_hjb(p, grid, model, dt=dt) for p in problems]


def coarse_problem(problem: ControlProblem) -> ControlProblem:
    """Same problem on every other lattice node (doubled mesh width)."""
    axes = tuple(a[::2] if len(a) % 2 else a[:-1][::2] for a in problem.z_axes)
    return ControlProblem(problem.kappa, axes, max(problem.t_steps // 4, 1), problem.mu_set)


def scheme_tolerance(problem: ControlProblem, grid: TransformGrid, model: MarketModel, points,
                     fine: ValueGrid | None = None):
    """``max |v_h - v_2h|`` at ``points``: the change from doubling the mesh.

    The coarse run takes four times the fine time step, so both errors
    shrink together; that step is always within the coarse stability bound.
    """
    fine = fine or solve_hjb(problem, grid, model)
    coarse = solve_hjb(coarse_problem(problem), grid, model, dt=4 * fine.dt)
    return float(np.max(np.abs(fine.at(points) - coarse.at(points))))


def comparison_points(model: MarketModel, section):
    """``(S_f(0), xi * S_c(0))`` for every dual vertex ``xi``."""
    return np.array([[model.s0[0], v[1] * model.s0[1]] for v in section.vertices])


def control_mc_lower_bound(problem: ControlProblem, grid: TransformGrid, model: MarketModel,
                           policy=None, n_paths=20000, seed=0, z0=None, n_steps=256):
    """Monte Carlo value of ``Ghat(Z^mu(T))`` under a fixed feedback control.

    ``policy`` is a :class:`ValueGrid` (its argmax controls, nearest lattice
    node, latest stored date) or a constant ``mu`` row.  Each step is an
    exact lognormal step with the control frozen over it, so ``Z`` is a
    positive martingale and the result is a lower bound on ``v_kappa`` up
    to Monte Carlo error.  Returns ``(mean, stderr)``.
    """
    if model.df != 1 or model.dc != 1:
        raise InvariantError("hjb: only df = dc = 1 is supported")
    if policy is None:
        policy = np.zeros(2)
    if not isinstance(policy, ValueGrid):
        mu_const = np.asarray(policy, dtype=float).reshape(2)
        if np.linalg.norm(mu_const) > problem.kappa * (1 + 1e-12) + 1e-15:
            raise InvariantError("control_mc_lower_bound: policy magnitude exceeds kappa")
    elif np.max(np.linalg.norm(policy.mu_set, axis=1)) > problem.kappa * (1 + 1e-12) + 1e-15:
        raise InvariantError("control_mc_lower_bound: policy magnitude exceeds kappa")
    z0 = np.asarray(z0 if z0 is not None else model.s0, dtype=float)
    sig_f = np.asarray(model.sigma(0.0, model.s0)[0], dtype=float)
    dt = model.T / n_steps
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dW = _antithetic(rng, n_paths, n_steps, 2) * math.sqrt(dt)
    x = np.tile(np.log(z0), (n_paths, 1))
    if isinstance(policy, ValueGrid):
        lx = [np.log(a) for a in policy.z_axes]
    for k in range(n_steps):
        t = k * dt
        if isinstance(policy, ValueGrid):
            r = max(int(np.searchsorted(policy.policy_times, t + 1e-12) - 1), 0)
            i = np.clip(np.rint((x[:, 0] - lx[0][0]) / (lx[0][1] - lx[0][0])).astype(int), 1, len(lx[0]) - 2)
            j = np.clip(np.rint((x[:, 1] - lx[1][0]) / (lx[1][1] - lx[1][0])).astype(int), 1, len(lx[1]) - 2)
            mu = policy.mu_set[policy.policy[r, i, j]]
        else:
            mu = np.broadcast_to(mu_const, (n_paths, 2))
        x[:, 0] += dW[:, k] @ sig_f - 0.5 * dt * float(sig_f @ sig_f)
        x[:, 1] += np.einsum("nj,nj->n", mu, dW[:, k]) - 0.5 * dt * np.einsum("nj,nj->n", mu, mu)
    z = np.exp(x)
    vals = ghat_at(grid, z[:, :1], z[:, 1:])
    if n_paths % 2 == 0:
        vals = 0.5 * (vals[0::2] + vals[1::2])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(len(vals)))


def dp_consistency(value: ValueGrid, grid: TransformGrid, model: MarketModel, n_mc=4000, seed=0,
                   sub=8):
    """Worst shortfall of ``v(t_a, z)`` below a one-step Monte Carlo estimate
    of ``E[v(t_b, Z(t_b))]`` under ``mu = 0``, on a sub-lattice, between the
    first two stored slices.  Dynamic programming makes it ``<= 0`` up to
    interpolation and Monte Carlo error."""
    (ta, va), (tb, vb) = value.slices[0], value.slices[1]
    sig_f = np.asarray(model.vol[0], dtype=float)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_mc)
    step = math.sqrt(tb - ta) * float(np.linalg.norm(sig_f))
    worst = -math.inf
    z1, z2 = value.z_axes
    for i in range(sub, len(z1) - sub, sub):
        for j in range(sub, len(z2) - sub, sub):
            f = z1[i] * np.exp(step * z - 0.5 * step * step)
            pts = np.stack([f, np.full(n_mc, z2[j])], axis=1)
            est = float(np.mean(value.at(pts, vb)))
            worst = max(worst, est - float(va[i, j]))
    return worst
