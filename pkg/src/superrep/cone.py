"""Solvency-cone algebra for the costly block of the market.

Positions are vectors ``x`` of length ``1 + dc``: ``x[0]`` is the amount held
in the cash/free-asset account and ``x[i]`` the amount held in costly asset
``i``.  The cone order is tested through the vertices of the section of the
dual cone with unit cash coordinate.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvariantError

MAX_DC = 8
DEDUP_TOL = 1e-10
FEAS_TOL = 1e-12


@dataclass(frozen=True)
class CostMatrix:
    """Proportional cost rates ``lam[i, j]`` paid when moving value from
    account ``i`` to account ``j`` (index 0 is cash)."""

    dc: int
    lam: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float)
        n = self.dc + 1
        if self.dc < 1:
            raise InvariantError("CostMatrix: dc must be a positive integer")
        if lam.shape != (n, n):
            raise InvariantError(f"CostMatrix: lambda must be {n}x{n}, got {lam.shape}")
        if not np.all(np.isfinite(lam)):
            raise InvariantError("CostMatrix: lambda entries must be finite")
        if np.any(lam < 0):
            raise InvariantError("CostMatrix: lambda entries must be nonnegative")
        if np.any(np.diag(lam) != 0):
            raise InvariantError("CostMatrix: lambda diagonal must be zero")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def size(self):
        return self.dc + 1

    def efficiency_violations(self):
        """Pairs ``(i, j)`` with ``lam[i, j] + lam[j, i] == 0``."""
        n = self.size
        return [(i, j) for i in range(n) for j in range(i + 1, n)
                if self.lam[i, j] + self.lam[j, i] <= 0.0]


def normalize_costs(cost: CostMatrix) -> CostMatrix:
    """Replace each rate by the cheapest chain of transfers.

    ``1 + lam[i, j]`` becomes the minimum over transfer chains
    ``i -> k1 -> ... -> j`` of the product of ``1 + lam`` factors (a
    Floyd-Warshall closure on ``log(1 + lam)``).  A warning is issued when
    the matrix changes.  Raises :class:`InvariantError` when some pair of
    accounts can be exchanged for free in both directions.
    """
    w = np.log1p(cost.lam)
    n = cost.size
    for k in range(n):
        w = np.minimum(w, w[:, [k]] + w[[k], :])
    lam = np.expm1(w)
    np.fill_diagonal(lam, 0.0)
    # Remove round-off so that an already-closed matrix comes back unchanged.
    lam = np.where(np.isclose(lam, cost.lam, rtol=0.0, atol=1e-15), cost.lam, lam)
    changed = not np.array_equal(lam, cost.lam)
    out = CostMatrix(cost.dc, lam, normalized=cost.normalized or changed)
    bad = out.efficiency_violations()
    if bad:
        raise InvariantError(
            f"CostMatrix: efficiency condition lam[i,j] + lam[j,i] > 0 fails for pairs {bad}"
            " (a free round trip makes the costly block degenerate)")
    if changed:
        warnings.warn("cost matrix rewritten to its cheapest-transfer closure", stacklevel=2)
    return out


class HalfSpace(NamedTuple):
    """``xi[j] <= bound * xi[i]``."""
    i: int
    j: int
    bound: float


@dataclass(frozen=True)
class PolarSection:
    """Dual-cone section ``{xi in K*: xi[0] = 1}`` in H- and V-form."""

    dc: int
    constraints: tuple
    vertices: np.ndarray
    cost: CostMatrix = field(repr=False)

    @property
    def delta_bound(self):
        """Smallest ``delta`` with every vertex component in ``[1/delta, delta]``."""
        v = self.vertices
        return float(max(v.max(), (1.0 / v).max()))

    def violation(self, xi):
        """Largest constraint violation of ``xi`` (positive means infeasible)."""
        xi = np.asarray(xi, dtype=float)
        worst = abs(xi[..., 0] - 1.0)
        for h in self.constraints:
            worst = np.maximum(worst, xi[..., h.j] - h.bound * xi[..., h.i])
        return worst

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"xi{k}" for k in range(self.dc + 1)])
            for v in self.vertices:
                w.writerow([repr(float(a)) for a in v])


def polar_constraints(cost: CostMatrix):
    n = cost.size
    return tuple(HalfSpace(i, j, 1.0 + float(cost.lam[i, j]))
                 for i in range(n) for j in range(n) if i != j)


def _reduced_system(constraints, dc):
    """Rewrite the half-spaces as ``A y <= b`` in ``y = xi[1:]``."""
    A = np.zeros((len(constraints), dc))
    b = np.zeros(len(constraints))
    for r, h in enumerate(constraints):
        if h.i == 0:
            A[r, h.j - 1] = 1.0
            b[r] = h.bound
        elif h.j == 0:
            A[r, h.i - 1] = -h.bound
            b[r] = -1.0
        else:
            A[r, h.j - 1] = 1.0
            A[r, h.i - 1] = -h.bound
    return A, b


def _dedup(points, tol=DEDUP_TOL):
    out = []
    for p in points:
        if not any(np.max(np.abs(p - q)) <= tol for q in out):
            out.append(p)
    out = np.array(out)
    keys = np.round(out / tol).T[::-1]
    order = np.lexsort(keys)
    return out[order]


def enumerate_vertices_bruteforce(constraints, dc):
    """Vertices from every ``dc``-subset of tight constraints (small ``dc``)."""
    A, b = _reduced_system(constraints, dc)
    pts = []
    for rows in itertools.combinations(range(len(b)), dc):
        M = A[list(rows)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        y = np.linalg.solve(M, b[list(rows)])
        if np.all(A @ y <= b + FEAS_TOL * np.maximum(1.0, np.abs(b))):
            pts.append(np.concatenate([[1.0], y]))
    if not pts:
        raise InvariantError("PolarSection: empty vertex set")
    return _dedup(pts)


def enumerate_vertices_dd(constraints, dc):
    """Vertices via the double-description method on the cone ``K*``.

    The cone is ``{xi : R xi >= 0}`` with rows ``e_k`` (nonnegativity) and
    ``bound * e_i - e_j`` for each half-space.  Starting from the orthant,
    whose extreme rays are the unit vectors, the rows are inserted one at a
    time.  Rays strictly inside the new half-space are kept, rays outside
    are dropped, and every adjacent (inside, outside) pair contributes the
    ray where their segment crosses the hyperplane.  Adjacency uses the
    combinatorial test: the common zero set of the pair is contained in the
    zero set of no third ray.  Extreme rays of the final cone, scaled to
    unit cash coordinate, are the vertices of the section.
    """
    n = dc + 1
    rows = [np.eye(n)[k] for k in range(n)]
    for h in constraints:
        r = np.zeros(n)
        r[h.i] += h.bound
        r[h.j] -= 1.0
        rows.append(r)
    rows = np.array(rows)
    rays = [np.eye(n)[k] for k in range(n)]
    done = list(range(n))

    def zeros(ray):
        vals = rows[done] @ ray
        return frozenset(k for k, v in zip(done, vals) if abs(v) <= 1e-11)

    for new in range(n, len(rows)):
        vals = np.array([rows[new] @ r for r in rays])
        plus = [r for r, v in zip(rays, vals) if v > 1e-11]
        zero = [r for r, v in zip(rays, vals) if abs(v) <= 1e-11]
        minus = [(r, v) for r, v in zip(rays, vals) if v < -1e-11]
        if not minus:
            done.append(new)
            continue
        zsets = [zeros(r) for r in rays]
        created = []
        for rp in plus:
            vp = rows[new] @ rp
            zp = zeros(rp)
            for rm, vm in minus:
                common = zp & zeros(rm)
                if len(common) < n - 2:
                    continue
                adjacent = True
                for other, zo in zip(rays, zsets):
                    if other is rp or other is rm:
                        continue
                    if common <= zo:
                        adjacent = False
                        break
                if adjacent:
                    r = vp * rm - vm * rp
                    created.append(r / np.max(np.abs(r)))
        rays = plus + zero + created
        done.append(new)

    pts = [r / r[0] for r in rays if r[0] > 1e-12]
    if not pts:
        raise InvariantError("PolarSection: empty vertex set")
    return _dedup(pts)


def build_polar_section(cost: CostMatrix, method="auto") -> PolarSection:
    """Section of the positive polar cone with unit cash coordinate.

    ``method`` is ``"bruteforce"``, ``"dd"`` or ``"auto"`` (brute force for
    ``dc <= 3``, double description above).
    """
    if cost.dc > MAX_DC:
        raise InvariantError(f"PolarSection: dc={cost.dc} exceeds the supported maximum {MAX_DC}")
    bad = cost.efficiency_violations()
    if bad:
        raise InvariantError(
            f"CostMatrix: efficiency condition lam[i,j] + lam[j,i] > 0 fails for pairs {bad}")
    cons = polar_constraints(cost)
    if method == "auto":
        method = "bruteforce" if cost.dc <= 3 else "dd"
    if method == "bruteforce":
        verts = enumerate_vertices_bruteforce(cons, cost.dc)
    elif method == "dd":
        verts = enumerate_vertices_dd(cons, cost.dc)
    else:
        raise ValueError(f"unknown vertex method {method!r}")
    verts.setflags(write=False)
    return PolarSection(cost.dc, cons, verts, cost)


def liquidation_value(x, section: PolarSection):
    """``min over xi in the section of xi . x``; ``x`` is solvent iff >= 0.

    Works on stacked positions, shape ``(..., 1 + dc)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != section.dc + 1:
        raise ValueError(f"position has length {x.shape[-1]}, expected {section.dc + 1}")
    return np.min(x @ section.vertices.T, axis=-1)


def cone_geq(x, y, section: PolarSection, tol=0.0):
    """``x`` dominates ``y`` in the solvency-cone order (up to ``tol``)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    return liquidation_value(x - y, section) >= -tol
