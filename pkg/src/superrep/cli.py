"""Command line entry point: read an instance file, run a pipeline, write reports.

Subcommands ``price``, ``hedge``, ``envelope``, ``hjb`` and ``all`` take an
instance file (JSON or YAML).  Reports are JSON, curves and surfaces CSV,
figures PNG.  Exit status 0 on success, 2 on a validation error, 3 on a
numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import plotting
from .cone import CostMatrix
from .errors import InvariantError, NumericFailure
from .hedger import LatticeOptions, build_schedule, verify_dominance, write_margins_csv
from .hjb import comparison_points, make_problem, scheme_tolerance, solve_ladder
from .market import MarketModel, simulate
from .payoff import Growth, catalog_payoff, check_admissibility, save_grid, tabulated_payoff
from .pricer import PriceOptions, build_transform, prepare, price

OUT_ENV = "SUPERREP_OUT"
DEFAULT_OUT = "superrep-out"
GAP_TARGET = 0.15
ADMISSIBILITY_SAMPLES = 2000


# ---------------------------------------------------------------- schema

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    df: int = Field(ge=1)
    dc: int = Field(ge=1)
    horizon_years: float = Field(gt=0)
    s0_currency: list[float]
    vol_per_sqrt_year: list[list[float]]


class CostsSection(_Strict):
    lambda_rates: list[list[float]]


class GrowthSection(_Strict):
    c_currency: float = 0.0
    delta_free_units: list[float] = []
    delta_costly_units: float = 0.0

    def build(self):
        return Growth(c=self.c_currency, delta_f=tuple(self.delta_free_units), delta=self.delta_costly_units)


class PayoffSection(_Strict):
    catalog: str | None = None
    params_currency: dict[str, float] = {}
    growth: GrowthSection | None = None
    tabulated_csv: str | None = None
    sc_growth: list[Literal["bounded", "linear", "superlinear"]] | None = None
    sc_slope_units: list[float] | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.catalog is None) == (self.tabulated_csv is None):
            raise ValueError("payoff needs exactly one of 'catalog' or 'tabulated_csv'")
        if self.tabulated_csv is not None:
            if self.growth is None or self.sc_growth is None or self.sc_slope_units is None:
                raise ValueError("a tabulated payoff needs 'growth', 'sc_growth' and 'sc_slope_units'")
        return self


class Tolerances(_Strict):
    objective: float = Field(1e-8, gt=0)
    delta: float = Field(1e-6, gt=0)
    dominance: float | None = Field(None, ge=0)
    probe_eps: float = Field(0.01, gt=0, lt=1)


class NumericsSection(_Strict):
    n_paths: int = Field(200_000, ge=2)
    n_steps: int = Field(1, ge=1)
    seed: int = Field(12345, ge=0)
    n_sf: int = Field(801, ge=5)
    n_sc: int = Field(201, ge=5)
    sf_width_sd: float = Field(8.0, gt=0)
    hedge_paths: int = Field(10_000, ge=2)
    hedge_steps: int = Field(256, ge=1)
    lattice_steps: int = Field(256, ge=1)
    kappas: list[float] = [0.0, 1.0, 2.0, 5.0]
    hjb_nodes: int = Field(81, ge=5)
    hjb_free_width_sd: float = Field(5.0, gt=0)
    tolerances: Tolerances = Tolerances()


class InstanceFile(_Strict):
    model: ModelSection
    costs: CostsSection
    payoff: PayoffSection
    numerics: NumericsSection = NumericsSection()


# ---------------------------------------------------------------- loading

class Instance:
    """Validated instance with its domain objects built."""

    model: MarketModel
    cost: CostMatrix
    payoff: object
    numerics: NumericsSection
    tolerances: Tolerances
    seed: int
    threads: int
    sha256: str

    def price_options(self):
        n = self.numerics
        return PriceOptions(n_paths=n.n_paths, seed=self.seed, n_steps=n.n_steps, n_sf=n.n_sf,
                            n_sc=n.n_sc, sf_width_sd=n.sf_width_sd,
                            tol_objective=self.tolerances.objective,
                            tol_delta=self.tolerances.delta, threads=self.threads)

    def stamp(self, payload):
        return {**payload, "instance_sha256": self.sha256, "seed": self.seed}


def _catalog(p: PayoffSection, df, dc):
    try:
        spec = catalog_payoff(p.catalog, df=df, dc=dc, **p.params_currency)
    except TypeError as exc:
        raise InvariantError(f"PayoffSpec: bad parameters for {p.catalog!r}: {exc}") from None
    if p.growth is not None:
        spec = replace(spec, growth=p.growth.build())
    return spec


def _read_table(path, p: PayoffSection):
    """CSV with one price column per asset (free first) then ``g0, g1..gdc``."""
    dc = len(p.sc_growth)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    d = data.shape[1] - (1 + dc)
    if d <= dc:
        raise InvariantError("PayoffSpec: tabulated CSV needs price columns then 1 + dc value columns")
    axes = [np.unique(data[:, k]) for k in range(d)]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != len(data):
        raise InvariantError("PayoffSpec: tabulated CSV is not a full rectangular grid")
    order = np.lexsort(data[:, :d][:, ::-1].T)
    values = data[order, d:].reshape(shape + (1 + dc,))
    return tabulated_payoff(axes, values, p.growth.build(), p.sc_growth, p.sc_slope_units)


def load_instance(path, seed=None, threads=1, overrides=None) -> Instance:
    """Parse and validate an instance file; the hash covers any tabulated CSV too."""
    path = Path(path)
    raw = path.read_bytes()
    data = yaml.safe_load(raw) if path.suffix.lower() in (".yaml", ".yml") else json.loads(raw)
    spec = InstanceFile.model_validate(data)
    digest = hashlib.sha256(raw)
    m = spec.model
    inst = Instance()
    inst.model = MarketModel(m.df, m.dc, m.horizon_years, np.array(m.s0_currency, dtype=float),
                             np.array(m.vol_per_sqrt_year, dtype=float))
    inst.cost = CostMatrix(m.dc, np.array(spec.costs.lambda_rates, dtype=float))
    if spec.payoff.catalog is not None:
        inst.payoff = _catalog(spec.payoff, m.df, m.dc)
    else:
        table = path.parent / spec.payoff.tabulated_csv
        digest.update(table.read_bytes())
        inst.payoff = _read_table(table, spec.payoff)
    if (inst.payoff.df, inst.payoff.dc) != (m.df, m.dc):
        raise InvariantError("PayoffSpec: payoff dimensions do not match the model")
    inst.numerics = spec.numerics
    tol = spec.numerics.tolerances.model_dump()
    tol.update(overrides or {})
    inst.tolerances = Tolerances.model_validate(tol)
    inst.seed = int(spec.numerics.seed if seed is None else seed)
    inst.threads = max(int(threads), 1)
    inst.sha256 = digest.hexdigest()
    return inst


# ---------------------------------------------------------------- output

def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_curve(curve, path):
    dc = len(curve[0]["delta"]) if curve else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis"] + [f"delta{k + 1}" for k in range(dc)] + ["objective"])
        for row in curve:
            w.writerow([row["axis"]] + [repr(float(v)) for v in row["delta"]] + [repr(float(row["objective"]))])


# ---------------------------------------------------------------- pipelines

class Run:
    def __init__(self, inst: Instance, out):
        self.inst = inst
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.setup = None
        self.report = None

    def _check_growth(self, batch):
        check_admissibility(self.inst.payoff, self.setup.section, batch.terminal[:ADMISSIBILITY_SAMPLES])

    def price(self, batch=None):
        inst = self.inst
        opts = inst.price_options()
        self.setup = prepare(inst.payoff, inst.model, inst.cost, opts, batch=batch)
        self._check_growth(self.setup.batch)
        r = price(inst.payoff, inst.model, inst.cost, opts, setup=self.setup)
        self.report = r
        payload = r.to_dict()
        curve = payload.pop("objective_curve")
        write_json(self.out / "price_report.json", inst.stamp(payload))
        _write_curve(curve, self.out / "objective_curve.csv")
        self.setup.section.to_csv(self.out / "polar_vertices.csv")
        axis0 = [c for c in curve if c["axis"] == 0]
        plotting.plot_objective_curve(axis0, r.delta_hat, r.price, self.out / "objective_curve.png")
        return r

    def hedge(self, batch):
        inst, n = self.inst, self.inst.numerics
        lattice = LatticeOptions(n_steps=n.lattice_steps)
        schedule = build_schedule(self.report, self.setup.grid, inst.model, lattice,
                                  payoff=inst.payoff, cost=inst.cost)
        sub = batch.head(n.hedge_paths)
        rep = verify_dominance(schedule, sub, inst.payoff, self.setup.section, self.report.price,
                               tol=inst.tolerances.dominance, probe_eps=inst.tolerances.probe_eps)
        payload = rep.to_dict()
        payload["schedule"] = schedule.diagnostics
        payload["price"] = self.report.price
        write_json(self.out / "dominance_report.json", inst.stamp(payload))
        write_margins_csv(rep, self.out / "margins.csv")
        plotting.plot_margins(rep.margins, rep.tolerance, self.out / "margins.png")
        return rep

    def envelope(self):
        inst = self.inst
        _, _, grid = build_transform(inst.payoff, inst.model, inst.cost, inst.price_options())
        d = self.out / "envelope"
        save_grid(grid, d)
        write_json(d / "envelope_meta.json", inst.stamp({"df": grid.df, "dc": grid.dc,
                                                        "sc_slope": grid.sc_slope}))
        m = inst.model
        sf = m.s0[0] * math.exp(float(m.free_vol_norm()[0]) * math.sqrt(m.T))
        plotting.plot_envelope_fiber(grid, sf, d / "envelope_fiber.png",
                                     sc_max=4.0 * float(m.s0[m.df]) if m.dc == 1 else None)
        return grid

    def hjb(self):
        inst, n = self.inst, self.inst.numerics
        if self.report is None:
            self.price()
        model, grid, section = inst.model, self.setup.grid, self.setup.section
        p = self.report.price
        pts = comparison_points(model, section)

        def ladder(nodes):
            kw = dict(n_nodes=(nodes, nodes), free_width_sd=n.hjb_free_width_sd)
            vals = solve_ladder(n.kappas, grid, model, **kw)
            rows = []
            for v in vals:
                prob = make_problem(v.kappa, model, ladder=n.kappas, **kw)
                tol = scheme_tolerance(prob, grid, model, pts, fine=v)
                at = v.at(pts)
                rows.append({"kappa": v.kappa, "value": float(np.max(at)),
                             "vertex_values": at, "scheme_tolerance": tol,
                             "below_price": bool(np.all(at <= p + tol + 3 * self.report.mc_stderr)),
                             "nonmonotone_share": v.nonmonotone_share, "n_steps": v.n_steps})
            return vals, rows

        vals, rows = ladder(n.hjb_nodes)
        d = self.out / "hjb"
        d.mkdir(exist_ok=True)
        for v in vals:
            v.to_csv(d / f"value_kappa_{v.kappa:g}.csv")
        plotting.plot_hjb_contour(vals[-1], d / f"value_kappa_{vals[-1].kappa:g}.png")
        gap = p - rows[-1]["value"]
        payload = {"price": p, "mc_stderr": self.report.mc_stderr, "nodes": n.hjb_nodes,
                   "ladder": rows, "gap": gap, "gap_relative": gap / p if p else math.nan,
                   "monotone_in_kappa": bool(np.all(np.diff([r["value"] for r in rows]) >= -1e-12)),
                   "gap_target": GAP_TARGET, "gap_flagged": False}
        if p and gap / p > GAP_TARGET:
            _, fine = ladder(2 * n.hjb_nodes - 1)
            payload["gap_flagged"] = True
            payload["refined"] = {"nodes": 2 * n.hjb_nodes - 1, "ladder": fine,
                                  "gap": p - fine[-1]["value"]}
        with open(self.out / "hjb_gap.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kappa", "value", "scheme_tolerance", "price", "gap", "gap_relative"])
            for r in rows:
                g = p - r["value"]
                w.writerow([repr(r["kappa"]), repr(r["value"]), repr(r["scheme_tolerance"]),
                            repr(p), repr(g), repr(g / p if p else math.nan)])
        write_json(d / "hjb_report.json", inst.stamp(payload))
        plotting.plot_hjb_gap([r["kappa"] for r in rows], [r["value"] for r in rows], p,
                              self.out / "hjb_gap.png")
        return payload

    def shared_batch(self):
        n = self.inst.numerics
        return simulate(self.inst.model, max(n.n_paths, n.hedge_paths), n.hedge_steps, self.inst.seed,
                        threads=self.inst.threads)


def run(subcommand, inst: Instance, out):
    r = Run(inst, out)
    if subcommand == "price":
        r.price()
    elif subcommand == "envelope":
        r.envelope()
    elif subcommand == "hedge":
        batch = r.shared_batch()
        r.price(batch)
        r.hedge(batch)
    elif subcommand == "hjb":
        r.hjb()
    elif subcommand == "all":
        batch = r.shared_batch()
        r.envelope()
        r.price(batch)
        r.hedge(batch)
        del batch
        r.hjb()
    else:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    return r


# ---------------------------------------------------------------- entry

def _override(text):
    key, sep, val = text.partition("=")
    if not sep or key not in Tolerances.model_fields:
        raise argparse.ArgumentTypeError(
            f"expected KEY=VALUE with KEY in {sorted(Tolerances.model_fields)}")
    try:
        return key, float(val)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {val!r}") from None


def build_parser():
    ap = argparse.ArgumentParser(prog="superrep", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=["price", "hedge", "envelope", "hjb", "all"])
    ap.add_argument("instance", help="instance file (.json, .yaml or .yml)")
    ap.add_argument("--seed", type=int, default=None, help="overrides numerics.seed")
    ap.add_argument("--threads", type=int, default=1, help="worker cap (results do not depend on it)")
    ap.add_argument("--out", default=None,
                    help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    ap.add_argument("--tol-override", type=_override, action="append", default=[],
                    metavar="KEY=VALUE", help="override one numerics.tolerances entry")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    try:
        inst = load_instance(args.instance, seed=args.seed, threads=args.threads,
                             overrides=dict(args.tol_override))
        run(args.subcommand, inst, out)
    except (ValidationError, InvariantError) as exc:
        print(f"superrep: invalid instance: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"superrep: cannot read instance: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"superrep: numeric failure ({exc.kind}): {exc}", file=sys.stderr)
        return 3
    print(f"superrep: wrote {args.subcommand} outputs to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
