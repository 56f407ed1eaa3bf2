"""Driftless diffusion market ``dS = diag(S) sigma(t, S) dW`` and path simulation."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .errors import InvariantError

BLOCK_SIZE = 8192
MAX_CONDITION = 1e8


@dataclass(frozen=True)
class MarketModel:
    """Prices are martingales (no drift input on purpose).

    ``vol`` is either a constant ``d x d`` matrix or a callable
    ``vol(t, s) -> (..., d, d)`` evaluated on stacked prices.  With
    ``block_certificate`` the caller asserts that the first ``df`` rows of
    ``vol`` depend on the free prices only.
    """

    df: int
    dc: int
    T: float
    s0: np.ndarray
    vol: np.ndarray | Callable
    block_certificate: bool = True
    max_condition: float = MAX_CONDITION
    _check_points: int = field(default=16, repr=False)

    def __post_init__(self):
        s0 = np.asarray(self.s0, dtype=float)
        d = self.df + self.dc
        if s0.shape != (d,) or np.any(s0 <= 0):
            raise InvariantError(f"MarketModel: s0 must hold {d} positive prices")
        if not self.T > 0:
            raise InvariantError("MarketModel: horizon T must be positive")
        object.__setattr__(self, "s0", s0)
        if not callable(self.vol):
            vol = np.asarray(self.vol, dtype=float)
            if vol.shape != (d, d):
                raise InvariantError(f"MarketModel: vol must be {d}x{d}")
            object.__setattr__(self, "vol", vol)
        self._check_invertible()

    @property
    def d(self):
        return self.df + self.dc

    @property
    def constant_vol(self):
        return not callable(self.vol)

    def sigma(self, t, s):
        """Volatility matrices at stacked prices ``s`` (shape ``(..., d)``)."""
        s = np.asarray(s, dtype=float)
        if self.constant_vol:
            return np.broadcast_to(self.vol, s.shape[:-1] + (self.d, self.d))
        return np.asarray(self.vol(t, s), dtype=float)

    def free_vol_norm(self):
        """Typical size of the free-price volatility (row norms at ``s0``)."""
        sig = self.sigma(0.0, self.s0)
        return np.linalg.norm(sig[: self.df], axis=1)

    def _check_invertible(self):
        if self.max_condition == np.inf:
            return  # caller opted out, e.g. a degenerate zero-vol test model
        if self.constant_vol:
            pts = [(0.0, self.s0)]
        else:
            rng = np.random.default_rng(0)
            ts = np.linspace(0.0, self.T, self._check_points)
            pts = [(t, self.s0 * np.exp(0.5 * rng.standard_normal(self.d))) for t in ts]
        for t, s in pts:
            cond = np.linalg.cond(self.sigma(t, s))
            if not np.isfinite(cond) or cond > self.max_condition:
                raise InvariantError(
                    f"MarketModel: vol is not invertible at t={t:.4g} (condition number {cond:.3g})")


@dataclass(frozen=True)
class PathBatch:
    n_paths: int
    n_steps: int
    times: np.ndarray
    sf_paths: np.ndarray  # (n_paths, n_steps + 1, df)
    sc_paths: np.ndarray  # (n_paths, n_steps + 1, dc)
    seed: int
    scheme: str

    @property
    def sf_T(self):
        return self.sf_paths[:, -1, :]

    @property
    def sc_T(self):
        return self.sc_paths[:, -1, :]

    @property
    def terminal(self):
        return np.concatenate([self.sf_T, self.sc_T], axis=1)

    def head(self, n):
        """The first ``n`` paths."""
        n = min(int(n), self.n_paths)
        return PathBatch(n, self.n_steps, self.times, self.sf_paths[:n], self.sc_paths[:n],
                         self.seed, self.scheme)

    def subsample(self, every):
        """Coarser batch that keeps every ``every``-th time point."""
        if self.n_steps % every:
            raise ValueError("step count is not divisible")
        return PathBatch(self.n_paths, self.n_steps // every, self.times[::every],
                         self.sf_paths[:, ::every], self.sc_paths[:, ::every], self.seed, self.scheme)


def _antithetic(rng, n, n_steps, d):
    if n % 2:
        return rng.standard_normal((n, n_steps, d))
    half = rng.standard_normal((n // 2, n_steps, d))
    z = np.empty((n, n_steps, d))
    z[0::2] = half
    z[1::2] = -half
    return z


def _exact_block(model, z, dt):
    sig = model.vol
    incr = np.sqrt(dt) * (z @ sig.T) - 0.5 * dt * np.sum(sig ** 2, axis=1)
    x = np.empty((len(z), z.shape[1] + 1, model.d))
    x[:, 0] = np.log(model.s0)
    np.cumsum(incr, axis=1, out=x[:, 1:])
    x[:, 1:] += x[:, :1]
    return np.exp(x, out=x)


def _euler_block(model, z, dt, times):
    n, n_steps, d = z.shape
    x = np.empty((n, n_steps + 1, d))
    x[:, 0] = np.log(model.s0)
    ref_c = model.s0[model.df:]
    for k in range(n_steps):
        s = np.exp(x[:, k])
        sig = np.array(model.sigma(times[k], s), copy=True)
        if model.df:
            # free rows never read the costly state
            frozen = s.copy()
            frozen[:, model.df:] = ref_c
            sig[:, : model.df] = model.sigma(times[k], frozen)[:, : model.df]
        dw = np.einsum("nij,nj->ni", sig, z[:, k]) * np.sqrt(dt)
        x[:, k + 1] = x[:, k] + dw - 0.5 * dt * np.sum(sig ** 2, axis=2)
    return np.exp(x, out=x)


def simulate(model: MarketModel, n_paths, n_steps, seed, threads=1, scheme=None) -> PathBatch:
    """Simulate price paths on a uniform grid.

    Constant vol uses exact lognormal steps; state-dependent vol uses an
    Euler step on log prices.  Paths come in blocks of ``BLOCK_SIZE``, each
    with its own spawned random stream, and even path counts are
    antithetic pairs ``(2k, 2k+1)``.  Output depends only on ``(model,
    n_paths, n_steps, seed, scheme)``, never on ``threads``.
    """
    if n_paths < 1 or n_steps < 1:
        raise InvariantError("simulate: n_paths and n_steps must be >= 1")
    if model.df >= 1 and not model.block_certificate:
        raise InvariantError("simulate: model lacks the free-block volatility certificate")
    scheme = scheme or ("exact-lognormal" if model.constant_vol else "log-euler")
    if scheme not in ("exact-lognormal", "log-euler"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "exact-lognormal" and not model.constant_vol:
        raise InvariantError("simulate: exact scheme needs constant vol")
    d = model.d
    dt = model.T / n_steps
    times = np.linspace(0.0, model.T, n_steps + 1)
    sf = np.empty((n_paths, n_steps + 1, model.df))
    sc = np.empty((n_paths, n_steps + 1, model.dc))
    n_blocks = -(-n_paths // BLOCK_SIZE)
    streams = np.random.SeedSequence(seed).spawn(n_blocks)

    def run(b):
        lo, hi = b * BLOCK_SIZE, min((b + 1) * BLOCK_SIZE, n_paths)
        z = _antithetic(np.random.default_rng(streams[b]), hi - lo, n_steps, d)
        if scheme == "exact-lognormal":
            paths = _exact_block(model, z, dt)
        else:
            paths = _euler_block(model, z, dt, times)
        sf[lo:hi] = paths[:, :, : model.df]
        sc[lo:hi] = paths[:, :, model.df:]

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(run, range(n_blocks)))
    else:
        for b in range(n_blocks):
            run(b)
    return PathBatch(n_paths, n_steps, times, sf, sc, seed, scheme)


def save_batch(batch: PathBatch, stem):
    """Flat little-endian float64 file ``stem.bin`` plus ``stem.json`` sidecar."""
    data = np.concatenate([batch.sf_paths, batch.sc_paths], axis=2).astype("<f8")
    data.tofile(f"{stem}.bin")
    side = {"shape": list(data.shape), "df": batch.sf_paths.shape[2], "seed": batch.seed,
            "scheme": batch.scheme, "times": batch.times.tolist()}
    with open(f"{stem}.json", "w") as fh:
        json.dump(side, fh, indent=2)


def load_batch(stem) -> PathBatch:
    with open(f"{stem}.json") as fh:
        side = json.load(fh)
    data = np.fromfile(f"{stem}.bin", dtype="<f8").reshape(side["shape"])
    df = side["df"]
    n, m, _ = data.shape
    return PathBatch(n, m - 1, np.array(side["times"]), data[:, :, :df], data[:, :, df:],
                     side["seed"], side["scheme"])


def batch_exists(stem):
    return os.path.exists(f"{stem}.bin") and os.path.exists(f"{stem}.json")


def _d12(s0, k, sig, T):
    v = sig * np.sqrt(T)
    d1 = (np.log(s0 / k) + 0.5 * v * v) / v
    return d1, d1 - v


def lognormal_call(s0, k, sig, T):
    """``E[(S_T - k)^+]`` for a driftless lognormal price."""
    if k <= 0:
        return float(s0) - float(k) if k < 0 else float(s0)
    if sig * np.sqrt(T) == 0:
        return max(s0 - k, 0.0)
    d1, d2 = _d12(s0, k, sig, T)
    return float(s0 * norm.cdf(d1) - k * norm.cdf(d2))


def lognormal_digital(s0, k, sig, T):
    """``P[S_T >= k]``."""
    if k <= 0:
        return 1.0
    if sig * np.sqrt(T) == 0:
        return float(s0 >= k)
    return float(norm.cdf(_d12(s0, k, sig, T)[1]))


def lognormal_call_delta(s, k, sig, tau):
    """``dE[(S_T - k)^+ | S_t = s] / ds`` with ``tau = T - t``."""
    if k <= 0:
        return np.ones_like(np.asarray(s, dtype=float))
    return norm.cdf(_d12(np.asarray(s, dtype=float), k, sig, tau)[0])
