from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superrep.cone import CostMatrix, build_polar_section
from superrep.errors import InvariantError, NumericFailure
from superrep.payoff import (Growth, build_grid, catalog_payoff, check_admissibility, concave_envelope,
                             conjugate_C, conjugate_nodes, finite_domain, ghat_at, hull_fiber,
                             load_grid, offset_payoff, sc_axis, save_grid, tabulated_payoff,
                             transform_G, upper_hull)

K1, K2, L12, L21 = 100.0, 100.0, 0.1, 0.05
KT = K2 / (1 + L21)


@pytest.fixture(scope="module")
def section():
    return build_polar_section(CostMatrix(1, [[0.0, L12], [L21, 0.0]]))


@pytest.fixture(scope="module")
def barrier():
    return catalog_payoff("digital-barrier-call", K1=K1, K2=K2)


def enveloped(payoff, section, sf_ref, n_sf=41, n_sc=121, sc_ref=100.0):
    grid = build_grid(payoff, section, [sf_ref], [sc_ref], 1.0, n_sf=n_sf, n_sc=n_sc)
    return concave_envelope(payoff, section, grid)


def chord_majorant(x, y):
    """Smallest concave majorant on the nodes by brute force over chords."""
    out = y.astype(float).copy()
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            w = (x[i:j + 1] - x[i]) / (x[j] - x[i])
            out[i:j + 1] = np.maximum(out[i:j + 1], (1 - w) * y[i] + w * y[j])
    return out


# -------------------------------------------------------------- catalog and G

def test_barrier_payoff_values(barrier):
    s = np.array([[150.0, 120.0], [150.0, 90.0], [80.0, 120.0]])
    assert barrier(s)[:, 0].tolist() == [50.0, 0.0, 0.0]
    assert np.all(barrier(s)[:, 1] == 0.0)


def test_unknown_catalog_entry():
    with pytest.raises(InvariantError, match="catalog"):
        catalog_payoff("asian")


def test_zero_payoff_has_zero_transform(section):
    z = np.random.default_rng(0).uniform(1, 300, (50, 2))
    assert np.all(transform_G(catalog_payoff("zero"), section, z) == 0.0)


def test_transform_at_shifted_barrier(barrier, section):
    assert transform_G(barrier, section, [[1.5 * K1, 1.01 * KT]])[0] == pytest.approx(0.5 * K1, abs=1e-12)
    assert transform_G(barrier, section, [[1.5 * K1, 0.99 * KT]])[0] == 0.0


def test_numeraire_only_payoff_is_unchanged(section):
    g = catalog_payoff("free-call", K=90.0)
    z = np.random.default_rng(1).uniform(1, 300, (100, 2))
    assert np.allclose(transform_G(g, section, z), np.maximum(z[:, 0] - 90.0, 0.0), atol=1e-12)


def test_transform_nondecreasing_in_level_and_vertex_exact(section):
    rng = np.random.default_rng(2)
    z = rng.uniform(1, 300, (200, 2))
    for g in (catalog_payoff("digital-barrier-call", K1=80.0, K2=120.0),
              catalog_payoff("costly-put", K=100.0),
              catalog_payoff("costly-call-physical", K=100.0)):
        levels = [transform_G(g, section, z, level=k) for k in range(3)]
        assert np.all(levels[1] >= levels[0]) and np.all(levels[2] >= levels[1])
        assert np.allclose(levels[2], levels[0], atol=1e-12)


def test_wrong_coordinate_count(barrier, section):
    with pytest.raises(ValueError):
        transform_G(barrier, section, np.ones((3, 3)))


# -------------------------------------------------------------- grids and envelope

def test_axis_holds_scaled_thresholds_without_slivers(section):
    x = sc_axis(100.0, 201, (K2,), (1 / 1.05, 1.1))
    assert x[0] == 0.0
    for b in (K2 / 1.05, K2 * 1.1):
        assert np.any(np.isclose(x, b, rtol=1e-14, atol=0))
    lx = np.log(x[1:])
    step = np.median(np.diff(lx))
    assert np.min(np.diff(lx)) > 0.2 * step


def test_envelope_closed_form(barrier, section):
    grid = enveloped(barrier, section, 2 * K1)
    sf = grid.sf_axes[0][:, None]
    sc = grid.sc_axes[0][None, :]
    want = np.maximum(sf - K1, 0.0) * np.minimum(sc / KT, 1.0)
    assert np.allclose(grid.Ghat_values, want, atol=1e-9)
    assert ghat_at(grid, [2 * K1], [KT / 2])[0] == pytest.approx(K1 / 2, abs=1e-9)


def test_envelope_is_concave_majorant(barrier, section):
    grid = enveloped(barrier, section, K1)
    x = grid.sc_axes[0]
    assert np.all(grid.Ghat_values >= grid.G_values)
    for row, g in zip(grid.Ghat_values, grid.G_values):
        assert np.allclose(row, chord_majorant(x, g), atol=1e-9)


def test_concave_input_is_fixed_point(section):
    x = np.linspace(0, 10, 30)
    y = np.sqrt(x)
    assert np.allclose(hull_fiber(x, y, 0.0), y, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=40), st.integers(0, 10 ** 6))
def test_monotone_chain_matches_chord_oracle(ys, seed):
    rng = np.random.default_rng(seed)
    x = np.cumsum(rng.uniform(0.1, 2.0, len(ys)))
    y = np.array(ys)
    h = np.interp(x, x[upper_hull(x, y)], y[upper_hull(x, y)])
    assert np.allclose(h, chord_majorant(x, y), atol=1e-9)


def test_tail_slope_forces_slopes():
    x = np.linspace(0, 10, 11)
    y = np.where(x > 5, 1.0, 0.0)
    h = hull_fiber(x, y, 0.5)
    assert np.all(np.diff(h) / np.diff(x) >= 0.5 - 1e-12)
    assert np.all(h >= y)


def test_separable_concave_biconjugate_is_exact():
    cost = CostMatrix(2, [[0, 0.1, 0.1], [0.1, 0, 0.1], [0.1, 0.1, 0]])
    sec = build_polar_section(cost)
    g = catalog_payoff("zero", df=1, dc=2)
    grid = build_grid(g, sec, [100.0], [100.0, 100.0], 0.5, n_sf=3, n_sc=15)
    X = grid.sc_nodes
    G = np.sqrt(X[:, 0]) + np.log1p(X[:, 1])
    grid = replace(grid, G_values=np.tile(G, (3, 1)))
    out = concave_envelope(g, sec, grid)
    assert np.allclose(out.Ghat_values, out.G_values, atol=1e-9)


def test_superlinear_claim_has_no_envelope(section):
    g = catalog_payoff("costly-square")
    grid = build_grid(g, section, [100.0], [100.0], 0.5, n_sf=3, n_sc=11)
    with pytest.raises(NumericFailure) as err:
        concave_envelope(g, section, grid)
    assert err.value.kind == "no-finite-envelope"


# -------------------------------------------------------------- conjugate

def test_conjugate_closed_form(barrier, section):
    grid = enveloped(barrier, section, K1 + 10)
    assert conjugate_C(grid, [K1 + 10], 5 / KT)[0] == pytest.approx(5.0, abs=1e-9)
    assert conjugate_C(grid, [K1 + 10], 20 / KT)[0] == pytest.approx(0.0, abs=1e-9)
    assert np.isinf(conjugate_C(grid, [K1 + 10], -0.01)[0])
    assert not finite_domain(grid, [-0.01]) and finite_domain(grid, [0.0])


def test_conjugate_at_zero_slope_is_fiber_sup(barrier, section):
    grid = enveloped(barrier, section, K1)
    vals, _ = conjugate_nodes(grid, [0.0])
    assert np.allclose(vals, grid.Ghat_values.max(axis=1))


def test_fenchel_inequality_and_convexity(barrier, section):
    grid = enveloped(barrier, section, K1)
    rng = np.random.default_rng(4)
    deltas = rng.uniform(0.0, 3.0, 20)
    sc = grid.sc_axes[0]
    C = np.array([conjugate_nodes(grid, [d])[0] for d in deltas])
    for d, c in zip(deltas, C):
        assert np.all(grid.Ghat_values <= c[:, None] + d * sc[None, :] + 1e-9)
    for _ in range(50):
        a, b = rng.uniform(0, 3, 2)
        ca, cb, cm = (conjugate_nodes(grid, [v])[0] for v in (a, b, (a + b) / 2))
        assert np.all(cm <= 0.5 * (ca + cb) + 1e-9)
        lo, hi = sorted((a, b))
        assert np.all(conjugate_nodes(grid, [hi])[0] <= conjugate_nodes(grid, [lo])[0] + 1e-12)


def test_conjugate_off_node_agrees_with_dense_sup(barrier, section):
    grid = enveloped(barrier, section, K1)
    sf = np.random.default_rng(5).uniform(60, 250, 40)
    for d in (0.0, 0.2, 0.7):
        fibers = np.array([ghat_at(grid, np.full(len(grid.sc_axes[0]), s), grid.sc_axes[0]) for s in sf])
        want = np.max(fibers - d * grid.sc_axes[0][None, :], axis=1)
        assert np.allclose(conjugate_C(grid, sf, d), want, atol=1e-9)


# -------------------------------------------------------------- other payoffs

def test_tabulated_matches_catalog_on_nodes(section):
    g = catalog_payoff("costly-put", K=100.0)
    axes = [np.linspace(50, 150, 11), np.linspace(20, 200, 19)]
    S = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    t = tabulated_payoff(axes, g(S), Growth(), ("bounded",), (0.0,))
    assert np.allclose(t(S), g(S))
    # linear extrapolation beyond the table
    assert t([[100.0, 10.0]])[0, 0] == pytest.approx(90.0)


def test_tabulated_shape_checked():
    with pytest.raises(InvariantError):
        tabulated_payoff([np.arange(3.0), np.arange(4.0)], np.zeros((3, 3, 2)), Growth(), ("bounded",), (0.0,))


def test_offset_shifts_claim(barrier):
    g = offset_payoff(barrier, [2.0, 30.0], [10.0])
    s = np.array([[150.0, 120.0]])
    assert np.allclose(g(s), barrier(s) - [[2.0, 120.0 * 3.0]])
    assert g.sc_slope == (-3.0,)


def test_admissibility_certificate(section):
    samples = np.random.default_rng(6).uniform(1, 300, (500, 2))
    check_admissibility(catalog_payoff("costly-call-physical", K=100.0), section, samples)
    bad = replace(catalog_payoff("costly-call-physical", K=100.0), growth=Growth())
    with pytest.raises(InvariantError, match="admissibility"):
        check_admissibility(bad, section, samples)


def test_grid_bundle_round_trip(barrier, section, tmp_path):
    grid = enveloped(barrier, section, K1, n_sf=9, n_sc=15)
    save_grid(grid, tmp_path / "g")
    back = load_grid(tmp_path / "g")
    for a, b in zip(grid.sf_axes + grid.sc_axes, back.sf_axes + back.sc_axes):
        assert np.array_equal(a, b)
    assert np.array_equal(grid.G_values, back.G_values)
    assert np.array_equal(grid.Ghat_values, back.Ghat_values)
    assert back.meta == grid.meta
