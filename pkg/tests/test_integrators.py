from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trisk_lts import integrators as itg
from trisk_lts import operators as op
from trisk_lts.accounting import WorkLedger
from trisk_lts.integrators import (InvariantError, LtsPlan, SchemeConfig, SerialEvaluator, State,
                                   lts_interp_coeffs, lts_step, rk4_step, ssprk_step)
from trisk_lts.regions import CellRegion, EdgeRegion, RegionConfigError, RegionMap, label_edges

import oracles


def _rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


class PolyForcing:
    """Right-hand side p(t) independent of the state: exact solution is the integral of p."""

    def __init__(self, coeffs, nc, ne):
        self.c = np.asarray(coeffs, dtype=float)
        self.nc, self.ne = nc, ne

    def p(self, t):
        return sum(c * t ** k for k, c in enumerate(self.c))

    def integral(self, t):
        return sum(c * t ** (k + 1) / (k + 1) for k, c in enumerate(self.c))

    def __call__(self, h, u, cells, edges, stage="full", t=None):
        dh = np.full(self.nc, np.nan)
        du = np.full(self.ne, np.nan)
        dh[cells] = self.p(t)
        du[edges] = -self.p(t)
        return dh, du


# for a state-independent right-hand side the schemes reduce to quadrature rules:
# trapezoid (SSPRK2) and Simpson (SSPRK3, RK4)
@pytest.mark.parametrize("scheme, degree", [("ssprk2", 1), ("ssprk3", 3), ("rk4", 3)])
def test_polynomial_forcing_is_integrated_exactly(mesh0, scheme, degree):
    ev = PolyForcing([0.3, -1.1, 0.7, 0.25][: degree + 1], mesh0.n_cells, mesh0.n_edges)
    cfg = SchemeConfig(scheme, 0.5)
    s = State(np.zeros(mesh0.n_cells), np.zeros(mesh0.n_edges), 0.2)
    for _ in range(4):
        s = itg.step(mesh0, s, cfg, None, None, evaluator=ev)
    want = ev.integral(2.2) - ev.integral(0.2)
    assert np.allclose(s.h, want, rtol=1e-13, atol=1e-13)
    assert np.allclose(s.u, -want, rtol=1e-13, atol=1e-13)
    # one degree higher is not exact
    ev2 = PolyForcing([0.0] * (degree + 1) + [1.0], mesh0.n_cells, mesh0.n_edges)
    s = itg.step(mesh0, State(np.zeros(mesh0.n_cells), np.zeros(mesh0.n_edges), 0.0), cfg, None, None,
                 evaluator=ev2)
    assert abs(s.h[0] - ev2.integral(0.5)) > 1e-6


@pytest.mark.parametrize("order", [2, 3])
def test_ssprk_matches_hand_rolled(tc5_small, small_refined, order, tc):
    mesh, _ = small_refined
    state, b, f = tc5_small
    nc = mesh.n_cells

    def rhs(x):
        t = op.tendencies(mesh, x[:nc], x[nc:], b, f, tc.g)
        return np.concatenate([t.dh, t.du])

    cfg = SchemeConfig(f"ssprk{order}", 300.0, g=tc.g)
    got = ssprk_step(order, mesh, state, cfg, b, f)
    want = oracles.ssprk(order, rhs, np.concatenate([state.h, state.u]), 300.0)
    assert _rel(got.h, want[:nc]) < 1e-13
    assert _rel(got.u, want[nc:]) < 1e-13
    assert got.time == 300.0


def test_scheme_config_validation():
    assert SchemeConfig("LTS3", 60, 4).scheme == "lts3"
    assert SchemeConfig("lts3", 60, 4).dt_fine == 15
    assert SchemeConfig("ssprk3", 60, 4).dt_fine == 60
    with pytest.raises(ValueError):
        SchemeConfig("euler", 60)
    with pytest.raises(ValueError):
        SchemeConfig("lts2", 60, 0)
    with pytest.raises(ValueError):
        SchemeConfig("lts2", 60, 1.5)
    with pytest.raises(ValueError):
        SchemeConfig("lts2", -1.0, 2)


# interpolation coefficients, from the stage formulas with exact fractions
@pytest.mark.parametrize("order, stage, k, M, want", [
    (2, 1, 0, 1, (1, 0, 0)),
    (2, 2, 0, 1, (0, 1, 0)),
    (2, 1, 1, 4, (Fraction(3, 4), Fraction(1, 4), 0)),
    (2, 2, 3, 4, (0, 1, 0)),
    (3, 1, 0, 1, (1, 0, 0)),
    (3, 2, 0, 1, (0, 1, 0)),
    (3, 3, 0, 1, (0, 0, 1)),
    (3, 1, 1, 2, (Fraction(1, 4), Fraction(1, 4), Fraction(1, 2))),
    (3, 2, 1, 2, (Fraction(-3, 4), Fraction(1, 4), Fraction(3, 2))),
    (3, 3, 1, 4, (Fraction(15, 32), Fraction(7, 32), Fraction(5, 16))),
])
def test_interp_coefficients(order, stage, k, M, want):
    got = lts_interp_coeffs(order, stage, k, M)
    assert np.allclose(got, [float(x) for x in want], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([2, 3]), st.integers(1, 3), st.integers(1, 16), st.data())
def test_interp_coefficients_partition_unity(order, stage, M, data):
    if stage == 3 and order == 2:
        return
    k = data.draw(st.integers(0, M - 1))
    c = lts_interp_coeffs(order, stage, k, M)
    assert abs(sum(c) - 1.0) < 1e-14
    if order == 2:
        assert c[2] == 0.0


@pytest.mark.parametrize("args", [(4, 1, 0, 2), (2, 3, 0, 2), (3, 1, 2, 2), (3, 1, -1, 2), (3, 1, 0, 0)])
def test_interp_coefficients_reject(args):
    with pytest.raises(ValueError):
        lts_interp_coeffs(*args)


def _all_coarse_map(mesh):
    lab = np.full(mesh.n_cells, int(CellRegion.COARSE), dtype=np.int64)
    return label_edges(mesh, RegionMap(lab, 1, np.zeros(mesh.n_cells, dtype=np.int64)))


@pytest.mark.parametrize("order", [2, 3])
@pytest.mark.parametrize("M", [1, 3])
def test_degenerate_map_reduces_to_ssprk(small_refined, tc5_small, tc, order, M):
    """No fine and no interface cells: the LTS step is the single-rate step for any M."""
    mesh, _ = small_refined
    rmap = _all_coarse_map(mesh)
    state, b, f = tc5_small
    cfg = SchemeConfig(f"lts{order}", 300.0, M, g=tc.g)
    got = lts_step(order, mesh, rmap, state, cfg, b, f)
    want = ssprk_step(order, mesh, state, SchemeConfig(f"ssprk{order}", 300.0, g=tc.g), b, f)
    assert np.array_equal(got.h, want.h)
    assert np.array_equal(got.u, want.u)


@pytest.mark.parametrize("order", [2, 3])
def test_m1_reduction_short(small_refined, tc5_small, tc, order):
    mesh, rmap = small_refined
    s_l = s_r = tc5_small[0]
    _, b, f = tc5_small
    for _ in range(3):
        s_l = lts_step(order, mesh, rmap, s_l, SchemeConfig(f"lts{order}", 200.0, 1, g=tc.g), b, f)
        s_r = ssprk_step(order, mesh, s_r, SchemeConfig(f"ssprk{order}", 200.0, g=tc.g), b, f)
    assert _rel(s_l.h, s_r.h) < 1e-12
    assert _rel(s_l.u, s_r.u) < 1e-12


@pytest.mark.parametrize("order", [2, 3])
def test_lts_conserves_mass(small_refined, tc5_small, tc, order):
    mesh, rmap = small_refined
    s, b, f = tc5_small
    m0 = np.sum(mesh.area_cell * s.h)
    for _ in range(5):
        s = lts_step(order, mesh, rmap, s, SchemeConfig(f"lts{order}", 400.0, 4, g=tc.g), b, f)
    assert abs(np.sum(mesh.area_cell * s.h) - m0) / m0 < 1e-13


def _expected_counts(rmap, order, M):
    """Per-stage (cells, edges) charged in one coarse step, counted from the labels."""
    c = rmap.counts
    F, I, C = c["n_fine"], c["n_if1"] + c["n_if2"], c["n_coarse"]
    uF = int(np.sum(rmap.cell_sublabel != 0))
    ne = {code: int(np.sum(rmap.edge_label == code)) for code in EdgeRegion}
    Fe = ne[EdgeRegion.FINE] + ne[EdgeRegion.UNDERLINE_FINE]
    uFe = ne[EdgeRegion.UNDERLINE_FINE]
    Ie = ne[EdgeRegion.INTERFACE1] + ne[EdgeRegion.INTERFACE2]
    Ce = ne[EdgeRegion.COARSE]
    if order == 2:
        want = {"step1": (I + C, Ie + Ce), "step2": (C, Ce)}
    else:
        want = {"step1": (uF + I + C, uFe + Ie + Ce), "step2": (I + C, Ie + Ce), "step4": (C, Ce)}
    for s in range(1, order + 1):
        want[f"substep{s}"] = (M * (F + I), M * (Fe + Ie))
    return want


@pytest.mark.parametrize("order", [2, 3])
@pytest.mark.parametrize("M", [1, 4])
def test_ledger_counts(small_refined, tc5_small, tc, order, M):
    mesh, rmap = small_refined
    s, b, f = tc5_small
    led = WorkLedger()
    ev = SerialEvaluator(mesh, b, f, tc.g, ledger=led, rmap=rmap)
    steps = 2
    for _ in range(steps):
        s = lts_step(order, mesh, rmap, s, SchemeConfig(f"lts{order}", 300.0, M, g=tc.g), b, f, evaluator=ev)
    want = _expected_counts(rmap, order, M)
    got = {stage: (led.total_cells(stage=stage), led.total_edges(stage=stage)) for stage in want}
    assert got == {k: (steps * v[0], steps * v[1]) for k, v in want.items()}
    assert led.total_cells("fine", "substep1") == steps * M * rmap.counts["n_fine"]
    assert led.total_cells("fine", "step1") == (0 if order == 2 else steps * int(np.sum(rmap.cell_sublabel != 0)))
    from trisk_lts.harness import predicted_lts_counts

    assert predicted_lts_counts(rmap, order, M, steps) == got


def test_layers_multiply_the_charge(small_refined, tc5_small, tc):
    mesh, rmap = small_refined
    s, b, f = tc5_small
    leds = []
    for layers in (1, 3):
        led = WorkLedger()
        ev = SerialEvaluator(mesh, b, f, tc.g, ledger=led, layers=layers, rmap=rmap)
        out = lts_step(2, mesh, rmap, s, SchemeConfig("lts2", 300.0, 2, g=tc.g), b, f, evaluator=ev)
        leds.append((led, out))
    assert leds[1][0].total_work() == 3 * leds[0][0].total_work()
    assert np.array_equal(leds[0][1].h, leds[1][1].h)


def test_lts3_needs_sublabels(small_refined):
    mesh, rmap = small_refined
    bare = label_edges(mesh, RegionMap(rmap.cell_label.copy(), 1))
    with pytest.raises(RegionConfigError):
        LtsPlan.build(3, bare)
    LtsPlan.build(2, bare)


def test_uncovered_mesh_is_detected(small_refined, tc5_small, tc):
    mesh, rmap = small_refined
    lab = rmap.cell_label.copy()
    lab[rmap.coarse[:3]] = 99
    broken = RegionMap(lab, 1, rmap.cell_sublabel.copy(), rmap.edge_label.copy())
    s, b, f = tc5_small
    with pytest.raises(InvariantError):
        lts_step(2, mesh, broken, s, SchemeConfig("lts2", 300.0, 2, g=tc.g), b, f)


def test_interface_correction_checks_accumulators():
    ws = itg.LtsWorkspace.start(State(np.zeros(3), np.zeros(4)))
    ws.n_acc = [2, 1, 0]
    with pytest.raises(InvariantError):
        itg.interface_correction(ws, 2, 1.0, 2, np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(4),
                                 np.array([0]), np.array([0]))


def test_step_requires_region_map(mesh0):
    with pytest.raises(RegionConfigError):
        itg.step(mesh0, State(np.ones(12), np.zeros(30)), SchemeConfig("lts2", 1.0, 2), np.zeros(12),
                 np.zeros(20))


def test_courant_numbers(small_refined, tc5_small):
    mesh, rmap = small_refined
    s, _, _ = tc5_small
    cfg = SchemeConfig("lts2", 400.0, 4)
    cf, cc = itg.courant_numbers(mesh, s.u, cfg, rmap)
    fine = np.isin(rmap.edge_label, [EdgeRegion.FINE, EdgeRegion.UNDERLINE_FINE])
    assert cf == pytest.approx(np.max(np.abs(s.u[fine]) / mesh.dc_edge[fine]) * 100.0)
    assert cc == pytest.approx(np.max(np.abs(s.u[~fine]) / mesh.dc_edge[~fine]) * 400.0)
    a, b_ = itg.courant_numbers(mesh, s.u, cfg)
    assert a == b_


@pytest.mark.parametrize("scheme,stages", [("ssprk2", 2), ("ssprk3", 3), ("rk4", 4)])
def test_single_rate_ledger(mesh0, scheme, stages):
    rng = np.random.default_rng(5)
    h = 1000.0 + rng.random(mesh0.n_cells)
    u = rng.standard_normal(mesh0.n_edges)
    b = np.zeros(mesh0.n_cells)
    f = np.full(mesh0.n_vertices, 1e-4)
    led = WorkLedger()
    ev = SerialEvaluator(mesh0, b, f, 9.8, ledger=led, layers=2)
    s = State(h, u)
    n = 3
    for _ in range(n):
        s = itg.step(mesh0, s, SchemeConfig(scheme, 1e-4), b, f, evaluator=ev)
    assert led.total_cells() == stages * n * mesh0.n_cells * 2
    assert led.total_edges() == stages * n * mesh0.n_edges * 2


@pytest.mark.slow
def test_rk4_self_convergence(small_refined, tc):
    from trisk_lts.harness import convergence_study

    mesh, _ = small_refined
    res = convergence_study("rk4", 1, [200.0, 100.0, 50.0], 2400.0, mesh, None, tc)
    assert res.monotone
    assert 3.6 < res.slope_h < 4.4 and 3.6 < res.slope_u < 4.4
