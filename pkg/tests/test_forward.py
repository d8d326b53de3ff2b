from dataclasses import replace

import numpy as np
import pytest

from ppenkf.core import Grid, StateVector, ValidationError, build_state_layout
from ppenkf.forward import (SolverError, advance_fields, flow_operator, initial_state, interface_fluxes,
                            observation_matrix, observe, permeability_to_conductivity, pilot_grid,
                            propagate, Scenario, simulate_window, step_flow, step_tracer,
                            tracer_scenario, tracer_schedule, well_scenario, well_schedule)
from ppenkf.geostat import RngSpec, Variogram, generate_gaussian_fields


def test_conductivity_conversion():
    assert permeability_to_conductivity(-12.0) == pytest.approx(9.81e-6, rel=1e-12)
    k = np.linspace(-14, -10, 9)
    K = permeability_to_conductivity(k)
    assert np.allclose(permeability_to_conductivity(k + 1) / K, 10.0)
    assert np.all(np.diff(K) > 0)


def test_scenario_geometry():
    t, w = tracer_scenario(), well_scenario()
    assert t.grid.extent == (62.0, 62.0) and w.grid.extent == (620.0, 620.0)
    assert t.period_days == 1200.0 and w.period_days == 18.0
    assert t.n_steps == w.n_steps == 1200
    assert w.wells == ((w.grid.cell_containing(310.0, 310.0), 11.0),)
    assert t.conc_bounds() == (60e-3, 80e-3)
    assert t.step_of(12.0) == 12
    with pytest.raises(ValidationError):
        t.step_of(0.5)
    with pytest.raises(ValidationError):
        Scenario("x", t.grid, 1.0, 1, bc_head={"up": 1.0})


def test_homogeneous_tracer_steady_head_is_linear():
    # flow only: a 1e12 s step would need millions of transport substeps
    sc = replace(tracer_scenario(n_steps=10), initial_conc=None)
    g = sc.grid
    h, _ = advance_fields(np.full((1, g.n_cells), -12.0), np.full((1, g.n_cells), 10.0),
                          None, sc, 2, dt=1e12)
    exact = 11.0 - g.centers[:, 1] / 62.0
    assert np.abs(h[0] - exact).max() < 1e-8


def test_homogeneous_well_steady_head_is_rotation_symmetric():
    sc = well_scenario()
    g = sc.grid
    h, _ = advance_fields(np.full((1, g.n_cells), -12.0), np.full((1, g.n_cells), 10.0), None, sc, 3, dt=1e12)
    H = h[0].reshape(31, 31)
    assert np.abs(H - np.rot90(H)).max() < 1e-10
    assert H[15, 15] == 11.0


def test_no_flow_keeps_uniform_head():
    g = Grid(5, 4, 1.0, 1.0)
    sc = Scenario("closed", g, 1.0, 10, initial_head=7.0)
    K = permeability_to_conductivity(np.random.default_rng(0).normal(-12, 0.5, g.n_cells))
    assert np.allclose(step_flow(np.full(g.n_cells, 7.0), K, sc, 3600.0), 7.0, atol=1e-12)


def test_flow_matches_sparse_reference_and_conserves_mass():
    import scipy.sparse as sp
    from scipy.sparse.linalg import spsolve
    sc = tracer_scenario()
    g = sc.grid
    logk = generate_gaussian_fields(g, Variogram(100.0, -12.0, 0.5), 1, RngSpec(1))[0]
    K = permeability_to_conductivity(logk)
    h0 = np.full(g.n_cells, 10.0)
    h1 = step_flow(h0, K, sc, sc.dt)
    A, b, storage = flow_operator(K, sc, sc.dt)
    ref = spsolve(sp.csc_matrix(A), storage * h0 + b)
    assert np.abs(h1 - ref).max() < 1e-10
    # storage change balances net face inflow in every cell
    net = interface_fluxes(h1, K, sc)
    change = storage * (h1 - h0)
    assert np.abs(change - net).max() <= 1e-10 * np.abs(change).sum()
    assert abs(change.sum() - net.sum()) <= 1e-10 * np.abs(change).sum()


def test_maximum_principle_on_random_fields():
    sc = tracer_scenario(n_steps=1200)
    g = sc.grid
    F = generate_gaussian_fields(g, Variogram(100.0, -12.5, 0.5), 100, RngSpec(3, 0, "mp"))
    h0 = np.full((100, g.n_cells), 10.0)
    c0 = np.full((100, g.n_cells), 0.06)
    h, c = advance_fields(F, h0, c0, sc, 300)
    assert h.min() >= 10.0 - 1e-12 and h.max() <= 11.0 + 1e-12
    assert c.min() >= 60e-3 - 1e-12 and c.max() <= 80e-3 + 1e-12


def test_tracer_zero_gradient_keeps_concentration():
    sc = tracer_scenario()
    g = sc.grid
    c = np.random.default_rng(1).uniform(0.06, 0.08, g.n_cells)
    K = np.full(g.n_cells, 1e-5)
    out = step_tracer(c, np.full(g.n_cells, 10.0), K, Scenario(
        "flat", g, 1.0, 1, bc_head={}, bc_conc={}, initial_conc=0.06), 1e5)
    assert np.array_equal(out, c)


def test_upwind_on_a_three_cell_line():
    # flow from west (head 2) to east (head 1) along a 3x1 line
    g = Grid(3, 1, 1.0, 1.0)
    sc = Scenario("line", g, 1.0, 1, bc_head={"west": 2.0, "east": 1.0},
                  bc_conc={"west": 1.0, "east": 0.0}, initial_conc=0.0, porosity=0.5)
    K = np.full(3, 1e-3)
    head = np.array([2 - 1 / 6, 1.5, 1 + 1 / 6])   # linear steady profile
    c0 = np.array([0.0, 0.0, 0.5])
    # Darcy flux through each face: K * dh/dx = 1e-3 * (1/3) per unit width
    q = 1e-3 / 3
    dt = 0.5 * 0.5 / q   # Courant number 0.5 in pore velocity units
    c1 = step_tracer(c0, head, K, sc, dt)
    # cell 0 receives from the west boundary, cell 1 from cell 0 (still 0)
    assert c1[0] == pytest.approx(0.5)
    assert c1[1] == pytest.approx(0.0)
    # cell 2 only loses mass downstream; its inflow carries zero concentration
    assert c1[2] == pytest.approx(0.25)


def test_long_time_tracer_approaches_inflow():
    sc = tracer_scenario(n_steps=120)
    g = sc.grid
    h, c = advance_fields(np.full((1, g.n_cells), -11.0), np.full((1, g.n_cells), 10.0),
                          np.full((1, g.n_cells), 0.06), sc, 120, dt=sc.dt * 30)
    assert c.max() <= 80e-3 + 1e-12
    assert c[0].reshape(31, 31)[1:-1].min() > 0.079


def test_simulate_window_composition_and_static_params():
    sc = tracer_scenario(n_steps=100)
    g = sc.grid
    L = build_state_layout(g, pilot_grid(g), sc.dynamic_kinds)
    f = generate_gaussian_fields(g, Variogram(100.0, -12.5, 0.5), 1, RngSpec(2))[0]
    s0 = StateVector(initial_state(f, L, sc), L)
    assert np.array_equal(simulate_window(s0, sc, 24.0, 24.0).values, s0.values)
    ab = simulate_window(simulate_window(s0, sc, 0.0, 24.0), sc, 24.0, 60.0)
    ac = simulate_window(s0, sc, 0.0, 60.0)
    assert np.abs(ab.values - ac.values).max() < 1e-10
    assert np.array_equal(ac.values[L.param_slice], s0.values[L.param_slice])
    with pytest.raises(ValidationError):
        simulate_window(s0, sc, 60.0, 24.0)


def test_forward_deterministic():
    sc = well_scenario(n_steps=60)
    g = sc.grid
    F = generate_gaussian_fields(g, Variogram(120.0, -12.5, 0.5), 3, RngSpec(4))
    h0 = np.full((3, g.n_cells), 10.0)
    a, _ = advance_fields(F, h0, None, sc, 20)
    b, _ = advance_fields(F, h0, None, sc, 20)
    assert np.array_equal(a, b)


def test_extreme_parameters_raise_solver_error():
    sc = tracer_scenario()
    g = sc.grid
    with pytest.raises(SolverError):
        advance_fields(np.full((1, g.n_cells), -12.0), np.full((1, g.n_cells), 10.0),
                       np.full((1, g.n_cells), 0.06), sc, 1, dt=1e12)
    with pytest.raises(SolverError):
        advance_fields(np.full((1, g.n_cells), np.nan), np.full((1, g.n_cells), 10.0),
                       np.full((1, g.n_cells), 0.06), sc, 1)


def test_observation_counts_and_extraction():
    sc = tracer_scenario()
    g = sc.grid
    sched = tracer_schedule(g)
    L = build_state_layout(g, pilot_grid(g), sc.dynamic_kinds)
    assert sched.n_m == 4 and len(sched.times) == 100 and sched.times[0] == 12.0
    x = initial_state(np.full(g.n_cells, -12.0), L, sc)
    y = observe(StateVector(x, L), sched, 12.0)
    assert np.allclose(y, [10.0, 10.0, 0.06, 0.06])
    assert np.array_equal(observation_matrix(sched, L) @ x, y)
    with pytest.raises(ValidationError):
        observe(StateVector(x, L), sched, 13.0)
    ws = well_scenario()
    wsched = well_schedule(ws.grid)
    assert wsched.n_m == 49 and len(wsched.times) == 60
    Lw = build_state_layout(ws.grid, pilot_grid(ws.grid, extra=wsched.cells), ws.dynamic_kinds)
    H = observation_matrix(wsched, Lw)
    # measurements only touch dynamic entries
    assert not np.any(H[:, Lw.param_slice])


def test_pilot_grids():
    g = Grid(31, 31, 2.0, 2.0)
    std = pilot_grid(g)
    assert len(std) == 51
    assert len(set(std)) == len(std)
    assert len(pilot_grid(g, "regular", 5)) == 27
    # the 9x9 grid already contains both measurement cells
    assert len(pilot_grid(g, "regular", 9)) == 81
    assert len(pilot_grid(g, "diagonal")) == 51 + 36
    assert set(std) <= set(pilot_grid(g, "double"))
    with pytest.raises(ValidationError):
        pilot_grid(g, "hexagonal")


def test_propagate_zero_steps_is_copy():
    sc = tracer_scenario()
    g = sc.grid
    L = build_state_layout(g, pilot_grid(g), sc.dynamic_kinds)
    X = np.tile(initial_state(np.full(g.n_cells, -12.0), L, sc), (2, 1))
    Y = propagate(X, L, sc, 0)
    assert np.array_equal(X, Y) and Y is not X
