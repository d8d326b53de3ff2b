"""Transient 2D saturated flow with advective tracer transport, and the
linear observation operator.

Parameters are log10 permeabilities [log10 m^2]; heads in m, concentrations
in mol/L.  Times are given in days at the API boundary and converted to
seconds internally.  All solvers are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .core import Grid, StateLayout, StateVector, ValidationError

SECONDS_PER_DAY = 86400.0
EDGES = ("south", "north", "west", "east")
CFL_MAX = 0.9
MAX_SUBSTEPS = 10_000
CHUNK = 32


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Fluid:
    density: float = 1000.0     # kg/m^3
    viscosity: float = 1.0e-3   # Pa s
    gravity: float = 9.81       # m/s^2


@dataclass(frozen=True)
class Scenario:
    name: str
    grid: Grid
    period_days: float
    n_steps: int
    bc_head: dict = field(default_factory=dict)      # edge -> head [m]; absent = no-flow
    bc_conc: dict = field(default_factory=dict)      # edge -> conc [mol/L]
    wells: tuple = ()                                # ((cell, head), ...)
    initial_head: float = 10.0
    initial_conc: Optional[float] = None             # None = no transport
    porosity: float = 0.10
    fluid: Fluid = Fluid()
    specific_storage: float = 1.0e-4                 # 1/m
    thickness: float = 1.0                           # m

    def __post_init__(self):
        bad = [e for e in list(self.bc_head) + list(self.bc_conc) if e not in EDGES]
        if bad:
            raise ValidationError(f"unknown boundary edges {bad}")
        if self.n_steps < 1 or not self.period_days > 0:
            raise ValidationError("scenario needs n_steps >= 1 and a positive period")
        if not 0 < self.porosity <= 1:
            raise ValidationError(f"porosity must be in (0, 1], got {self.porosity}")
        if self.specific_storage <= 0:
            raise ValidationError("specific storage must be > 0")

    @property
    def transport(self) -> bool:
        return self.initial_conc is not None

    @property
    def dynamic_kinds(self) -> tuple[str, ...]:
        return ("head", "concentration") if self.transport else ("head",)

    @property
    def dt_days(self) -> float:
        return self.period_days / self.n_steps

    @property
    def dt(self) -> float:
        return self.dt_days * SECONDS_PER_DAY

    def conc_bounds(self) -> tuple[float, float]:
        vals = list(self.bc_conc.values()) + [self.initial_conc]
        return min(vals), max(vals)

    def step_of(self, time_days: float) -> int:
        k = time_days / self.dt_days
        step = int(round(k))
        if abs(k - step) > 1e-9 * max(1.0, abs(k)) or not 0 <= step <= self.n_steps:
            raise ValidationError(f"time {time_days} d is not on the {self.n_steps}-step lattice "
                                  f"of the {self.period_days} d period")
        return step

    def initial_dynamics(self) -> np.ndarray:
        n = self.grid.n_cells
        h = np.full(n, float(self.initial_head))
        for cell, head in self.wells:
            h[cell] = head
        if not self.transport:
            return h
        return np.concatenate([h, np.full(n, float(self.initial_conc))])


@dataclass(frozen=True)
class ObservationSchedule:
    """Measurement cells, observed kinds, and evenly spaced times.

    Observation ``k`` (1-based) happens at ``k * period / n_times``.  The
    measurement vector lists all locations for the first kind, then all
    locations for the next.
    """

    cells: tuple[int, ...]
    kinds: tuple[str, ...]
    n_times: int
    period_days: float
    noise_std: dict

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.n_times + 1) * (self.period_days / self.n_times)

    @property
    def n_m(self) -> int:
        return len(self.cells) * len(self.kinds)

    def state_indices(self, layout: StateLayout) -> np.ndarray:
        return np.concatenate([layout.dynamic_index(k, self.cells) for k in self.kinds])

    def noise_vector(self) -> np.ndarray:
        return np.concatenate([np.full(len(self.cells), float(self.noise_std[k])) for k in self.kinds])

    def obs_cells(self) -> np.ndarray:
        """Grid cell of each measurement entry."""
        return np.tile(np.asarray(self.cells, dtype=int), len(self.kinds))

    def check_layout(self, layout: StateLayout) -> None:
        missing = sorted(set(self.cells) - set(layout.pilot_cells))
        if missing:
            raise ValidationError(f"measurement cells {missing} are not pilot points")

    def time_index(self, time_days: float) -> int:
        k = np.flatnonzero(np.isclose(self.times, time_days, rtol=1e-12, atol=1e-9))
        if len(k) == 0:
            raise ValidationError(f"time {time_days} d is not a scheduled observation time")
        return int(k[0])


# ------------------------------------------------------------ scenario setups

def tracer_scenario(n_steps: int = 1200, specific_storage: float = 1.0e-4) -> Scenario:
    grid = Grid(31, 31, 2.0, 2.0)
    return Scenario(
        name="tracer", grid=grid, period_days=1200.0, n_steps=n_steps,
        bc_head={"south": 11.0, "north": 10.0},
        bc_conc={"south": 80e-3, "north": 60e-3},
        initial_head=10.0, initial_conc=60e-3, porosity=0.10,
        specific_storage=specific_storage)


def well_scenario(n_steps: int = 1200, specific_storage: float = 1.0e-4) -> Scenario:
    grid = Grid(31, 31, 20.0, 20.0)
    well = grid.cell_containing(310.0, 310.0)
    return Scenario(
        name="well", grid=grid, period_days=18.0, n_steps=n_steps,
        bc_head={e: 10.0 for e in EDGES}, wells=((well, 11.0),),
        initial_head=10.0, initial_conc=None, porosity=0.10,
        specific_storage=specific_storage)


STANDARD_GRID_INDEX = (3, 7, 11, 15, 19, 23, 27)
SIGMA_HEAD = 5e-2
SIGMA_CONC = 7.1e-3


def tracer_measurement_cells(grid: Grid) -> tuple[int, ...]:
    # (19 m, 31 m) and (43 m, 31 m) in the 62 m tracer domain, as cell indices
    scale_x, scale_y = grid.extent[0] / 62.0, grid.extent[1] / 62.0
    return (grid.cell_containing(19.0 * scale_x, 31.0 * scale_y),
            grid.cell_containing(43.0 * scale_x, 31.0 * scale_y))


def well_measurement_cells(grid: Grid) -> tuple[int, ...]:
    return tuple(int(grid.cell_index(i, j)) for j in STANDARD_GRID_INDEX for i in STANDARD_GRID_INDEX)


def tracer_schedule(grid: Grid, n_times: int = 100, period_days: float = 1200.0) -> ObservationSchedule:
    return ObservationSchedule(tracer_measurement_cells(grid), ("head", "concentration"),
                               n_times, period_days,
                               {"head": SIGMA_HEAD, "concentration": SIGMA_CONC})


def well_schedule(grid: Grid, n_times: int = 60, period_days: float = 18.0) -> ObservationSchedule:
    return ObservationSchedule(well_measurement_cells(grid), ("head",), n_times, period_days,
                               {"head": SIGMA_HEAD})


# ------------------------------------------------------------ physics

def permeability_to_conductivity(log10_k, fluid: Fluid = Fluid()):
    """Hydraulic conductivity [m/s] from log10 permeability [log10 m^2]."""
    k = np.power(10.0, np.asarray(log10_k, dtype=float))
    K = k * fluid.density * fluid.gravity / fluid.viscosity
    return K if K.ndim else float(K)


def _static_arrays(scenario: Scenario):
    g = scenario.grid
    bc_fixed = np.array([e in scenario.bc_head for e in EDGES])
    bc_head = np.array([float(scenario.bc_head.get(e, 0.0)) for e in EDGES])
    bc_conc = np.array([float(scenario.bc_conc.get(e, 0.0)) for e in EDGES])
    pinned = np.zeros(g.n_cells, dtype=np.bool_)
    pin_head = np.zeros(g.n_cells)
    for cell, head in scenario.wells:
        pinned[int(cell)] = True
        pin_head[int(cell)] = float(head)
    return bc_fixed, bc_head, bc_conc, pinned, pin_head


def advance_fields(log10_k, head, conc, scenario: Scenario, n_steps: int, dt: float = None):
    """Advance member fields by ``n_steps`` steps of length ``dt`` seconds.

    log10_k, head, conc: (E, n_g) grid-ordered arrays (conc may be None when
    the scenario has no transport).  Returns new (head, conc) arrays.
    """
    log10_k = np.atleast_2d(np.asarray(log10_k, dtype=float))
    head = np.array(np.atleast_2d(head), dtype=float)
    conc = None if conc is None else np.array(np.atleast_2d(conc), dtype=float)
    if n_steps == 0:
        return head, conc
    if scenario.transport and conc is None:
        raise ValidationError("scenario has transport but no concentration field given")
    dt = scenario.dt if dt is None else float(dt)
    if not dt > 0:
        raise ValidationError("time step must be > 0")
    g = scenario.grid
    K_all = permeability_to_conductivity(log10_k, scenario.fluid)
    if not np.all(np.isfinite(K_all)) or np.any(K_all <= 0):
        raise SolverError("non-finite or non-positive conductivity")
    bc_fixed, bc_head, bc_conc, pinned, pin_head = _static_arrays(scenario)
    pore_volume = scenario.porosity * g.dx * g.dy
    E = log10_k.shape[0]
    out_h = np.empty_like(head)
    out_c = None if conc is None else np.empty_like(conc)
    storage_per_area = scenario.specific_storage * g.dx * g.dy / dt
    for s in range(0, E, CHUNK):
        sl = slice(s, min(E, s + CHUNK))
        K = np.ascontiguousarray(K_all[sl].T)
        h = np.ascontiguousarray(head[sl].T)
        c = np.ascontiguousarray(conc[sl].T) if conc is not None else np.zeros((1, 1))
        status, _ = _kernels.advance(
            K, h, c, int(n_steps), g.nx, g.ny, g.dx, g.dy, storage_per_area,
            bc_fixed, bc_head, bc_conc, pinned, pin_head, scenario.transport,
            pore_volume, dt, CFL_MAX, MAX_SUBSTEPS)
        if status == 1:
            raise SolverError("flow matrix is not positive definite (banded Cholesky failed)")
        if status == 2:
            raise SolverError("non-finite Darcy flux in tracer transport")
        if status == 3:
            raise SolverError(f"tracer transport needs more than {MAX_SUBSTEPS} CFL substeps "
                              "per time step (extreme conductivity contrast)")
        if not np.all(np.isfinite(h)):
            raise SolverError("non-finite head after flow solve")
        out_h[sl] = h.T
        if conc is not None:
            out_c[sl] = c.T
    return out_h, out_c


def step_flow(head, conductivity, scenario: Scenario, dt: float):
    """One backward-Euler flow step for a single field.

    ``conductivity`` in m/s; ``dt`` in seconds.
    """
    logk = _logk_from_conductivity(conductivity, scenario.fluid)
    h, _ = advance_fields(logk, head, None, replace(scenario, initial_conc=None), 1, dt)
    return h[0]


def step_tracer(conc, head, conductivity, scenario: Scenario, dt: float):
    """Advect ``conc`` over ``dt`` seconds in the Darcy field of ``head``.

    ``head`` must already be at the new time level.
    """
    g = scenario.grid
    K = np.ascontiguousarray(np.asarray(conductivity, dtype=float).reshape(g.n_cells, 1))
    if not np.all(np.isfinite(K)):
        raise SolverError("non-finite conductivity")
    bc_fixed, bc_head, bc_conc, _, _ = _static_arrays(scenario)
    Tx, Ty, Tb = _kernels.transmissibilities(K, g.nx, g.ny, g.dx, g.dy, bc_fixed)
    c = np.array(conc, dtype=float).reshape(g.n_cells, 1)
    h = np.ascontiguousarray(np.asarray(head, dtype=float).reshape(g.n_cells, 1))
    used = _kernels.upwind_transport(c, h, Tx, Ty, Tb, g.nx, bc_head, bc_conc,
                                     scenario.porosity * g.dx * g.dy, float(dt), CFL_MAX,
                                     MAX_SUBSTEPS)
    if used[0] == -1:
        raise SolverError("non-finite Darcy flux in tracer transport")
    if used[0] == -2:
        raise SolverError(f"tracer transport needs more than {MAX_SUBSTEPS} CFL substeps")
    return c[:, 0]


def _logk_from_conductivity(K, fluid: Fluid):
    K = np.asarray(K, dtype=float)
    return np.log10(K * fluid.viscosity / (fluid.density * fluid.gravity))


def flow_operator(conductivity, scenario: Scenario, dt: float):
    """Dense flow system (A, b) of one backward-Euler step: A h_new = S h_old + b.

    Returned for diagnostics and mass-balance checks on small grids.
    """
    g = scenario.grid
    K = np.ascontiguousarray(np.asarray(conductivity, dtype=float).reshape(g.n_cells, 1))
    bc_fixed, bc_head, _, pinned, pin_head = _static_arrays(scenario)
    storage = scenario.specific_storage * g.dx * g.dy / dt
    Tx, Ty, Tb = _kernels.transmissibilities(K, g.nx, g.ny, g.dx, g.dy, bc_fixed)
    Ab, b = _kernels.assemble(Tx, Ty, Tb, g.nx, storage, bc_head, pinned, pin_head)
    n = g.n_cells
    A = np.zeros((n, n))
    for k in range(g.nx + 1):
        idx = np.arange(k, n)
        A[idx, idx - k] = Ab[k:, k, 0]
        A[idx - k, idx] = Ab[k:, k, 0]
    return A, b[:, 0], storage


def interface_fluxes(head, conductivity, scenario: Scenario):
    """Net inflow [m^2/s per unit thickness] into every cell from its faces."""
    g = scenario.grid
    K = np.ascontiguousarray(np.asarray(conductivity, dtype=float).reshape(g.n_cells, 1))
    bc_fixed, bc_head, _, _, _ = _static_arrays(scenario)
    Tx, Ty, Tb = _kernels.transmissibilities(K, g.nx, g.ny, g.dx, g.dy, bc_fixed)
    h = np.asarray(head, dtype=float)
    net = np.zeros(g.n_cells)
    qx = Tx[:, 0] * (h - np.roll(h, -1))
    net -= qx
    net[1:] += qx[:-1]
    qy = Ty[:, 0] * (h - np.roll(h, -g.nx))
    net -= qy
    net[g.nx:] += qy[:-g.nx]
    for s in range(4):
        net += Tb[:, s, 0] * (bc_head[s] - h)
    return net


# ------------------------------------------------------------ state level

def propagate(values: np.ndarray, layout: StateLayout, scenario: Scenario, n_steps: int) -> np.ndarray:
    """Advance an (n_e, n_s) state array by ``n_steps``; parameters untouched."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    out = values.copy()
    if n_steps == 0:
        return out
    logk = layout.param_field(values[:, layout.param_slice])
    head = values[:, layout.kind_slice("head")]
    conc = values[:, layout.kind_slice("concentration")] if scenario.transport else None
    h, c = advance_fields(logk, head, conc, scenario, n_steps)
    out[:, layout.kind_slice("head")] = h
    if scenario.transport:
        out[:, layout.kind_slice("concentration")] = c
    return out


def simulate_window(state: StateVector, scenario: Scenario, t_start: float, t_end: float) -> StateVector:
    s0, s1 = scenario.step_of(t_start), scenario.step_of(t_end)
    if s1 < s0:
        raise ValidationError(f"window end {t_end} d precedes start {t_start} d")
    if tuple(state.layout.dynamic_kinds) != scenario.dynamic_kinds:
        raise ValidationError("state layout dynamic kinds do not match the scenario")
    return StateVector(propagate(state.values, state.layout, scenario, s1 - s0)[0], state.layout)


def observe(state, schedule: ObservationSchedule, time: float, layout: StateLayout = None) -> np.ndarray:
    """Simulated measurements at a scheduled time (linear extraction)."""
    schedule.time_index(time)
    if isinstance(state, StateVector):
        layout, values = state.layout, state.values
    else:
        values = np.asarray(state)
        if layout is None:
            raise ValidationError("raw state arrays need an explicit layout")
    return values[..., schedule.state_indices(layout)]


def observation_matrix(schedule: ObservationSchedule, layout: StateLayout) -> np.ndarray:
    H = np.zeros((schedule.n_m, layout.n_s))
    H[np.arange(schedule.n_m), schedule.state_indices(layout)] = 1.0
    return H


def initial_state(log10_k_field, layout: StateLayout, scenario: Scenario) -> np.ndarray:
    """State vector from a grid-ordered parameter field and initial dynamics."""
    return np.concatenate([layout.params_from_field(np.asarray(log10_k_field, dtype=float)),
                           scenario.initial_dynamics()])


def pilot_grid(grid: Grid, kind: str = "standard", k: int = 7,
               extra: Sequence[int] = ()) -> tuple[int, ...]:
    """Pilot-point cells.

    ``standard``: 7x7 grid at indices 3, 7, ..., 27 plus both tracer
    measurement cells (51 points on 31x31).  ``regular``: k x k grid plus the
    tracer measurement cells.  ``diagonal``: standard plus the centers of
    every square of four standard points.  ``double``: standard grid with the
    spacing halved in each direction.
    """
    n = grid.nx
    if kind == "standard":
        idx = _regular_index(n, 7)
        cells = [grid.cell_index(i, j) for j in idx for i in idx]
    elif kind == "regular":
        idx = _regular_index(n, k)
        cells = [grid.cell_index(i, j) for j in idx for i in idx]
    elif kind == "diagonal":
        idx = _regular_index(n, 7)
        mid = [(a + b) // 2 for a, b in zip(idx[:-1], idx[1:])]
        cells = [grid.cell_index(i, j) for j in idx for i in idx]
        cells += [grid.cell_index(i, j) for j in mid for i in mid]
    elif kind == "double":
        idx = _regular_index(n, 7)
        fine = sorted(set(idx) | {(a + b) // 2 for a, b in zip(idx[:-1], idx[1:])})
        cells = [grid.cell_index(i, j) for j in fine for i in fine]
    else:
        raise ValidationError(f"unknown pilot grid kind {kind!r}")
    cells = [int(c) for c in cells]
    for c in list(tracer_measurement_cells(grid)) + [int(c) for c in extra]:
        if c not in cells:
            cells.append(c)
    return tuple(cells)


def _regular_index(n: int, k: int) -> list[int]:
    if not 1 <= k <= n:
        raise ValidationError(f"regular pilot grid needs 1 <= k <= {n}, got {k}")
    return [int(np.floor((m + 1) * n / (k + 1) - 0.5 + 0.5)) for m in range(k)]
