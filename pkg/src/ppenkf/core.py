"""Grid geometry, partitioned state layout, ensembles and random streams.

The state vector is always ordered as (pilot parameters, non-pilot
parameters, dynamic variables).  Dynamic variables are stored kind by kind
(head before concentration), each kind row-major over the grid cells.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


DYNAMIC_KINDS = ("head", "concentration")


@dataclass(frozen=True)
class Grid:
    """Regular 2D cell grid.  Cell ``c = j * nx + i`` has center
    ``((i + 0.5) dx, (j + 0.5) dy)``; ``j`` grows towards the north."""

    nx: int
    ny: int
    dx: float
    dy: float

    def __post_init__(self):
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise ValidationError(f"grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if not (self.dx > 0 and self.dy > 0):
            raise ValidationError(f"grid needs dx, dy > 0, got {self.dx}, {self.dy}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float]:
        return self.nx * self.dx, self.ny * self.dy

    def cell_index(self, i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        if np.any((i < 0) | (i >= self.nx) | (j < 0) | (j >= self.ny)):
            raise ValidationError(f"cell ({i}, {j}) outside {self.nx}x{self.ny} grid")
        return j * self.nx + i

    def cell_ij(self, cell):
        cell = np.asarray(cell)
        if np.any((cell < 0) | (cell >= self.n_cells)):
            raise ValidationError(f"cell index {cell} outside grid of {self.n_cells} cells")
        return cell % self.nx, cell // self.nx

    def cell_containing(self, x: float, y: float) -> int:
        lx, ly = self.extent
        if not (0 <= x <= lx and 0 <= y <= ly):
            raise ValidationError(f"point ({x}, {y}) outside domain {lx}x{ly}")
        i = min(int(x // self.dx), self.nx - 1)
        j = min(int(y // self.dy), self.ny - 1)
        return int(self.cell_index(i, j))

    @cached_property
    def centers(self) -> np.ndarray:
        """(n_cells, 2) array of cell-center coordinates."""
        i, j = self.cell_ij(np.arange(self.n_cells))
        return np.column_stack([(i + 0.5) * self.dx, (j + 0.5) * self.dy])

    def distances(self, cells_a, cells_b) -> np.ndarray:
        """Euclidean center-to-center distances, shape (len(a), len(b))."""
        a = self.centers[np.asarray(cells_a, dtype=int)]
        b = self.centers[np.asarray(cells_b, dtype=int)]
        return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


@dataclass(frozen=True)
class StateLayout:
    grid: Grid
    pilot_cells: tuple[int, ...]
    dynamic_kinds: tuple[str, ...]

    @property
    def n_p(self) -> int:
        return len(self.pilot_cells)

    @property
    def n_r(self) -> int:
        return self.grid.n_cells - self.n_p

    @property
    def n_d(self) -> int:
        return self.grid.n_cells * len(self.dynamic_kinds)

    @property
    def n_params(self) -> int:
        return self.grid.n_cells

    @property
    def n_s(self) -> int:
        return self.n_p + self.n_r + self.n_d

    @cached_property
    def nonpilot_cells(self) -> np.ndarray:
        mask = np.ones(self.grid.n_cells, dtype=bool)
        mask[list(self.pilot_cells)] = False
        return np.flatnonzero(mask)

    @cached_property
    def param_cells(self) -> np.ndarray:
        """Grid cell of each entry of the parameter block (x_p then x_r)."""
        return np.concatenate([np.asarray(self.pilot_cells, dtype=int), self.nonpilot_cells])

    @cached_property
    def field_to_param(self) -> np.ndarray:
        """Permutation taking a grid-ordered field to parameter-block order."""
        return self.param_cells

    @cached_property
    def param_to_field(self) -> np.ndarray:
        return np.argsort(self.param_cells)

    @cached_property
    def entry_cells(self) -> np.ndarray:
        """Grid cell associated with every state entry (for distance tapers)."""
        cells = np.arange(self.grid.n_cells)
        return np.concatenate([self.param_cells] + [cells] * len(self.dynamic_kinds))

    @property
    def pilot_slice(self) -> slice:
        return slice(0, self.n_p)

    @property
    def nonpilot_slice(self) -> slice:
        return slice(self.n_p, self.n_p + self.n_r)

    @property
    def param_slice(self) -> slice:
        return slice(0, self.n_params)

    @property
    def dynamic_slice(self) -> slice:
        return slice(self.n_params, self.n_s)

    @cached_property
    def pilot_dynamic_index(self) -> np.ndarray:
        """State indices of the restricted (x_p, x_d) vector."""
        return np.concatenate([np.arange(self.n_p), np.arange(self.n_params, self.n_s)])

    def kind_slice(self, kind: str) -> slice:
        if kind not in self.dynamic_kinds:
            raise ValidationError(f"dynamic kind {kind!r} not in layout {self.dynamic_kinds}")
        k = self.dynamic_kinds.index(kind)
        start = self.n_params + k * self.grid.n_cells
        return slice(start, start + self.grid.n_cells)

    def dynamic_index(self, kind: str, cells) -> np.ndarray:
        return self.kind_slice(kind).start + np.asarray(cells, dtype=int)

    def param_field(self, params: np.ndarray) -> np.ndarray:
        """Parameter block(s) (..., n_g) in state order -> grid order."""
        return np.asarray(params)[..., self.param_to_field]

    def params_from_field(self, field: np.ndarray) -> np.ndarray:
        return np.asarray(field)[..., self.field_to_param]


def build_state_layout(grid: Grid, pilot_cells: Sequence[int],
                       dynamic_kinds: Sequence[str]) -> StateLayout:
    cells = [int(c) for c in pilot_cells]
    if len(set(cells)) != len(cells):
        dup = sorted({c for c in cells if cells.count(c) > 1})
        raise ValidationError(f"duplicate pilot cells {dup}")
    bad = [c for c in cells if not 0 <= c < grid.n_cells]
    if bad:
        raise ValidationError(f"pilot cells {bad} outside grid of {grid.n_cells} cells")
    kinds = tuple(dynamic_kinds)
    unknown = [k for k in kinds if k not in DYNAMIC_KINDS]
    if unknown or len(set(kinds)) != len(kinds):
        raise ValidationError(f"dynamic kinds must be distinct members of {DYNAMIC_KINDS}, got {kinds}")
    # keep head-before-concentration ordering regardless of input order
    kinds = tuple(k for k in DYNAMIC_KINDS if k in kinds)
    return StateLayout(grid, tuple(cells), kinds)


@dataclass(frozen=True)
class StateVector:
    values: np.ndarray
    layout: StateLayout

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.layout.n_s,):
            raise ValidationError(f"state length {v.shape} does not match layout n_s={self.layout.n_s}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def partition(state, layout: StateLayout):
    """Split a state vector into (x_p, x_r, x_d)."""
    v = state.values if isinstance(state, StateVector) else np.asarray(state)
    if v.shape[-1] != layout.n_s:
        raise ValidationError(f"state length {v.shape[-1]} does not match layout n_s={layout.n_s}")
    return v[..., layout.pilot_slice], v[..., layout.nonpilot_slice], v[..., layout.dynamic_slice]


def concatenate(x_p, x_r, x_d) -> np.ndarray:
    return np.concatenate([x_p, x_r, x_d], axis=-1)


@dataclass(frozen=True)
class Ensemble:
    """``n_e`` state realizations stored as rows of a read-only array."""

    values: np.ndarray
    layout: StateLayout = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.layout.n_s:
            raise ValidationError(f"ensemble shape {v.shape} incompatible with n_s={self.layout.n_s}")
        if v.shape[0] < 2:
            raise ValidationError(f"ensemble needs n_e >= 2 members, got {v.shape[0]}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_members(cls, members: Sequence[StateVector]) -> "Ensemble":
        if any(m.layout != members[0].layout for m in members):
            raise ValidationError("ensemble members must share one layout")
        return cls(np.stack([m.values for m in members]), members[0].layout)

    @property
    def n_e(self) -> int:
        return self.values.shape[0]

    def member(self, i: int) -> StateVector:
        return StateVector(self.values[i], self.layout)

    @property
    def params(self) -> np.ndarray:
        return self.values[:, self.layout.param_slice]

    def param_fields(self) -> np.ndarray:
        """(n_e, n_g) parameter fields in grid order."""
        return self.layout.param_field(self.params)

    def dynamic_fields(self, kind: str) -> np.ndarray:
        return self.values[:, self.layout.kind_slice(kind)]

    def replace(self, values: np.ndarray) -> "Ensemble":
        return Ensemble(values, self.layout)

    def anomalies(self) -> np.ndarray:
        return self.values - self.values.mean(axis=0)


def ensemble_moments(ens: Ensemble) -> tuple[StateVector, np.ndarray]:
    """Sample mean and full (n_s, n_s) covariance with divisor n_e - 1.

    Only intended for tests and small layouts; the analysis code never forms
    the full matrix.
    """
    if ens.n_e < 2:
        raise ValidationError("ensemble moments need n_e >= 2")
    mean = ens.values.mean(axis=0)
    A = ens.values - mean
    cov = A.T @ A / (ens.n_e - 1)
    cov = 0.5 * (cov + cov.T)
    return StateVector(mean, ens.layout), cov


@dataclass(frozen=True)
class RngSpec:
    """Deterministic random stream keyed by a master seed and
    (experiment index, purpose tag)."""

    master_seed: int
    experiment_index: int = 0
    purpose: str = "default"

    def generator(self) -> np.random.Generator:
        tag = zlib.crc32(self.purpose.encode("utf-8"))
        seq = np.random.SeedSequence(entropy=int(self.master_seed) & (2**64 - 1),
                                     spawn_key=(int(self.experiment_index), tag))
        return np.random.default_rng(seq)

    def child(self, purpose: str) -> "RngSpec":
        return RngSpec(self.master_seed, self.experiment_index, purpose)
