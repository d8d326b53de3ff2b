import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppenkf.core import (Ensemble, Grid, RngSpec, StateVector, ValidationError, build_state_layout,
                         concatenate, ensemble_moments, partition)


def _layout(n_p, n_r, kinds=("head",)):
    g = Grid(n_p + n_r, 1, 1.0, 1.0)
    return build_state_layout(g, range(n_p), kinds)


def test_grid_geometry():
    g = Grid(31, 31, 2.0, 2.0)
    assert g.n_cells == 961
    assert g.cell_containing(19.0, 31.0) == 15 * 31 + 9
    assert np.allclose(g.centers[0], [1.0, 1.0])
    assert g.distances([0], [1])[0, 0] == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        g.cell_containing(63.0, 1.0)
    with pytest.raises(ValidationError):
        Grid(0, 3, 1.0, 1.0)


def test_partition_example():
    # dynamic variables cover every cell, so n_d = 4 on a 4-cell grid
    g = Grid(4, 1, 1.0, 1.0)
    L = build_state_layout(g, (0, 1), ("head",))
    assert L.n_s == 8
    xp, xr, xd = partition(np.arange(1, 9.0), L)
    assert xp.tolist() == [1, 2] and xr.tolist() == [3, 4] and xd.tolist() == [5, 6, 7, 8]
    L0 = build_state_layout(Grid(2, 2, 1.0, 1.0), (0, 1), ())
    xp, xr, xd = partition(np.arange(1, 5.0), L0)
    assert xp.tolist() == [1, 2] and xr.tolist() == [3, 4] and xd.size == 0


def test_partition_no_nonpilots():
    g = Grid(3, 1, 1.0, 1.0)
    L = build_state_layout(g, (0, 1, 2), ("head",))
    _, xr, _ = partition(np.zeros(L.n_s), L)
    assert xr.size == 0


def test_partition_length_mismatch():
    with pytest.raises(ValidationError):
        partition(np.zeros(5), _layout(2, 2))


@given(st.integers(0, 6), st.integers(0, 6), st.sampled_from([(), ("head",), ("head", "concentration")]),
       st.integers(0, 2 ** 32 - 1))
@settings(max_examples=60, deadline=None)
def test_partition_concatenate_bijection(n_p, n_r, kinds, seed):
    if n_p + n_r == 0:
        return
    L = _layout(n_p, n_r, kinds)
    x = np.random.default_rng(seed).normal(size=L.n_s)
    assert np.array_equal(concatenate(*partition(x, L)), x)


def test_layout_orders_heads_first_and_rejects_duplicates():
    g = Grid(3, 3, 1.0, 1.0)
    L = build_state_layout(g, (4,), ("concentration", "head"))
    assert L.dynamic_kinds == ("head", "concentration")
    assert L.kind_slice("head").start == 9
    with pytest.raises(ValidationError):
        build_state_layout(g, (1, 1), ("head",))
    with pytest.raises(ValidationError):
        build_state_layout(g, (9,), ("head",))
    with pytest.raises(ValidationError):
        build_state_layout(g, (1,), ("pressure",))


def test_param_field_roundtrip(toy_layout, rng):
    f = rng.normal(size=toy_layout.grid.n_cells)
    assert np.array_equal(toy_layout.param_field(toy_layout.params_from_field(f)), f)


def test_state_and_ensemble_immutable(toy_layout):
    s = StateVector(np.zeros(toy_layout.n_s), toy_layout)
    with pytest.raises(ValueError):
        s.values[0] = 1.0
    e = Ensemble(np.zeros((3, toy_layout.n_s)), toy_layout)
    with pytest.raises(ValueError):
        e.values[0, 0] = 1.0
    with pytest.raises(ValidationError):
        Ensemble(np.zeros((1, toy_layout.n_s)), toy_layout)


def test_moments_two_members():
    L = _layout(2, 2)
    y, a = np.linspace(-1, 1, L.n_s), 0.3
    ens = Ensemble(np.stack([y + a, y - a]), L)
    mean, cov = ensemble_moments(ens)
    assert np.allclose(mean.values, y)
    assert np.allclose(np.diag(cov), 2 * a ** 2)


def test_moments_identical_members():
    L = _layout(1, 2)
    _, cov = ensemble_moments(Ensemble(np.ones((4, L.n_s)), L))
    assert np.all(cov == 0)


def test_moments_monte_carlo():
    g = Grid(2, 1, 1.0, 1.0)
    L = build_state_layout(g, (0, 1), ())
    C = np.array([[1.0, 0.6], [0.6, 2.0]])
    X = np.random.default_rng(3).multivariate_normal([0, 0], C, size=10_000)
    _, cov = ensemble_moments(Ensemble(X, L))
    assert np.all(np.abs(cov - C) <= 0.05 * np.abs(C))


def test_moments_match_brute_force(rng):
    L = _layout(5, 5)
    X = rng.normal(size=(10, 20))
    _, cov = ensemble_moments(Ensemble(X, L))
    m = X.mean(axis=0)
    ref = np.zeros((20, 20))
    for a in range(20):
        for b in range(20):
            ref[a, b] = sum((X[i, a] - m[a]) * (X[i, b] - m[b]) for i in range(10)) / 9
    assert np.max(np.abs(cov - ref)) <= 1e-12 * np.max(np.abs(ref))
    assert np.linalg.eigvalsh(cov).min() > -1e-12


def test_rng_spec_determinism():
    a = RngSpec(5, 2, "prior").generator().normal(size=8)
    b = RngSpec(5, 2, "prior").generator().normal(size=8)
    c = RngSpec(5, 3, "prior").generator().normal(size=8)
    d = RngSpec(5, 2, "noise").generator().normal(size=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
