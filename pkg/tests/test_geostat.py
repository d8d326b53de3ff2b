import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kstest, norm

from ppenkf.core import Grid, RngSpec, ValidationError, build_state_layout
from ppenkf.geostat import (Variogram, build_interpolation_operator, build_prior_cross_covariance,
                            export_field_csv, generate_gaussian_field, generate_gaussian_fields,
                            kriging_weights, normal_score_back, normal_score_forward,
                            spherical_covariance, taper_weight)

GRID = Grid(31, 31, 2.0, 2.0)
VG = Variogram.from_correlation_length(50.0, -12.5, 0.5)


@pytest.fixture(scope="module")
def fields():
    return generate_gaussian_fields(GRID, VG, 2000, RngSpec(11, 0, "test-fields"))


def test_spherical_examples():
    vg = Variogram(100.0, 0.0, 0.5)
    assert spherical_covariance(0.0, vg) == pytest.approx(0.25)
    assert spherical_covariance(100.0, vg) == 0.0
    assert spherical_covariance(200.0, vg) == 0.0
    assert spherical_covariance(50.0, vg) == pytest.approx(0.078125, abs=1e-15)
    with pytest.raises(ValidationError):
        spherical_covariance(-1.0, vg)


@given(st.lists(st.floats(0, 500), min_size=2, max_size=20))
def test_spherical_nonincreasing_and_bounded(h):
    h = np.sort(h)
    c = spherical_covariance(h, Variogram(120.0, 0.0, 0.7))
    assert np.all(np.diff(c) <= 1e-15)
    assert np.all((c >= 0) & (c <= 0.49 + 1e-15))


def test_variogram_validation():
    with pytest.raises(ValidationError):
        Variogram(0.0)
    with pytest.raises(ValidationError):
        Variogram(10.0, std=-1)
    assert Variogram.from_correlation_length(60.0, 0, 1).range_ == 120.0


def test_constant_field_when_std_zero():
    f = generate_gaussian_field(GRID, Variogram(100.0, -12.5, 0.0), RngSpec(0))
    assert np.all(f == -12.5)


def test_field_moments(fields):
    assert abs(fields.mean() - (-12.5)) < 0.02
    assert abs(fields.std() - 0.5) < 0.02


def test_field_variogram_reproduction(fields):
    # lags along x and y at exact multiples of the 2 m cell size
    a = fields.reshape(-1, 31, 31)
    for lag in (10.0, 25.0, 50.0):
        if lag % 2 == 0:
            k = int(lag / 2)
            dx = a[:, :, k:] - a[:, :, :-k]
            dy = a[:, k:, :] - a[:, :-k, :]
            gamma = 0.5 * np.mean(np.concatenate([dx.ravel(), dy.ravel()]) ** 2)
        else:
            # odd lag: interpolate between the neighbouring even lags
            k0, k1 = int(lag // 2), int(lag // 2) + 1
            g0 = 0.5 * np.mean((a[:, :, k0:] - a[:, :, :-k0]) ** 2)
            g1 = 0.5 * np.mean((a[:, :, k1:] - a[:, :, :-k1]) ** 2)
            w = (lag - 2 * k0) / 2
            expected = 0.25 - ((1 - w) * spherical_covariance(2 * k0, VG) + w * spherical_covariance(2 * k1, VG))
            assert abs((1 - w) * g0 + w * g1 - expected) < 0.1 * expected
            continue
        expected = 0.25 - spherical_covariance(lag, VG)
        assert abs(gamma - expected) < 0.1 * expected


def test_fields_deterministic():
    a = generate_gaussian_fields(GRID, VG, 3, RngSpec(4, 1, "x"))
    b = generate_gaussian_fields(GRID, VG, 3, RngSpec(4, 1, "x"))
    assert np.array_equal(a, b)


def test_cross_covariance_analytic_examples():
    g = Grid(3, 1, 50.0, 50.0)
    L = build_state_layout(g, (0,), ())
    cc = build_prior_cross_covariance(g, L, Variogram(100.0, 0.0, 0.5), "analytic")
    # cells 1 and 2 are 50 m and 100 m from the pilot
    assert cc.matrix[0, 0] == pytest.approx(0.078125)
    assert cc.matrix[1, 0] == 0.0
    assert cc.pilot_block[0, 0] == pytest.approx(0.25)


def test_cross_covariance_empirical_converges():
    L = build_state_layout(GRID, (100, 480, 800), ())
    ana = build_prior_cross_covariance(GRID, L, VG, "analytic").matrix
    errs = []
    for n in (100, 1000, 10_000):
        emp = build_prior_cross_covariance(GRID, L, VG, "empirical", n, RngSpec(2, 0, "cc"))
        errs.append(np.abs(emp.matrix - ana).max())
    assert errs[-1] < 0.02
    assert errs[0] > errs[-1]
    assert np.all(np.abs(emp.matrix) <= 0.25 * 1.1)
    with pytest.raises(ValidationError):
        build_prior_cross_covariance(GRID, L, VG, "empirical", 1, RngSpec(0))
    with pytest.raises(ValidationError):
        build_prior_cross_covariance(GRID, L, VG, "spline")


def test_interpolation_operator_blocks(rng):
    g = Grid(4, 3, 10.0, 10.0)
    L = build_state_layout(g, (1, 6, 11), ("head",))
    cc = build_prior_cross_covariance(g, L, Variogram(30.0, 0, 0.5), "analytic")
    op = build_interpolation_operator(cc.matrix, cc.pilot_block, L)
    M = op.matrix()
    assert np.array_equal(M[:L.n_p, :L.n_p], np.eye(L.n_p))
    assert np.array_equal(M[L.n_params:, L.n_p:], np.eye(L.n_d))
    assert np.allclose(M[L.n_p:L.n_params, :L.n_p], cc.matrix @ np.linalg.inv(cc.pilot_block))
    u = rng.normal(size=L.n_p + L.n_d)
    full = op.apply(u)
    assert np.array_equal(full[:L.n_p], u[:L.n_p])
    assert np.array_equal(full[L.n_params:], u[L.n_p:])
    assert np.allclose(full, M @ u)
    assert np.all(op.apply(np.zeros_like(u)) == 0)


def test_interpolation_one_pilot_weight():
    g = Grid(3, 1, 10.0, 10.0)
    L = build_state_layout(g, (1,), ())
    P_rp = np.array([[0.1], [0.05]])
    op = build_interpolation_operator(P_rp, [[0.25]], L)
    assert np.allclose(op.weights[:, 0], [0.4, 0.2])


def test_interpolation_all_pilots_identity():
    g = Grid(2, 2, 1.0, 1.0)
    L = build_state_layout(g, range(4), ("head",))
    op = build_interpolation_operator(np.zeros((0, 4)), np.eye(4), L)
    assert np.array_equal(op.matrix(), np.eye(L.n_s))


def test_interpolation_rejects_bad_pilot_block():
    g = Grid(3, 1, 10.0, 10.0)
    L = build_state_layout(g, (0, 1), ())
    with pytest.raises(ValidationError):
        build_interpolation_operator(np.zeros((1, 2)), [[1.0, 0.5], [0.0, 1.0]], L)
    with pytest.raises(ValidationError):
        build_interpolation_operator(np.zeros((1, 2)), np.eye(3), L)


def test_kriging_weights_jitter_on_singular_block():
    P = np.ones((3, 3))
    W, eps = kriging_weights(np.ones((2, 3)), P)
    assert eps == pytest.approx(1e-8)
    assert np.all(np.isfinite(W))


def test_taper_examples():
    assert taper_weight(0.0, 150.0) == 1.0
    assert taper_weight(300.0, 150.0) == 0.0
    assert taper_weight(450.0, 150.0) == 0.0
    assert taper_weight(150.0, 150.0) == pytest.approx(5.0 / 24.0, abs=1e-15)
    with pytest.raises(ValidationError):
        taper_weight(1.0, 0.0)


@given(st.lists(st.floats(0, 1000), min_size=2, max_size=30), st.floats(1, 300))
def test_taper_is_monotone_correlation(h, c):
    h = np.sort(h)
    w = taper_weight(h, c)
    assert np.all((w >= 0) & (w <= 1))
    assert np.all(np.diff(w) <= 1e-12)
    assert np.all(w[h >= 2 * c] == 0)


def test_normal_score_three_values():
    # plotting positions (r - 0.5) / 3 = 1/6, 1/2, 5/6
    s, _ = normal_score_forward(np.array([3.0, 1.0, 2.0]))
    assert np.allclose(s, [0.967422, -0.967422, 0.0], atol=1e-6)
    assert np.allclose(s, norm.ppf([5 / 6, 1 / 6, 0.5]), atol=1e-12)


def test_normal_score_gaussian_input():
    x = np.random.default_rng(8).standard_normal(10_000)
    s, _ = normal_score_forward(x)
    assert kstest(s, norm.cdf).statistic < 0.03
    assert np.corrcoef(s, x)[0, 1] > 0.999


@given(st.integers(2, 60), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_normal_score_roundtrip_and_monotone(n, m, seed):
    x = np.random.default_rng(seed).gamma(2.0, size=(n, m))
    s, anchors = normal_score_forward(x)
    assert np.allclose(normal_score_back(s, anchors), x, atol=1e-12)
    for j in range(m):
        o = np.argsort(x[:, j])
        assert np.all(np.diff(s[o, j]) >= 0)


def test_normal_score_degenerate_and_clamped():
    with pytest.raises(ValidationError):
        normal_score_forward(np.ones(5))
    x = np.array([0.0, 1.0, 2.0, 4.0])
    _, anchors = normal_score_forward(x)
    hi = normal_score_back(np.array([50.0]), anchors)[0]
    assert hi == pytest.approx(normal_score_back(np.array([4.0]), anchors)[0])
    assert np.isfinite(hi) and hi > 4.0


def test_export_field_csv(tmp_path):
    g = Grid(2, 2, 1.0, 1.0)
    p = tmp_path / "f.csv"
    export_field_csv(p, g, np.array([1.0, 2.0, 3.0, 4.5]))
    lines = p.read_text().splitlines()
    assert lines[0] == "cell_index,x,y,value" and lines[4] == "3,1.5,1.5,4.5"
    with pytest.raises(ValidationError):
        export_field_csv(p, g, np.zeros(3))
