"""Spherical covariance model, Gaussian random fields, kriging of pilot-point
updates, distance tapers and normal-score transforms."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.special import ndtri
from scipy.stats import rankdata

from .core import Grid, RngSpec, StateLayout, ValidationError
from .linalg import spd_factor

# P_pp inversion for the kriging weights
KRIGING_JITTER = 1e-8
KRIGING_COND_LIMIT = 1e12


@dataclass(frozen=True)
class Variogram:
    """Isotropic spherical covariance model without nugget.

    ``range_`` is the distance at which the covariance reaches zero.
    """

    range_: float
    mean: float = -12.5
    std: float = 0.5
    model: str = "spherical"

    def __post_init__(self):
        if self.model != "spherical":
            raise ValidationError(f"unsupported variogram model {self.model!r}")
        if not self.range_ > 0:
            raise ValidationError(f"variogram range must be > 0, got {self.range_}")
        if self.std < 0:
            raise ValidationError(f"variogram std must be >= 0, got {self.std}")

    @classmethod
    def from_correlation_length(cls, length: float, mean: float, std: float,
                                range_factor: float = 2.0) -> "Variogram":
        return cls(range_=range_factor * length, mean=mean, std=std)

    @property
    def sill(self) -> float:
        return self.std ** 2

    @property
    def nugget(self) -> float:
        return 0.0


def spherical_covariance(h, vg: Variogram):
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValidationError("distance must be non-negative")
    r = np.minimum(h / vg.range_, 1.0)
    c = vg.sill * (1.0 - 1.5 * r + 0.5 * r ** 3)
    return c if c.ndim else float(c)


@lru_cache(maxsize=16)
def _field_factor(grid: Grid, range_: float, sill: float) -> np.ndarray:
    d = grid.distances(np.arange(grid.n_cells), np.arange(grid.n_cells))
    C = spherical_covariance(d, Variogram(range_, 0.0, np.sqrt(sill)))
    try:
        L = cholesky(C, lower=True)
    except LinAlgError as err:
        raise LinAlgError(
            f"spherical covariance (range {range_} m, sill {sill}) on a "
            f"{grid.nx}x{grid.ny} grid with {grid.dx}x{grid.dy} m cells is not "
            f"numerically positive definite") from err
    L.flags.writeable = False
    return L


def generate_gaussian_fields(grid: Grid, vg: Variogram, n: int, rng) -> np.ndarray:
    """``n`` stationary multi-Gaussian realizations, shape (n, n_g).

    Uses the dense lower Cholesky factor of the full cell covariance.
    ``rng`` is an :class:`RngSpec` or a numpy Generator.
    """
    gen = rng.generator() if isinstance(rng, RngSpec) else rng
    if vg.std == 0:
        return np.full((n, grid.n_cells), vg.mean)
    L = _field_factor(grid, float(vg.range_), float(vg.sill))
    z = gen.standard_normal((n, grid.n_cells))
    return vg.mean + z @ L.T


def generate_gaussian_field(grid: Grid, vg: Variogram, rng) -> np.ndarray:
    return generate_gaussian_fields(grid, vg, 1, rng)[0]


@dataclass(frozen=True)
class PriorCrossCovariance:
    """Fixed prior covariances between non-pilot and pilot parameters.

    ``pilot_block`` holds the matching prior pilot-pilot covariance, needed
    for kriging whole fields from pilot values.
    """

    matrix: np.ndarray
    pilot_block: np.ndarray
    source: str
    n_fields: int = 0


def build_prior_cross_covariance(grid: Grid, layout: StateLayout, vg: Variogram,
                                 source: str = "empirical", n_fields: int = 10_000,
                                 rng=None, chunk: int = 2000) -> PriorCrossCovariance:
    pilots = np.asarray(layout.pilot_cells, dtype=int)
    others = layout.nonpilot_cells
    if source == "analytic":
        P_rp = spherical_covariance(grid.distances(others, pilots), vg)
        P_pp = spherical_covariance(grid.distances(pilots, pilots), vg)
        return PriorCrossCovariance(np.atleast_2d(P_rp).reshape(len(others), len(pilots)),
                                    np.atleast_2d(P_pp), "analytic", 0)
    if source != "empirical":
        raise ValidationError(f"unknown cross-covariance source {source!r}")
    if n_fields < 2:
        raise ValidationError(f"empirical cross-covariance needs n_fields >= 2, got {n_fields}")
    if rng is None:
        raise ValidationError("empirical cross-covariance needs a random stream")
    gen = rng.generator() if isinstance(rng, RngSpec) else rng
    # single-pass accumulation of cross products
    cols = np.concatenate([others, pilots])
    s = np.zeros(len(cols))
    S = np.zeros((len(cols), len(pilots)))
    done = 0
    while done < n_fields:
        m = min(chunk, n_fields - done)
        f = generate_gaussian_fields(grid, vg, m, gen)[:, cols] - vg.mean
        s += f.sum(axis=0)
        S += f.T @ f[:, len(others):]
        done += m
    mean = s / n_fields
    cov = (S - n_fields * np.outer(mean, mean[len(others):])) / (n_fields - 1)
    P_rp = cov[:len(others)]
    P_pp = cov[len(others):]
    return PriorCrossCovariance(P_rp, 0.5 * (P_pp + P_pp.T), "empirical", n_fields)


@dataclass(frozen=True)
class InterpolationOperator:
    """Kriging operator mapping (pilot, dynamic) updates to full-state updates.

    Only the non-pilot weight block ``P_rp0 P_pp^-1`` is stored; the identity
    blocks are implicit.
    """

    weights: np.ndarray
    layout: StateLayout
    jitter: float = 0.0

    def matrix(self) -> np.ndarray:
        L = self.layout
        M = np.zeros((L.n_s, L.n_p + L.n_d))
        M[:L.n_p, :L.n_p] = np.eye(L.n_p)
        M[L.n_p:L.n_params, :L.n_p] = self.weights
        M[L.n_params:, L.n_p:] = np.eye(L.n_d)
        return M

    def apply(self, update_pd: np.ndarray) -> np.ndarray:
        """(..., n_p + n_d) restricted updates -> (..., n_s) full updates."""
        L = self.layout
        u = np.asarray(update_pd)
        up, ud = u[..., :L.n_p], u[..., L.n_p:]
        ur = up @ self.weights.T
        return np.concatenate([up, ur, ud], axis=-1)


def kriging_weights(P_rp0: np.ndarray, P_pp: np.ndarray):
    """``P_rp0 P_pp^-1`` via a jittered symmetric factorization."""
    factor, eps = spd_factor(P_pp, KRIGING_JITTER, KRIGING_COND_LIMIT, "pilot covariance P_pp")
    W = cho_solve(factor, np.asarray(P_rp0).T, check_finite=False).T
    return W, eps


def build_interpolation_operator(P_rp0, P_pp, layout: StateLayout) -> InterpolationOperator:
    P_rp0 = np.asarray(P_rp0, dtype=float).reshape(layout.n_r, layout.n_p)
    if layout.n_r == 0:
        return InterpolationOperator(np.zeros((0, layout.n_p)), layout)
    P_pp = np.atleast_2d(np.asarray(P_pp, dtype=float))
    if P_pp.shape != (layout.n_p, layout.n_p):
        raise ValidationError(f"P_pp shape {P_pp.shape} != ({layout.n_p}, {layout.n_p})")
    if not np.allclose(P_pp, P_pp.T, rtol=1e-10, atol=1e-14):
        raise ValidationError("P_pp must be symmetric")
    W, eps = kriging_weights(P_rp0, P_pp)
    return InterpolationOperator(W, layout, eps)


def taper_weight(h, length_scale: float):
    """Gaspari-Cohn fifth-order compactly supported correlation.

    Equals 1 at ``h = 0`` and vanishes for ``h >= 2 * length_scale``.
    """
    if not length_scale > 0:
        raise ValidationError(f"taper length scale must be > 0, got {length_scale}")
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValidationError("distance must be non-negative")
    r = h / length_scale
    w = np.zeros_like(r)
    inner = r <= 1.0
    outer = (r > 1.0) & (r < 2.0)
    ri = r[inner]
    w[inner] = ((((-0.25 * ri + 0.5) * ri + 0.625) * ri - 5.0 / 3.0) * ri ** 2) + 1.0
    ro = r[outer]
    w[outer] = (((((ro / 12.0 - 0.5) * ro + 0.625) * ro + 5.0 / 3.0) * ro - 5.0) * ro
                + 4.0 - 2.0 / (3.0 * ro))
    w = np.clip(w, 0.0, 1.0)
    return w if w.ndim else float(w)


# ---------------------------------------------------------------- normal score

NS_CLAMP = 4.0


@dataclass(frozen=True)
class NormalScoreAnchors:
    """Sorted values per column and the shared standard-normal anchor scores."""

    values: np.ndarray  # (n, m) sorted along axis 0
    scores: np.ndarray  # (n,)


def _anchor_scores(n: int) -> np.ndarray:
    return ndtri((np.arange(1, n + 1) - 0.5) / n)


def normal_score_forward(values):
    """Per-column transform of an (n,) or (n, m) sample to normal scores.

    Plotting position ``(rank - 0.5) / n``; tied values share the score of
    their average rank.
    """
    x = np.asarray(values, dtype=float)
    one_d = x.ndim == 1
    X = x[:, None] if one_d else x
    n = X.shape[0]
    if n < 2:
        raise ValidationError("normal score transform needs at least 2 values")
    srt = np.sort(X, axis=0)
    if np.any(srt[0] == srt[-1]):
        bad = np.flatnonzero(srt[0] == srt[-1])
        raise ValidationError(f"degenerate (constant) distribution in column(s) {bad[:10].tolist()}")
    ranks = rankdata(X, axis=0, method="average")
    scores = ndtri((ranks - 0.5) / n)
    anchors = NormalScoreAnchors(srt, _anchor_scores(n))
    return (scores[:, 0] if one_d else scores), anchors


def normal_score_back(scores, anchors: NormalScoreAnchors):
    """Inverse transform by linear interpolation between anchors.

    Scores are clamped to +-4; beyond the outermost anchors the end segments
    are extended linearly.
    """
    z = np.asarray(scores, dtype=float)
    Z = z[:, None] if z.ndim == 1 else z
    if Z.shape[1] != anchors.values.shape[1]:
        raise ValidationError("score columns do not match anchor table")
    Z = np.clip(Z, -NS_CLAMP, NS_CLAMP)
    s = anchors.scores
    v = anchors.values
    n = len(s)
    # segment k spans anchors k, k+1; end segments extrapolate
    k = np.clip(np.searchsorted(s, Z, side="right") - 1, 0, n - 2)
    cols = np.arange(Z.shape[1])[None, :]
    s0, s1 = s[k], s[k + 1]
    v0, v1 = v[k, cols], v[k + 1, cols]
    out = v0 + (Z - s0) * (v1 - v0) / (s1 - s0)
    return out[:, 0] if z.ndim == 1 else out


def export_field_csv(path, grid: Grid, values) -> None:
    """Write a grid-ordered field as ``cell_index,x,y,value`` rows."""
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_cells,):
        raise ValidationError(f"field length {values.shape} != n_g={grid.n_cells}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_index", "x", "y", "value"])
        for c, ((x, y), v) in enumerate(zip(grid.centers, values)):
            w.writerow([c, f"{x:.6g}", f"{y:.6g}", f"{v:.6g}"])
