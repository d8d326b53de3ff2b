"""Kalman-filter analysis steps.

Small-instance oracles (KF, PP-KF) work on explicit mean/covariance pairs.
The ensemble analyses work on (n_e, n_s) member arrays and only ever form
covariances with the observed variables, never the full state covariance.
No analysis modifies its input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_solve

from .core import Ensemble, StateLayout, ValidationError
from .geostat import (InterpolationOperator, build_interpolation_operator, kriging_weights,
                      normal_score_back, normal_score_forward, taper_weight)
from .linalg import spd_factor

INNOVATION_JITTER = 1e-10
INNOVATION_COND_LIMIT = 1e12

VARIANTS = ("enkf", "damped", "local", "hybrid", "iterative", "dual",
            "normal_score", "pp_enkf", "interpolated")
KRIGING_COVARIANCES = ("ensemble", "prior")


@dataclass(frozen=True)
class KalmanBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float)
        P = np.array(self.covariance, dtype=float)
        if P.shape != (m.size, m.size):
            raise ValidationError(f"covariance shape {P.shape} does not match mean length {m.size}")
        if not np.allclose(P, P.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(P).max(initial=0))):
            raise ValidationError("covariance must be symmetric")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", 0.5 * (P + P.T))


@dataclass(frozen=True)
class ObservationBatch:
    """Measurements of one assimilation time.

    ``H`` is the (n_m, n_s) linear measurement map, ``noise_std`` the
    per-entry standard deviations (R = diag(noise_std**2)), and
    ``perturbed`` the (n_e, n_m) per-member copies d_i = d + eps_i.
    """

    d: np.ndarray
    noise_std: np.ndarray
    H: np.ndarray
    perturbed: Optional[np.ndarray] = None

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float))
        s = np.broadcast_to(np.asarray(self.noise_std, dtype=float), d.shape).copy()
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if H.shape[0] != d.size:
            raise ValidationError(f"H has {H.shape[0]} rows but d has {d.size} entries")
        if np.any(~(s > 0)):
            raise ValidationError("observation noise standard deviations must be > 0")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "noise_std", s)
        object.__setattr__(self, "H", H)
        if self.perturbed is not None:
            p = np.atleast_2d(np.asarray(self.perturbed, dtype=float))
            if p.shape[1] != d.size:
                raise ValidationError("perturbed observations do not match n_m")
            object.__setattr__(self, "perturbed", p)

    @property
    def n_m(self) -> int:
        return self.d.size

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.noise_std ** 2)

    def perturb(self, n_e: int, rng: np.random.Generator) -> "ObservationBatch":
        eps = rng.standard_normal((n_e, self.n_m)) * self.noise_std
        return ObservationBatch(self.d, self.noise_std, self.H, self.d + eps)

    def member_obs(self, n_e: int) -> np.ndarray:
        if self.perturbed is None:
            raise ValidationError("ensemble analyses need perturbed observations (call perturb)")
        if self.perturbed.shape[0] != n_e:
            raise ValidationError(f"{self.perturbed.shape[0]} perturbed copies for {n_e} members")
        return self.perturbed

    def observed_cells(self, layout: StateLayout) -> np.ndarray:
        """Grid cell of each measurement (state entry with the largest weight)."""
        return layout.entry_cells[np.argmax(np.abs(self.H), axis=1)]


@dataclass(frozen=True)
class FilterConfig:
    variant: str = "enkf"
    damping: float = 0.1
    localization_length_scale: float = 150.0
    hybrid_alpha: float = 0.5
    background_param_variance: float = 0.25
    layout: Optional[StateLayout] = field(default=None, repr=False)
    P_rp0: Optional[np.ndarray] = field(default=None, repr=False)
    P_pp0: Optional[np.ndarray] = field(default=None, repr=False)   # prior pilot block (interpolated)
    prior_mean: float = -12.5
    kriging_covariance: str = "ensemble"   # pp_enkf: P_pp from the ensemble or the prior

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown filter variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 <= self.damping <= 1:
            raise ValidationError(f"damping must be in [0, 1], got {self.damping}")
        if not self.localization_length_scale > 0:
            raise ValidationError("localization length scale must be > 0")
        if not 0 <= self.hybrid_alpha <= 1:
            raise ValidationError(f"hybrid alpha must be in [0, 1], got {self.hybrid_alpha}")
        if self.background_param_variance < 0:
            raise ValidationError("background parameter variance must be >= 0")
        if self.variant in ("pp_enkf", "interpolated") and self.P_rp0 is None:
            raise ValidationError(f"variant {self.variant!r} needs P_rp0")
        if self.kriging_covariance not in KRIGING_COVARIANCES:
            raise ValidationError(f"kriging_covariance must be one of {KRIGING_COVARIANCES}")
        needs_pp0 = self.variant == "interpolated" or (
            self.variant == "pp_enkf" and self.kriging_covariance == "prior")
        if needs_pp0 and self.P_pp0 is None:
            raise ValidationError(f"variant {self.variant!r} needs the prior pilot covariance P_pp0")


@dataclass
class RunContext:
    """What the restart-based variants need from the assimilation loop.

    ``propagate(values, n_steps)`` advances an (n_e, n_s) array.  ``step`` is
    the time step of the current analysis; ``window_start`` the analysis
    ensemble at ``window_start_step``.
    """

    propagate: Callable[[np.ndarray, int], np.ndarray]
    initial_dynamics: np.ndarray
    step: int
    window_start_step: int
    window_start: np.ndarray


# ------------------------------------------------------------ KF oracles

def _innovation_factor(S):
    factor, _ = spd_factor(S, INNOVATION_JITTER, INNOVATION_COND_LIMIT, "innovation matrix")
    return factor


def kalman_update(belief: KalmanBelief, obs: ObservationBatch) -> KalmanBelief:
    x, P, H = belief.mean, belief.covariance, obs.H
    PHt = P @ H.T
    S = H @ PHt + obs.R
    f = _innovation_factor(S)
    x_a = x + PHt @ cho_solve(f, obs.d - H @ x)
    P_a = P - PHt @ cho_solve(f, PHt.T)
    return KalmanBelief(x_a, 0.5 * (P_a + P_a.T))


def compute_p_yppy(P_pd_block: np.ndarray, H_pd: np.ndarray) -> np.ndarray:
    """H P Hᵀ with every covariance involving non-pilot parameters removed.

    ``P_pd_block`` is the (n_p + n_d) square covariance of the restricted
    vector and ``H_pd`` the measurement columns of pilot and dynamic entries.
    """
    P = np.asarray(P_pd_block, dtype=float)
    H_pd = np.atleast_2d(H_pd)
    if P.shape != (H_pd.shape[1], H_pd.shape[1]):
        raise ValidationError(f"block shape {P.shape} does not match H columns {H_pd.shape[1]}")
    Y = H_pd @ P @ H_pd.T
    return 0.5 * (Y + Y.T)


def ppkf_update(belief: KalmanBelief, obs: ObservationBatch, layout: StateLayout,
                P_rp0) -> KalmanBelief:
    """Kalman update restricted to pilot and dynamic entries, carried to
    non-pilot parameters by the kriging operator built from ``P_rp0`` and the
    forecast pilot covariance."""
    idx = layout.pilot_dynamic_index
    x, P = belief.mean, belief.covariance
    Pz = P[np.ix_(idx, idx)]
    Hz = obs.H[:, idx]
    PHt = Pz @ Hz.T
    f = _innovation_factor(compute_p_yppy(Pz, Hz) + obs.R)
    dz = PHt @ cho_solve(f, obs.d - obs.H @ x)
    dPz = -PHt @ cho_solve(f, PHt.T)
    op = build_interpolation_operator(P_rp0, Pz[:layout.n_p, :layout.n_p], layout)
    M = op.matrix()
    P_a = P + M @ dPz @ M.T
    return KalmanBelief(x + op.apply(dz), 0.5 * (P_a + P_a.T))


# ------------------------------------------------------------ ensemble core

def _as_values(ens):
    if isinstance(ens, Ensemble):
        return ens.values, ens.layout
    raise ValidationError("expected an Ensemble")


def _obs_anomalies(X: np.ndarray, H: np.ndarray):
    Y = X @ H.T
    return Y, Y - Y.mean(axis=0)


def _gain_update(A, B, D, R, n_e, taper=None, extra_cross=None, extra_yy=None, alpha=1.0):
    """Member updates D S⁻¹ P_xyᵀ for state anomalies A (n_e, k) and observed
    anomalies B (n_e, n_m).

    P_xy = alpha A^T B/(n_e-1) + (1-alpha) extra_cross, optionally tapered.
    S = alpha B^T B/(n_e-1) + (1-alpha) extra_yy + R.
    """
    P_xy = A.T @ B / (n_e - 1)
    P_yy = B.T @ B / (n_e - 1)
    if extra_cross is not None:
        P_xy = alpha * P_xy + (1.0 - alpha) * extra_cross
        P_yy = alpha * P_yy + (1.0 - alpha) * extra_yy
    if taper is not None:
        P_xy = P_xy * taper
    S = 0.5 * (P_yy + P_yy.T) + R
    f = _innovation_factor(S)
    return cho_solve(f, D.T).T @ P_xy.T


def _enkf_increments(X, obs: ObservationBatch, rows=None):
    """Stochastic EnKF increments (n_e, n_s), optionally only for ``rows``."""
    n_e = X.shape[0]
    Y, B = _obs_anomalies(X, obs.H)
    D = obs.member_obs(n_e) - Y
    A = X - X.mean(axis=0)
    if rows is None:
        return _gain_update(A, B, D, obs.R, n_e)
    dX = np.zeros_like(X)
    dX[:, rows] = _gain_update(A[:, rows], B, D, obs.R, n_e)
    return dX


def enkf_analysis(ens: Ensemble, obs: ObservationBatch) -> Ensemble:
    X, _ = _as_values(ens)
    return ens.replace(X + _enkf_increments(X, obs))


def damped_analysis(ens: Ensemble, obs: ObservationBatch, damping: float = 0.1) -> Ensemble:
    if not 0 <= damping <= 1:
        raise ValidationError(f"damping must be in [0, 1], got {damping}")
    X, L = _as_values(ens)
    dX = _enkf_increments(X, obs)
    dX[:, L.param_slice] *= damping
    return ens.replace(X + dX)


def localization_taper(layout: StateLayout, obs: ObservationBatch, length_scale: float) -> np.ndarray:
    """(n_s, n_m) Gaspari-Cohn weights between state entries and measurements."""
    g = layout.grid
    ucells, inv = np.unique(layout.entry_cells, return_inverse=True)
    dist = g.distances(ucells, obs.observed_cells(layout))
    return taper_weight(dist, length_scale)[inv]


def local_analysis(ens: Ensemble, obs: ObservationBatch, length_scale: float = 150.0) -> Ensemble:
    X, L = _as_values(ens)
    n_e = X.shape[0]
    Y, B = _obs_anomalies(X, obs.H)
    D = obs.member_obs(n_e) - Y
    rho = localization_taper(L, obs, length_scale)
    dX = _gain_update(X - X.mean(axis=0), B, D, obs.R, n_e, taper=rho)
    return ens.replace(X + dX)


def hybrid_analysis(ens: Ensemble, obs: ObservationBatch, alpha: float = 0.5,
                    background_param_variance: float = 0.25, background=None) -> Ensemble:
    """EnKF with alpha * ensemble + (1 - alpha) * diagonal background covariance.

    ``background`` overrides the default diagonal (length n_s).
    """
    if not 0 <= alpha <= 1:
        raise ValidationError(f"hybrid alpha must be in [0, 1], got {alpha}")
    X, L = _as_values(ens)
    n_e = X.shape[0]
    if background is None:
        background = np.zeros(L.n_s)
        background[L.param_slice] = background_param_variance
    b = np.asarray(background, dtype=float)
    if b.shape != (L.n_s,) or np.any(b < 0):
        raise ValidationError("background must be a non-negative diagonal of length n_s")
    BHt = b[:, None] * obs.H.T
    HBHt = obs.H @ BHt
    Y, B = _obs_anomalies(X, obs.H)
    D = obs.member_obs(n_e) - Y
    dX = _gain_update(X - X.mean(axis=0), B, D, obs.R, n_e,
                      extra_cross=BHt, extra_yy=HBHt, alpha=alpha)
    return ens.replace(X + dX)


def hybrid_covariance(ens: Ensemble, alpha: float, background) -> np.ndarray:
    """Mixed covariance alpha P_e + (1 - alpha) diag(background); small layouts only."""
    A = ens.anomalies()
    Pe = A.T @ A / (ens.n_e - 1)
    return alpha * Pe + (1.0 - alpha) * np.diag(background)


def normal_score_analysis(ens: Ensemble, obs: ObservationBatch) -> Ensemble:
    """EnKF in normal-score space for the parameter block; dynamics untransformed."""
    X, L = _as_values(ens)
    ps = L.param_slice
    scores, anchors = normal_score_forward(X[:, ps])
    Z = X.copy()
    Z[:, ps] = scores
    Za = Z + _enkf_increments(Z, obs)
    out = Za.copy()
    out[:, ps] = normal_score_back(Za[:, ps], anchors)
    # untouched entries map back exactly; keep them bit-identical
    same = Za[:, ps] == scores
    out[:, ps] = np.where(same, X[:, ps], out[:, ps])
    return ens.replace(out)


# ------------------------------------------------------------ pilot points

@dataclass
class PilotUpdateInfo:
    """Diagnostics of one pilot-point analysis."""

    forecast: np.ndarray
    restricted_update: np.ndarray      # (n_e, n_p + n_d)
    P_pp_e: np.ndarray
    jitter: float
    weights: np.ndarray                # (n_r, n_p) = P_rp0 P_pp⁻¹


def _restricted_increments(X, obs: ObservationBatch, L: StateLayout):
    idx = L.pilot_dynamic_index
    n_e = X.shape[0]
    Hz = obs.H[:, idx]
    if L.n_r and np.any(obs.H[:, L.nonpilot_slice] != 0):
        raise ValidationError("measurements touch non-pilot parameters; "
                              "every measurement cell must be a pilot point")
    Z = X[:, idx]
    Y = Z @ Hz.T
    B = Y - Y.mean(axis=0)
    D = obs.member_obs(n_e) - Y
    return _gain_update(Z - Z.mean(axis=0), B, D, obs.R, n_e)


def ppenkf_analysis(ens: Ensemble, obs: ObservationBatch, layout: StateLayout = None,
                    P_rp0=None, info: list = None, P_pp0=None) -> Ensemble:
    """Restricted EnKF update of pilot and dynamic entries, spread to the
    non-pilot parameters with ``P_rp0 P_pp,e⁻¹`` (ensemble P_pp).

    Members are updated in place, so the non-pilot fields keep their own
    small-scale variability.  Pass a list as ``info`` to receive a
    :class:`PilotUpdateInfo`.  If ``P_pp0`` is given the kriging weights use
    that fixed prior pilot covariance instead of the ensemble estimate.
    """
    X, L = _as_values(ens)
    if layout is not None and layout != L:
        raise ValidationError("layout does not match the ensemble")
    dz = _restricted_increments(X, obs, L)
    Ap = X[:, L.pilot_slice] - X[:, L.pilot_slice].mean(axis=0)
    P_pp_e = Ap.T @ Ap / (X.shape[0] - 1)
    if L.n_r == 0:
        W, eps = np.zeros((0, L.n_p)), 0.0
    else:
        if P_rp0 is None:
            raise ValidationError("ppenkf_analysis needs P_rp0 when non-pilot cells exist")
        P_krig = P_pp_e if P_pp0 is None else np.asarray(P_pp0, dtype=float)
        W, eps = kriging_weights(np.asarray(P_rp0).reshape(L.n_r, L.n_p), P_krig)
    op = InterpolationOperator(W, L, eps)
    out = X + op.apply(dz)
    if info is not None:
        info.append(PilotUpdateInfo(X, dz, P_pp_e, eps, W))
    return ens.replace(out)


def krige_nonpilots(values: np.ndarray, layout: StateLayout, weights: np.ndarray,
                    mean: float) -> np.ndarray:
    """Replace non-pilot parameters by simple kriging from the pilot values."""
    out = np.array(values, dtype=float)
    if layout.n_r:
        out[..., layout.nonpilot_slice] = mean + (out[..., layout.pilot_slice] - mean) @ weights.T
    return out


def prior_kriging_weights(P_rp0, P_pp0, layout: StateLayout) -> np.ndarray:
    if layout.n_r == 0:
        return np.zeros((0, layout.n_p))
    return build_interpolation_operator(P_rp0, P_pp0, layout).weights


def interpolated_analysis(ens: Ensemble, obs: ObservationBatch, layout: StateLayout = None,
                          P_rp0=None, P_pp0=None, prior_mean: float = -12.5) -> Ensemble:
    """Restricted update of pilot and dynamic entries; the non-pilot field is
    then rebuilt entirely by kriging from the updated pilot values with the
    prior weights ``P_rp0 P_pp0⁻¹``."""
    X, L = _as_values(ens)
    if layout is not None and layout != L:
        raise ValidationError("layout does not match the ensemble")
    dz = _restricted_increments(X, obs, L)
    out = X.copy()
    out[:, L.pilot_dynamic_index] += dz
    if L.n_r:
        W = prior_kriging_weights(P_rp0, P_pp0, L)
        out = krige_nonpilots(out, L, W, prior_mean)
    return ens.replace(out)


# ------------------------------------------------------------ restart variants

def iterative_analysis(ens: Ensemble, obs: ObservationBatch, ctx: RunContext) -> Ensemble:
    """EnKF update, then restart: dynamics reset to the initial condition and
    re-propagated from t = 0 to the current step with the new parameters."""
    X, L = _as_values(ens)
    Xa = X + _enkf_increments(X, obs)
    Xa[:, L.dynamic_slice] = ctx.initial_dynamics
    return ens.replace(ctx.propagate(Xa, ctx.step))


def dual_analysis(ens: Ensemble, obs: ObservationBatch, ctx: RunContext) -> Ensemble:
    """Two-pass update: parameters first, then re-propagation over the current
    window from the previous analysis, then dynamics with the same perturbed
    measurements."""
    X, L = _as_values(ens)
    ps, ds = L.param_slice, L.dynamic_slice
    theta = X[:, ps] + _enkf_increments(X, obs, rows=ps)[:, ps]
    W = np.array(ctx.window_start, dtype=float)
    if W.shape != X.shape:
        raise ValidationError("window-start ensemble does not match the forecast")
    W[:, ps] = theta
    Xf = ctx.propagate(W, ctx.step - ctx.window_start_step)
    Xa = Xf + _enkf_increments(Xf, obs, rows=ds)
    return ens.replace(Xa)


def analyze(ens: Ensemble, obs: ObservationBatch, cfg: FilterConfig,
            ctx: RunContext = None, info: list = None) -> Ensemble:
    v = cfg.variant
    if v == "enkf":
        return enkf_analysis(ens, obs)
    if v == "damped":
        return damped_analysis(ens, obs, cfg.damping)
    if v == "local":
        return local_analysis(ens, obs, cfg.localization_length_scale)
    if v == "hybrid":
        return hybrid_analysis(ens, obs, cfg.hybrid_alpha, cfg.background_param_variance)
    if v == "normal_score":
        return normal_score_analysis(ens, obs)
    if v == "pp_enkf":
        P_pp0 = cfg.P_pp0 if cfg.kriging_covariance == "prior" else None
        return ppenkf_analysis(ens, obs, None, cfg.P_rp0, info, P_pp0)
    if v == "interpolated":
        return interpolated_analysis(ens, obs, None, cfg.P_rp0, cfg.P_pp0, cfg.prior_mean)
    if ctx is None:
        raise ValidationError(f"variant {v!r} needs a run context")
    if v == "iterative":
        return iterative_analysis(ens, obs, ctx)
    return dual_analysis(ens, obs, ctx)
