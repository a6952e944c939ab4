"""Reduced two-variable fluid model for pouring.

The fluid inside the source container is summarized by its remaining volume
and the mean outflow speed.  The outflow speed is modeled as a cubic
polynomial in two physically motivated features: the head-driven speed
sqrt(2 g dh) and the wall-slide factor sin(max(theta - pi/2, 0)).  The six
coefficients are identified from simulated pour data by linear least
squares.  Volume evolves by explicit Euler through the tabulated outflow
cross-section area, and liquid leaving the container follows a gravity
parabola anchored at the outflow centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GRAVITY, GeomTables

FEATURE_NAMES = ("head_speed", "head_speed^2", "head_speed^3",
                 "slide_sin", "slide_sin^2", "slide_sin^3")


@dataclass
class FluidState:
    """Global fluid descriptors: volume (m^3) and mean outflow speed (m/s)."""

    vol: float
    v_out: float = 0.0

    def __post_init__(self):
        if self.vol < 0:
            raise ValueError("vol must be nonnegative")
        if self.v_out < 0:
            raise ValueError("v_out must be nonnegative")


@dataclass
class OutflowCoeffs:
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0
    e: float = 0.0
    f: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e, self.f])

    @classmethod
    def from_array(cls, arr) -> "OutflowCoeffs":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (6,) or not np.all(np.isfinite(arr)):
            raise ValueError("need six finite coefficients")
        return cls(*arr.tolist())


@dataclass
class TrainingSample:
    """One identification tuple: next-step outflow speed and its predictors."""

    v_out_next: float
    theta_next: float
    vol: float
    dh: float
    degraded: bool = False  # surface fit fell back to linear

    def __post_init__(self):
        if self.v_out_next < 0:
            raise ValueError("v_out_next must be nonnegative")
        if self.dh < 0:
            raise ValueError("dh must be nonnegative")


@dataclass
class LeanAzimuth:
    """Container orientation: leaning angle from vertical plus tilt azimuth."""

    theta: float
    phi: float

    def __post_init__(self):
        if not 0.0 <= self.theta <= math.pi + 1e-12:
            raise ValueError("theta must lie in [0, pi]")
        if not -math.pi - 1e-12 < self.phi <= math.pi + 1e-12:
            raise ValueError("phi must lie in (-pi, pi]")


@dataclass
class QuadraticCurve:
    """Gravity parabola C(t) = g/2 t^2 + V t + E of the free-flying liquid."""

    gravity: np.ndarray
    v_out: np.ndarray
    origin: np.ndarray

    def position(self, t):
        t = np.asarray(t, dtype=float)
        return (0.5 * np.multiply.outer(t * t, self.gravity)
                + np.multiply.outer(t, self.v_out) + self.origin)

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        return np.multiply.outer(t, self.gravity) + self.v_out


@dataclass
class FluidTrajectory:
    """Discretized fluid descriptors along a pour."""

    vol: np.ndarray
    v_out: np.ndarray
    thetas: np.ndarray
    dt: float
    clamp_events: int = 0


@dataclass
class FitResult:
    coeffs: OutflowCoeffs
    rmse: float
    n_samples: int


def bernoulli_speed(dh: float) -> float:
    """Head-driven speed sqrt(2 g dh)."""
    if dh < 0:
        raise ValueError("dh must be nonnegative")
    return math.sqrt(2.0 * GRAVITY * dh)


def slide_factor(theta: float) -> float:
    return math.sin(max(theta - 0.5 * math.pi, 0.0))


def _features(dh, theta):
    """Design-matrix rows for the six-coefficient speed model."""
    b = np.sqrt(2.0 * GRAVITY * np.asarray(dh, dtype=float))
    s = np.sin(np.maximum(np.asarray(theta, dtype=float) - 0.5 * math.pi, 0.0))
    return np.stack([b, b ** 2, b ** 3, s, s ** 2, s ** 3], axis=-1)


def outflow_speed_raw(coeffs: OutflowCoeffs, theta: float, vol: float,
                      tables: GeomTables) -> float:
    """Unclamped model speed; may be slightly negative for poor fits."""
    q = tables.interp_many(theta, vol)
    feat = _features(float(q["dh"][0]), theta)
    return float(feat @ coeffs.as_array())


def outflow_speed(coeffs: OutflowCoeffs, theta: float, vol: float,
                  tables: GeomTables) -> float:
    """Model speed clamped to be nonnegative."""
    return max(0.0, outflow_speed_raw(coeffs, theta, vol, tables))


def step(state: FluidState, theta_next: float, dt: float,
         tables: GeomTables, coeffs: OutflowCoeffs) -> FluidState:
    """One forward-Euler step: speed from the model, volume through A."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v_next = outflow_speed(coeffs, theta_next, state.vol, tables)
    q = tables.interp_many(theta_next, state.vol)
    vol_next = max(0.0, state.vol - float(q["A"][0]) * v_next * dt)
    return FluidState(vol=vol_next, v_out=v_next)


def rollout(state0: FluidState, thetas, dt: float,
            tables: GeomTables, coeffs: OutflowCoeffs) -> FluidTrajectory:
    """Integrate the pour over a leaning-angle schedule.

    Volume is non-increasing and clamped at zero; negative model speeds are
    clamped and counted in ``clamp_events``.
    """
    thetas = np.asarray(thetas, dtype=float)
    n = len(thetas)
    vol = np.empty(n)
    v = np.empty(n)
    vol[0], v[0] = state0.vol, state0.v_out
    carr = coeffs.as_array()
    clamps = 0
    for i in range(n - 1):
        q = tables.interp_many(thetas[i + 1], vol[i])
        raw = float(_features(float(q["dh"][0]), thetas[i + 1]) @ carr)
        if raw < 0.0:
            clamps += 1
            raw = 0.0
        v[i + 1] = raw
        vol[i + 1] = max(0.0, vol[i] - float(q["A"][0]) * raw * dt)
    return FluidTrajectory(vol=vol, v_out=v, thetas=thetas.copy(), dt=dt,
                           clamp_events=clamps)


def fit_coefficients(samples, tables: GeomTables) -> FitResult:
    """Least-squares identification of the six speed-model coefficients.

    Features are evaluated in the deployed form: the head height comes from
    the tables at (theta_next, vol), so training and prediction share one
    feature space.  Solved by orthogonal factorization; a rank-deficient
    design matrix raises with the offending feature columns named.
    """
    samples = list(samples)
    if len(samples) < 6:
        raise ValueError(f"insufficient samples: need >= 6, got {len(samples)}")
    thetas = np.array([s.theta_next for s in samples])
    vols = np.array([s.vol for s in samples])
    y = np.array([s.v_out_next for s in samples])
    q = tables.interp_many(thetas, vols)
    X = _features(q["dh"], thetas)

    col_scale = np.linalg.norm(X, axis=0)
    dead = [FEATURE_NAMES[i] for i in range(6) if col_scale[i] < 1e-14]
    if dead:
        raise ValueError(f"rank-deficient design matrix: zero feature columns {dead}")
    if np.linalg.matrix_rank(X, tol=1e-10 * col_scale.max()) < 6:
        # name the columns that QR pivoting ranks as dependent
        from scipy.linalg import qr
        _, R, piv = qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        weak = [FEATURE_NAMES[piv[i]] for i in range(6)
                if diag[i] < 1e-10 * diag[0]]
        raise ValueError(f"rank-deficient design matrix: dependent feature "
                         f"columns {weak}")

    beta, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = X @ beta - y
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    return FitResult(coeffs=OutflowCoeffs.from_array(beta), rmse=rmse,
                     n_samples=len(samples))


def azimuth_rotation(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def outflow_direction_local(theta: float) -> np.ndarray:
    """Tilt-plane outflow direction; horizontal below a 90-degree lean."""
    t = max(theta, 0.5 * math.pi)
    return np.array([math.sin(t), 0.0, math.cos(t)])


def flight_curve(state: FluidState, lean: LeanAzimuth, container_pose,
                 tables: GeomTables) -> QuadraticCurve:
    """Free-flight parabola of the mean outflow in world coordinates.

    ``container_pose`` may be a 4x4 transform or a 3-vector position; only
    the translation is used since the orientation is captured by ``lean``.
    """
    pose = np.asarray(container_pose, dtype=float)
    t_world = pose[:3, 3] if pose.shape == (4, 4) else pose.reshape(3)
    q = tables.interp_many(lean.theta, state.vol)
    e_tilt = np.array([float(q["ex"][0]), 0.0, float(q["ez"][0])])
    rot = azimuth_rotation(lean.phi)
    origin = t_world + rot @ e_tilt
    v_world = state.v_out * (rot @ outflow_direction_local(lean.theta))
    return QuadraticCurve(gravity=np.array([0.0, 0.0, -GRAVITY]),
                          v_out=v_world, origin=origin)


def time_to_altitude(curve: QuadraticCurve, o_t) -> float | None:
    """Smallest nonnegative time at which the curve reaches O_T's altitude.

    Solves <g, C(t) - O_T> = 0; returns None when no nonnegative real root
    exists.
    """
    o_t = np.asarray(o_t, dtype=float)
    g = curve.gravity
    a2 = 0.5 * float(g @ g)
    a1 = float(g @ curve.v_out)
    a0 = float(g @ (curve.origin - o_t))
    disc = a1 * a1 - 4.0 * a2 * a0
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    roots = sorted(((-a1 - sq) / (2.0 * a2), (-a1 + sq) / (2.0 * a2)))
    for r in roots:
        if r >= -1e-12:
            return max(r, 0.0)
    return None
