"""Kalman filter fusing 3-DoF localization measurements with odometry.

State is [x, y, theta] with a 3x3 covariance. Prediction applies a
constant-velocity motion model (vehicle-frame velocities rotated into the
global frame) with its Jacobian; the update step measures the full state
(H = I) and uses the Joseph-form covariance update for numerical robustness.
All angle differences are wrapped before use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .geometry import wrap_angle

PSD_TOL = -1e-9


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2.0


def _check_psd(m: np.ndarray, name: str) -> None:
    if m.shape != (3, 3):
        raise InputError(f"{name} must be 3x3, got {m.shape}")
    if np.abs(m - m.T).max() > 1e-9:
        raise InputError(f"{name} not symmetric")
    if np.linalg.eigvalsh(m).min() < PSD_TOL:
        raise InputError(f"{name} not positive semi-definite")


@dataclass(frozen=True)
class KfState:
    mu: np.ndarray      # [x, y, theta]
    sigma: np.ndarray   # 3x3 covariance

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(3).copy()
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma)):
            raise InputError("non-finite filter state")
        _check_psd(sigma, "sigma")
        mu[2] = wrap_angle(mu[2])
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", _symmetrize(sigma))


@dataclass(frozen=True)
class OdomSample:
    """Vehicle-frame velocities over one interval of length dt."""

    vx: float
    vy: float
    omega: float
    dt: float

    def __post_init__(self):
        if self.dt <= 0:
            raise InputError(f"dt must be positive, got {self.dt}")


def kf_predict(state: KfState, odom: OdomSample, q: np.ndarray) -> KfState:
    """Advance the state by dead reckoning; q is process noise per second."""
    q = np.asarray(q, dtype=np.float64)
    _check_psd(q, "Q")
    x, y, th = state.mu
    c, s = math.cos(th), math.sin(th)
    dt = odom.dt
    gx = (odom.vx * c - odom.vy * s) * dt
    gy = (odom.vx * s + odom.vy * c) * dt
    mu = np.array([x + gx, y + gy, wrap_angle(th + odom.omega * dt)])
    f = np.array([[1.0, 0.0, -gy],
                  [0.0, 1.0, gx],
                  [0.0, 0.0, 1.0]])
    sigma = _symmetrize(f @ state.sigma @ f.T + q * dt)
    return KfState(mu, sigma)


def kf_update(state: KfState, z, r: np.ndarray) -> KfState:
    """Full-state measurement update (H = I), Joseph-form covariance."""
    z = np.asarray(z, dtype=np.float64).reshape(3)
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise InputError(f"R must be 3x3, got {r.shape}")
    if np.abs(r - r.T).max() > 1e-9:
        raise InputError("R not symmetric")

    innovation = z - state.mu
    innovation[2] = wrap_angle(innovation[2])
    s = state.sigma + r
    try:
        # K = sigma @ inv(S); solve on the transposed system
        k = np.linalg.solve(s.T, state.sigma.T).T
    except np.linalg.LinAlgError as e:
        raise NumericalError(
            f"singular innovation covariance (diag {np.diag(s)})") from e
    mu = state.mu + k @ innovation
    mu[2] = wrap_angle(mu[2])
    ikh = np.eye(3) - k
    sigma = _symmetrize(ikh @ state.sigma @ ikh.T + k @ r @ k.T)
    return KfState(mu, sigma)


def estimate_measurement_noise(residuals, floor: float = 1e-4) -> np.ndarray:
    """Diagonal R fit to per-component localization residuals."""
    res = np.asarray(residuals, dtype=np.float64)
    if res.ndim != 2 or res.shape[1] != 3 or len(res) == 0:
        raise InputError("residuals must be a non-empty (n, 3) array")
    res = res.copy()
    res[:, 2] = [wrap_angle(v) for v in res[:, 2]]
    var = np.maximum(np.mean(res * res, axis=0), floor)
    return np.diag(var)


# ---------------------------------------------------------------------------
# stream processing

@dataclass(frozen=True)
class FusedSample:
    t: float
    state: KfState
    kind: str   # "predict" | "update"


def fuse_trajectory(odometry, measurements, init: KfState,
                    q: np.ndarray, r: np.ndarray):
    """Run the filter over time-ordered streams.

    odometry: iterable of (t, vx, vy, omega); velocities are held constant
    from each sample until the next one. measurements: iterable of
    (t, [x, y, theta]); each is applied at the nearest odometry step when
    within half that step's dt, otherwise it is skipped.

    Returns a list of FusedSample emitted after every predict and update.
    """
    odometry = list(odometry)
    measurements = list(measurements)
    if len(odometry) < 1:
        raise InputError("need at least one odometry sample")
    for name, stream in (("odometry", [t for t, *_ in odometry]),
                         ("measurements", [t for t, _ in measurements])):
        for a, b in zip(stream, stream[1:]):
            if b < a:
                raise InputError(f"{name} timestamps out of order ({b} after {a})")

    out = []
    state = init
    mi = 0
    for i in range(1, len(odometry)):
        t_prev, vx, vy, om = odometry[i - 1]
        t = odometry[i][0]
        dt = t - t_prev
        if dt <= 0:
            raise InputError(f"odometry timestamps not increasing at t={t}")
        state = kf_predict(state, OdomSample(vx, vy, om, dt), q)
        out.append(FusedSample(t, state, "predict"))
        while mi < len(measurements) and measurements[mi][0] <= t + dt / 2:
            tm, z = measurements[mi]
            if tm >= t - dt / 2:
                state = kf_update(state, z, r)
                out.append(FusedSample(tm, state, "update"))
            mi += 1  # too-old measurements are dropped
    return out


# ---------------------------------------------------------------------------
# stream files: timestamp,x,y,theta[,vx,vy,omega]

STREAM_HEADER_POSE = "timestamp,x,y,theta"
STREAM_HEADER_ODOM = "timestamp,x,y,theta,vx,vy,omega"
FUSED_HEADER = "timestamp,x,y,theta,sxx,syy,stt"


def read_stream(path):
    """Read a pose or odometry CSV; rows come back as plain tuples."""
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] not in (STREAM_HEADER_POSE, STREAM_HEADER_ODOM):
        raise InputError(f"{path}: expected header '{STREAM_HEADER_POSE}'"
                         f" or '{STREAM_HEADER_ODOM}'")
    want = 4 if lines[0] == STREAM_HEADER_POSE else 7
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != want:
            raise InputError(f"{path} row {i}: expected {want} fields")
        try:
            vals = tuple(float(v) for v in parts)
        except ValueError:
            raise InputError(f"{path} row {i}: non-numeric field") from None
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"{path} row {i}: non-finite value")
        rows.append(vals)
    return rows


def write_stream(path, rows, with_velocity: bool = False) -> None:
    header = STREAM_HEADER_ODOM if with_velocity else STREAM_HEADER_POSE
    with open(path, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(f"{v:.9g}" for v in row) + "\n")


def write_fused(path, fused) -> None:
    with open(path, "w") as f:
        f.write(FUSED_HEADER + "\n")
        for s in fused:
            d = np.diag(s.state.sigma)
            f.write(f"{s.t:.9g},{s.state.mu[0]:.9g},{s.state.mu[1]:.9g},"
                    f"{s.state.mu[2]:.9g},{d[0]:.9g},{d[1]:.9g},{d[2]:.9g}\n")
