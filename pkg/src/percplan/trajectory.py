"""Closed-form fifth-order minimum-jerk trajectories with rest end states.

A candidate trajectory per axis is

    s(t) = a/120 t^5 + b/24 t^4 + g/6 t^3 + acc0/2 t^2 + vel0 t + pos0

with boundary conditions s(T) = end position and zero velocity and
acceleration at T, so a committed trajectory can always be flown to a safe
stop.  Yaw follows the goal direction.  Attitude and body rates come from the
standard differential-flatness construction.

All operations are pure over immutable inputs; array-valued time arguments
are supported on the evaluation helpers so many samples cost one numpy pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from percplan.se3 import RigidTransform

GRAVITY = np.array([0.0, 0.0, -9.81])

_TIME_TOL = 1e-9
_YAW_RANGE_TOL = 1e-9
_YAW_RATE_STEP = 1e-4
_YAW_BACKTRACK_STEP = 1e-3
_THRUST_EPS = 1e-6


class InfeasibleStateError(RuntimeError):
    """Raised when the flatness mapping is undefined (e.g. free fall)."""


@dataclass(frozen=True)
class TrajectoryState:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray

    @staticmethod
    def at_rest(position: np.ndarray) -> "TrajectoryState":
        return TrajectoryState(np.asarray(position, dtype=float), np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class FlatState:
    """Pose and rates implied by the trajectory under perfect tracking."""

    pose: RigidTransform  # T^WB
    velocity: np.ndarray
    body_rate: np.ndarray  # rad/s, body frame
    yaw: float


@dataclass(frozen=True)
class FeasibilityLimits:
    max_speed: float = 5.0  # m/s
    min_thrust: float = 2.0  # m/s^2, |acc - g| lower bound
    max_thrust: float = 20.0  # m/s^2
    max_body_rate: float = 6.0  # rad/s
    gravity: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.gravity is None:
            object.__setattr__(self, "gravity", GRAVITY.copy())
        if self.min_thrust < 0 or self.max_thrust <= self.min_thrust:
            raise ValueError("thrust limits must satisfy 0 <= min < max")
        if self.max_speed <= 0 or self.max_body_rate <= 0:
            raise ValueError("speed and body-rate limits must be positive")


@dataclass(frozen=True)
class FeasibilityResult:
    feasible: bool
    reason: Optional[str] = None


@dataclass(frozen=True)
class QuinticTrajectory:
    """Minimum-jerk quintic with rest terminal condition.

    alpha, beta, gamma are the fifth/fourth/third-order coefficient vectors;
    goal is the mission goal used by the yaw law (not necessarily the end
    position); start_yaw is held when the yaw law is undefined.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    start: TrajectoryState
    duration: float
    goal: np.ndarray
    start_yaw: float = 0.0

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tc = t[..., None]
        return (
            self.start.position
            + self.start.velocity * tc
            + 0.5 * self.start.acceleration * tc**2
            + self.gamma / 6.0 * tc**3
            + self.beta / 24.0 * tc**4
            + self.alpha / 120.0 * tc**5
        )

    def velocity(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tc = t[..., None]
        return (
            self.start.velocity
            + self.start.acceleration * tc
            + 0.5 * self.gamma * tc**2
            + self.beta / 6.0 * tc**3
            + self.alpha / 24.0 * tc**4
        )

    def acceleration(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tc = t[..., None]
        return (
            self.start.acceleration
            + self.gamma * tc
            + 0.5 * self.beta * tc**2
            + self.alpha / 6.0 * tc**3
        )

    def jerk(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tc = t[..., None]
        return self.gamma + self.beta * tc + 0.5 * self.alpha * tc**2

    def position_coefficients(self) -> np.ndarray:
        """Monomial coefficients, shape (6, 3): row k multiplies t^k."""
        return np.stack([
            self.start.position,
            self.start.velocity,
            0.5 * self.start.acceleration,
            self.gamma / 6.0,
            self.beta / 24.0,
            self.alpha / 120.0,
        ])


def solve_min_jerk(
    start: TrajectoryState,
    end_position: np.ndarray,
    duration: float,
    goal: Optional[np.ndarray] = None,
    start_yaw: float = 0.0,
) -> QuinticTrajectory:
    """Solve the per-axis 3x3 boundary system for the rest-end quintic."""
    if not np.isfinite(duration) or duration <= 0.0:
        raise ValueError(f"duration must be positive and finite, got {duration}")
    end_position = np.asarray(end_position, dtype=float)
    t = float(duration)
    dp = end_position - (start.position + start.velocity * t + 0.5 * start.acceleration * t**2)
    dv = -(start.velocity + start.acceleration * t)
    da = -start.acceleration
    m = np.array([
        [t**5 / 120.0, t**4 / 24.0, t**3 / 6.0],
        [t**4 / 24.0, t**3 / 6.0, t**2 / 2.0],
        [t**3 / 6.0, t**2 / 2.0, t],
    ])
    coeffs = np.linalg.solve(m, np.stack([dp, dv, da]))
    if goal is None:
        goal = end_position
    return QuinticTrajectory(
        alpha=coeffs[0],
        beta=coeffs[1],
        gamma=coeffs[2],
        start=start,
        duration=t,
        goal=np.asarray(goal, dtype=float),
        start_yaw=float(start_yaw),
    )


def _check_time(traj: QuinticTrajectory, t: float) -> float:
    if not (-_TIME_TOL <= t <= traj.duration + _TIME_TOL):
        raise ValueError(f"time {t} outside trajectory domain [0, {traj.duration}]")
    return min(max(t, 0.0), traj.duration)


def evaluate(traj: QuinticTrajectory, t: float) -> TrajectoryState:
    t = _check_time(traj, t)
    return TrajectoryState(traj.position(t), traj.velocity(t), traj.acceleration(t))


def tail(traj: QuinticTrajectory, t0: float) -> QuinticTrajectory:
    """Remaining segment from t0 as its own quintic (exact re-expansion)."""
    t0 = _check_time(traj, t0)
    return QuinticTrajectory(
        alpha=traj.alpha,
        beta=traj.beta + traj.alpha * t0,
        gamma=traj.gamma + traj.beta * t0 + 0.5 * traj.alpha * t0**2,
        start=evaluate(traj, t0),
        duration=traj.duration - t0,
        goal=traj.goal,
        start_yaw=yaw_at(traj, t0),
    )


def _fill_undefined(psi: np.ndarray, defined: np.ndarray, fallback) -> np.ndarray:
    """Forward-fill undefined samples with the last defined one (else fallback)."""
    if defined.all():
        return psi
    m = psi.shape[-1]
    idx = np.where(defined, np.arange(m), -1)
    idx = np.maximum.accumulate(idx, axis=-1)
    filled = np.take_along_axis(psi, np.maximum(idx, 0), axis=-1)
    return np.where(idx >= 0, filled, np.asarray(fallback)[..., None])


def _yaw_from_positions(pos: np.ndarray, goal: np.ndarray, fallback) -> np.ndarray:
    delta = goal - pos
    rng = np.hypot(delta[..., 0], delta[..., 1])
    psi = np.arctan2(delta[..., 1], delta[..., 0])
    return _fill_undefined(psi, rng >= _YAW_RANGE_TOL, fallback)


def _yaw_fill(traj: QuinticTrajectory, ts: np.ndarray) -> np.ndarray:
    """Goal-facing yaw at each sample; singular samples hold the previous one."""
    return _yaw_from_positions(traj.position(ts), traj.goal, traj.start_yaw)


def yaw_at(traj: QuinticTrajectory, t: float) -> float:
    """Yaw facing the goal; holds the last well-defined yaw at the singularity."""
    t = _check_time(traj, t)
    delta = traj.goal - traj.position(t)
    rng = np.hypot(delta[0], delta[1])
    if rng >= _YAW_RANGE_TOL:
        return float(np.arctan2(delta[1], delta[0]))
    n_back = int(t / _YAW_BACKTRACK_STEP)
    if n_back > 0:
        ts = t - np.arange(1, n_back + 1) * _YAW_BACKTRACK_STEP
        delta = traj.goal - traj.position(ts)
        rng = np.hypot(delta[:, 0], delta[:, 1])
        hits = np.nonzero(rng >= _YAW_RANGE_TOL)[0]
        if hits.size:
            i = hits[0]
            return float(np.arctan2(delta[i, 1], delta[i, 0]))
    return traj.start_yaw


def _yaw_rate_fill(traj: QuinticTrajectory, ts: np.ndarray) -> np.ndarray:
    """Symmetric finite-difference yaw rate, clamped to the time domain."""
    hi = np.minimum(ts + _YAW_RATE_STEP, traj.duration)
    lo = np.maximum(ts - _YAW_RATE_STEP, 0.0)
    both = _yaw_fill(traj, np.concatenate([hi, lo]))
    dpsi = both[: ts.shape[0]] - both[ts.shape[0]:]
    dpsi = np.arctan2(np.sin(dpsi), np.cos(dpsi))
    dt = hi - lo
    dt[dt <= 0.0] = 1.0
    return dpsi / dt


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product without np.cross's axis-handling overhead."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def _flat_from_kinematics(acc, jerk, psi, psi_dot, gravity, need_rotation=True):
    """Vectorized flatness map.

    Returns (R (N,3,3) with columns x_B, y_B, z_B, or None when not needed;
    omega (N,3) body frame; bad (N,) mask where the construction is
    degenerate).  The body rate comes from projecting the axis derivatives:
    omega = (-y_B . zb_dot, x_B . zb_dot, -x_B . yb_dot).
    """
    thrust = acc - gravity
    c = np.sqrt(np.sum(thrust * thrust, axis=-1))
    bad = c <= _THRUST_EPS
    c_safe = np.where(bad, 1.0, c)
    zb = thrust / c_safe[..., None]

    cos_p, sin_p = np.cos(psi), np.sin(psi)
    zero = np.zeros_like(psi)
    xc = np.stack([cos_p, sin_p, zero], axis=-1)
    w = _cross(zb, xc)
    wn = np.sqrt(np.sum(w * w, axis=-1))
    bad = bad | (wn < 1e-9)
    wn_safe = np.where(wn < 1e-9, 1.0, wn)
    yb = w / wn_safe[..., None]
    xb = _cross(yb, zb)

    zb_dot = (jerk - np.sum(zb * jerk, axis=-1, keepdims=True) * zb) / c_safe[..., None]
    xc_dot = psi_dot[..., None] * np.stack([-sin_p, cos_p, zero], axis=-1)
    w_dot = _cross(zb_dot, xc) + _cross(zb, xc_dot)
    yb_dot = w_dot / wn_safe[..., None] - w * (
        np.sum(w * w_dot, axis=-1) / wn_safe**3
    )[..., None]

    omega = np.stack([
        -np.sum(yb * zb_dot, axis=-1),
        np.sum(xb * zb_dot, axis=-1),
        -np.sum(xb * yb_dot, axis=-1),
    ], axis=-1)
    rot = np.stack([xb, yb, zb], axis=-1) if need_rotation else None
    return rot, omega, bad


def flat_arrays(traj: QuinticTrajectory, ts: np.ndarray, gravity: np.ndarray = GRAVITY):
    """Flat outputs at many times: (positions, velocities, R, omega, yaw, bad)."""
    ts = np.asarray(ts, dtype=float)
    pos = traj.position(ts)
    vel = traj.velocity(ts)
    acc = traj.acceleration(ts)
    jrk = traj.jerk(ts)
    psi = _yaw_fill(traj, ts)
    psi_dot = _yaw_rate_fill(traj, ts)
    rot, omega, bad = _flat_from_kinematics(acc, jrk, psi, psi_dot, gravity)
    return pos, vel, rot, omega, psi, bad


def flat_state_at(traj: QuinticTrajectory, t: float, gravity: np.ndarray = GRAVITY) -> FlatState:
    """Pose, velocity and body rate at one time via differential flatness."""
    t = _check_time(traj, t)
    psi = yaw_at(traj, t)
    hi = min(t + _YAW_RATE_STEP, traj.duration)
    lo = max(t - _YAW_RATE_STEP, 0.0)
    if hi > lo:
        dpsi = yaw_at(traj, hi) - yaw_at(traj, lo)
        psi_dot = float(np.arctan2(np.sin(dpsi), np.cos(dpsi))) / (hi - lo)
    else:
        psi_dot = 0.0
    rot, omega, bad = _flat_from_kinematics(
        traj.acceleration(np.array([t])),
        traj.jerk(np.array([t])),
        np.array([psi]),
        np.array([psi_dot]),
        np.asarray(gravity, dtype=float),
    )
    if bad[0]:
        raise InfeasibleStateError(f"degenerate thrust direction at t={t}")
    pose = RigidTransform(rot[0], traj.position(t))
    return FlatState(pose=pose, velocity=traj.velocity(t), body_rate=omega[0], yaw=psi)


def sample_times(duration: float, dt: float) -> np.ndarray:
    """Uniform samples covering [0, duration] with step at most dt."""
    n = max(int(np.ceil(duration / dt)), 1)
    return np.linspace(0.0, duration, n + 1)


def check_feasibility(
    traj: QuinticTrajectory,
    limits: FeasibilityLimits,
    dt: float = 0.02,
) -> FeasibilityResult:
    """Sampled input-feasibility check: speed, thrust magnitude, body rate."""
    if dt <= 0:
        raise ValueError("sampling step must be positive")
    ts = sample_times(traj.duration, dt)
    vel = traj.velocity(ts)
    speed = np.linalg.norm(vel, axis=-1)
    if speed.max() > limits.max_speed:
        return FeasibilityResult(
            False, f"speed {speed.max():.3f} m/s exceeds {limits.max_speed} m/s"
        )
    thrust = np.linalg.norm(traj.acceleration(ts) - limits.gravity, axis=-1)
    if thrust.max() > limits.max_thrust:
        return FeasibilityResult(
            False, f"thrust {thrust.max():.3f} m/s^2 exceeds {limits.max_thrust} m/s^2"
        )
    if thrust.min() < max(limits.min_thrust, _THRUST_EPS):
        return FeasibilityResult(
            False, f"thrust {thrust.min():.3f} m/s^2 below {limits.min_thrust} m/s^2"
        )
    _, _, _, omega, _, bad = flat_arrays(traj, ts, limits.gravity)
    if bad.any():
        return FeasibilityResult(False, "degenerate attitude along trajectory")
    rate = np.linalg.norm(omega, axis=-1)
    if rate.max() > limits.max_body_rate:
        return FeasibilityResult(
            False, f"body rate {rate.max():.3f} rad/s exceeds {limits.max_body_rate} rad/s"
        )
    return FeasibilityResult(True, None)


def check_feasibility_batch(
    trajs: list,
    limits: FeasibilityLimits,
    dt: float = 0.02,
) -> np.ndarray:
    """Vectorized feasibility verdicts for trajectories sharing one goal.

    Rows whose duration is shorter than the longest are padded by repeating the
    terminal sample, which cannot change any max/min verdict.  Matches
    `check_feasibility` on every trajectory.
    """
    if dt <= 0:
        raise ValueError("sampling step must be positive")
    k = len(trajs)
    if k == 0:
        return np.zeros(0, dtype=bool)
    durations = np.array([t.duration for t in trajs])
    counts = np.maximum(np.ceil(durations / dt).astype(int), 1)
    m = int(counts.max()) + 1
    ts = np.empty((k, m))
    for i, traj in enumerate(trajs):
        n = counts[i] + 1
        ts[i, :n] = np.linspace(0.0, durations[i], n)
        ts[i, n:] = durations[i]

    p0 = np.stack([t.start.position for t in trajs])[:, None, :]
    v0 = np.stack([t.start.velocity for t in trajs])[:, None, :]
    a0 = np.stack([t.start.acceleration for t in trajs])[:, None, :]
    al = np.stack([t.alpha for t in trajs])[:, None, :]
    be = np.stack([t.beta for t in trajs])[:, None, :]
    ga = np.stack([t.gamma for t in trajs])[:, None, :]
    goal = np.stack([t.goal for t in trajs])[:, None, :]
    fallback = np.array([t.start_yaw for t in trajs])

    def positions(tc):
        tc = tc[..., None]
        return (
            p0 + v0 * tc + 0.5 * a0 * tc**2
            + ga / 6.0 * tc**3 + be / 24.0 * tc**4 + al / 120.0 * tc**5
        )

    tc = ts[..., None]
    vel = v0 + a0 * tc + 0.5 * ga * tc**2 + be / 6.0 * tc**3 + al / 24.0 * tc**4
    acc = a0 + ga * tc + 0.5 * be * tc**2 + al / 6.0 * tc**3
    ok = np.ones(k, dtype=bool)
    speed = np.sqrt(np.sum(vel * vel, axis=-1))
    ok &= speed.max(axis=1) <= limits.max_speed
    thrust = np.sqrt(np.sum((acc - limits.gravity) ** 2, axis=-1))
    ok &= thrust.max(axis=1) <= limits.max_thrust
    ok &= thrust.min(axis=1) >= max(limits.min_thrust, _THRUST_EPS)
    if not ok.any():
        return ok

    # Body rates only for the speed/thrust survivors.
    sub = np.nonzero(ok)[0]
    ts, acc = ts[sub], acc[sub]
    p0, v0, a0, al, be, ga = (arr[sub] for arr in (p0, v0, a0, al, be, ga))
    goal, fallback = goal[sub], fallback[sub]
    tc = ts[..., None]
    jerk = ga + be * tc + 0.5 * al * tc**2

    psi = _yaw_from_positions(positions(ts), goal, fallback)
    hi = np.minimum(ts + _YAW_RATE_STEP, durations[sub, None])
    lo = np.maximum(ts - _YAW_RATE_STEP, 0.0)
    dpsi = _yaw_from_positions(positions(hi), goal, fallback) - _yaw_from_positions(
        positions(lo), goal, fallback
    )
    dpsi = np.arctan2(np.sin(dpsi), np.cos(dpsi))
    span = hi - lo
    span[span <= 0.0] = 1.0
    psi_dot = dpsi / span

    _, omega, bad = _flat_from_kinematics(
        acc, jerk, psi, psi_dot, limits.gravity, need_rotation=False,
    )
    rate = np.sqrt(np.sum(omega * omega, axis=-1))
    sub_ok = ~bad.any(axis=1) & (rate.max(axis=1) <= limits.max_body_rate)
    ok[sub] = sub_ok
    return ok
