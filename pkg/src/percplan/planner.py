"""Receding-horizon candidate sampling, evaluation and plan commitment.

Every cycle the planner samples rest-end minimum-jerk candidates toward
positions drawn inside the current depth frustum, filters them through
input-feasibility and pyramid collision checks, scores the survivors with
c_tot = k_perc * c_perc + c_speed, and commits the best candidate only when
it strictly beats the re-evaluated incumbent.  Committed trajectories always
end at rest, so the vehicle can stop safely when no better plan appears.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from percplan.camera import DepthImage, forward_mount, unproject
from percplan.perception import FeatureMap, PerceptionParams, perception_cost
from percplan.pyramids import CollisionConfig, PyramidStore, collision_free
from percplan.se3 import RigidTransform
from percplan.trajectory import (
    FeasibilityLimits,
    QuinticTrajectory,
    TrajectoryState,
    check_feasibility,
    check_feasibility_batch,
    evaluate,
    solve_min_jerk,
    tail,
    yaw_at,
)


@dataclass(frozen=True)
class PlannerConfig:
    k_perc: float = 100.0  # weight of the perception cost
    candidate_budget: int = 200  # candidates sampled per cycle
    duration_range: tuple = (1.0, 4.0)  # s
    sample_depth_min: float = 1.0  # m, lower bound of end-position depth sampling
    limits: FeasibilityLimits = field(default_factory=FeasibilityLimits)
    collision: CollisionConfig = field(default_factory=CollisionConfig)
    perception: PerceptionParams = field(default_factory=PerceptionParams)
    body_to_camera: RigidTransform = field(default_factory=forward_mount)
    feasibility_dt: float = 0.02  # s
    cycle_budget: float = 0.066  # s, honored when enforce_cycle_budget is set
    enforce_cycle_budget: bool = False  # wall-clock cutoff breaks determinism
    goal_threshold: float = 0.5  # m

    def __post_init__(self):
        if self.k_perc < 0:
            raise ValueError("k_perc must be non-negative")
        if self.candidate_budget < 1:
            raise ValueError("candidate budget must be positive")
        t_min, t_max = self.duration_range
        if not (0 < t_min <= t_max):
            raise ValueError("duration range must satisfy 0 < T_min <= T_max")


@dataclass
class CandidateEvaluation:
    trajectory: QuinticTrajectory
    c_perc: float = np.inf
    c_speed: float = np.inf
    c_tot: float = np.inf
    input_feasible: bool = False
    collision_ok: bool = False
    perception_valid: bool = False


@dataclass(frozen=True)
class CommittedPlan:
    trajectory: QuinticTrajectory
    start_time: float  # global time at which the trajectory starts
    cost: float  # c_tot at commitment
    goal: np.ndarray

    def time_on_plan(self, now: float) -> float:
        return min(max(now - self.start_time, 0.0), self.trajectory.duration)

    def state_at(self, now: float) -> TrajectoryState:
        return evaluate(self.trajectory, self.time_on_plan(now))

    def ended(self, now: float) -> bool:
        return now - self.start_time >= self.trajectory.duration


def hover_plan(
    position: np.ndarray,
    goal: np.ndarray,
    start_time: float,
    yaw: float = 0.0,
    duration: float = 1.0,
) -> CommittedPlan:
    """Rest-to-rest plan holding one position (the safe-stop fallback)."""
    traj = solve_min_jerk(
        TrajectoryState.at_rest(position), position, duration,
        goal=goal, start_yaw=yaw,
    )
    return CommittedPlan(traj, start_time, np.inf, np.asarray(goal, dtype=float))


def speed_cost(traj: QuinticTrajectory, goal: np.ndarray) -> float:
    """Negative average speed of progress toward the goal over the duration."""
    goal = np.asarray(goal, dtype=float)
    d0 = float(np.linalg.norm(goal - traj.position(0.0)))
    d1 = float(np.linalg.norm(goal - traj.position(traj.duration)))
    return -(d0 - d1) / traj.duration


def sample_candidates(
    state: TrajectoryState,
    goal: np.ndarray,
    depth: DepthImage,
    config: PlannerConfig,
    rng: np.random.Generator,
) -> List[QuinticTrajectory]:
    """Deterministic candidate set: pixel-uniform x depth-uniform end positions."""
    intr = depth.intrinsics
    n = config.candidate_budget
    pix = rng.uniform([0.0, 0.0], [intr.width, intr.height], size=(n, 2))
    depth_hi = min(config.collision.unseen_margin, intr.d_max)
    depths = rng.uniform(config.sample_depth_min, depth_hi, size=n)
    durations = rng.uniform(config.duration_range[0], config.duration_range[1], size=n)
    ends = depth.pose_wc.apply(unproject(intr, pix, depths))
    start_yaw = _goal_yaw(state.position, goal)
    goal = np.asarray(goal, dtype=float)

    # One batched solve of the per-candidate 3x3 boundary systems.
    t = durations
    dp = ends - (state.position + np.outer(t, state.velocity) + 0.5 * np.outer(t**2, state.acceleration))
    dv = -(state.velocity + np.outer(t, state.acceleration))
    da = np.broadcast_to(-state.acceleration, (n, 3))
    mats = np.empty((n, 3, 3))
    mats[:, 0, 0] = t**5 / 120.0
    mats[:, 0, 1] = mats[:, 1, 0] = t**4 / 24.0
    mats[:, 0, 2] = mats[:, 1, 1] = t**3 / 6.0
    mats[:, 1, 2] = mats[:, 2, 1] = t**2 / 2.0
    mats[:, 2, 0] = mats[:, 0, 2]
    mats[:, 2, 2] = t
    coeffs = np.linalg.solve(mats, np.stack([dp, dv, da], axis=1))
    return [
        QuinticTrajectory(
            alpha=coeffs[i, 0], beta=coeffs[i, 1], gamma=coeffs[i, 2],
            start=state, duration=float(t[i]), goal=goal, start_yaw=start_yaw,
        )
        for i in range(n)
    ]


def _goal_yaw(position: np.ndarray, goal: np.ndarray, fallback: float = 0.0) -> float:
    delta = np.asarray(goal, dtype=float) - np.asarray(position, dtype=float)
    if np.hypot(delta[0], delta[1]) < 1e-9:
        return fallback
    return float(np.arctan2(delta[1], delta[0]))


def evaluate_candidate(
    traj: QuinticTrajectory,
    goal: np.ndarray,
    depth: DepthImage,
    features: FeatureMap,
    store: PyramidStore,
    config: PlannerConfig,
    skip_feasibility: bool = False,
) -> CandidateEvaluation:
    """Feasibility -> collision -> perception pipeline with short-circuiting."""
    out = CandidateEvaluation(trajectory=traj)
    if skip_feasibility:
        out.input_feasible = True
    else:
        out.input_feasible = check_feasibility(traj, config.limits, config.feasibility_dt).feasible
        if not out.input_feasible:
            return out
    out.collision_ok, _ = collision_free(traj, depth, store, config.collision)
    if not out.collision_ok:
        return out
    if config.k_perc == 0.0:
        # Perception-agnostic baseline: ranking must depend only on speed.
        out.perception_valid = True
        out.c_perc = 0.0
    else:
        out.c_perc = perception_cost(
            traj, features, config.body_to_camera, depth.intrinsics,
            config.perception, config.limits.gravity,
        )
        out.perception_valid = bool(np.isfinite(out.c_perc))
        if not out.perception_valid:
            return out
    out.c_speed = speed_cost(traj, goal)
    out.c_tot = config.k_perc * out.c_perc + out.c_speed
    return out


def _speed_costs_shared_start(
    candidates: List[QuinticTrajectory], state: TrajectoryState, goal: np.ndarray
) -> np.ndarray:
    """Vectorized Eq.-of-progress costs for candidates sharing one start state."""
    goal = np.asarray(goal, dtype=float)
    t = np.array([c.duration for c in candidates])
    alpha = np.array([c.alpha for c in candidates])
    beta = np.array([c.beta for c in candidates])
    gamma = np.array([c.gamma for c in candidates])
    tc = t[:, None]
    ends = (
        state.position
        + state.velocity * tc
        + 0.5 * state.acceleration * tc**2
        + gamma / 6.0 * tc**3
        + beta / 24.0 * tc**4
        + alpha / 120.0 * tc**5
    )
    d0 = float(np.linalg.norm(goal - state.position))
    d1 = np.linalg.norm(goal - ends, axis=1)
    return -(d0 - d1) / t


def replan(
    committed: CommittedPlan,
    now: float,
    state: TrajectoryState,
    depth: DepthImage,
    features: FeatureMap,
    config: PlannerConfig,
    rng: np.random.Generator,
) -> CommittedPlan:
    """One receding-horizon cycle against fresh depth and feature snapshots."""
    store = PyramidStore()
    goal = committed.goal

    # Re-evaluate the remaining committed segment like-for-like.
    t_on = committed.time_on_plan(now)
    remaining = committed.trajectory.duration - t_on
    if remaining > 1e-6:
        incumbent_traj = tail(committed.trajectory, t_on)
    else:
        end_state = evaluate(committed.trajectory, committed.trajectory.duration)
        incumbent_traj = hover_plan(
            end_state.position, goal, now,
            yaw=yaw_at(committed.trajectory, committed.trajectory.duration),
        ).trajectory
    incumbent = evaluate_candidate(
        incumbent_traj, goal, depth, features, store, config, skip_feasibility=True,
    )

    candidates = sample_candidates(state, goal, depth, config, rng)
    deadline = _time.monotonic() + config.cycle_budget
    best: Optional[CandidateEvaluation] = None
    best_index = -1
    # c_perc >= 0, so c_tot >= c_speed: walking candidates in speed-cost order
    # lets the loop stop as soon as no remaining candidate can win.  The
    # selected plan is identical to exhaustive evaluation.
    speed_costs = _speed_costs_shared_start(candidates, state, goal)
    feasible = check_feasibility_batch(candidates, config.limits, config.feasibility_dt)
    order = np.lexsort((np.arange(len(candidates)), speed_costs))
    for idx in order:
        if best is not None and speed_costs[idx] >= best.c_tot:
            break
        if config.enforce_cycle_budget and _time.monotonic() > deadline:
            break
        if not feasible[idx]:
            continue
        ev = evaluate_candidate(
            candidates[idx], goal, depth, features, store, config,
            skip_feasibility=True,
        )
        if not np.isfinite(ev.c_tot):
            continue
        if best is None or ev.c_tot < best.c_tot or (
            ev.c_tot == best.c_tot and idx < best_index
        ):
            best = ev
            best_index = idx

    if not incumbent.collision_ok:
        # The incumbent is no longer safe against the new image: switch to the
        # best valid candidate regardless of cost, else keep flying it out
        # (it was committed against a consistent snapshot and ends at rest).
        if best is not None:
            return CommittedPlan(best.trajectory, now, best.c_tot, goal)
        return committed
    if best is not None and best.c_tot < incumbent.c_tot:
        return CommittedPlan(best.trajectory, now, best.c_tot, goal)
    if committed.ended(now):
        # Keep a valid hover at the terminal state so time_on_plan stays fresh.
        return CommittedPlan(incumbent_traj, now, incumbent.c_tot, goal)
    return replace(committed, cost=incumbent.c_tot)
