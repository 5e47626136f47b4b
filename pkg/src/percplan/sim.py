"""Deterministic closed-loop simulator with perfect trajectory tracking.

Worlds are sphere and axis-aligned-box primitives with feature points on
their surfaces.  Depth frames are ray-cast at the camera rate, newly visible
unoccluded features become permanently discovered, and the planner replans
on every frame.  The per-step log mirrors the experiment metrics: position
estimation standard deviation at the current pose, body-rate norm, visible
feature count and speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from percplan.camera import CameraIntrinsics, DepthImage, visible_mask
from percplan.perception import FeatureMap, PerceptionParams, pose_position_std
from percplan.planner import (
    CommittedPlan,
    PlannerConfig,
    hover_plan,
    replan,
    speed_cost,
)
from percplan.perception import perception_cost
from percplan.se3 import RigidTransform
from percplan.trajectory import (
    QuinticTrajectory,
    TrajectoryState,
    flat_state_at,
    tail,
    yaw_at,
)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def surface_distance(self, p: np.ndarray) -> float:
        return float(np.linalg.norm(p - self.center) - self.radius)

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2


@dataclass(frozen=True)
class Box:
    corner_min: np.ndarray
    corner_max: np.ndarray

    def surface_distance(self, p: np.ndarray) -> float:
        lo, hi = self.corner_min, self.corner_max
        outside = np.maximum(np.maximum(lo - p, 0.0), p - hi)
        d_out = float(np.linalg.norm(outside))
        if d_out > 0.0:
            return d_out
        return -float(np.min(np.minimum(p - lo, hi - p)))

    def area(self) -> float:
        w, d, h = self.corner_max - self.corner_min
        return float(2.0 * (w * d + w * h + d * h))


@dataclass
class World:
    obstacles: List[object]
    features: FeatureMap
    goal: np.ndarray
    bounds: Optional[Box] = None

    def min_obstacle_distance(self, p: np.ndarray) -> float:
        if not self.obstacles:
            return np.inf
        return min(ob.surface_distance(p) for ob in self.obstacles)


def sample_surface_features(
    obstacles: List[object],
    densities: List[float],
    seed: int,
    id_offset: int = 0,
) -> FeatureMap:
    """Seeded per-obstacle surface sampling at the given densities (per m^2)."""
    rng = np.random.default_rng(seed)
    points = []
    for ob, density in zip(obstacles, densities):
        if density <= 0.0:
            continue
        n = int(round(ob.area() * density))
        if n == 0:
            continue
        if isinstance(ob, Sphere):
            dirs = rng.normal(size=(n, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            points.append(ob.center + ob.radius * dirs)
        else:
            lo, hi = ob.corner_min, ob.corner_max
            size = hi - lo
            faces = np.array([
                size[1] * size[2], size[1] * size[2],
                size[0] * size[2], size[0] * size[2],
                size[0] * size[1], size[0] * size[1],
            ])
            choice = rng.choice(6, size=n, p=faces / faces.sum())
            uv = rng.uniform(size=(n, 2))
            pts = np.empty((n, 3))
            for i, f in enumerate(choice):
                axis = f // 2
                a, b = [ax for ax in range(3) if ax != axis]
                pts[i, axis] = hi[axis] if f % 2 else lo[axis]
                pts[i, a] = lo[a] + uv[i, 0] * size[a]
                pts[i, b] = lo[b] + uv[i, 1] * size[b]
            points.append(pts)
    if not points:
        return FeatureMap.empty()
    pos = np.concatenate(points, axis=0)
    return FeatureMap(np.arange(id_offset, id_offset + pos.shape[0]), pos)


# ---------------------------------------------------------------------------
# Depth rendering.

_RAY_CACHE: Dict[tuple, np.ndarray] = {}


def _camera_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel ray directions with unit z (so the parameter is z-depth)."""
    key = (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
    if key not in _RAY_CACHE:
        u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
        v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
        uu, vv = np.meshgrid(u, v)
        _RAY_CACHE[key] = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    return _RAY_CACHE[key]


def _raycast_spheres(origin, dirs, spheres: List[Sphere]) -> np.ndarray:
    centers = np.array([s.center for s in spheres])  # (k, 3)
    radii = np.array([s.radius for s in spheres])
    oc = origin[None, :] - centers  # (k, 3)
    a = np.sum(dirs * dirs, axis=1)[:, None]  # (n, 1)
    b = 2.0 * dirs @ oc.T  # (n, k)
    c = np.sum(oc * oc, axis=1)[None, :] - radii[None, :] ** 2
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    z_near = (-b - sq) / (2.0 * a)
    z_far = (-b + sq) / (2.0 * a)
    z = np.where(z_near > 0.0, z_near, z_far)
    return np.where(hit & (z > 0.0), z, np.inf).min(axis=1)


def _raycast_boxes(origin, dirs, boxes: List[Box]) -> np.ndarray:
    lo = np.array([b.corner_min for b in boxes])  # (k, 3)
    hi = np.array([b.corner_max for b in boxes])
    d = dirs[:, None, :]  # (n, 1, 3)
    parallel = np.abs(d) < 1e-12
    inside = (lo[None] <= origin) & (origin <= hi[None])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None] - origin) / d
        t2 = (hi[None] - origin) / d
    lo_t = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi_t = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_lo = lo_t.max(axis=2)  # (n, k)
    t_hi = hi_t.min(axis=2)
    hit = (t_hi >= t_lo) & (t_hi > 0.0)
    z = np.where(t_lo > 0.0, t_lo, t_hi)
    return np.where(hit & (z > 0.0), z, np.inf).min(axis=1)


def render_depth(world: World, pose_wc: RigidTransform, intr: CameraIntrinsics) -> DepthImage:
    """Per-pixel z-depth of the nearest primitive, NaN where nothing is hit."""
    rays = _camera_rays(intr)
    dirs = rays @ pose_wc.rotation.T
    origin = pose_wc.translation
    z = np.full(rays.shape[0], np.inf)
    spheres = [ob for ob in world.obstacles if isinstance(ob, Sphere)]
    boxes = [ob for ob in world.obstacles if isinstance(ob, Box)]
    if spheres:
        z = np.minimum(z, _raycast_spheres(origin, dirs, spheres))
    if boxes:
        z = np.minimum(z, _raycast_boxes(origin, dirs, boxes))
    depths = np.where(np.isfinite(z), np.clip(z, intr.d_min, intr.d_max), np.nan)
    return DepthImage(intr, pose_wc, depths.reshape(intr.height, intr.width).astype(np.float32))


_OCCLUSION_TOL = 0.1


def discover_features(world: World, depth: DepthImage, discovered: np.ndarray) -> np.ndarray:
    """Mark world features that are visible and unoccluded; discovery is permanent."""
    if len(world.features) == 0:
        return discovered
    intr = depth.intrinsics
    p_cam = depth.pose_cw.apply(world.features.positions)
    vis = visible_mask(intr, p_cam)
    if not vis.any():
        return discovered
    z = p_cam[:, 2]
    z_safe = np.where(z > 0, z, 1.0)
    u = np.clip((intr.fx * p_cam[:, 0] / z_safe + intr.cx).astype(int), 0, intr.width - 1)
    v = np.clip((intr.fy * p_cam[:, 1] / z_safe + intr.cy).astype(int), 0, intr.height - 1)
    rendered = depth.depths[v, u]
    unoccluded = ~np.isfinite(rendered) | (z <= rendered + _OCCLUSION_TOL)
    return discovered | (vis & unoccluded)


# ---------------------------------------------------------------------------
# Closed-loop stepping.


@dataclass
class RunConfig:
    start: TrajectoryState
    start_yaw: float = 0.0
    dt: float = 1.0 / 60.0
    replan_every: int = 4
    time_limit: float = 60.0
    seed: int = 0
    stall_timeout: float = 5.0  # s at rest past plan end -> safe stop


@dataclass
class MetricsRecord:
    t: float
    position: np.ndarray
    yaw: float
    speed: float
    omega_norm: float
    n_features_visible: int
    pos_std: float
    c_perc: float
    c_speed: float
    c_tot: float
    replanned: int


@dataclass
class SimState:
    time: float
    vehicle: TrajectoryState
    yaw: float
    committed: CommittedPlan
    discovered: np.ndarray  # bool mask over world features
    log: List[MetricsRecord] = field(default_factory=list)
    rng: np.random.Generator = None  # type: ignore[assignment]
    step_index: int = 0
    stalled_since: Optional[float] = None
    status: str = "running"
    last_costs: Tuple[float, float, float] = (np.inf, np.inf, np.inf)


def init_sim(world: World, run: RunConfig, planner: PlannerConfig) -> SimState:
    plan = hover_plan(run.start.position, world.goal, 0.0, yaw=run.start_yaw)
    return SimState(
        time=0.0,
        vehicle=run.start,
        yaw=run.start_yaw,
        committed=plan,
        discovered=np.zeros(len(world.features), dtype=bool),
        rng=np.random.default_rng(run.seed),
    )


def _body_pose(plan: CommittedPlan, now: float, gravity: np.ndarray) -> RigidTransform:
    flat = flat_state_at(plan.trajectory, plan.time_on_plan(now), gravity)
    return flat.pose


def _pose_metrics(
    sim: SimState,
    world: World,
    planner: PlannerConfig,
    intr: CameraIntrinsics,
) -> Tuple[float, int, float]:
    """Position-estimation std at the current pose (single pose), visible count, omega."""
    plan = sim.committed
    t_on = plan.time_on_plan(sim.time)
    flat = flat_state_at(plan.trajectory, t_on, planner.limits.gravity)
    discovered = world.features.subset(sim.discovered)
    std, n_visible = pose_position_std(
        discovered, flat.pose, flat.velocity, flat.body_rate,
        planner.body_to_camera, intr, planner.perception,
    )
    pos_std = std if std is not None else np.inf
    return pos_std, n_visible, float(np.linalg.norm(flat.body_rate))


def step(
    sim: SimState,
    world: World,
    planner: PlannerConfig,
    run: RunConfig,
    intr: CameraIntrinsics,
) -> SimState:
    """Advance one simulation step; replan at depth-frame boundaries."""
    if run.dt <= 0:
        raise ValueError("dt must be positive")
    replanned = 0
    if sim.step_index % run.replan_every == 0:
        pose_wc = _body_pose(sim.committed, sim.time, planner.limits.gravity).compose(
            planner.body_to_camera
        )
        depth = render_depth(world, pose_wc, intr)
        sim.discovered = discover_features(world, depth, sim.discovered)
        features = world.features.subset(sim.discovered)
        new_plan = replan(
            sim.committed, sim.time, sim.vehicle, depth, features, planner, sim.rng
        )
        replanned = int(new_plan.trajectory is not sim.committed.trajectory)
        sim.committed = new_plan
        remaining = tail(
            new_plan.trajectory, new_plan.time_on_plan(sim.time)
        ) if new_plan.trajectory.duration - new_plan.time_on_plan(sim.time) > 1e-6 else None
        c_speed = speed_cost(remaining, world.goal) if remaining is not None else 0.0
        c_perc = perception_cost(
            remaining if remaining is not None else new_plan.trajectory,
            features, planner.body_to_camera, intr,
            planner.perception, planner.limits.gravity,
        )
        sim.last_costs = (c_perc, c_speed, planner.k_perc * c_perc + c_speed)

    sim.step_index += 1
    sim.time = sim.step_index * run.dt
    sim.vehicle = sim.committed.state_at(sim.time)
    sim.yaw = yaw_at(sim.committed.trajectory, sim.committed.time_on_plan(sim.time))

    pos_std, n_visible, omega_norm = _pose_metrics(sim, world, planner, intr)
    speed = float(np.linalg.norm(sim.vehicle.velocity))
    c_perc, c_speed, c_tot = sim.last_costs
    sim.log.append(MetricsRecord(
        t=sim.time,
        position=sim.vehicle.position.copy(),
        yaw=sim.yaw,
        speed=speed,
        omega_norm=omega_norm,
        n_features_visible=n_visible,
        pos_std=pos_std,
        c_perc=c_perc,
        c_speed=c_speed,
        c_tot=c_tot,
        replanned=replanned,
    ))

    # Termination bookkeeping.
    if float(np.linalg.norm(sim.vehicle.position - world.goal)) <= planner.goal_threshold:
        sim.status = "goal_reached"
    elif sim.committed.ended(sim.time) and speed < 1e-9:
        if sim.stalled_since is None:
            sim.stalled_since = sim.time
        elif sim.time - sim.stalled_since >= run.stall_timeout:
            sim.status = "safe_stop"
    else:
        sim.stalled_since = None
    if sim.status == "running" and sim.time >= run.time_limit:
        sim.status = "time_limit"
    return sim


@dataclass
class RunResult:
    status: str
    records: List[MetricsRecord]
    summary: Dict[str, float]
    world: World


def summarize(records: List[MetricsRecord], status: str) -> Dict[str, float]:
    """Run means matching the experiment-table rows, plus bookkeeping."""
    if not records:
        return {"status": status}
    pos_std = np.array([r.pos_std for r in records])
    finite = np.isfinite(pos_std)
    return {
        "status": status,
        "duration": records[-1].t,
        "mean_pos_std": float(pos_std[finite].mean()) if finite.any() else float("inf"),
        "mean_angular_velocity": float(np.mean([r.omega_norm for r in records])),
        "mean_feature_count": float(np.mean([r.n_features_visible for r in records])),
        "mean_speed": float(np.mean([r.speed for r in records])),
    }


def run_loop(
    world: World, planner: PlannerConfig, run: RunConfig, intr: CameraIntrinsics
) -> RunResult:
    sim = init_sim(world, run, planner)
    while sim.status == "running":
        step(sim, world, planner, run, intr)
    return RunResult(sim.status, sim.log, summarize(sim.log, sim.status), world)


def min_clearance(records: List[MetricsRecord], world: World) -> float:
    """Post-hoc analytic obstacle clearance of the flown path."""
    if not world.obstacles or not records:
        return np.inf
    return min(world.min_obstacle_distance(r.position) for r in records)


_CSV_HEADER = "t,x,y,z,yaw,speed,omega_norm,n_features_visible,pos_std,c_perc,c_speed,c_tot,replanned"


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def log_to_csv(records: List[MetricsRecord]) -> str:
    lines = [_CSV_HEADER]
    for r in records:
        lines.append(",".join([
            _fmt(r.t), _fmt(r.position[0]), _fmt(r.position[1]), _fmt(r.position[2]),
            _fmt(r.yaw), _fmt(r.speed), _fmt(r.omega_norm),
            str(r.n_features_visible), _fmt(r.pos_std),
            _fmt(r.c_perc), _fmt(r.c_speed), _fmt(r.c_tot), str(r.replanned),
        ]))
    return "\n".join(lines) + "\n"
