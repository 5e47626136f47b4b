"""Scenario files: world, camera, planner and run sections in YAML.

Validation errors carry the file name and line number of the offending key,
recovered from the YAML node marks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from percplan.camera import CameraIntrinsics, forward_mount
from percplan.perception import FeatureMap, PerceptionParams
from percplan.planner import PlannerConfig
from percplan.pyramids import CollisionConfig
from percplan.se3 import RigidTransform, so3_exp
from percplan.sim import Box, RunConfig, Sphere, World, sample_surface_features
from percplan.trajectory import FeasibilityLimits, TrajectoryState

_SURFACE_TOL = 0.05


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    world: World
    intrinsics: CameraIntrinsics
    planner: PlannerConfig
    run: RunConfig


def _walk(node, prefix: str, lines: Dict[str, int]):
    lines.setdefault(prefix or "<root>", node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k_node, v_node in node.value:
            key = str(k_node.value)
            cp = f"{prefix}.{key}" if prefix else key
            lines[cp] = k_node.start_mark.line + 1
            out[key] = _walk(v_node, cp, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_walk(item, f"{prefix}[{i}]", lines) for i, item in enumerate(node.value)]
    return yaml.SafeLoader("").construct_object(node, deep=True)


class _Section:
    """Mapping accessor that raises line-numbered errors."""

    def __init__(self, filename: str, data: dict, lines: Dict[str, int], prefix: str):
        self.filename = filename
        self.data = data if data is not None else {}
        self.lines = lines
        self.prefix = prefix

    def _where(self, key_path: str) -> str:
        line = self.lines.get(key_path, self.lines.get(self.prefix or "<root>", 1))
        return f"{self.filename}:{line}"

    def fail(self, key: str, message: str):
        path = f"{self.prefix}.{key}" if self.prefix else key
        raise ScenarioError(f"{self._where(path)}: {path}: {message}")

    def get(self, key: str, default=None, required: bool = False):
        if key not in self.data:
            if required:
                self.fail(key, "missing required key")
            return default
        return self.data[key]

    def number(self, key: str, default=None, required: bool = False) -> Optional[float]:
        val = self.get(key, default, required)
        if val is None:
            return None
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            self.fail(key, f"expected a number, got {val!r}")
        return float(val)

    def integer(self, key: str, default=None, required: bool = False) -> Optional[int]:
        val = self.get(key, default, required)
        if val is None:
            return None
        if not isinstance(val, int) or isinstance(val, bool):
            self.fail(key, f"expected an integer, got {val!r}")
        return int(val)

    def vector(self, key: str, size: int, default=None, required: bool = False):
        val = self.get(key, None, required)
        if val is None:
            return None if default is None else np.asarray(default, dtype=float)
        if not isinstance(val, list) or len(val) != size or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in val
        ):
            self.fail(key, f"expected a {size}-vector of numbers")
        return np.asarray(val, dtype=float)

    def sub(self, key: str) -> "_Section":
        val = self.get(key, {})
        if val is None:
            val = {}
        if not isinstance(val, dict):
            self.fail(key, "expected a mapping")
        prefix = f"{self.prefix}.{key}" if self.prefix else key
        return _Section(self.filename, val, self.lines, prefix)


def _parse_camera(sec: _Section) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(
            fx=sec.number("fx", 193.0),
            fy=sec.number("fy", 193.0),
            cx=sec.number("cx", 160.0),
            cy=sec.number("cy", 120.0),
            width=sec.integer("width", 320),
            height=sec.integer("height", 240),
            t_exp=sec.number("t_exp", 0.0),
            d_min=sec.number("d_min", 0.3),
            d_max=sec.number("d_max", 10.0),
        )
    except ValueError as exc:
        sec.fail("width", str(exc))
        raise  # unreachable


def _parse_mount(sec: _Section) -> RigidTransform:
    """Forward-looking mount, optionally rotated by body-frame roll/pitch/yaw."""
    translation = sec.vector("translation", 3, default=[0.0, 0.0, 0.0])
    rpy = sec.vector("rpy", 3, default=[0.0, 0.0, 0.0])
    roll, pitch, yaw = rpy
    rot = so3_exp(np.array([0.0, 0.0, yaw])) @ so3_exp(np.array([0.0, pitch, 0.0])) @ so3_exp(
        np.array([roll, 0.0, 0.0])
    )
    base = forward_mount(translation)
    return RigidTransform(rot @ base.rotation, base.translation)


def _parse_obstacles(sec: _Section):
    obstacles: List[object] = []
    densities: List[float] = []
    raw = sec.get("obstacles", [])
    if raw is None:
        raw = []
    if not isinstance(raw, list):
        sec.fail("obstacles", "expected a list")
    for i, entry in enumerate(raw):
        item = _Section(sec.filename, entry, sec.lines, f"{sec.prefix}.obstacles[{i}]")
        if not isinstance(entry, dict):
            item.fail("type", "expected a mapping with a `type` key")
        kind = item.get("type", required=True)
        if kind == "sphere":
            radius = item.number("radius", required=True)
            if radius <= 0:
                item.fail("radius", "sphere radius must be positive")
            obstacles.append(Sphere(item.vector("center", 3, required=True), radius))
        elif kind == "box":
            lo = item.vector("min", 3, required=True)
            hi = item.vector("max", 3, required=True)
            if not np.all(lo < hi):
                item.fail("min", "box must satisfy min < max per axis")
            obstacles.append(Box(lo, hi))
        else:
            item.fail("type", f"unknown obstacle type {kind!r}")
        densities.append(item.number("feature_density", 0.0))
    return obstacles, densities


def _parse_world(sec: _Section) -> World:
    obstacles, densities = _parse_obstacles(sec)
    goal = sec.vector("goal", 3, required=True)

    explicit = sec.get("features", [])
    if explicit is None:
        explicit = []
    if not isinstance(explicit, list):
        sec.fail("features", "expected a list of [x, y, z] points")
    points = []
    for i, entry in enumerate(explicit):
        if (
            not isinstance(entry, list)
            or len(entry) != 3
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in entry)
        ):
            sec.fail(f"features[{i}]", "expected an [x, y, z] point")
        points.append([float(x) for x in entry])
    features = FeatureMap.from_points(np.asarray(points).reshape(-1, 3))

    seed = sec.integer("feature_seed", 0)
    generated = sample_surface_features(obstacles, densities, seed, id_offset=len(features))
    if len(generated):
        features = FeatureMap(
            np.concatenate([features.ids, generated.ids]),
            np.concatenate([features.positions, generated.positions]),
        )

    bounds = None
    if "bounds" in sec.data:
        bsec = sec.sub("bounds")
        lo = bsec.vector("min", 3, required=True)
        hi = bsec.vector("max", 3, required=True)
        if not np.all(lo < hi):
            bsec.fail("min", "bounds must satisfy min < max per axis")
        bounds = Box(lo, hi)
        if not (np.all(goal >= lo) & np.all(goal <= hi)):
            sec.fail("goal", "goal must lie inside the world bounds")

    world = World(obstacles=obstacles, features=features, goal=goal, bounds=bounds)
    for i, p in enumerate(world.features.positions[: len(points)]):
        if obstacles and abs(world.min_obstacle_distance(p)) > _SURFACE_TOL:
            sec.fail(
                f"features[{i}]",
                f"feature must lie within {_SURFACE_TOL} m of an obstacle surface",
            )
    return world


def _parse_planner(sec: _Section, body_to_camera: RigidTransform) -> PlannerConfig:
    lim = sec.sub("limits")
    limits = FeasibilityLimits(
        max_speed=lim.number("max_speed", 5.0),
        min_thrust=lim.number("min_thrust", 2.0),
        max_thrust=lim.number("max_thrust", 20.0),
        max_body_rate=lim.number("max_body_rate", 6.0),
    )
    col = sec.sub("collision")
    collision = CollisionConfig(
        vehicle_radius=col.number("vehicle_radius", 0.3),
        unseen_margin=col.number("unseen_margin", 6.0),
        max_pyramids=col.integer("max_pyramids", 4),
        pixel_stride=col.integer("pixel_stride", 1),
    )
    per = sec.sub("perception")
    perception = PerceptionParams(
        sigma_n=per.number("sigma_n", 1.0),
        sample_interval=per.number("sample_interval", 0.2),
        min_features=per.integer("min_features", 8),
        max_condition=per.number("max_condition", 1e8),
    )
    duration = sec.vector("duration_range", 2, default=[1.0, 4.0])
    try:
        return PlannerConfig(
            k_perc=sec.number("k_perc", 100.0),
            candidate_budget=sec.integer("candidate_budget", 200),
            duration_range=(float(duration[0]), float(duration[1])),
            sample_depth_min=sec.number("sample_depth_min", 1.0),
            limits=limits,
            collision=collision,
            perception=perception,
            body_to_camera=body_to_camera,
            feasibility_dt=sec.number("feasibility_dt", 0.02),
            cycle_budget=sec.number("cycle_budget", 0.066),
            goal_threshold=sec.number("goal_threshold", 0.5),
        )
    except ValueError as exc:
        sec.fail("k_perc", str(exc))
        raise  # unreachable


def _parse_run(sec: _Section) -> RunConfig:
    start = sec.sub("start")
    state = TrajectoryState(
        position=start.vector("position", 3, default=[0.0, 0.0, 1.0]),
        velocity=start.vector("velocity", 3, default=[0.0, 0.0, 0.0]),
        acceleration=start.vector("acceleration", 3, default=[0.0, 0.0, 0.0]),
    )
    dt = sec.number("dt", 1.0 / 60.0)
    if dt <= 0:
        sec.fail("dt", "dt must be positive")
    replan_every = sec.integer("replan_every", 4)
    if replan_every < 1:
        sec.fail("replan_every", "replan_every must be at least 1")
    return RunConfig(
        start=state,
        start_yaw=start.number("yaw", 0.0),
        dt=dt,
        replan_every=replan_every,
        time_limit=sec.number("time_limit", 60.0),
        seed=sec.integer("seed", 0),
        stall_timeout=sec.number("stall_timeout", 5.0),
    )


def parse_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario: {exc}")
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}")
    if root is None or not isinstance(root, yaml.MappingNode):
        raise ScenarioError(f"{path}:1: scenario must be a mapping of sections")
    lines: Dict[str, int] = {}
    data = _walk(root, "", lines)
    top = _Section(str(path), data, lines, "")
    for key in data:
        if key not in ("world", "camera", "planner", "run"):
            top.fail(key, "unknown section")

    camera = top.sub("camera")
    intrinsics = _parse_camera(camera)
    body_to_camera = _parse_mount(camera.sub("mount"))
    world = _parse_world(top.sub("world"))
    planner = _parse_planner(top.sub("planner"), body_to_camera)
    run = _parse_run(top.sub("run"))
    return Scenario(
        name=path.stem, world=world, intrinsics=intrinsics, planner=planner, run=run
    )


def with_overrides(
    scenario: Scenario,
    seed: Optional[int] = None,
    k_perc: Optional[float] = None,
) -> Scenario:
    run = scenario.run
    planner = scenario.planner
    if seed is not None:
        run = replace(run, seed=seed)
    if k_perc is not None:
        planner = replace(planner, k_perc=k_perc)
    return Scenario(scenario.name, scenario.world, scenario.intrinsics, planner, run)
