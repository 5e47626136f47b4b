"""Perception-aware receding-horizon trajectory planning for multicopters.

The package plans minimum-jerk candidate trajectories toward a goal, rejects
colliding candidates against the latest depth image via rectangular-pyramid
free-space partitioning, and ranks the survivors by a weighted sum of a
predicted visual-odometry position-uncertainty cost and a speed-to-goal cost.
A deterministic simulation harness closes the loop for desk-scale experiments.
"""

from percplan.se3 import RigidTransform, exp_se3, skew
from percplan.trajectory import (
    FeasibilityLimits,
    QuinticTrajectory,
    TrajectoryState,
    solve_min_jerk,
)
from percplan.camera import CameraIntrinsics, DepthImage
from percplan.perception import FeatureMap, PerceptionParams, perception_cost
from percplan.pyramids import CollisionConfig, PyramidStore, collision_free
from percplan.planner import CommittedPlan, PlannerConfig, replan

__all__ = [
    "CameraIntrinsics",
    "CollisionConfig",
    "CommittedPlan",
    "DepthImage",
    "FeasibilityLimits",
    "FeatureMap",
    "PerceptionParams",
    "PlannerConfig",
    "PyramidStore",
    "QuinticTrajectory",
    "RigidTransform",
    "TrajectoryState",
    "collision_free",
    "exp_se3",
    "perception_cost",
    "replan",
    "skew",
    "solve_min_jerk",
]

__version__ = "0.1.0"
