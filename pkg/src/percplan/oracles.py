"""Independent verification oracles for the core numerical claims.

Each suite checks an implementation path against a method that does not share
code with it: finite differences for the projection Jacobian and trajectory
derivatives, Monte-Carlo Gauss-Newton estimation for the pose covariance,
and dense point-cloud distance checks for collision acceptance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from percplan.camera import CameraIntrinsics, DepthImage, default_intrinsics, project
from percplan.perception import (
    FeatureProjection,
    PerceptionParams,
    feature_covariance,
    pose_covariance,
    pose_jacobian,
)
from percplan.pyramids import CollisionConfig, PyramidStore, collision_free
from percplan.se3 import RigidTransform, exp_se3
from percplan.trajectory import (
    QuinticTrajectory,
    TrajectoryState,
    flat_state_at,
    solve_min_jerk,
)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    worst: float
    tolerance: float
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: {self.cases} cases, worst {self.worst:.3e} "
            f"(tolerance {self.tolerance:.1e}) {self.detail}"
        )


# ---------------------------------------------------------------------------
# Jacobian suite: analytic 2x6 vs central finite differences of the
# perturbed projection proj(exp(xi) P') at xi = 0.


def finite_difference_pose_jacobian(
    p_cam: np.ndarray, intrinsics: CameraIntrinsics, h: float = 1e-6
) -> np.ndarray:
    jac = np.zeros((2, 6))
    for j in range(6):
        xi = np.zeros(6)
        xi[j] = h
        plus = project(intrinsics, exp_se3(xi).apply(p_cam))
        minus = project(intrinsics, exp_se3(-xi).apply(p_cam))
        jac[:, j] = (plus - minus) / (2.0 * h)
    return jac


def jacobian_suite(
    n_cases: int = 1000,
    seed: int = 7,
    jacobian_fn: Callable = pose_jacobian,
    tolerance: float = 1e-5,
) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        intr = CameraIntrinsics(
            fx=float(rng.uniform(80, 600)),
            fy=float(rng.uniform(80, 600)),
            cx=float(rng.uniform(100, 540)),
            cy=float(rng.uniform(80, 400)),
            width=640,
            height=480,
        )
        z = float(rng.uniform(0.5, 10.0))
        p_cam = np.array([
            float(rng.uniform(-0.8, 0.8)) * z,
            float(rng.uniform(-0.6, 0.6)) * z,
            z,
        ])
        analytic = jacobian_fn(p_cam, intr)
        numeric = finite_difference_pose_jacobian(p_cam, intr)
        scale = max(float(np.abs(numeric).max()), 1.0)
        worst = max(worst, float(np.abs(analytic - numeric).max()) / scale)
    return SuiteResult(
        "jacobian vs finite differences", worst < tolerance, n_cases, worst,
        tolerance, "max relative error over random points and intrinsics",
    )


# ---------------------------------------------------------------------------
# Covariance suite: analytic pose covariance vs the empirical covariance of
# Monte-Carlo Gauss-Newton pose solves under the modeled pixel noise.


def _exp_batch(xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized se(3) exponential for (k, 6) twists."""
    rho, phi = xi[:, :3], xi[:, 3:]
    angle_sq = np.sum(phi * phi, axis=1)
    angle = np.sqrt(angle_sq)
    small = angle < 1e-6
    s = np.zeros((xi.shape[0], 3, 3))
    s[:, 0, 1], s[:, 0, 2] = -phi[:, 2], phi[:, 1]
    s[:, 1, 0], s[:, 1, 2] = phi[:, 2], -phi[:, 0]
    s[:, 2, 0], s[:, 2, 1] = -phi[:, 1], phi[:, 0]
    s2 = s @ s
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - angle_sq / 6.0, np.sin(angle) / np.where(small, 1.0, angle))
        b = np.where(small, 0.5 - angle_sq / 24.0, (1.0 - np.cos(angle)) / np.where(small, 1.0, angle_sq))
        c = np.where(
            small, 1.0 / 6.0 - angle_sq / 120.0,
            (np.where(small, 1.0, angle) - np.sin(angle)) / np.where(small, 1.0, angle_sq * angle),
        )
    eye = np.eye(3)[None, :, :]
    rot = eye + a[:, None, None] * s + b[:, None, None] * s2
    left = eye + b[:, None, None] * s + c[:, None, None] * s2
    return rot, np.einsum("kij,kj->ki", left, rho)


def _project_batch(intr: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    z = pts[..., 2]
    return np.stack([
        intr.fx * pts[..., 0] / z + intr.cx,
        intr.fy * pts[..., 1] / z + intr.cy,
    ], axis=-1)


def monte_carlo_pose_covariance(
    p_cams: np.ndarray,
    covariances: np.ndarray,
    intrinsics: CameraIntrinsics,
    draws: int = 10000,
    seed: int = 3,
    iterations: int = 4,
    fd_step: float = 1e-6,
) -> np.ndarray:
    """Empirical covariance of unweighted Gauss-Newton reprojection solves.

    The solver relinearizes with finite-difference Jacobians, sharing no code
    with the analytic covariance path.
    """
    rng = np.random.default_rng(seed)
    m = p_cams.shape[0]
    chol = np.linalg.cholesky(covariances)  # (m, 2, 2)
    noise = np.einsum("mij,dmj->dmi", chol, rng.standard_normal((draws, m, 2)))
    b_hat = _project_batch(intrinsics, p_cams)[None, :, :] + noise

    xi = np.zeros((draws, 6))
    for _ in range(iterations):
        rot, trans = _exp_batch(xi)
        pts = np.einsum("dij,mj->dmi", rot, p_cams) + trans[:, None, :]
        resid = (b_hat - _project_batch(intrinsics, pts)).reshape(draws, 2 * m)
        jac = np.empty((draws, 2 * m, 6))
        for j in range(6):
            step = np.zeros(6)
            step[j] = fd_step
            rot_p, trans_p = _exp_batch(xi + step)
            rot_m, trans_m = _exp_batch(xi - step)
            pix_p = _project_batch(
                intrinsics, np.einsum("dij,mj->dmi", rot_p, p_cams) + trans_p[:, None, :]
            )
            pix_m = _project_batch(
                intrinsics, np.einsum("dij,mj->dmi", rot_m, p_cams) + trans_m[:, None, :]
            )
            jac[:, :, j] = ((pix_p - pix_m) / (2.0 * fd_step)).reshape(draws, 2 * m)
        normal = np.einsum("dri,drj->dij", jac, jac)
        grad = np.einsum("dri,dr->di", jac, resid)
        xi = xi + np.linalg.solve(normal, grad)
    return np.cov(xi.T)


def grid_fixture(t_exp: float = 0.0):
    """Eight features on a fronto-parallel grid 3 m ahead, with a moving camera.

    Returns (camera-frame feature positions, intrinsics, per-feature pixel
    velocities) for the given exposure time.
    """
    intr = default_intrinsics(t_exp=t_exp)
    xs = [-1.5, -0.5, 0.5, 1.5]
    ys = [-0.9, 0.9]
    p_cams = np.array([[x, y, 3.0] for y in ys for x in xs])
    v_wb = np.array([1.5, 0.0, 0.3])
    omega = np.array([0.2, 0.5, 0.1])
    from percplan.perception import feature_camera_velocity, feature_image_velocity

    eye = np.eye(3)
    vels = np.array([
        feature_image_velocity(
            p, feature_camera_velocity(p, v_wb, omega, eye, eye, np.zeros(3)), intr
        )
        for p in p_cams
    ])
    return p_cams, intr, vels


def covariance_suite(
    draws: int = 10000, seed: int = 3, tolerance: float = 0.15
) -> SuiteResult:
    params = PerceptionParams()
    worst = 0.0
    detail = []
    for t_exp in (0.0, 0.008):
        p_cams, intr, vels = grid_fixture(t_exp)
        covs = np.array([
            feature_covariance(v, t_exp, params.sigma_n) for v in vels
        ])
        projections = [
            FeatureProjection(i, p_cams[i], _project_batch(intr, p_cams[i:i + 1])[0],
                              vels[i], covs[i])
            for i in range(p_cams.shape[0])
        ]
        analytic = pose_covariance(projections, intr, params).matrix[:3, :3]
        empirical = monte_carlo_pose_covariance(p_cams, covs, intr, draws, seed)[:3, :3]
        err = float(
            np.linalg.norm(empirical - analytic) / np.linalg.norm(analytic)
        )
        worst = max(worst, err)
        detail.append(f"t_exp={t_exp * 1e3:g}ms err={err:.3f}")
    return SuiteResult(
        "pose covariance vs Monte-Carlo Gauss-Newton", worst < tolerance,
        2 * draws, worst, tolerance, "; ".join(detail),
    )


# ---------------------------------------------------------------------------
# Collision suite: accepted trajectories must respect point-cloud clearance
# and the unseen-space rule on randomized scenes.


def brute_force_collision_ok(
    traj: QuinticTrajectory,
    depth: DepthImage,
    config: CollisionConfig,
    n_samples: int = 2000,
    slack: float = 1e-9,
) -> bool:
    """Dense-sampling safety oracle: distance to every depth return >= r and
    clearance from unseen space (outside the frustum and beyond l)."""
    ts = np.linspace(0.0, traj.duration, n_samples)
    pts = traj.position(ts)
    cloud = depth.point_cloud()
    r = config.vehicle_radius
    if cloud.shape[0]:
        dist, _ = cKDTree(cloud).query(pts)
        if dist.min() < r - slack:
            return False
    intr = depth.intrinsics
    p_cam = depth.pose_cw.apply(pts)
    from percplan.pyramids import _lateral_normals

    normals = _lateral_normals(intr, 0.0, float(intr.width), 0.0, float(intr.height))
    lateral = (p_cam @ normals.T).min(axis=1)
    inside_dist = np.maximum(np.minimum(lateral, p_cam[:, 2]), 0.0)
    sphere = config.unseen_margin - np.linalg.norm(p_cam, axis=1)
    return bool(np.all(np.maximum(inside_dist, sphere) >= r - slack))


def _random_scene(rng: np.random.Generator, intr: CameraIntrinsics):
    from percplan.perception import FeatureMap
    from percplan.sim import Box, Sphere, World, render_depth

    obstacles = []
    n = int(rng.integers(1, 11))
    for _ in range(n):
        center = np.array([
            float(rng.uniform(-4.0, 4.0)),
            float(rng.uniform(-3.0, 3.0)),
            float(rng.uniform(1.5, 9.0)),
        ])
        if rng.uniform() < 0.5:
            radius = float(rng.uniform(0.3, 1.5))
            if np.linalg.norm(center) - radius < 1.0:
                center *= (1.0 + radius + 0.1) / max(np.linalg.norm(center), 1e-6)
            obstacles.append(Sphere(center, radius))
        else:
            half = rng.uniform(0.25, 1.5, size=3)
            lo, hi = center - half, center + half
            box = Box(lo, hi)
            if box.surface_distance(np.zeros(3)) < 1.0:
                shift = center / max(np.linalg.norm(center), 1e-6) * 2.0
                box = Box(lo + shift, hi + shift)
            obstacles.append(box)
    world = World(obstacles=obstacles, features=FeatureMap.empty(), goal=np.zeros(3))
    return render_depth(world, RigidTransform.identity(), intr)


def collision_suite(
    n_scenes: int = 500,
    candidates_per_scene: int = 20,
    seed: int = 11,
) -> SuiteResult:
    rng = np.random.default_rng(seed)
    intr = default_intrinsics()
    config = CollisionConfig()
    false_accepts = 0
    accepted = 0
    checked = 0
    for _ in range(n_scenes):
        depth = _random_scene(rng, intr)
        store = PyramidStore()
        for _ in range(candidates_per_scene):
            pix = rng.uniform([0.0, 0.0], [intr.width, intr.height])
            z = float(rng.uniform(0.5, config.unseen_margin))
            from percplan.camera import unproject

            end = unproject(intr, pix, z)
            start = TrajectoryState.at_rest(np.zeros(3))
            traj = solve_min_jerk(start, end, float(rng.uniform(1.0, 4.0)))
            ok, _ = collision_free(traj, depth, store, config)
            checked += 1
            if ok:
                accepted += 1
                if not brute_force_collision_ok(traj, depth, config):
                    false_accepts += 1
    detail = (
        f"{accepted}/{checked} accepted, {false_accepts} false accepts, "
        f"conservative rejection rate {1.0 - accepted / max(checked, 1):.2f}"
    )
    return SuiteResult(
        "collision soundness vs brute force", false_accepts == 0, checked,
        float(false_accepts), 0.0 if false_accepts == 0 else float(false_accepts) - 0.5,
        detail,
    )


# ---------------------------------------------------------------------------
# Trajectory suite: boundary conditions, derivative consistency, flatness.


def _so3_log(rot: np.ndarray) -> np.ndarray:
    cos_angle = np.clip(0.5 * (np.trace(rot) - 1.0), -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    vee = 0.5 * np.array([
        rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]
    ])
    if angle < 1e-8:
        return vee
    return vee * angle / np.sin(angle)


def trajectory_suite(n_draws: int = 10000, seed: int = 5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst_boundary = 0.0
    worst_deriv = 0.0
    for i in range(n_draws):
        start = TrajectoryState(
            rng.uniform(-10, 10, 3), rng.uniform(-3, 3, 3), rng.uniform(-3, 3, 3)
        )
        end = rng.uniform(-10, 10, 3)
        duration = float(rng.uniform(0.3, 5.0))
        traj = solve_min_jerk(start, end, duration)
        worst_boundary = max(
            worst_boundary,
            float(np.linalg.norm(traj.position(duration) - end)),
            float(np.linalg.norm(traj.velocity(duration))),
            float(np.linalg.norm(traj.acceleration(duration))),
        )
        if i % 50 == 0:
            t = float(rng.uniform(0.05, 0.95) * duration)
            h = 1e-6
            fd_vel = (traj.position(t + h) - traj.position(t - h)) / (2 * h)
            fd_acc = (traj.velocity(t + h) - traj.velocity(t - h)) / (2 * h)
            scale_v = max(float(np.linalg.norm(traj.velocity(t))), 1.0)
            scale_a = max(float(np.linalg.norm(traj.acceleration(t))), 1.0)
            worst_deriv = max(
                worst_deriv,
                float(np.linalg.norm(fd_vel - traj.velocity(t))) / scale_v,
                float(np.linalg.norm(fd_acc - traj.acceleration(t))) / scale_a,
            )

    # Flatness: analytic body rate vs rotation finite differences.
    worst_flat = 0.0
    for _ in range(20):
        start = TrajectoryState(
            rng.uniform(-2, 2, 3), rng.uniform(-1.5, 1.5, 3), rng.uniform(-1, 1, 3)
        )
        goal = rng.uniform(-8, 8, 3)
        traj = solve_min_jerk(start, start.position + rng.uniform(-4, 4, 3), 2.5, goal=goal)
        for t in (0.5, 1.25, 2.0):
            h = 1e-5
            try:
                rot_p = flat_state_at(traj, t + h).pose.rotation
                rot_m = flat_state_at(traj, t - h).pose.rotation
                omega = flat_state_at(traj, t).body_rate
            except Exception:
                continue
            fd_omega = _so3_log(rot_m.T @ rot_p) / (2 * h)
            worst_flat = max(worst_flat, float(np.abs(fd_omega - omega).max()))

    passed = worst_boundary < 1e-9 and worst_deriv < 1e-6 and worst_flat < 1e-3
    return SuiteResult(
        "trajectory boundary/derivative/flatness", passed, n_draws,
        max(worst_boundary / 1e-9, worst_deriv / 1e-6, worst_flat / 1e-3),
        1.0,
        f"boundary {worst_boundary:.2e} (tol 1e-9), derivatives {worst_deriv:.2e} "
        f"(tol 1e-6), flatness {worst_flat:.2e} rad/s (tol 1e-3)",
    )


SUITES: Dict[str, Callable[[], SuiteResult]] = {
    "jacobian": jacobian_suite,
    "covariance": covariance_suite,
    "collision": collision_suite,
    "trajectory": trajectory_suite,
}
