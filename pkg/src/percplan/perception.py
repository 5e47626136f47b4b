"""Predicted VIO position-uncertainty cost of a candidate trajectory.

Poses are sampled along the candidate at a fixed interval.  At each pose the
tracked features are projected into the camera; each projection carries a
2x2 covariance combining an omnidirectional noise floor with a motion-blur
variance aligned with the feature's image-plane velocity.  The 6x6 pose
covariance is the inverse of the information matrix accumulated feature by
feature, and the scalar cost is the mean per-axis position standard
deviation over the sampled poses.  Trajectories whose camera cannot see
enough features at some sampled pose are rejected (infinite cost).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from percplan.camera import BehindCameraError, CameraIntrinsics, project
from percplan.se3 import RigidTransform
from percplan.trajectory import GRAVITY, QuinticTrajectory, flat_arrays


@dataclass(frozen=True)
class PerceptionParams:
    sigma_n: float = 1.0  # omnidirectional pixel noise std, px
    sample_interval: float = 0.2  # pose sampling interval, s
    min_features: int = 8  # fewer visible features -> rejection
    max_condition: float = 1e8  # information-matrix conditioning bound

    def __post_init__(self):
        if self.sigma_n <= 0 or self.sample_interval <= 0:
            raise ValueError("sigma_n and sample_interval must be positive")
        if self.min_features < 3:
            raise ValueError("min_features must be at least 3")


@dataclass
class FeatureMap:
    """World-frame positions of the tracked VIO landmarks."""

    ids: np.ndarray  # (n,)
    positions: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.ids.shape[0] != self.positions.shape[0]:
            raise ValueError("ids and positions must have equal length")
        if np.unique(self.ids).size != self.ids.size:
            raise ValueError("feature ids must be unique")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("feature positions must be finite")

    @staticmethod
    def from_points(positions, ids=None) -> "FeatureMap":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        if ids is None:
            ids = np.arange(positions.shape[0])
        return FeatureMap(np.asarray(ids), positions)

    @staticmethod
    def empty() -> "FeatureMap":
        return FeatureMap(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def subset(self, mask) -> "FeatureMap":
        return FeatureMap(self.ids[mask], self.positions[mask])


def save_features(path, features: FeatureMap) -> None:
    """Text format: one `id x y z` record per line, meters."""
    lines = [
        f"{int(i)} {p[0]!r} {p[1]!r} {p[2]!r}"
        for i, p in zip(features.ids, features.positions)
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_features(path) -> FeatureMap:
    ids, pts = [], []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        parts = raw.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{ln}: expected `id x y z`, got {raw!r}")
        ids.append(int(parts[0]))
        pts.append([float(x) for x in parts[1:]])
    if not ids:
        return FeatureMap.empty()
    return FeatureMap(np.asarray(ids), np.asarray(pts))


@dataclass(frozen=True)
class FeatureProjection:
    feature_id: int
    p_cam: np.ndarray  # (3,), camera frame, Z > 0
    pixel: np.ndarray  # (2,)
    pixel_velocity: np.ndarray  # (2,), px/s
    covariance: np.ndarray  # (2, 2), px^2


@dataclass(frozen=True)
class PoseCovariance:
    """6x6 covariance over the camera-extrinsics twist [rho; phi]."""

    matrix: np.ndarray

    def position_std_sum(self) -> float:
        d = np.diag(self.matrix)[:3]
        return float(np.sum(np.sqrt(np.maximum(d, 0.0))))


def feature_camera_velocity(
    p_cam: np.ndarray,
    v_wb: np.ndarray,
    omega_body: np.ndarray,
    r_cw: np.ndarray,
    r_cb: np.ndarray,
    t_bc: np.ndarray,
) -> np.ndarray:
    """Time derivative of a feature's camera-frame position.

    Differentiating the camera-frame position of a static world point under
    body velocity v and body-frame angular velocity omega gives

        Pdot' = -R^CB S(omega) R^BC P' - R^CB S(omega) t^BC - R^CW v.
    """
    p_cam = np.asarray(p_cam, dtype=float)
    term_rot = -r_cb @ np.cross(omega_body, r_cb.T @ p_cam)
    term_arm = -r_cb @ np.cross(omega_body, t_bc)
    term_lin = -r_cw @ np.asarray(v_wb, dtype=float)
    return term_rot + term_arm + term_lin


def feature_image_velocity(
    p_cam: np.ndarray, pdot_cam: np.ndarray, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Image-plane velocity (px/s) of a moving camera-frame point."""
    x, y, z = (float(c) for c in p_cam)
    if z <= 0.0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    xd, yd, zd = (float(c) for c in pdot_cam)
    return np.array([
        intrinsics.fx * (xd * z - x * zd) / z**2,
        intrinsics.fy * (yd * z - y * zd) / z**2,
    ])


def feature_covariance(pixel_velocity: np.ndarray, t_exp: float, sigma_n: float) -> np.ndarray:
    """2x2 pixel covariance: blur variance along the velocity plus a noise floor.

    The blurred feature is modeled as uniform on a segment of length
    t_exp * |pixel_velocity|, giving variance t_exp^2 |b|^2 / 12 along the
    velocity direction on top of the isotropic sigma_n^2.
    """
    if t_exp < 0:
        raise ValueError("exposure time must be non-negative")
    if sigma_n <= 0:
        raise ValueError("sigma_n must be positive")
    b = np.asarray(pixel_velocity, dtype=float)
    speed_sq = float(b @ b)
    noise = sigma_n**2
    if speed_sq == 0.0:
        return noise * np.eye(2)
    par = t_exp**2 * speed_sq / 12.0
    ub, vb = b / np.sqrt(speed_sq)
    return np.array([
        [ub * ub * par + noise, ub * vb * par],
        [ub * vb * par, vb * vb * par + noise],
    ])


def pose_jacobian(p_cam: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """2x6 derivative of the projected pixel w.r.t. the extrinsics twist [rho; phi]."""
    x, y, z = (float(c) for c in p_cam)
    if z <= 0.0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    fx, fy = intrinsics.fx, intrinsics.fy
    z2 = z * z
    return np.array([
        [fx / z, 0.0, -fx * x / z2,
         -fx * x * y / z2, fx + fx * x * x / z2, -fx * y / z],
        [0.0, fy / z, -fy * y / z2,
         -fy - fy * y * y / z2, fy * x * y / z2, fy * x / z],
    ])


def _information_ok(info: np.ndarray, max_condition: float) -> bool:
    eig = np.linalg.eigvalsh(info)
    if eig[0] <= 0.0:
        return False
    return bool(eig[-1] <= max_condition * eig[0])


def pose_covariance(
    projections: List[FeatureProjection],
    intrinsics: CameraIntrinsics,
    params: PerceptionParams,
) -> Optional[PoseCovariance]:
    """Invert the feature-wise accumulated information; None signals rejection."""
    if len(projections) < params.min_features:
        return None
    info = np.zeros((6, 6))
    for proj in projections:
        jac = pose_jacobian(proj.p_cam, intrinsics)
        info += jac.T @ np.linalg.solve(proj.covariance, jac)
    if not _information_ok(info, params.max_condition):
        return None
    return PoseCovariance(np.linalg.inv(info))


def visible_projections(
    features: FeatureMap,
    body_pose: RigidTransform,
    velocity_wb: np.ndarray,
    body_rate: np.ndarray,
    body_to_camera: RigidTransform,
    intrinsics: CameraIntrinsics,
    params: PerceptionParams,
) -> List[FeatureProjection]:
    """Project the visible features at one body pose, with blur covariances."""
    if len(features) == 0:
        return []
    pose_wc = body_pose.compose(body_to_camera)
    pose_cw = pose_wc.inverse()
    r_cb = body_to_camera.rotation.T
    out: List[FeatureProjection] = []
    p_cam_all = pose_cw.apply(features.positions)
    from percplan.camera import visible_mask

    vis = visible_mask(intrinsics, p_cam_all)
    for idx in np.nonzero(vis)[0]:
        p_cam = p_cam_all[idx]
        pdot = feature_camera_velocity(
            p_cam, velocity_wb, body_rate, pose_cw.rotation, r_cb,
            body_to_camera.translation,
        )
        bdot = feature_image_velocity(p_cam, pdot, intrinsics)
        out.append(FeatureProjection(
            feature_id=int(features.ids[idx]),
            p_cam=p_cam,
            pixel=project(intrinsics, p_cam),
            pixel_velocity=bdot,
            covariance=feature_covariance(bdot, intrinsics.t_exp, params.sigma_n),
        ))
    return out


def _pose_sample_times(duration: float, dt: float) -> np.ndarray:
    n = int(np.floor(duration / dt)) + 1
    if n < 2:
        return np.array([0.0, duration])
    return np.linspace(0.0, duration, n)


def batched_pose_stats(
    positions: np.ndarray,
    r_cw: np.ndarray,
    t_wc: np.ndarray,
    vel_w: np.ndarray,
    omega_body: np.ndarray,
    r_cb: np.ndarray,
    t_bc: np.ndarray,
    intrinsics: CameraIntrinsics,
    params: PerceptionParams,
):
    """Visible counts, per-pose position std and validity for N camera poses.

    positions: (M, 3) feature world positions; r_cw/t_wc: (N, 3, 3)/(N, 3)
    camera extrinsics; vel_w/omega_body: (N, 3) body velocity and body-frame
    angular rate.  The per-pose std is (sqrt(S11)+sqrt(S22)+sqrt(S33))/3 of
    the 6x6 twist covariance; poses with too few visible features or an
    ill-conditioned information matrix are flagged invalid.
    """
    n = r_cw.shape[0]
    counts = np.zeros(n, dtype=int)
    stds = np.full(n, np.inf)
    valid = np.zeros(n, dtype=bool)
    if positions.shape[0] == 0:
        return counts, stds, valid

    rel = positions[None, :, :] - t_wc[:, None, :]
    p_cam = np.einsum("nij,nmj->nmi", r_cw, rel)
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    z_safe = np.where(z > 0.0, z, 1.0)
    u = intrinsics.fx * x / z_safe + intrinsics.cx
    v = intrinsics.fy * y / z_safe + intrinsics.cy
    vis = (
        (z >= intrinsics.d_min)
        & (z <= intrinsics.d_max)
        & (u >= 0.0) & (u <= intrinsics.width)
        & (v >= 0.0) & (v <= intrinsics.height)
    )
    counts = vis.sum(axis=1)
    if counts.max() < params.min_features:
        return counts, stds, valid
    keep = vis.any(axis=0)
    p_cam = p_cam[:, keep]
    vis = vis[:, keep]

    from percplan.trajectory import _cross

    omega_cam = omega_body @ r_cb.T
    term_rot = -_cross(omega_cam[:, None, :], p_cam)
    term_arm = -(_cross(omega_body, np.broadcast_to(t_bc, omega_body.shape)) @ r_cb.T)
    term_lin = -np.einsum("nij,nj->ni", r_cw, vel_w)
    pdot_cam = term_rot + (term_arm + term_lin)[:, None, :]

    info = _batched_information(p_cam, pdot_cam, vis, intrinsics, params)
    eig = np.linalg.eigvalsh(info)
    valid = (
        (counts >= params.min_features)
        & (eig[:, 0] > 0.0)
        & (eig[:, -1] <= params.max_condition * eig[:, 0])
    )
    if valid.any():
        safe_info = np.where(valid[:, None, None], info, np.eye(6)[None])
        cov = np.linalg.inv(safe_info)
        diag = np.sqrt(np.maximum(np.diagonal(cov, axis1=-2, axis2=-1)[:, :3], 0.0))
        stds = np.where(valid, diag.sum(axis=1) / 3.0, np.inf)
    return counts, stds, valid


def pose_position_std(
    features: FeatureMap,
    body_pose: RigidTransform,
    velocity_wb: np.ndarray,
    body_rate: np.ndarray,
    body_to_camera: RigidTransform,
    intrinsics: CameraIntrinsics,
    params: PerceptionParams,
):
    """Per-axis position std and visible count at one pose (None when rejected)."""
    pose_wc = body_pose.compose(body_to_camera)
    pose_cw = pose_wc.inverse()
    counts, stds, valid = batched_pose_stats(
        features.positions,
        pose_cw.rotation[None],
        pose_wc.translation[None],
        np.asarray(velocity_wb, dtype=float)[None],
        np.asarray(body_rate, dtype=float)[None],
        body_to_camera.rotation.T,
        body_to_camera.translation,
        intrinsics,
        params,
    )
    return (float(stds[0]) if valid[0] else None), int(counts[0])


def _batched_information(p_cam, pdot_cam, vis, intrinsics, params):
    """Per-pose 6x6 information from (N, M, 3) camera points and velocities."""
    fx, fy = intrinsics.fx, intrinsics.fy
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    z = np.where(vis, z, 1.0)  # invisible entries are masked out below
    xd, yd, zd = pdot_cam[..., 0], pdot_cam[..., 1], pdot_cam[..., 2]
    z2 = z * z

    udot = fx * (xd * z - x * zd) / z2
    vdot = fy * (yd * z - y * zd) / z2
    speed_sq = udot**2 + vdot**2
    noise = params.sigma_n**2
    par = intrinsics.t_exp**2 * speed_sq / 12.0
    # Covariance entries without normalizing the direction: ub^2 par = udot^2 par / speed_sq.
    safe = np.where(speed_sq > 0.0, speed_sq, 1.0)
    c00 = udot**2 * par / safe + noise
    c01 = udot * vdot * par / safe
    c11 = vdot**2 * par / safe + noise
    det = c00 * c11 - c01 * c01
    w00 = c11 / det
    w01 = -c01 / det
    w11 = c00 / det
    w00 = np.where(vis, w00, 0.0)
    w01 = np.where(vis, w01, 0.0)
    w11 = np.where(vis, w11, 0.0)

    jac = np.zeros(p_cam.shape[:-1] + (2, 6))
    jac[..., 0, 0] = fx / z
    jac[..., 0, 2] = -fx * x / z2
    jac[..., 0, 3] = -fx * x * y / z2
    jac[..., 0, 4] = fx + fx * x * x / z2
    jac[..., 0, 5] = -fx * y / z
    jac[..., 1, 1] = fy / z
    jac[..., 1, 2] = -fy * y / z2
    jac[..., 1, 3] = -fy - fy * y * y / z2
    jac[..., 1, 4] = fy * x * y / z2
    jac[..., 1, 5] = fy * x / z

    weights = np.empty(p_cam.shape[:-1] + (2, 2))
    weights[..., 0, 0] = w00
    weights[..., 0, 1] = w01
    weights[..., 1, 0] = w01
    weights[..., 1, 1] = w11
    # Sum the per-feature contributions J^T W J into one 6x6 per pose.
    n, m = p_cam.shape[:2]
    wj = (weights @ jac).reshape(n, 2 * m, 6)
    return np.swapaxes(jac.reshape(n, 2 * m, 6), 1, 2) @ wj


def perception_cost(
    traj: QuinticTrajectory,
    features: FeatureMap,
    body_to_camera: RigidTransform,
    intrinsics: CameraIntrinsics,
    params: PerceptionParams,
    gravity: np.ndarray = GRAVITY,
) -> float:
    """Mean per-axis position-estimate standard deviation; inf on rejection."""
    if len(features) < params.min_features:
        return np.inf
    ts = _pose_sample_times(traj.duration, params.sample_interval)
    pos, vel, rot_wb, omega, _, bad = flat_arrays(traj, ts, gravity)
    if bad.any():
        return np.inf

    r_bc = body_to_camera.rotation
    t_bc = body_to_camera.translation
    r_wc = rot_wb @ r_bc  # (N, 3, 3)
    t_wc = pos + np.einsum("nij,j->ni", rot_wb, t_bc)
    r_cw = np.swapaxes(r_wc, -1, -2)
    _, stds, valid = batched_pose_stats(
        features.positions, r_cw, t_wc, vel, omega, r_bc.T, t_bc, intrinsics, params,
    )
    if not valid.all():
        return np.inf
    return float(stds.mean())
