"""Pinhole camera model, visibility tests and the depth-image container.

Pixel coordinates are continuous (u, v) arrays; the depth grid is indexed
depths[v, u] (row-major, height x width) and pixel (u, v) samples the ray
through its center (u + 0.5, v + 0.5).  Invalid pixels carry NaN.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from percplan.se3 import RigidTransform


class BehindCameraError(ValueError):
    """Raised when a camera-frame point has non-positive depth."""


def forward_mount(translation=None) -> RigidTransform:
    """T^BC of a forward-looking camera.

    Camera axes follow the usual vision convention (+z optical axis, +x
    right, +y down); the body follows the flatness convention (+x forward,
    +y left, +z up), so the optical axis maps to body +x.
    """
    rot = np.array([
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ])
    return RigidTransform(rot, np.zeros(3) if translation is None else np.asarray(translation, dtype=float))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    t_exp: float = 0.0  # exposure time, s
    d_min: float = 0.3  # valid depth range, m
    d_max: float = 10.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not (0 < self.d_min < self.d_max):
            raise ValueError("depth range must satisfy 0 < d_min < d_max")
        if self.t_exp < 0:
            raise ValueError("exposure time must be non-negative")


def default_intrinsics(t_exp: float = 0.0) -> CameraIntrinsics:
    """Half-resolution desk-scale depth camera model."""
    return CameraIntrinsics(
        fx=193.0, fy=193.0, cx=160.0, cy=120.0,
        width=320, height=240, t_exp=t_exp, d_min=0.3, d_max=10.0,
    )


def project(intrinsics: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Pinhole projection of one camera-frame point to pixel (u, v)."""
    x, y, z = float(p_cam[0]), float(p_cam[1]), float(p_cam[2])
    if z <= 0.0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    return np.array([intrinsics.fx * x / z + intrinsics.cx,
                     intrinsics.fy * y / z + intrinsics.cy])


def project_array(intrinsics: CameraIntrinsics, p_cam: np.ndarray):
    """Batched projection. Returns (pixels (..., 2), in_front mask)."""
    p_cam = np.asarray(p_cam, dtype=float)
    z = p_cam[..., 2]
    in_front = z > 0.0
    z_safe = np.where(in_front, z, 1.0)
    u = intrinsics.fx * p_cam[..., 0] / z_safe + intrinsics.cx
    v = intrinsics.fy * p_cam[..., 1] / z_safe + intrinsics.cy
    return np.stack([u, v], axis=-1), in_front


def unproject(intrinsics: CameraIntrinsics, pixel: np.ndarray, depth) -> np.ndarray:
    """Camera-frame point(s) at z-depth `depth` along the ray of `pixel`."""
    pixel = np.asarray(pixel, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (pixel[..., 0] - intrinsics.cx) * depth / intrinsics.fx
    y = (pixel[..., 1] - intrinsics.cy) * depth / intrinsics.fy
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def visible_mask(intrinsics: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Batched field-of-view membership (closed image bounds, valid depth range)."""
    pix, in_front = project_array(intrinsics, p_cam)
    z = np.asarray(p_cam, dtype=float)[..., 2]
    return (
        in_front
        & (z >= intrinsics.d_min)
        & (z <= intrinsics.d_max)
        & (pix[..., 0] >= 0.0)
        & (pix[..., 0] <= intrinsics.width)
        & (pix[..., 1] >= 0.0)
        & (pix[..., 1] <= intrinsics.height)
    )


def is_visible(intrinsics: CameraIntrinsics, p_cam: np.ndarray) -> bool:
    return bool(visible_mask(intrinsics, np.asarray(p_cam, dtype=float)))


def camera_pose_from_body(t_wb: RigidTransform, t_bc: RigidTransform) -> RigidTransform:
    """Camera extrinsics T^CW (world expressed in the camera frame)."""
    return t_wb.compose(t_bc).inverse()


@dataclass
class DepthImage:
    """Metric z-depth grid with its capture pose T^WC."""

    intrinsics: CameraIntrinsics
    pose_wc: RigidTransform
    depths: np.ndarray  # (height, width) float32, NaN where invalid
    _pose_cw: RigidTransform = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        h, w = self.depths.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(
                f"depth grid {w}x{h} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        valid = self.depths[np.isfinite(self.depths)]
        if valid.size and (
            valid.min() < self.intrinsics.d_min - 1e-6
            or valid.max() > self.intrinsics.d_max + 1e-6
        ):
            raise ValueError("valid depths must lie within [d_min, d_max]")
        object.__setattr__(self, "_pose_cw", self.pose_wc.inverse())

    @property
    def pose_cw(self) -> RigidTransform:
        return self._pose_cw

    def point_cloud(self) -> np.ndarray:
        """World-frame points of all valid depth returns, shape (n, 3)."""
        h, w = self.depths.shape
        vv, uu = np.nonzero(np.isfinite(self.depths))
        if vv.size == 0:
            return np.zeros((0, 3))
        pix = np.stack([uu + 0.5, vv + 0.5], axis=-1)
        p_cam = unproject(self.intrinsics, pix, self.depths[vv, uu].astype(float))
        return self.pose_wc.apply(p_cam)


def save_depth(path, image: DepthImage) -> None:
    """One-line text header `width height fx fy cx cy`, then row-major float32."""
    intr = image.intrinsics
    header = f"{intr.width} {intr.height} {intr.fx} {intr.fy} {intr.cx} {intr.cy}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(image.depths, dtype=np.float32).tobytes())


def load_depth(
    path,
    pose_wc: RigidTransform = None,
    t_exp: float = 0.0,
    d_min: float = 0.3,
    d_max: float = 10.0,
) -> DepthImage:
    """Load the binary depth format; pose and depth range are not serialized."""
    data = Path(path).read_bytes()
    stream = io.BytesIO(data)
    header = stream.readline().decode("ascii").split()
    if len(header) != 6:
        raise ValueError(f"bad depth header in {path}: expected 6 fields")
    width, height = int(header[0]), int(header[1])
    fx, fy, cx, cy = (float(x) for x in header[2:])
    grid = np.frombuffer(stream.read(), dtype=np.float32)
    if grid.size != width * height:
        raise ValueError(
            f"depth payload has {grid.size} values, expected {width * height}"
        )
    intr = CameraIntrinsics(fx, fy, cx, cy, width, height, t_exp, d_min, d_max)
    if pose_wc is None:
        pose_wc = RigidTransform.identity()
    return DepthImage(intr, pose_wc, grid.reshape(height, width).copy())
