"""Depth-image free-space partitioning into shrunk rectangular pyramids.

A pyramid is grown from a seed pixel one ring at a time, freezing any side
whose next ring holds a depth return closer than the seed's usable depth.
The usable interior is the expanded frustum shrunk by the vehicle radius on
its four lateral faces and base plane.  Trajectory containment reduces to
sign-checking five polynomial constraints per pyramid, certified by
recursive Bernstein-coefficient subdivision.

Because the shrunk pyramids exclude the region near the camera (the vehicle
flies at the apex), coverage also admits a near-field ball around the
capture position whose radius keeps the vehicle provably clear of every
depth return and of unseen space: min(nearest return distance, l) - r.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from percplan.camera import DepthImage
from percplan.se3 import RigidTransform
from percplan.trajectory import QuinticTrajectory

_EXIT_TOL = 1e-6  # s, exit-time resolution of the subdivision search
_ADVANCE_TOL = 1e-4  # s, coarser certified-coverage resolution inside collision_free
_MARGIN = 1e-12
_MAX_COVER_STEPS = 64
_DEPTH_QUANTUM = 0.5  # m, bucket size for required-depth memoization


class NoFreeSpaceError(RuntimeError):
    """Raised when a depth image has no valid pixel to seed from."""


@dataclass(frozen=True)
class CollisionConfig:
    vehicle_radius: float = 0.3  # m
    unseen_margin: float = 6.0  # l: unseen space beyond this range is occupied
    max_pyramids: int = 4  # pyramid budget per candidate
    pixel_stride: int = 1  # ring-check subsampling stride (1 = exact)

    def __post_init__(self):
        if self.vehicle_radius <= 0:
            raise ValueError("vehicle radius must be positive")
        if self.unseen_margin <= self.vehicle_radius:
            raise ValueError("unseen margin must exceed the vehicle radius")
        if self.max_pyramids < 1 or self.pixel_stride < 1:
            raise ValueError("max_pyramids and pixel_stride must be at least 1")


# ---------------------------------------------------------------------------
# Bernstein-basis machinery for certified sign checks of polynomials.

_COMB_CACHE: Dict[int, np.ndarray] = {}
_M2B_CACHE: Dict[int, np.ndarray] = {}
_SPLIT_CACHE: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}


def _comb_table(n: int) -> np.ndarray:
    if n not in _COMB_CACHE:
        c = np.zeros((n + 1, n + 1))
        for i in range(n + 1):
            for j in range(i + 1):
                c[i, j] = math.comb(i, j)
        _COMB_CACHE[n] = c
    return _COMB_CACHE[n]


def _mono_to_bern(n: int) -> np.ndarray:
    """Matrix mapping monomial coefficients on [0, 1] to Bernstein coefficients."""
    if n not in _M2B_CACHE:
        c = _comb_table(n)
        m = np.zeros((n + 1, n + 1))
        for i in range(n + 1):
            for k in range(i + 1):
                m[i, k] = c[i, k] / c[n, k]
        _M2B_CACHE[n] = m
    return _M2B_CACHE[n]


def _split_matrices(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """De Casteljau subdivision at the midpoint: b -> (left, right) halves."""
    if n not in _SPLIT_CACHE:
        c = _comb_table(n)
        left = np.zeros((n + 1, n + 1))
        for i in range(n + 1):
            for j in range(i + 1):
                left[i, j] = c[i, j] / 2.0**i
        right = left[::-1, ::-1]
        _SPLIT_CACHE[n] = (left, right)
    return _SPLIT_CACHE[n]


def _bernstein_on_interval(mono: np.ndarray, a: float, b: float) -> np.ndarray:
    """Bernstein coefficients on [a, b] of polynomials given in monomial form.

    mono has shape (n+1, k): column polynomials sum_k mono[j] t^j.
    """
    n = mono.shape[0] - 1
    comb = _comb_table(n)
    span = b - a
    deg = np.arange(n + 1)
    # Taylor shift to a: c_shift[j] = sum_{k>=j} C(k, j) a^(k-j) mono[k]
    powers = np.where(deg[None, :] >= deg[:, None], a ** np.maximum(deg[None, :] - deg[:, None], 0), 0.0)
    shift = (comb.T * powers) @ mono
    scaled = shift * (span ** deg)[:, None]
    return _mono_to_bern(n) @ scaled


def _first_violation(bern: np.ndarray, lo: float, hi: float, tol: float) -> Optional[float]:
    """Earliest time any constraint polynomial may become non-positive.

    Returns None when all constraints are certified positive on [lo, hi];
    everything strictly before a returned time is certified positive.
    """
    mins = bern.min(axis=0)
    active = mins <= 0.0
    if not active.any():
        return None
    if (bern[0] <= 0.0).any():
        return lo
    if hi - lo <= tol:
        return lo
    sub = bern[:, active]
    n = bern.shape[0] - 1
    left, right = _split_matrices(n)
    mid = 0.5 * (lo + hi)
    hit = _first_violation(left @ sub, lo, mid, tol)
    if hit is not None:
        return hit
    return _first_violation(right @ sub, mid, hi, tol)


def _provably_positive(bern: np.ndarray, depth_limit: int = 8) -> bool:
    """Cheap certificate that all constraints stay positive (False = unproven)."""
    if (bern.min(axis=0) > 0.0).all():
        return True
    if (bern[0] <= 0.0).any() or (bern[-1] <= 0.0).any():
        return False
    if depth_limit == 0:
        return False
    n = bern.shape[0] - 1
    left, right = _split_matrices(n)
    return _provably_positive(left @ bern, depth_limit - 1) and _provably_positive(
        right @ bern, depth_limit - 1
    )


# ---------------------------------------------------------------------------
# Pyramids.


@dataclass(frozen=True)
class Pyramid:
    """Expanded pixel rectangle x depth, with the usable interior shrunk by r.

    Bounds are continuous pixel coordinates of the expanded rectangle; the
    usable interior is {p : n_i . p >= r for the four lateral face normals,
    z <= base_depth - r} in the capture camera frame.
    """

    u_lo: float
    u_hi: float
    v_lo: float
    v_hi: float
    base_depth: float
    radius: float
    pose_wc: RigidTransform
    normals: np.ndarray  # (4, 3) unit inward lateral normals, camera frame
    seed: Tuple[int, int]
    _pose_cw: RigidTransform = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if not (self.u_lo < self.u_hi and self.v_lo < self.v_hi):
            raise ValueError("pyramid pixel rectangle is degenerate")
        if self.base_depth - self.radius <= 0:
            raise ValueError("pyramid has no usable depth after shrinking")
        object.__setattr__(self, "_pose_cw", self.pose_wc.inverse())

    @property
    def pose_cw(self) -> RigidTransform:
        return self._pose_cw

    def contains(self, p_world: np.ndarray) -> bool:
        return self.contains_cam(self._pose_cw.apply(p_world))

    def contains_cam(self, p_cam: np.ndarray) -> bool:
        if p_cam[2] > self.base_depth - self.radius + _MARGIN:
            return False
        return bool((self.normals @ p_cam).min() >= self.radius - _MARGIN)

    def margin_polynomials(self, coeffs_cam: np.ndarray) -> np.ndarray:
        """Five constraint polynomials g_i(t) >= 0 from camera-frame coefficients."""
        lat = coeffs_cam @ self.normals.T  # (6, 4)
        lat[0] -= self.radius
        base = -coeffs_cam[:, 2:3].copy()
        base[0] += self.base_depth - self.radius
        return np.concatenate([lat, base], axis=1)


def _lateral_normals(intr, u_lo: float, u_hi: float, v_lo: float, v_hi: float) -> np.ndarray:
    raw = np.array([
        [intr.fx, 0.0, intr.cx - u_lo],
        [-intr.fx, 0.0, u_hi - intr.cx],
        [0.0, intr.fy, intr.cy - v_lo],
        [0.0, -intr.fy, v_hi - intr.cy],
    ])
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def trajectory_camera_coefficients(traj: QuinticTrajectory, pose_cw: RigidTransform) -> np.ndarray:
    """Monomial position coefficients (6, 3) expressed in the capture frame."""
    coeffs = traj.position_coefficients() @ pose_cw.rotation.T
    coeffs[0] += pose_cw.translation
    return coeffs


def nearest_pixel(depth: DepthImage, p_world: np.ndarray) -> Tuple[int, int]:
    """Valid-depth pixel whose center is closest to the projection of p_world."""
    p_cam = depth.pose_cw.apply(np.asarray(p_world, dtype=float))
    if p_cam[2] <= 0.0:
        from percplan.camera import BehindCameraError

        raise BehindCameraError("query point is behind the capture pose")
    intr = depth.intrinsics
    u = intr.fx * p_cam[0] / p_cam[2] + intr.cx
    v = intr.fy * p_cam[1] / p_cam[2] + intr.cy
    u = min(max(u, 0.0), float(intr.width))
    v = min(max(v, 0.0), float(intr.height))
    valid = np.isfinite(depth.depths)
    if not valid.any():
        raise NoFreeSpaceError("depth image has no valid pixels")
    du = (np.arange(intr.width) + 0.5) - u
    dv = (np.arange(intr.height) + 0.5) - v
    dist = dv[:, None] ** 2 + du[None, :] ** 2
    dist = np.where(valid, dist, np.inf)
    flat = int(np.argmin(dist))
    row, col = divmod(flat, intr.width)
    return col, row


class RangeMinTables:
    """Sparse tables for O(1) min over row or column segments of a depth grid.

    Invalid pixels are encoded as -inf so any query covering one fails every
    threshold test, matching the occupied-at-d_min rule.
    """

    def __init__(self, depths: np.ndarray):
        filled = np.where(np.isfinite(depths), depths, -np.inf)
        self.cols = [filled]  # level k: min over row windows of length 2^k
        h, w = depths.shape
        k = 1
        while (1 << k) <= h:
            prev = self.cols[-1]
            half = 1 << (k - 1)
            self.cols.append(np.minimum(prev[:-half, :], prev[half:, :]))
            k += 1
        self.rows = [filled]
        k = 1
        while (1 << k) <= w:
            prev = self.rows[-1]
            half = 1 << (k - 1)
            self.rows.append(np.minimum(prev[:, :-half], prev[:, half:]))
            k += 1

    def col_min(self, u: int, v0: int, v1: int) -> float:
        k = (v1 - v0 + 1).bit_length() - 1
        table = self.cols[k]
        return min(table[v0, u], table[v1 - (1 << k) + 1, u])

    def row_min(self, v: int, u0: int, u1: int) -> float:
        k = (u1 - u0 + 1).bit_length() - 1
        table = self.rows[k]
        return min(table[v, u0], table[v, u1 - (1 << k) + 1])


def _strip_ok(strip: np.ndarray, threshold: float, stride: int) -> bool:
    if stride > 1:
        strip = strip[::stride]
    if not np.isfinite(strip).all():
        return False  # invalid pixels are occupied at d_min, which blocks growth
    return bool(strip.min() >= threshold)


def inflate_pyramid(
    depth: DepthImage,
    seed: Tuple[int, int],
    config: CollisionConfig,
    tables: Optional[RangeMinTables] = None,
    required_depth: Optional[float] = None,
) -> Optional[Pyramid]:
    """Grow the expanded rectangle ring by ring from the seed, then shrink.

    A ring intrudes into occupied space when it holds a return closer than
    the depth the pyramid must reach: the seed pixel's own return by default,
    or `required_depth` + vehicle radius when the caller needs the usable
    interior to reach a specific query depth (shallower thresholds let the
    rectangle grow wide across sloped surfaces).
    """
    intr = depth.intrinsics
    grid = depth.depths
    su, sv = int(seed[0]), int(seed[1])
    if not (0 <= su < intr.width and 0 <= sv < intr.height):
        raise ValueError(f"seed pixel {seed} outside the image")
    seed_depth = float(grid[sv, su]) if np.isfinite(grid[sv, su]) else intr.d_min
    if required_depth is None:
        threshold = min(seed_depth, config.unseen_margin)
    else:
        threshold = min(required_depth + config.vehicle_radius, config.unseen_margin)
        if seed_depth < threshold:
            return None  # the seed's own return already caps the base too low
    if threshold - config.vehicle_radius <= 0:
        return None
    fast = tables is not None and config.pixel_stride == 1

    def col_ok(u: int, v0: int, v1: int) -> bool:
        if fast:
            return tables.col_min(u, v0, v1) >= threshold
        return _strip_ok(grid[v0:v1 + 1, u], threshold, config.pixel_stride)

    def row_ok(v: int, u0: int, u1: int) -> bool:
        if fast:
            return tables.row_min(v, u0, u1) >= threshold
        return _strip_ok(grid[v, u0:u1 + 1], threshold, config.pixel_stride)

    lo_u, hi_u, lo_v, hi_v = su, su, sv, sv
    frozen = [False, False, False, False]  # left, right, up, down
    while not all(frozen):
        if fast and frozen[2] and frozen[3] and not (frozen[0] and frozen[1]):
            # v-extent is fixed: the remaining column growth is independent
            # per side, so both runs can finish in one vectorized query.
            k = (hi_v - lo_v + 1).bit_length() - 1
            table = tables.cols[k]
            clean = np.minimum(table[lo_v], table[hi_v - (1 << k) + 1]) >= threshold
            if not frozen[0]:
                seg = ~clean[:lo_u][::-1]
                lo_u -= int(np.argmax(seg)) if seg.any() else len(seg)
                frozen[0] = True
            if not frozen[1]:
                seg = ~clean[hi_u + 1:]
                hi_u += int(np.argmax(seg)) if seg.any() else len(seg)
                frozen[1] = True
            continue
        if fast and frozen[0] and frozen[1] and not (frozen[2] and frozen[3]):
            k = (hi_u - lo_u + 1).bit_length() - 1
            table = tables.rows[k]
            clean = np.minimum(table[:, lo_u], table[:, hi_u - (1 << k) + 1]) >= threshold
            if not frozen[2]:
                seg = ~clean[:lo_v][::-1]
                lo_v -= int(np.argmax(seg)) if seg.any() else len(seg)
                frozen[2] = True
            if not frozen[3]:
                seg = ~clean[hi_v + 1:]
                hi_v += int(np.argmax(seg)) if seg.any() else len(seg)
                frozen[3] = True
            continue
        if not frozen[0]:
            if lo_u == 0:
                frozen[0] = True
            elif col_ok(lo_u - 1, lo_v, hi_v):
                lo_u -= 1
            else:
                frozen[0] = True
        if not frozen[1]:
            if hi_u == intr.width - 1:
                frozen[1] = True
            elif col_ok(hi_u + 1, lo_v, hi_v):
                hi_u += 1
            else:
                frozen[1] = True
        if not frozen[2]:
            if lo_v == 0:
                frozen[2] = True
            elif row_ok(lo_v - 1, lo_u, hi_u):
                lo_v -= 1
            else:
                frozen[2] = True
        if not frozen[3]:
            if hi_v == intr.height - 1:
                frozen[3] = True
            elif row_ok(hi_v + 1, lo_u, hi_u):
                hi_v += 1
            else:
                frozen[3] = True

    rect = grid[lo_v:hi_v + 1, lo_u:hi_u + 1]
    rect_min = float(rect.min()) if np.isfinite(rect).all() else intr.d_min
    base_depth = min(rect_min, config.unseen_margin)
    if base_depth - config.vehicle_radius <= 0:
        return None

    u_lo, u_hi = float(lo_u), float(hi_u + 1)
    v_lo, v_hi = float(lo_v), float(hi_v + 1)
    normals = _lateral_normals(intr, u_lo, u_hi, v_lo, v_hi)
    # Emptiness probe: the widest cross-section point on the central ray.
    zc = base_depth - config.vehicle_radius
    center = np.array([
        (0.5 * (u_lo + u_hi) - intr.cx) / intr.fx * zc,
        (0.5 * (v_lo + v_hi) - intr.cy) / intr.fy * zc,
        zc,
    ])
    if (normals @ center).min() < config.vehicle_radius:
        return None
    return Pyramid(
        u_lo=u_lo, u_hi=u_hi, v_lo=v_lo, v_hi=v_hi,
        base_depth=base_depth, radius=config.vehicle_radius,
        pose_wc=depth.pose_wc, normals=normals, seed=(su, sv),
    )


def segment_inside_pyramid(
    traj: QuinticTrajectory, t_interval: Tuple[float, float], pyramid: Pyramid
) -> Tuple[bool, Optional[float]]:
    """Whether s(t) stays inside the shrunk pyramid on the interval.

    When it does not, the second element is the earliest exit time, resolved
    to 1e-6 s by Bernstein subdivision.
    """
    t0, t1 = float(t_interval[0]), float(t_interval[1])
    if not (0.0 <= t0 <= t1 <= traj.duration + 1e-9):
        raise ValueError("interval must lie within the trajectory domain")
    coeffs_cam = trajectory_camera_coefficients(traj, pyramid.pose_cw)
    polys = pyramid.margin_polynomials(coeffs_cam)
    bern = _bernstein_on_interval(polys, t0, t1)
    hit = _first_violation(bern, t0, t1, _EXIT_TOL)
    if hit is None:
        return True, None
    return False, hit


# ---------------------------------------------------------------------------
# Near-field ball and whole-trajectory coverage.

_RAY_NORM_CACHE: Dict[tuple, np.ndarray] = {}


def _ray_norms(intr) -> np.ndarray:
    key = (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
    if key not in _RAY_NORM_CACHE:
        u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
        v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
        _RAY_NORM_CACHE[key] = np.sqrt(u[None, :] ** 2 + v[:, None] ** 2 + 1.0)
    return _RAY_NORM_CACHE[key]


def near_field_radius(depth: DepthImage, config: CollisionConfig) -> float:
    """Radius of the provably free ball around the capture position.

    Every depth return lies at least min-return-distance away and unseen
    space starts at l, so the ball of radius min(nearest, l) - r keeps the
    vehicle sphere clear of both.
    """
    valid = np.isfinite(depth.depths)
    if valid.any():
        norms = _ray_norms(depth.intrinsics)
        nearest = float(np.min(np.where(valid, depth.depths, np.inf) * norms))
    else:
        nearest = np.inf
    return max(min(nearest, config.unseen_margin) - config.vehicle_radius, 0.0)


def _ball_polynomial(traj: QuinticTrajectory, center: np.ndarray, radius: float) -> np.ndarray:
    """g(t) = radius^2 - |s(t) - center|^2 as monomial coefficients (11, 1)."""
    coeffs = traj.position_coefficients().copy()
    coeffs[0] -= center
    g = np.zeros(11)
    for axis in range(3):
        g -= np.convolve(coeffs[:, axis], coeffs[:, axis])
    g[0] += radius**2
    return g[:, None]


class PyramidStore:
    """Per-replan-cycle pyramid cache shared across candidate checks.

    Inflation results are memoized by seed pixel, and all stored pyramids
    are consulted for coverage, so later candidates reuse earlier work.
    The store must only be used with one depth image per cycle.
    """

    def __init__(self):
        self.pyramids: List[Pyramid] = []
        self._by_seed: Dict[tuple, Optional[Pyramid]] = {}
        self._near_field: Optional[float] = None
        self._tables: Optional[RangeMinTables] = None
        self._pixel_tree = None
        self._pixel_uv: Optional[np.ndarray] = None

    def near_field(self, depth: DepthImage, config: CollisionConfig) -> float:
        if self._near_field is None:
            self._near_field = near_field_radius(depth, config)
        return self._near_field

    def tables(self, depth: DepthImage) -> RangeMinTables:
        if self._tables is None:
            self._tables = RangeMinTables(depth.depths)
        return self._tables

    def get_or_inflate(
        self,
        depth: DepthImage,
        seed: Tuple[int, int],
        config: CollisionConfig,
        required_depth: Optional[float] = None,
    ) -> Optional[Pyramid]:
        # Quantizing the required depth upward keeps the memo key space small
        # without losing the containment guarantee of the exact threshold.
        if required_depth is not None:
            required_depth = min(
                np.ceil((required_depth + 1e-9) / _DEPTH_QUANTUM) * _DEPTH_QUANTUM,
                config.unseen_margin - config.vehicle_radius,
            )
        key = (int(seed[0]), int(seed[1]), required_depth)
        if key not in self._by_seed:
            pyr = inflate_pyramid(depth, key[:2], config, self.tables(depth), required_depth)
            self._by_seed[key] = pyr
            if pyr is not None:
                self.pyramids.append(pyr)
        return self._by_seed[key]

    def nearest_valid(self, depth: DepthImage, p_world: np.ndarray) -> Tuple[int, int]:
        """KD-tree-accelerated variant of `nearest_pixel` (same metric)."""
        from percplan.camera import BehindCameraError

        if self._pixel_tree is None:
            vv, uu = np.nonzero(np.isfinite(depth.depths))
            if vv.size == 0:
                raise NoFreeSpaceError("depth image has no valid pixels")
            from scipy.spatial import cKDTree

            self._pixel_uv = np.stack([uu, vv], axis=-1)
            self._pixel_tree = cKDTree(self._pixel_uv + 0.5)
        p_cam = depth.pose_cw.apply(np.asarray(p_world, dtype=float))
        if p_cam[2] <= 0.0:
            raise BehindCameraError("query point is behind the capture pose")
        intr = depth.intrinsics
        u = min(max(intr.fx * p_cam[0] / p_cam[2] + intr.cx, 0.0), float(intr.width))
        v = min(max(intr.fy * p_cam[1] / p_cam[2] + intr.cy, 0.0), float(intr.height))
        idx = int(self._pixel_tree.query([u, v])[1])
        return int(self._pixel_uv[idx, 0]), int(self._pixel_uv[idx, 1])


_DIR_CACHE: Dict[tuple, Tuple[np.ndarray, np.ndarray]] = {}


def _pixel_dirs(intr) -> Tuple[np.ndarray, np.ndarray]:
    key = (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
    if key not in _DIR_CACHE:
        _DIR_CACHE[key] = (
            (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx,
            (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy,
        )
    return _DIR_CACHE[key]


_WINDOW_CAP = 48  # px half-size of the clearance pre-check window


def _end_window_blocked(depth: DepthImage, end_cam, ui, vi, radius) -> bool:
    """Sound fast reject: a depth return within `radius` of the end point.

    Any covering region guarantees clearance >= radius from every return, so
    finding one closer disproves coverage.  The window is capped, keeping the
    check partial (False never proves clearance).
    """
    intr = depth.intrinsics
    z = end_cam[2]
    if z - radius <= 0.05:
        return False
    half = int(np.ceil(1.9 * max(intr.fx, intr.fy) * radius / (z - radius))) + 2
    half = min(half, _WINDOW_CAP)
    u0, u1 = max(ui - half, 0), min(ui + half + 1, intr.width)
    v0, v1 = max(vi - half, 0), min(vi + half + 1, intr.height)
    win = depth.depths[v0:v1, u0:u1]
    ux, vy = _pixel_dirs(intr)
    x = ux[u0:u1][None, :] * win
    y = vy[v0:v1][:, None] * win
    d2 = (x - end_cam[0]) ** 2 + (y - end_cam[1]) ** 2 + (win - z) ** 2
    d2 = np.where(np.isfinite(win), d2, np.inf)
    return bool(d2.min() < radius * radius)


def _seed_for(
    depth: DepthImage, store: PyramidStore, p_world, p_cam
) -> Optional[Tuple[int, int]]:
    """Seed pixel for a query point: its own pixel when valid, else nearest."""
    from percplan.camera import BehindCameraError

    intr = depth.intrinsics
    if p_cam[2] > 1e-9:
        u = intr.fx * p_cam[0] / p_cam[2] + intr.cx
        v = intr.fy * p_cam[1] / p_cam[2] + intr.cy
        if 0.0 <= u <= intr.width and 0.0 <= v <= intr.height:
            ui = min(int(u), intr.width - 1)
            vi = min(int(v), intr.height - 1)
            if np.isfinite(depth.depths[vi, ui]):
                return ui, vi
    try:
        return store.nearest_valid(depth, p_world)
    except (BehindCameraError, NoFreeSpaceError):
        return None


def collision_free(
    traj: QuinticTrajectory,
    depth: DepthImage,
    store: PyramidStore,
    config: CollisionConfig,
) -> Tuple[bool, int]:
    """Whether the whole trajectory is covered by the free-space regions.

    The verdict is a pure function of the trajectory and the depth image:
    coverage consults only the pyramids reachable from this trajectory's own
    seed queries (end anchor first, then uncovered frontier points), and
    inflation is memoized in the store so other candidates reuse the work.
    Conservative rejections are allowed; acceptances keep the vehicle sphere
    inside known free space.
    """
    duration = traj.duration
    pose_cw = depth.pose_cw
    coeffs_cam = trajectory_camera_coefficients(traj, pose_cw)
    cam_origin = depth.pose_wc.translation
    rho = store.near_field(depth, config)
    radius = config.vehicle_radius
    intr = depth.intrinsics

    # The end state must itself be coverable: any pyramid containing it keeps
    # a margin r below the depth return at the end's own pixel (the pyramid
    # base never exceeds that return), so ends in occluded or near-surface
    # space are rejected outright unless the near-field ball holds them.
    end_world = traj.position(duration)
    end_cam = pose_cw.apply(end_world)
    end_in_ball = rho > 0.0 and float(np.linalg.norm(end_world - cam_origin)) <= rho + _MARGIN
    if not end_in_ball:
        if end_cam[2] <= _MARGIN:
            return False, 0
        if end_cam[2] > config.unseen_margin - radius:
            return False, 0
        u = intr.fx * end_cam[0] / end_cam[2] + intr.cx
        v = intr.fy * end_cam[1] / end_cam[2] + intr.cy
        if not (0.0 <= u <= intr.width and 0.0 <= v <= intr.height):
            return False, 0
        # Containment in any pyramid needs at least r of margin to the image
        # border planes, since every pyramid face lies at or inside them.
        border = _lateral_normals(intr, 0.0, float(intr.width), 0.0, float(intr.height))
        if float((border @ end_cam).min()) < radius:
            return False, 0
        ui = min(int(u), intr.width - 1)
        vi = min(int(v), intr.height - 1)
        d_pix = float(depth.depths[vi, ui])
        if not np.isfinite(d_pix) or end_cam[2] > d_pix - radius:
            return False, 0
        if _end_window_blocked(depth, end_cam, ui, vi, radius):
            return False, 0

    # Anchor the chain at the trajectory end position.
    chain: List[Pyramid] = []
    if end_cam[2] > 1e-9:
        seed = _seed_for(depth, store, end_world, end_cam)
        if seed is not None:
            anchor = store.get_or_inflate(depth, seed, config, required_depth=end_cam[2])
            if anchor is not None:
                chain.append(anchor)

    start_in_ball = (
        rho > 0.0
        and float(np.linalg.norm(traj.position(0.0) - cam_origin)) <= rho + _MARGIN
    )

    # Fast accept: the near-field ball hands the trajectory over to the anchor
    # pyramid, which certifiably covers the remainder.  Probes walk forward; a
    # failed ball prefix cannot succeed for any later handover point.
    if chain and start_in_ball:
        polys = chain[0].margin_polynomials(coeffs_cam)
        ball_poly = _ball_polynomial(traj, cam_origin, rho)
        for frac in (0.0, 0.125, 0.25, 0.375, 0.5):
            t_star = frac * duration
            if not _provably_positive(_bernstein_on_interval(polys, t_star, duration)):
                continue
            if frac == 0.0 or _provably_positive(
                _bernstein_on_interval(ball_poly, 0.0, t_star)
            ):
                return True, 1
            break

    ball_poly_cache: List[Optional[np.ndarray]] = [None]

    def ball_exit(t: float) -> Optional[float]:
        if ball_poly_cache[0] is None:
            ball_poly_cache[0] = _ball_polynomial(traj, cam_origin, rho)
        bern = _bernstein_on_interval(ball_poly_cache[0], t, duration)
        return _first_violation(bern, t, duration, _ADVANCE_TOL)

    used: List[Pyramid] = []

    def mark_used(pyr: Pyramid) -> None:
        if pyr not in used:
            used.append(pyr)

    t = 0.0
    for _ in range(_MAX_COVER_STEPS):
        if t >= duration - _EXIT_TOL:
            return True, len(used)
        p = traj.position(t)
        p_cam = pose_cw.apply(p)
        best_exit = t
        best_region: Optional[Pyramid] = None
        if rho > 0.0 and float(np.linalg.norm(p - cam_origin)) <= rho + _MARGIN:
            exit_t = ball_exit(t)
            if exit_t is None:
                return True, len(used)
            if exit_t > best_exit:
                best_exit = exit_t
                best_region = None
        for pyr in chain:
            if not pyr.contains_cam(p_cam):
                continue
            exit_t = _first_violation(
                _bernstein_on_interval(pyr.margin_polynomials(coeffs_cam), t, duration),
                t, duration, _ADVANCE_TOL,
            )
            if exit_t is None:
                mark_used(pyr)
                return True, len(used)
            if exit_t > best_exit:
                best_exit = exit_t
                best_region = pyr
        if best_exit > t + 1e-9:
            if best_region is not None:
                mark_used(best_region)
            t = best_exit
            continue
        # Frontier uncovered: inflate a new pyramid at its nearest free pixel.
        if len(used) >= config.max_pyramids:
            return False, len(used)
        seed = _seed_for(depth, store, p, p_cam)
        if seed is None:
            return False, len(used)
        pyr = store.get_or_inflate(
            depth, seed, config,
            required_depth=p_cam[2] if p_cam[2] > 1e-9 else None,
        )
        if pyr is None or not pyr.contains_cam(p_cam) or pyr in chain:
            return False, len(used)
        chain.append(pyr)
    return False, len(used)
