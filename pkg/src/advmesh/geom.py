"""Core geometric types and operations.

World frame is the LiDAR frame (x forward, y left, z up).  The camera frame
is only reached through a :class:`Calibration`.  Rotated-box IoU uses
Sutherland-Hodgman polygon clipping with shoelace areas, so results are exact
up to floating point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_COLLINEAR_EPS = 1e-12


class NonPositiveDepth(ValueError):
    """Raised when projecting a point that lies behind the camera."""


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi], with the tie at -pi mapped to +pi."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a = math.pi
    return a


# ---------------------------------------------------------------------------
# homogeneous transforms


def mat4_identity() -> np.ndarray:
    return np.eye(4, dtype=np.float64)


def mat4_translate(t) -> np.ndarray:
    m = np.eye(4, dtype=np.float64)
    m[:3, 3] = np.asarray(t, dtype=np.float64)
    return m


def mat4_rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    m = np.eye(4, dtype=np.float64)
    m[0, 0], m[0, 1] = c, -s
    m[1, 0], m[1, 1] = s, c
    return m


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Composition a∘b: the returned transform applies b first, then a."""
    return np.asarray(a, dtype=np.float64) @ np.asarray(b, dtype=np.float64)


def apply_mat4(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a homogeneous transform to one point (3,) or a batch (N, 3)."""
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    p = np.atleast_2d(pts)
    out = p @ m[:3, :3].T + m[:3, 3]
    return out[0] if single else out


def is_rigid(m: np.ndarray, tol: float = 1e-9) -> bool:
    r = m[:3, :3]
    return (
        np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=tol)
        and np.allclose(r @ r.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) < 1e-6
    )


# ---------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (m), dims (length, width, height), yaw (rad).

    Length runs along the box's heading direction; yaw is measured about +z
    from the world +x axis and stored normalized to (-pi, pi].
    """

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if min(self.dims) <= 0.0:
            raise ValueError(f"box dims must be positive, got {self.dims}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def bottom(self) -> float:
        return self.center[2] - self.dims[2] / 2.0

    @property
    def top(self) -> float:
        return self.center[2] + self.dims[2] / 2.0

    def bev_corners(self) -> np.ndarray:
        """Footprint corners (4, 2) in counter-clockwise order."""
        l, w, _ = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center[:2])

    def corners_3d(self) -> np.ndarray:
        """All eight corners, (8, 3): bottom face first, then top face."""
        bev = self.bev_corners()
        zs = np.array([self.bottom] * 4 + [self.top] * 4)
        return np.column_stack([np.vstack([bev, bev]), zs])

    def transformed(self, m: np.ndarray) -> "Box3D":
        """Apply a rigid z-rotation + translation transform to the box."""
        center = apply_mat4(m, np.asarray(self.center))
        dyaw = math.atan2(m[1, 0], m[0, 0])
        return Box3D(tuple(center), self.dims, self.yaw + dyaw)


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex CCW `clipper`."""
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a
        input_list, output = output, []
        if not input_list:
            break
        prev = input_list[-1]
        prev_side = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
        for cur in input_list:
            cur_side = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0])
            if cur_side >= -_COLLINEAR_EPS:
                if prev_side < -_COLLINEAR_EPS:
                    output.append(_segment_intersect(prev, cur, a, b))
                output.append(cur)
            elif prev_side >= -_COLLINEAR_EPS:
                output.append(_segment_intersect(prev, cur, a, b))
            prev, prev_side = cur, cur_side
    return np.asarray(output) if output else np.zeros((0, 2))


def _segment_intersect(p, q, a, b) -> np.ndarray:
    d1 = q - p
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < _COLLINEAR_EPS:
        return q
    t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom
    return p + t * d1


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    inter = _clip_polygon(a.bev_corners(), b.bev_corners())
    return _polygon_area(inter)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two rotated box footprints."""
    inter = bev_intersection_area(a, b)
    area_a = a.dims[0] * a.dims[1]
    area_b = b.dims[0] * b.dims[1]
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: footprint intersection times vertical interval overlap."""
    inter_area = bev_intersection_area(a, b)
    zo = min(a.top, b.top) - max(a.bottom, b.bottom)
    inter = inter_area * max(zo, 0.0)
    vol_a = a.dims[0] * a.dims[1] * a.dims[2]
    vol_b = b.dims[0] * b.dims[1] * b.dims[2]
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


# ---------------------------------------------------------------------------
# calibration / projection


@dataclass(frozen=True)
class Calibration:
    """Camera model: 3x4 projection, rigid lidar->camera transform, 3x3 rect."""

    cam_projection: np.ndarray  # (3, 4)
    lidar_to_cam: np.ndarray  # (4, 4)
    rectification: np.ndarray  # (3, 3)

    def __post_init__(self):
        object.__setattr__(
            self, "cam_projection", np.asarray(self.cam_projection, dtype=np.float64)
        )
        object.__setattr__(
            self, "lidar_to_cam", np.asarray(self.lidar_to_cam, dtype=np.float64)
        )
        object.__setattr__(
            self, "rectification", np.asarray(self.rectification, dtype=np.float64)
        )
        if self.cam_projection.shape != (3, 4):
            raise ValueError("cam_projection must be 3x4")
        if self.cam_projection[0, 0] == 0.0 or self.cam_projection[1, 1] == 0.0:
            raise ValueError("cam_projection focal entries must be nonzero")

    def lidar_to_rect(self, pts: np.ndarray) -> np.ndarray:
        """Lidar-frame points (N, 3) -> rectified camera frame (N, 3)."""
        cam = apply_mat4(self.lidar_to_cam, pts)
        single = cam.ndim == 1
        cam = np.atleast_2d(cam) @ self.rectification.T
        return cam[0] if single else cam

    def rect_to_lidar(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        cam = pts @ np.linalg.inv(self.rectification).T
        inv = np.linalg.inv(self.lidar_to_cam)
        out = apply_mat4(inv, cam)
        return out


def project_to_image(p, calib: Calibration):
    """Project lidar-frame point(s) to pixel coordinates.

    Returns ((u, v), depth) for a single point or ((N,2), (N,)) for a batch.
    Raises NonPositiveDepth if any point is at or behind the camera plane.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    rect = np.atleast_2d(calib.lidar_to_rect(p))
    hom = np.column_stack([rect, np.ones(len(rect))])
    uvw = hom @ calib.cam_projection.T
    depth = uvw[:, 2]
    if np.any(depth <= 0.0):
        raise NonPositiveDepth("point behind camera")
    uv = uvw[:, :2] / depth[:, None]
    if single:
        return uv[0], float(depth[0])
    return uv, depth


def project_to_image_safe(pts: np.ndarray, calib: Calibration):
    """Batch projection that flags non-positive depths instead of raising.

    Returns (uv (N,2), depth (N,), valid (N,) bool).  uv rows for invalid
    points are zeroed.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    rect = np.atleast_2d(calib.lidar_to_rect(pts))
    hom = np.column_stack([rect, np.ones(len(rect))])
    uvw = hom @ calib.cam_projection.T
    depth = uvw[:, 2]
    valid = depth > 1e-9
    uv = np.zeros((len(pts), 2))
    uv[valid] = uvw[valid, :2] / depth[valid, None]
    return uv, depth, valid
