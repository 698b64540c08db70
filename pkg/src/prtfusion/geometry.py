"""Pinhole camera model, pseudo-LiDAR lifting and rigid ego-motion compensation.

Camera frame convention shared by every module: x right, y down, z forward.
A pixel (u, v) refers to the pixel *center*; integer pixel indices are the
coordinates of their centers, so pixel (c_x, c_y) lies on the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

# Depth value marking "no return" (sky, beyond range).
SENTINEL = 0.0

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image dimensions must be integers")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) ray directions with unit z, one per pixel center (read-only, cached)."""
        return _pixel_rays(self)


@dataclass(frozen=True)
class DepthMap:
    """Dense per-pixel depth (camera z, meters), shape (height, width); 0.0 means no return."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("depth map contains non-finite values")
        if np.any(values < 0):
            raise ValueError("depth map contains negative values")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_flat(cls, values, width: int, height: int) -> "DepthMap":
        flat = np.asarray(values, dtype=np.float64)
        if flat.size != width * height:
            raise ValueError(f"expected {width * height} values, got {flat.size}")
        return cls(flat.reshape(height, width))

    def valid_mask(self) -> np.ndarray:
        return self.values != SENTINEL


@dataclass(frozen=True)
class RigidTransform:
    """4x4 homogeneous camera-to-global transform."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"transform must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transform contains non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError(f"bottom row must be (0, 0, 0, 1), got {m[3]}")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation block is not a proper orthonormal matrix")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "RigidTransform":
        r = self.rotation
        inv = np.eye(4)
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ self.translation
        return RigidTransform(inv)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(_reproject_rigid(self.matrix @ other.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation


@lru_cache(maxsize=8)
def _pixel_rays(cam: CameraIntrinsics) -> np.ndarray:
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    rays = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    rays.setflags(write=False)
    return rays


def _reproject_rigid(m: np.ndarray) -> np.ndarray:
    # products of valid transforms drift by ~1 ulp; snap the bottom row exactly
    out = np.array(m, dtype=np.float64)
    out[3] = (0.0, 0.0, 0.0, 1.0)
    return out


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned pixel box, half-open on pixel centers: [x1, x2) x [y1, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def pixel_bounds(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Integer pixel index range [u0, u1) x [v0, v1) of centers inside the box, clipped."""
        u0 = max(int(np.ceil(self.x1)), 0)
        v0 = max(int(np.ceil(self.y1)), 0)
        u1 = min(int(np.ceil(self.x2)), width)
        v1 = min(int(np.ceil(self.y2)), height)
        return u0, v0, max(u1, u0), max(v1, v0)


@dataclass(frozen=True)
class Box3D:
    """Camera-frame cuboid: center (x, y, z), size (length, width, height), yaw about camera y.

    The length axis points along (cos yaw, 0, -sin yaw); height runs along camera y (vertical).
    """

    center: np.ndarray
    size: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "yaw", float(self.yaw))
        if not all(s > 0 for s in self.size):
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def depth(self) -> float:
        return float(self.center[2])

    def bev_corners(self) -> np.ndarray:
        """(4, 2) footprint corners in the (x, z) plane, counter-clockwise in that plane."""
        l, w, _ = self.size
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        ax_l = np.array([c, -s])
        ax_w = np.array([s, c])
        ctr = self.center[[0, 2]]
        return np.array(
            [
                ctr + 0.5 * l * ax_l + 0.5 * w * ax_w,
                ctr - 0.5 * l * ax_l + 0.5 * w * ax_w,
                ctr - 0.5 * l * ax_l - 0.5 * w * ax_w,
                ctr + 0.5 * l * ax_l - 0.5 * w * ax_w,
            ]
        )

    def y_range(self) -> tuple[float, float]:
        h = self.size[2]
        return (self.center[1] - 0.5 * h, self.center[1] + 0.5 * h)

    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h

    def replace(self, center=None, size=None, yaw=None) -> "Box3D":
        return Box3D(
            self.center if center is None else center,
            self.size if size is None else size,
            self.yaw if yaw is None else yaw,
        )


@dataclass
class PseudoLiDARPatch:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    frame_index: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        if len(self.points) == 0:
            return np.zeros(3)
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class PointCloud:
    """Lifted depth map; ``pixels[i] = (u, v)`` is the source pixel of ``points[i]``."""

    points: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def _check_dims(depth: DepthMap, cam: CameraIntrinsics) -> None:
    if depth.width != cam.width or depth.height != cam.height:
        raise ValueError(
            f"depth map is {depth.width}x{depth.height} but camera expects {cam.width}x{cam.height}"
        )


def lift_depth_map(depth: DepthMap, cam: CameraIntrinsics) -> PointCloud:
    """Back-project every non-sentinel pixel to a camera-frame point."""
    _check_dims(depth, cam)
    v, u = np.nonzero(depth.valid_mask())
    z = depth.values[v, u]
    x = (u - cam.cx) * z / cam.fx
    y = (v - cam.cy) * z / cam.fy
    return PointCloud(np.stack([x, y, z], axis=1), np.stack([u, v], axis=1))


def project_point(point, cam: CameraIntrinsics) -> tuple[float, float, float]:
    x, y, z = (float(c) for c in point)
    if not z > 0:
        raise ValueError(f"point {point} is behind the camera (z={z})")
    return (x * cam.fx / z + cam.cx, y * cam.fy / z + cam.cy, z)


def project_points(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection of (N, 3) points to (N, 3) rows of (u, v, depth)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = points[:, 2]
    if np.any(z <= 0):
        raise ValueError("some points are behind the camera")
    return np.stack(
        [points[:, 0] * cam.fx / z + cam.cx, points[:, 1] * cam.fy / z + cam.cy, z], axis=1
    )


def crop_patch(
    depth: DepthMap, cam: CameraIntrinsics, box: BBox2D, frame_index: int = 0
) -> PseudoLiDARPatch:
    """Pseudo-LiDAR points whose source pixel center lies in the half-open box."""
    _check_dims(depth, cam)
    u0, v0, u1, v1 = box.pixel_bounds(cam.width, cam.height)
    sub = depth.values[v0:v1, u0:u1]
    vv, uu = np.nonzero(sub != SENTINEL)
    z = sub[vv, uu]
    u = uu + u0
    v = vv + v0
    pts = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    return PseudoLiDARPatch(pts, frame_index)


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_from_euler(translation=(0.0, 0.0, 0.0), rotation=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Six-DoF pose: R = Rz(rz) @ Ry(ry) @ Rx(rx) (intrinsic Z-Y-X), then translation."""
    rx, ry, rz = (float(a) for a in rotation)
    m = np.eye(4)
    m[:3, :3] = _rot_z(rz) @ _rot_y(ry) @ _rot_x(rx)
    m[:3, 3] = np.asarray(translation, dtype=np.float64)
    return RigidTransform(m)


def relative_transform(h_t: RigidTransform, h_tmj: RigidTransform) -> RigidTransform:
    """H_t^-1 @ H_{t-j}: maps frame t-j camera coordinates into frame t camera coordinates."""
    return h_t.inverse() @ h_tmj


def compensate_ego_motion(
    patch: PseudoLiDARPatch, h_t: RigidTransform, h_tmj: RigidTransform
) -> PseudoLiDARPatch:
    if not isinstance(h_t, RigidTransform) or not isinstance(h_tmj, RigidTransform):
        raise TypeError("poses must be RigidTransform instances")
    rel = relative_transform(h_t, h_tmj)
    return PseudoLiDARPatch(rel.apply(patch.points), patch.frame_index)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean of both directed mean nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (d_ab.mean() + d_ba.mean())


def pixel_footprint(depth: float, cam: CameraIntrinsics) -> float:
    """Largest lateral extent of one pixel back-projected at ``depth``."""
    return depth / min(cam.fx, cam.fy)
