"""Deterministic synthetic driving scenes: flat ground, cuboid vehicles, one forward camera.

World frame: x forward (initial ego heading), y left, z up; the ground is z = 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import (
    SENTINEL,
    BBox2D,
    Box3D,
    CameraIntrinsics,
    DepthMap,
    RigidTransform,
    pose_from_euler,
)

APPEARANCE_CHANNELS = ("mask", "u_norm", "v_norm", "shading")

# RNG stream tags, combined with the sequence seed and frame index.
_STREAM_EGO, _STREAM_VEHICLES, _STREAM_NOISE, _STREAM_STRUCTURED, _STREAM_PITCH = 1, 2, 3, 4, 5


@dataclass
class SimConfig:
    n_frames: int = 20
    n_vehicles: int = 8
    width: int = 384
    height: int = 128
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 192.0
    cy: float = 64.0
    camera_height: float = 1.6
    dt: float = 0.1
    max_range: float = 100.0
    # ego: piecewise-constant (target speed, curvature) segments, bounded acceleration
    ego_speed_range: tuple[float, float] = (3.0, 15.0)
    ego_curvature_max: float = 0.01
    ego_segment_frames: int = 10
    ego_max_accel: float = 2.0
    pitch_jitter: float = 0.0  # stationary body pitch std (rad)
    pitch_correlation_time: float = 1.0  # AR(1) time constant of body pitch (s)
    # vehicles
    spawn_x_range: tuple[float, float] = (15.0, 55.0)
    spawn_y_range: tuple[float, float] = (-12.0, 12.0)
    spawn_fov_fraction: float = 0.9
    ego_lane_half_width: float = 2.0
    min_separation: float = 6.0
    static_fraction: float = 0.5
    vehicle_speed_range: tuple[float, float] = (0.0, 4.0)
    static_yaw_std: float = 0.4
    moving_yaw_std: float = 0.05
    speed_noise: float = 0.05
    yaw_rate_noise: float = 0.005
    size_mean: tuple[float, float, float] = (4.5, 1.9, 1.6)
    size_spread: float = 0.1
    # depth corruption
    depth_noise: float = 0.08
    structured_noise: float = 0.0
    structured_cells: tuple[int, int] = (6, 2)
    visibility_threshold: float = 0.25

    def validate(self) -> None:
        problems = []

        def need(ok, name, msg):
            if not ok:
                problems.append(f"{name}: {msg} (got {getattr(self, name)!r})")

        need(self.n_frames >= 1, "n_frames", "must be >= 1")
        need(self.n_vehicles >= 0, "n_vehicles", "must be >= 0")
        need(self.width >= 1 and self.height >= 1, "width", "image must be at least 1x1")
        need(self.fx > 0, "fx", "must be > 0")
        need(self.fy > 0, "fy", "must be > 0")
        need(0 <= self.cx < self.width, "cx", "must lie inside the image")
        need(0 <= self.cy < self.height, "cy", "must lie inside the image")
        need(self.camera_height > 0, "camera_height", "must be > 0")
        need(self.dt > 0, "dt", "must be > 0")
        need(self.max_range > 0, "max_range", "must be > 0")
        need(0 <= self.ego_speed_range[0] <= self.ego_speed_range[1], "ego_speed_range", "must be 0 <= lo <= hi")
        need(self.ego_curvature_max >= 0, "ego_curvature_max", "must be >= 0")
        need(self.ego_segment_frames >= 1, "ego_segment_frames", "must be >= 1")
        need(self.ego_max_accel > 0, "ego_max_accel", "must be > 0")
        need(self.pitch_jitter >= 0, "pitch_jitter", "must be >= 0")
        need(self.pitch_correlation_time > 0, "pitch_correlation_time", "must be > 0")
        need(self.spawn_x_range[0] < self.spawn_x_range[1], "spawn_x_range", "must be lo < hi")
        need(self.spawn_y_range[0] < self.spawn_y_range[1], "spawn_y_range", "must be lo < hi")
        need(0 < self.spawn_fov_fraction <= 1, "spawn_fov_fraction", "must be in (0, 1]")
        need(0 <= self.static_fraction <= 1, "static_fraction", "must be in [0, 1]")
        need(0 <= self.vehicle_speed_range[0] <= self.vehicle_speed_range[1], "vehicle_speed_range", "must be 0 <= lo <= hi")
        need(all(s > 0 for s in self.size_mean), "size_mean", "components must be > 0")
        need(0 <= self.size_spread < 1, "size_spread", "must be in [0, 1)")
        need(self.depth_noise >= 0, "depth_noise", "must be >= 0")
        need(self.structured_noise >= 0, "structured_noise", "must be >= 0")
        need(all(c >= 1 for c in self.structured_cells), "structured_cells", "must be >= 1")
        need(0 <= self.visibility_threshold <= 1, "visibility_threshold", "must be in [0, 1]")
        for name in ("static_yaw_std", "moving_yaw_std", "speed_noise", "yaw_rate_noise", "min_separation"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        if problems:
            raise ValueError("invalid SimConfig: " + "; ".join(problems))

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown SimConfig fields: {sorted(unknown)}")
        kwargs = {}
        for k, v in data.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass(frozen=True)
class ObjectState:
    id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not all(s > 0 for s in self.size):
            raise ValueError(f"object {self.id}: size components must be > 0, got {self.size}")

    def corners(self) -> np.ndarray:
        """(8, 3) world-frame cuboid corners."""
        l, w, h = self.size
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        local = signs * (0.5 * np.array([l, w, h]))
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rot.T + np.asarray(self.center)


@dataclass
class ObjectLabel:
    id: int
    bbox2d: BBox2D
    gt_depth: float
    box3d: Box3D
    visibility: float


@dataclass
class FrameObservation:
    frame_index: int
    ego_pose: RigidTransform
    depth_clean: DepthMap
    depth_noisy: DepthMap
    appearance: np.ndarray  # (4, H, W) float32, channels APPEARANCE_CHANNELS
    objects: list[ObjectLabel] = field(default_factory=list)

    def label(self, object_id: int) -> ObjectLabel | None:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        return None


@dataclass
class Sequence:
    frames: list[FrameObservation]
    intrinsics: CameraIntrinsics
    seed: int
    config: SimConfig


def camera_pose(x: float, y: float, heading: float, camera_height: float, pitch: float = 0.0) -> RigidTransform:
    """Camera-to-world pose for a forward-looking camera at ground position (x, y).

    Positive ``pitch`` tilts the optical axis up.
    """
    return pose_from_euler((x, y, camera_height), (-math.pi / 2 + pitch, 0.0, heading - math.pi / 2))


def _rng(seed: int, stream: int, frame: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(frame)]))


def _slab_hits(origin_l: np.ndarray, dirs_l: np.ndarray, half: np.ndarray) -> np.ndarray:
    """Entry ray parameter for an axis-aligned box centered at the origin; inf where missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs_l
        t1 = (-half - origin_l) * inv
        t2 = (half - origin_l) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    # rays parallel to a slab: inside -> unconstrained, outside -> miss
    parallel = dirs_l == 0
    inside = np.abs(origin_l) <= half
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _object_region(obj: ObjectState, cam_from_world: RigidTransform, cam: CameraIntrinsics):
    """Pixel rectangle that can contain the object's silhouette, or None if not in view."""
    pts = cam_from_world.apply(obj.corners())
    if np.all(pts[:, 2] <= 0):
        return None
    if np.any(pts[:, 2] <= 1e-3):
        return (0, 0, cam.width, cam.height)
    u = pts[:, 0] * cam.fx / pts[:, 2] + cam.cx
    v = pts[:, 1] * cam.fy / pts[:, 2] + cam.cy
    u0 = max(int(math.floor(u.min())), 0)
    v0 = max(int(math.floor(v.min())), 0)
    u1 = min(int(math.ceil(u.max())) + 1, cam.width)
    v1 = min(int(math.ceil(v.max())) + 1, cam.height)
    if u0 >= u1 or v0 >= v1:
        return None
    return (u0, v0, u1, v1)


def object_hit_depth(ego_pose: RigidTransform, obj: ObjectState, cam: CameraIntrinsics) -> np.ndarray:
    """(H, W) camera-z of the first ray hit on this cuboid alone; inf where the ray misses."""
    out = np.full((cam.height, cam.width), np.inf)
    region = _object_region(obj, ego_pose.inverse(), cam)
    if region is None:
        return out
    u0, v0, u1, v1 = region
    rays = cam.pixel_rays()[v0:v1, u0:u1]
    dirs_w = rays @ ego_pose.rotation.T
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    rot_ow = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    origin_l = rot_ow.T @ (ego_pose.translation - np.asarray(obj.center))
    dirs_l = dirs_w @ rot_ow
    # ray direction has unit camera-z, so the ray parameter is the camera depth
    out[v0:v1, u0:u1] = _slab_hits(origin_l, dirs_l, 0.5 * np.asarray(obj.size))
    return out


def ground_depth(ego_pose: RigidTransform, cam: CameraIntrinsics, max_range: float = np.inf) -> np.ndarray:
    dirs_w = cam.pixel_rays() @ ego_pose.rotation.T
    oz = ego_pose.translation[2]
    dz = dirs_w[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -oz / dz
    ok = (dz < 0) & (t > 0) & (t <= max_range)
    return np.where(ok, t, np.inf)


def raycast(ego_pose, objects, cam, max_range=np.inf, return_hits=False):
    """Z-buffer over ground and cuboids.

    Returns (depth with inf for misses, owner index map) and, with ``return_hits``, the list
    of per-object unoccluded hit-depth maps.
    """
    best = ground_depth(ego_pose, cam, max_range)
    owner = np.full(best.shape, -1, dtype=np.int64)
    hits = []
    for k, obj in enumerate(objects):
        t = object_hit_depth(ego_pose, obj, cam)
        hits.append(t)
        closer = (t < best) & (t <= max_range)
        best = np.where(closer, t, best)
        owner = np.where(closer, k, owner)
    if return_hits:
        return best, owner, hits
    return best, owner


def render_depth(ego_pose: RigidTransform, objects, cam: CameraIntrinsics, max_range: float = np.inf) -> DepthMap:
    best, _ = raycast(ego_pose, objects, cam, max_range)
    return DepthMap(np.where(np.isfinite(best), best, SENTINEL))


def corrupt_depth(depth: DepthMap, target_mean_rel_error: float, seed: int) -> DepthMap:
    """Multiplicative i.i.d. Gaussian noise with E|eps| equal to the target relative error."""
    if target_mean_rel_error < 0:
        raise ValueError("target_mean_rel_error must be >= 0")
    if target_mean_rel_error == 0:
        return DepthMap(depth.values.copy())
    sigma = target_mean_rel_error * math.sqrt(math.pi / 2)
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, sigma, size=depth.values.shape)
    valid = depth.valid_mask()
    noisy = depth.values * np.maximum(1.0 + eps, 1e-3)
    return DepthMap(np.where(valid, noisy, SENTINEL))


def structured_depth_error(depth: DepthMap, rel_std: float, cells: tuple[int, int], seed: int) -> DepthMap:
    """Low-frequency multiplicative error: a coarse Gaussian grid, bilinearly upsampled.

    Models the object-scale bias of monocular depth estimators that i.i.d. pixel noise misses.
    """
    if rel_std < 0:
        raise ValueError("rel_std must be >= 0")
    if rel_std == 0:
        return DepthMap(depth.values.copy())
    h, w = depth.values.shape
    cw, ch = cells
    rng = np.random.default_rng(seed)
    nodes = rng.normal(0.0, rel_std, size=(ch + 1, cw + 1))
    gy = np.linspace(0, ch, h)
    gx = np.linspace(0, cw, w)
    iy = np.minimum(gy.astype(int), ch - 1)
    ix = np.minimum(gx.astype(int), cw - 1)
    fy = (gy - iy)[:, None]
    fx = (gx - ix)[None, :]
    n00 = nodes[iy][:, ix]
    n01 = nodes[iy][:, ix + 1]
    n10 = nodes[iy + 1][:, ix]
    n11 = nodes[iy + 1][:, ix + 1]
    field_ = (1 - fy) * ((1 - fx) * n00 + fx * n01) + fy * ((1 - fx) * n10 + fx * n11)
    valid = depth.valid_mask()
    noisy = depth.values * np.maximum(1.0 + field_, 0.05)
    return DepthMap(np.where(valid, noisy, SENTINEL))


def instance_shade(object_id: int) -> float:
    """Per-object constant in [0.25, 1), seeded by a fixed integer hash of the id."""
    h = (int(object_id) * 2654435761 + 0x9E3779B9) & 0xFFFFFFFF
    h ^= h >> 16
    h = (h * 0x45D9F3B) & 0xFFFFFFFF
    h ^= h >> 16
    return 0.25 + 0.75 * (h / 2**32)


def appearance_from_owner(owner: np.ndarray, objects, cam: CameraIntrinsics) -> np.ndarray:
    h, w = owner.shape
    chans = np.zeros((4, h, w), dtype=np.float32)
    covered = owner >= 0
    chans[0] = covered
    chans[1] = (np.arange(w, dtype=np.float64) / cam.width)[None, :]
    chans[2] = (np.arange(h, dtype=np.float64) / cam.height)[:, None]
    shades = np.array([instance_shade(o.id) for o in objects] + [0.0])
    chans[3] = np.where(covered, shades[owner], 0.0)
    return chans


def render_appearance(ego_pose: RigidTransform, objects, cam: CameraIntrinsics, max_range: float = np.inf) -> np.ndarray:
    """(4, H, W) float32 channels: silhouette mask, u/width, v/height, instance shading."""
    _, owner = raycast(ego_pose, objects, cam, max_range)
    return appearance_from_owner(owner, objects, cam)


def world_to_camera_box(obj: ObjectState, ego_pose: RigidTransform) -> Box3D:
    inv = ego_pose.inverse()
    center = inv.apply(np.asarray(obj.center))[0]
    heading = inv.rotation @ np.array([math.cos(obj.yaw), math.sin(obj.yaw), 0.0])
    # camera-frame yaw: length axis = (cos ry, 0, -sin ry)
    ry = math.atan2(-heading[2], heading[0])
    return Box3D(center, tuple(obj.size), ry)


def camera_to_world_state(box: Box3D, ego_pose: RigidTransform) -> tuple[np.ndarray, float]:
    """World-frame center and heading of a camera-frame box."""
    center = ego_pose.apply(box.center)[0]
    axis_c = np.array([math.cos(box.yaw), 0.0, -math.sin(box.yaw)])
    axis_w = ego_pose.rotation @ axis_c
    return center, math.atan2(axis_w[1], axis_w[0])


def _hull_area(points_uv: np.ndarray) -> float:
    try:
        return float(ConvexHull(points_uv).volume)
    except QhullError:
        return 0.0


def label_objects(ego_pose, objects, cam, depth_clean: DepthMap, visibility_threshold: float = 0.25, hits=None):
    """Per-object GT records from the clean render; poorly visible objects are omitted.

    A pixel is visible for an object when the object's own ray hit is the depth stored in
    ``depth_clean`` (relative tolerance covers float32 storage). ``hits`` may carry the
    per-object hit maps already computed by :func:`raycast`.
    """
    labels = []
    cam_from_world = ego_pose.inverse()
    stored = depth_clean.values
    for k, obj in enumerate(objects):
        corners = cam_from_world.apply(obj.corners())
        if np.any(corners[:, 2] <= 0.1):
            continue
        t = object_hit_depth(ego_pose, obj, cam) if hits is None else hits[k]
        visible = np.isfinite(t) & (np.abs(stored - t) <= 1e-6 * np.where(np.isfinite(t), t, 1.0))
        n_visible = int(visible.sum())
        if n_visible == 0:
            continue
        uv = np.stack(
            [corners[:, 0] * cam.fx / corners[:, 2] + cam.cx, corners[:, 1] * cam.fy / corners[:, 2] + cam.cy],
            axis=1,
        )
        area = _hull_area(uv)
        visibility = min(1.0, n_visible / area) if area > 0 else 1.0
        if visibility < visibility_threshold:
            continue
        vv, uu = np.nonzero(visible)
        bbox = BBox2D(float(uu.min()), float(vv.min()), float(uu.max() + 1), float(vv.max() + 1))
        box3d = world_to_camera_box(obj, ego_pose)
        labels.append(ObjectLabel(obj.id, bbox, float(box3d.center[2]), box3d, visibility))
    return labels


def _ego_trajectory(cfg: SimConfig, seed: int) -> list[tuple[float, float, float, float]]:
    rng = _rng(seed, _STREAM_EGO)
    lo, hi = cfg.ego_speed_range
    x = y = heading = 0.0
    speed = float(rng.uniform(lo, hi))
    target, kappa = speed, float(rng.uniform(-cfg.ego_curvature_max, cfg.ego_curvature_max))
    # body pitch: stationary AR(1), so consecutive frames share most of their pitch
    rho = math.exp(-cfg.dt / cfg.pitch_correlation_time)
    pitch_rng = _rng(seed, _STREAM_PITCH)
    pitch = float(pitch_rng.normal(0.0, cfg.pitch_jitter))
    states = []
    for f in range(cfg.n_frames):
        if f > 0 and f % cfg.ego_segment_frames == 0:
            target = float(rng.uniform(lo, hi))
            kappa = float(rng.uniform(-cfg.ego_curvature_max, cfg.ego_curvature_max))
        if f > 0:
            pitch = rho * pitch + math.sqrt(1 - rho**2) * float(pitch_rng.normal(0.0, cfg.pitch_jitter))
        states.append((x, y, heading, pitch))
        dv = float(np.clip(target - speed, -cfg.ego_max_accel * cfg.dt, cfg.ego_max_accel * cfg.dt))
        speed = max(0.0, speed + dv)
        heading += speed * kappa * cfg.dt
        x += speed * math.cos(heading) * cfg.dt
        y += speed * math.sin(heading) * cfg.dt
    return states


def _spawn_vehicles(cfg: SimConfig, seed: int) -> list[dict]:
    rng = _rng(seed, _STREAM_VEHICLES)
    vehicles: list[dict] = []
    attempts = 0
    while len(vehicles) < cfg.n_vehicles and attempts < 200 * max(cfg.n_vehicles, 1):
        attempts += 1
        # spawn inside the initial horizontal field of view
        px = float(rng.uniform(*cfg.spawn_x_range))
        half_fov = cfg.spawn_fov_fraction * min(cfg.cx, cfg.width - cfg.cx) / cfg.fx
        py = float(rng.uniform(-half_fov, half_fov)) * px
        if abs(py) < cfg.ego_lane_half_width or not cfg.spawn_y_range[0] <= py <= cfg.spawn_y_range[1]:
            continue
        if any(math.hypot(px - v["x"], py - v["y"]) < cfg.min_separation for v in vehicles):
            continue
        size = tuple(float(m * (1 + rng.uniform(-cfg.size_spread, cfg.size_spread))) for m in cfg.size_mean)
        static = bool(rng.uniform() < cfg.static_fraction)
        lane_dir = 0.0 if rng.uniform() < 0.5 else math.pi
        if static:
            yaw = lane_dir + float(rng.normal(0.0, cfg.static_yaw_std))
            speed = 0.0
        else:
            yaw = lane_dir + float(rng.normal(0.0, cfg.moving_yaw_std))
            speed = float(rng.uniform(*cfg.vehicle_speed_range))
        vehicles.append(dict(id=len(vehicles), x=px, y=py, yaw=yaw, speed=speed, size=size, static=static))
    return vehicles


def _vehicle_states(cfg: SimConfig, seed: int) -> list[list[ObjectState]]:
    """Per-frame object states: constant velocity plus small seeded perturbation."""
    spawned = _spawn_vehicles(cfg, seed)
    rng = _rng(seed, _STREAM_VEHICLES, 1)
    per_frame = []
    for _ in range(cfg.n_frames):
        frame = []
        for v in spawned:
            h = v["size"][2]
            vel = (v["speed"] * math.cos(v["yaw"]), v["speed"] * math.sin(v["yaw"]))
            frame.append(ObjectState(v["id"], (v["x"], v["y"], 0.5 * h), v["size"], v["yaw"], vel))
        per_frame.append(frame)
        for v in spawned:
            if v["static"]:
                continue
            v["x"] += v["speed"] * math.cos(v["yaw"]) * cfg.dt
            v["y"] += v["speed"] * math.sin(v["yaw"]) * cfg.dt
            v["yaw"] += float(rng.normal(0.0, cfg.yaw_rate_noise))
            v["speed"] = max(0.0, v["speed"] + float(rng.normal(0.0, cfg.speed_noise)))
    return per_frame


def _as_float32(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32).astype(np.float64)


def simulate_frame(cfg: SimConfig, seed: int, frame_index: int, ego_pose, objects) -> FrameObservation:
    cam = cfg.intrinsics()
    best, owner, hits = raycast(ego_pose, objects, cam, cfg.max_range, return_hits=True)
    clean = DepthMap(_as_float32(np.where(np.isfinite(best), best, SENTINEL)))
    noise_seed = int(_rng(seed, _STREAM_NOISE, frame_index).integers(2**63))
    noisy = corrupt_depth(clean, cfg.depth_noise, noise_seed)
    if cfg.structured_noise > 0:
        s_seed = int(_rng(seed, _STREAM_STRUCTURED, frame_index).integers(2**63))
        noisy = structured_depth_error(noisy, cfg.structured_noise, cfg.structured_cells, s_seed)
    noisy = DepthMap(_as_float32(noisy.values))
    appearance = appearance_from_owner(owner, objects, cam)
    labels = label_objects(ego_pose, objects, cam, clean, cfg.visibility_threshold, hits)
    return FrameObservation(frame_index, ego_pose, clean, noisy, appearance, labels)


def generate_sequence(config: SimConfig, seed: int) -> Sequence:
    config.validate()
    ego = _ego_trajectory(config, seed)
    states = _vehicle_states(config, seed)
    frames = []
    for f in range(config.n_frames):
        x, y, heading, pitch = ego[f]
        pose = camera_pose(x, y, heading, config.camera_height, pitch)
        frames.append(simulate_frame(config, seed, f, pose, states[f]))
    return Sequence(frames, config.intrinsics(), int(seed), config)


def vehicle_states(config: SimConfig, seed: int) -> list[list[ObjectState]]:
    """World-frame object states per frame, as used by ``generate_sequence``."""
    config.validate()
    return _vehicle_states(config, seed)
