"""Kalman-filter trackers: SORT-style 2D box tracking and a 3D constant-velocity tracker.

Both trackers run offline over a whole sequence. A track becomes confirmed once it has
``min_hits`` consecutive matches; its earlier tentative entries are then emitted as well.
Unconfirmed tracks die on their first miss, confirmed ones after ``max_age`` misses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox2D

_PSD_TOL = 1e-8


class CovarianceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrackerParams:
    iou_threshold: float = 0.3
    min_hits: int = 2
    max_age: int = 3
    # 2D noise (pixels); area and aspect terms are scaled by box size
    q_pos: float = 1.0
    q_vel: float = 0.25
    r_pos: float = 1.0
    # 3D
    gate_distance: float = 2.5
    q_pos_3d: float = 0.05
    q_vel_3d: float = 0.1
    q_yaw_3d: float = 0.01
    q_size_3d: float = 1e-4
    r_pos_3d: float = 0.25
    r_yaw_3d: float = 0.05
    r_size_3d: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in [0, 1]")
        if self.min_hits < 1 or self.max_age < 0:
            raise ValueError("min_hits must be >= 1 and max_age >= 0")
        if self.gate_distance <= 0:
            raise ValueError("gate_distance must be > 0")


def _symmetrize_checked(p: np.ndarray) -> np.ndarray:
    p = 0.5 * (p + p.T)
    eig_min = float(np.linalg.eigvalsh(p).min())
    if eig_min < -_PSD_TOL:
        raise CovarianceError(f"covariance lost positive semi-definiteness (min eigenvalue {eig_min:.3g})")
    return p


def _kalman_correct(x, p, z, h, r, innovation_fn=None):
    """Joseph-form update. Returns (mean, covariance, innovation, innovation covariance)."""
    y = z - h @ x
    if innovation_fn is not None:
        y = innovation_fn(y)
    s = h @ p @ h.T + r
    k = np.linalg.solve(s.T, (p @ h.T).T).T
    x_new = x + k @ y
    i_kh = np.eye(len(x)) - k @ h
    p_new = i_kh @ p @ i_kh.T + k @ r @ k.T
    return x_new, _symmetrize_checked(p_new), y, s


# --------------------------------------------------------------------------- 2D


def box_to_measurement(box: BBox2D) -> np.ndarray:
    """(u center, v center, area, aspect w/h)."""
    u, v = box.center
    return np.array([u, v, box.area, box.width / box.height])


def measurement_to_box(z: np.ndarray) -> BBox2D:
    s = max(float(z[2]), 1e-6)
    r = max(float(z[3]), 1e-6)
    w = math.sqrt(s * r)
    h = s / w
    return BBox2D(z[0] - w / 2, z[1] - h / 2, z[0] + w / 2, z[1] + h / 2)


@dataclass
class Track2DState:
    mean: np.ndarray  # (u, v, s, r, du, dv, ds)
    covariance: np.ndarray
    id: int = -1
    age: int = 0
    hits: int = 1
    hit_streak: int = 1
    time_since_update: int = 0

    def box(self) -> BBox2D:
        return measurement_to_box(self.mean[:4])


F_2D = np.eye(7)
F_2D[0, 4] = F_2D[1, 5] = F_2D[2, 6] = 1.0
H_2D = np.eye(4, 7)


def _size_scales(mean: np.ndarray) -> tuple[float, float]:
    """Per-pixel sensitivities of area and aspect for the current box size."""
    s = max(float(mean[2]), 1.0)
    r = max(float(mean[3]), 1e-3)
    w = math.sqrt(s * r)
    h = s / w
    return w + h, r * (1.0 / w + 1.0 / h)


def process_noise_2d(mean: np.ndarray, params: TrackerParams) -> np.ndarray:
    ks, kr = _size_scales(mean)
    qp, qv = params.q_pos, params.q_vel
    return np.diag([qp, qp, qp * ks**2, qp * (0.1 * kr) ** 2, qv, qv, qv * ks**2])


def measurement_noise_2d(mean: np.ndarray, params: TrackerParams) -> np.ndarray:
    ks, kr = _size_scales(mean)
    rp = params.r_pos
    return np.diag([rp, rp, rp * ks**2, rp * kr**2])


def init_track_2d(box: BBox2D, params: TrackerParams = TrackerParams(), track_id: int = -1) -> Track2DState:
    z = box_to_measurement(box)
    mean = np.concatenate([z, np.zeros(3)])
    r = measurement_noise_2d(mean, params)
    ks, _ = _size_scales(mean)
    cov = np.zeros((7, 7))
    cov[:4, :4] = 10.0 * r
    cov[4:, 4:] = np.diag([100.0, 100.0, 100.0 * ks**2])
    return Track2DState(mean, cov, id=track_id)


def kalman_predict(state: Track2DState, params: TrackerParams = TrackerParams()) -> Track2DState:
    mean = F_2D @ state.mean
    if mean[2] <= 0:
        # area may not collapse through zero
        mean[6] = 0.0
        mean[2] = max(state.mean[2], 1e-3)
    cov = _symmetrize_checked(F_2D @ state.covariance @ F_2D.T + process_noise_2d(state.mean, params))
    return replace(
        state,
        mean=mean,
        covariance=cov,
        age=state.age + 1,
        time_since_update=state.time_since_update + 1,
        hit_streak=state.hit_streak if state.time_since_update == 0 else 0,
    )


def kalman_update(state: Track2DState, measurement: BBox2D, params: TrackerParams = TrackerParams()) -> Track2DState:
    z = box_to_measurement(measurement)
    mean, cov, _, _ = _kalman_correct(
        state.mean, state.covariance, z, H_2D, measurement_noise_2d(state.mean, params)
    )
    mean[2] = max(mean[2], 1e-6)
    mean[3] = max(mean[3], 1e-6)
    return replace(
        state,
        mean=mean,
        covariance=cov,
        hits=state.hits + 1,
        hit_streak=state.hit_streak + 1,
        time_since_update=0,
    )


def iou_matrix(a: list[BBox2D], b: list[BBox2D]) -> np.ndarray:
    if not a or not b:
        return np.zeros((len(a), len(b)))
    aa = np.array([x.as_array() for x in a])[:, None, :]
    bb = np.array([x.as_array() for x in b])[None, :, :]
    iw = np.clip(np.minimum(aa[..., 2], bb[..., 2]) - np.maximum(aa[..., 0], bb[..., 0]), 0, None)
    ih = np.clip(np.minimum(aa[..., 3], bb[..., 3]) - np.maximum(aa[..., 1], bb[..., 1]), 0, None)
    inter = iw * ih
    area_a = (aa[..., 2] - aa[..., 0]) * (aa[..., 3] - aa[..., 1])
    area_b = (bb[..., 2] - bb[..., 0]) * (bb[..., 3] - bb[..., 1])
    return inter / (area_a + area_b - inter)


@dataclass
class Association:
    matches: list[tuple[int, int]]
    unmatched_tracks: list[int]
    unmatched_detections: list[int]


def _assign(score: np.ndarray, keep: Callable[[float], bool]) -> Association:
    n_t, n_d = score.shape
    matches = []
    if n_t and n_d:
        rows, cols = linear_sum_assignment(score, maximize=True)
        matches = [(int(r), int(c)) for r, c in zip(rows, cols) if keep(score[r, c])]
    mt = {m[0] for m in matches}
    md = {m[1] for m in matches}
    return Association(
        sorted(matches),
        [t for t in range(n_t) if t not in mt],
        [d for d in range(n_d) if d not in md],
    )


def associate(tracks: list[BBox2D], detections: list[BBox2D], iou_threshold: float = 0.3) -> Association:
    """Maximum-total-IoU assignment; pairs below the threshold are left unmatched."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must be in [0, 1]")
    iou = iou_matrix(tracks, detections)
    return _assign(iou, lambda v: v >= iou_threshold and v > 0)


@dataclass
class TrackletEntry:
    frame_index: int
    bbox2d: BBox2D
    payload: Any = None


@dataclass
class Tracklet:
    id: int
    entries: list[TrackletEntry] = field(default_factory=list)

    def frames(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def entry_at(self, frame_index: int) -> TrackletEntry | None:
        for e in self.entries:
            if e.frame_index == frame_index:
                return e
        return None


@dataclass
class _Live:
    state: Any
    entries: list
    confirmed: bool = False
    track_id: int = -1


def _run_tracker(frames, params, init_fn, predict_fn, update_fn, match_fn, record_fn):
    """Shared birth/death bookkeeping. Returns finished tracks in confirmation order."""
    live: list[_Live] = []
    done: list[_Live] = []
    next_id = 0
    for frame_index, dets in frames:
        for t in live:
            t.state = predict_fn(t.state)
        assoc = match_fn([t.state for t in live], dets)
        for ti, di in assoc.matches:
            t = live[ti]
            t.state = update_fn(t.state, dets[di])
            t.entries.append(record_fn(frame_index, dets[di], di, t.state))
        for di in assoc.unmatched_detections:
            state = init_fn(dets[di])
            live.append(_Live(state, [record_fn(frame_index, dets[di], di, state)]))
        survivors = []
        for t in live:
            if not t.confirmed and t.state.hit_streak >= params.min_hits:
                t.confirmed = True
                t.track_id = next_id
                next_id += 1
            if t.state.time_since_update == 0:
                survivors.append(t)
            elif t.confirmed and t.state.time_since_update <= params.max_age:
                survivors.append(t)
            elif t.confirmed:
                done.append(t)
        live = survivors
    done.extend(t for t in live if t.confirmed)
    done.sort(key=lambda t: t.track_id)
    return done


def track_sequence_2d(frames: list[list[BBox2D]], params: TrackerParams = TrackerParams()) -> list[Tracklet]:
    """Link per-frame boxes into tracklets. Entry payloads are detection indices in their frame."""

    def match(states, dets):
        return associate([s.box() for s in states], dets, params.iou_threshold)

    done = _run_tracker(
        list(enumerate(frames)),
        params,
        lambda box: init_track_2d(box, params),
        lambda s: kalman_predict(s, params),
        lambda s, box: kalman_update(s, box, params),
        match,
        lambda f, box, di, s: TrackletEntry(f, box, di),
    )
    return [Tracklet(t.track_id, t.entries) for t in done]


# --------------------------------------------------------------------------- 3D


@dataclass
class Detection3D:
    """World-frame detection: center (x, y, z), yaw about world z, size (l, w, h)."""

    center: np.ndarray
    yaw: float
    size: tuple[float, float, float]
    score: float = 1.0
    payload: Any = None

    def measurement(self) -> np.ndarray:
        return np.array([*self.center, self.yaw, *self.size], dtype=np.float64)


@dataclass
class Track3DState:
    mean: np.ndarray  # (x, y, z, yaw, l, w, h, vx, vy, vz)
    covariance: np.ndarray
    id: int = -1
    age: int = 0
    hits: int = 1
    hit_streak: int = 1
    time_since_update: int = 0

    @property
    def center(self) -> np.ndarray:
        return self.mean[:3]


F_3D = np.eye(10)
F_3D[0, 7] = F_3D[1, 8] = F_3D[2, 9] = 1.0
H_3D = np.eye(7, 10)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def _flip_yaw_innovation(y: np.ndarray) -> np.ndarray:
    # orientation is ambiguous by pi for a symmetric box; use the nearer hypothesis
    y = y.copy()
    d = float(wrap_angle(y[3]))
    if abs(d) > np.pi / 2:
        d = float(wrap_angle(d + np.pi))
    y[3] = d
    return y


def init_track_3d(det: Detection3D, params: TrackerParams = TrackerParams()) -> Track3DState:
    mean = np.concatenate([det.measurement(), np.zeros(3)])
    cov = np.diag(
        [params.r_pos_3d] * 3 + [params.r_yaw_3d] + [params.r_size_3d] * 3 + [10.0, 10.0, 1.0]
    )
    return Track3DState(mean, cov)


def kalman_predict_3d(state: Track3DState, params: TrackerParams = TrackerParams()) -> Track3DState:
    q = np.diag(
        [params.q_pos_3d] * 3 + [params.q_yaw_3d] + [params.q_size_3d] * 3 + [params.q_vel_3d] * 3
    )
    return replace(
        state,
        mean=F_3D @ state.mean,
        covariance=_symmetrize_checked(F_3D @ state.covariance @ F_3D.T + q),
        age=state.age + 1,
        time_since_update=state.time_since_update + 1,
        hit_streak=state.hit_streak if state.time_since_update == 0 else 0,
    )


def kalman_update_3d(state: Track3DState, det: Detection3D, params: TrackerParams = TrackerParams()) -> Track3DState:
    r = np.diag([params.r_pos_3d] * 3 + [params.r_yaw_3d] + [params.r_size_3d] * 3)
    mean, cov, _, _ = _kalman_correct(
        state.mean, state.covariance, det.measurement(), H_3D, r, _flip_yaw_innovation
    )
    mean[3] = float(wrap_angle(mean[3]))
    mean[4:7] = np.maximum(mean[4:7], 1e-3)
    return replace(
        state, mean=mean, covariance=cov, hits=state.hits + 1, hit_streak=state.hit_streak + 1, time_since_update=0
    )


def associate_3d(track_centers: np.ndarray, det_centers: np.ndarray, gate: float) -> Association:
    """Minimum-total-distance assignment on 3D centers; pairs beyond ``gate`` are dropped."""
    track_centers = np.asarray(track_centers, dtype=np.float64).reshape(-1, 3)
    det_centers = np.asarray(det_centers, dtype=np.float64).reshape(-1, 3)
    dist = np.linalg.norm(track_centers[:, None, :] - det_centers[None, :, :], axis=-1)
    # maximize (big - distance) so out-of-gate pairs never displace in-gate ones
    big = 10.0 * gate
    score = np.where(dist <= gate, big - dist, 0.0)
    return _assign(score, lambda v: v > 0)


@dataclass
class TrackedBox:
    track_id: int
    center: np.ndarray
    yaw: float
    size: tuple[float, float, float]
    payload: Any = None


def track_sequence_3d(frames: list[list[Detection3D]], params: TrackerParams = TrackerParams()) -> list[list[TrackedBox]]:
    """Tracking-by-detection in the world frame. Returns the tracked boxes of each frame."""

    def match(states, dets):
        return associate_3d(
            np.array([s.center for s in states]).reshape(-1, 3),
            np.array([d.center for d in dets]).reshape(-1, 3),
            params.gate_distance,
        )

    def record(f, det, di, state):
        return (f, state.mean.copy(), det.payload)

    done = _run_tracker(
        list(enumerate(frames)),
        params,
        lambda d: init_track_3d(d, params),
        lambda s: kalman_predict_3d(s, params),
        lambda s, d: kalman_update_3d(s, d, params),
        match,
        record,
    )
    out: list[list[TrackedBox]] = [[] for _ in frames]
    for t in done:
        for f, mean, payload in t.entries:
            out[f].append(TrackedBox(t.track_id, mean[:3].copy(), float(mean[3]), tuple(mean[4:7]), payload))
    return out
