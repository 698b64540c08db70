"""Per-object depth metrics, box overlaps, detection AP and CLEAR-MOT tracking metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox2D, Box3D


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float

    def as_dict(self) -> dict:
        return {
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "rmse": self.rmse,
            "rmse_log": self.rmse_log,
            "delta1": self.delta1,
        }


def depth_metrics(pred, gt, log_base: str = "e") -> DepthMetrics:
    """Abs Rel, Sq Rel, RMSE, RMSE_log and delta < 1.25 over paired per-object depths.

    ``log_base`` selects natural ("e") or base-10 ("10") logarithms for RMSE_log.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError(f"need equal non-empty lengths, got {pred.size} and {gt.size}")
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise ValueError("depths must be strictly positive")
    if log_base not in ("e", "10"):
        raise ValueError("log_base must be 'e' or '10'")
    log = np.log if log_base == "e" else np.log10
    diff = pred - gt
    ratio = np.maximum(pred / gt, gt / pred)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff**2 / gt)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((log(pred) - log(gt)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
    )


def iou_2d(a: BBox2D, b: BBox2D) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _ccw(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    signed = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return poly if signed >= 0 else poly[::-1]


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman intersection of two convex polygons."""
    subject = _ccw(np.asarray(subject, dtype=np.float64))
    clip = _ccw(np.asarray(clip, dtype=np.float64))
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp = out
        out = []
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append(p + t * (q - p))
    return np.array(out).reshape(-1, 2)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    return float(np.clip(inter / (area_a + area_b - inter), 0.0, 1.0))


def iou_3d(a: Box3D, b: Box3D) -> float:
    a0, a1 = a.y_range()
    b0, b1 = b.y_range()
    overlap_h = max(0.0, min(a1, b1) - max(a0, b0))
    inter = bev_intersection(a, b) * overlap_h
    return float(np.clip(inter / (a.volume() + b.volume() - inter), 0.0, 1.0))


@dataclass(frozen=True)
class DetectionRecord:
    box: Box3D
    score: float
    frame_index: int
    gt_id: int | None = None  # ground-truth correspondence, when known by construction


@dataclass(frozen=True)
class GroundTruthRecord:
    box: Box3D
    frame_index: int
    id: int = -1


def precision_recall(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruthRecord],
    iou_fn: Callable[[Box3D, Box3D], float],
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy score-ordered matching; returns precision and recall after each detection."""
    if any(not math.isfinite(d.score) for d in dets):
        raise ValueError("detection scores must be finite")
    by_frame: dict[int, list[int]] = {}
    for gi, g in enumerate(gts):
        by_frame.setdefault(g.frame_index, []).append(gi)
    used = np.zeros(len(gts), dtype=bool)
    # stable sort keeps input order among equal scores
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    tp = np.zeros(len(dets))
    for rank, di in enumerate(order):
        d = dets[di]
        best, best_iou = -1, iou_threshold
        for gi in by_frame.get(d.frame_index, []):
            if used[gi]:
                continue
            v = iou_fn(d.box, gts[gi].box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = gi, v
        if best >= 0:
            used[best] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(dets) + 1)
    recall = ctp / max(len(gts), 1)
    return precision, recall


def average_precision(dets, gts, iou_fn, iou_threshold: float) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    if not gts or not dets:
        return 0.0
    precision, recall = precision_recall(dets, gts, iou_fn, iou_threshold)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass(frozen=True)
class MotReport:
    mota: float | None  # None when there is no ground truth
    ids: int
    fp: int
    fn: int
    gt_count: int
    matches: int = 0

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_count > 0


@dataclass(frozen=True)
class IdBox:
    id: int
    center: np.ndarray


def mot_metrics(tracked, gt, match_distance: float = 2.0) -> MotReport:
    """CLEAR-MOT counts over aligned frames of id'd boxes, matched by 3D center distance.

    ``tracked`` and ``gt`` are per-frame lists of objects exposing ``id`` (or ``track_id``)
    and ``center``.
    """
    if len(tracked) != len(gt):
        raise ValueError(f"frame count mismatch: {len(tracked)} tracked vs {len(gt)} ground truth")
    fp = fn = ids = n_gt = n_match = 0
    last_match: dict[int, int] = {}  # gt id -> hypothesis id at its last matched frame
    prev_pairs: dict[int, int] = {}  # pairs matched in the previous frame
    for hyps, gts in zip(tracked, gt):
        h_ids = [_ident(h) for h in hyps]
        g_ids = [_ident(g) for g in gts]
        n_gt += len(gts)
        if not gts:
            fp += len(hyps)
            prev_pairs = {}
            continue
        hc = np.array([np.asarray(h.center, float) for h in hyps]).reshape(-1, 3)
        gc = np.array([np.asarray(g.center, float) for g in gts]).reshape(-1, 3)
        dist = np.linalg.norm(gc[:, None, :] - hc[None, :, :], axis=-1)
        pairs: dict[int, int] = {}
        # keep last frame's correspondences that are still within the gate
        for gi, gid in enumerate(g_ids):
            hid = prev_pairs.get(gid)
            if hid is None or hid not in h_ids:
                continue
            hi = h_ids.index(hid)
            if dist[gi, hi] <= match_distance and hi not in pairs.values():
                pairs[gi] = hi
        free_g = [gi for gi in range(len(gts)) if gi not in pairs]
        free_h = [hi for hi in range(len(hyps)) if hi not in pairs.values()]
        if free_g and free_h:
            sub = dist[np.ix_(free_g, free_h)]
            cost = np.where(sub <= match_distance, sub, 1e6)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if sub[r, c] <= match_distance:
                    pairs[free_g[r]] = free_h[c]
        new_prev = {}
        for gi, hi in pairs.items():
            gid, hid = g_ids[gi], h_ids[hi]
            if gid in last_match and last_match[gid] != hid:
                ids += 1
            last_match[gid] = hid
            new_prev[gid] = hid
        prev_pairs = new_prev
        n_match += len(pairs)
        fn += len(gts) - len(pairs)
        fp += len(hyps) - len(pairs)
    mota = None if n_gt == 0 else 1.0 - (fp + fn + ids) / n_gt
    return MotReport(mota, ids, fp, fn, n_gt, n_match)


def _ident(obj) -> int:
    return obj.track_id if hasattr(obj, "track_id") else obj.id
