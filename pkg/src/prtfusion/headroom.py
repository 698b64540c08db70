"""Attribute headroom analysis: swap one predicted box attribute for ground truth at a time
and measure how much detection AP and tracking MOTA move.

Detections come from a simulated detector that perturbs ground-truth camera-frame boxes.
The 3D center is decomposed into a depth along the viewing ray and a projected 2D center,
so the ``depth`` and ``center2d`` swaps touch disjoint degrees of freedom.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .geometry import Box3D
from .metrics import DetectionRecord, GroundTruthRecord, IdBox, average_precision, iou_3d, iou_bev, mot_metrics
from .scenesim import Sequence, camera_to_world_state
from .tracking import Detection3D, TrackerParams, track_sequence_3d


class AttributeTag(str, Enum):
    ROTATION = "rotation"
    SIZE = "size"
    DEPTH = "depth"
    CENTER2D = "center2d"
    ALL = "all"

    @classmethod
    def parse(cls, value) -> "AttributeTag":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown attribute tag {value!r}; expected one of {[t.value for t in cls]}") from None


ATTRIBUTES = (AttributeTag.ROTATION, AttributeTag.SIZE, AttributeTag.DEPTH, AttributeTag.CENTER2D)
IOU_THRESHOLDS = (0.5, 0.6, 0.7)

# scales that turn each attribute error into a unitless score penalty. Depth error is left
# out on purpose: a monocular detector cannot see its own depth error, and a score that did
# would rank lucky depths first and bias any later depth swap.
_SCORE_SCALE = {"center2d": 5.0, "rotation": 0.2, "size": 0.1}
# confidence also falls with range (meters), as small distant objects are harder to detect
_RANGE_SCALE = 20.0


@dataclass(frozen=True)
class PerturbationProfile:
    """Simulated-detector noise. Depth and size are relative stds, rotation is in radians,
    center2d in pixels."""

    rotation: float = 0.03
    size: float = 0.02
    depth: float = 0.08
    center2d: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation", "size", "depth", "center2d"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"PerturbationProfile.{name} must be a finite value >= 0, got {v!r}")

    @classmethod
    def zero(cls, seed: int = 0) -> "PerturbationProfile":
        return cls(0.0, 0.0, 0.0, 0.0, seed)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- box surgery


def with_depth(box: Box3D, depth: float) -> Box3D:
    """Slide the box center along its camera ray to the given depth (projection unchanged)."""
    c = np.asarray(box.center, dtype=np.float64)
    return box.replace(center=c * (depth / c[2]))


def with_ray(box: Box3D, ray_from: Box3D) -> Box3D:
    """Keep ``box``'s depth but move its center onto the camera ray through ``ray_from``'s center."""
    r = np.asarray(ray_from.center, dtype=np.float64)
    z = float(box.center[2])
    return box.replace(center=r * (z / r[2]))


def frame_key(sequence_index: int, frame_index: int) -> int:
    """Pooled frame identifier, so AP matching never crosses sequences."""
    return sequence_index * 100_000 + frame_index


def ground_truth(sequences: list[Sequence]) -> list[GroundTruthRecord]:
    return [
        GroundTruthRecord(o.box3d, frame_key(si, f.frame_index), o.id)
        for si, seq in enumerate(sequences)
        for f in seq.frames
        for o in f.objects
    ]


def simulate_detector(
    gts: list[GroundTruthRecord], profile: PerturbationProfile, fx: float = 1.0, fy: float | None = None
) -> list[DetectionRecord]:
    """One detection per ground-truth box with seeded attribute noise.

    ``fx``/``fy`` convert the pixel-space center noise into ray directions. The score falls with
    the normalized center, rotation and size perturbation and with range; it carries no
    information about the depth error.
    """
    fy = fx if fy is None else fy
    dets = []
    for g in gts:
        # per-object stream: a detection does not depend on which other objects exist
        rng = np.random.default_rng([profile.seed, g.frame_index, g.id & 0x7FFFFFFF])
        e_depth, e_u, e_v, e_yaw = rng.normal(size=4)
        e_size = rng.normal(size=3)
        box = g.box
        c = np.asarray(box.center, dtype=np.float64)
        du, dv = profile.center2d * e_u, profile.center2d * e_v
        # pixel shift of the projected center at fixed depth
        c = np.array([c[0] + du * c[2] / fx, c[1] + dv * c[2] / fy, c[2]])
        rel_depth = max(1.0 + profile.depth * e_depth, 0.05)
        c = c * rel_depth
        size = tuple(float(s * max(1.0 + profile.size * e, 0.05)) for s, e in zip(box.size, e_size))
        yaw = box.yaw + profile.rotation * e_yaw
        energy = (
            (math.hypot(du, dv) / _SCORE_SCALE["center2d"]) ** 2
            + ((profile.rotation * e_yaw) / _SCORE_SCALE["rotation"]) ** 2
            + float(np.sum((profile.size * e_size) ** 2)) / _SCORE_SCALE["size"] ** 2
        )
        score = 1.0 / ((1.0 + energy) * (1.0 + (float(box.center[2]) / _RANGE_SCALE) ** 2))
        dets.append(DetectionRecord(Box3D(c, size, yaw), score, g.frame_index, g.id))
    return dets


def _gt_index(gts: list[GroundTruthRecord]) -> dict[tuple[int, int], GroundTruthRecord]:
    return {(g.frame_index, g.id): g for g in gts}


def inject_gt(dets: list[DetectionRecord], gts: list[GroundTruthRecord], tag) -> list[DetectionRecord]:
    """Replace the tagged attribute of every detection that has a ground-truth partner.

    ``depth`` slides the center along the detection's own ray to the true depth; ``center2d``
    moves it onto the true ray at the detection's depth.
    """
    tag = AttributeTag.parse(tag)
    index = _gt_index(gts)
    out = []
    for d in dets:
        g = index.get((d.frame_index, d.gt_id)) if d.gt_id is not None else None
        if g is None:
            out.append(d)
            continue
        box = d.box
        if tag is AttributeTag.ALL:
            box = g.box
        elif tag is AttributeTag.DEPTH:
            box = with_depth(box, float(g.box.center[2]))
        elif tag is AttributeTag.CENTER2D:
            box = with_ray(box, g.box)
        elif tag is AttributeTag.ROTATION:
            box = box.replace(yaw=g.box.yaw)
        elif tag is AttributeTag.SIZE:
            box = box.replace(size=tuple(g.box.size))
        out.append(DetectionRecord(box, d.score, d.frame_index, d.gt_id))
    return out


def swap_depth(dets: list[DetectionRecord], depths: dict[tuple[int, int], float]) -> list[DetectionRecord]:
    """Enhanced-depth swap: move each detection along its ray to an externally predicted depth,
    looked up by (frame key, ground-truth id). Detections without a prediction are kept."""
    out = []
    for d in dets:
        z = depths.get((d.frame_index, d.gt_id))
        out.append(d if z is None else DetectionRecord(with_depth(d.box, z), d.score, d.frame_index, d.gt_id))
    return out


# -------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class HeadroomRow:
    name: str
    ap_3d: dict[float, float]
    ap_bev: dict[float, float]
    mota: float
    ids: int

    def flat(self) -> dict[str, float]:
        out = {}
        for t in sorted(self.ap_3d):
            out[f"ap3d@{t:.1f}"] = self.ap_3d[t]
        for t in sorted(self.ap_bev):
            out[f"apbev@{t:.1f}"] = self.ap_bev[t]
        out["mota"] = self.mota
        out["ids"] = self.ids
        return out


def tracking_scores(
    sequences: list[Sequence], dets: list[DetectionRecord], params: TrackerParams
) -> tuple[float, int]:
    """World-frame 3D tracking on the detections; MOTA and IDS pooled over sequences."""
    by_frame: dict[int, list[DetectionRecord]] = {}
    for d in dets:
        by_frame.setdefault(d.frame_index, []).append(d)
    errors = gt_total = ids = 0
    for si, seq in enumerate(sequences):
        frames, gt_frames = [], []
        for f in seq.frames:
            pose = f.ego_pose
            row = []
            for d in sorted(by_frame.get(frame_key(si, f.frame_index), []), key=lambda d: (-d.score, d.gt_id or 0)):
                center, heading = camera_to_world_state(d.box, pose)
                row.append(Detection3D(center, heading, tuple(d.box.size), d.score))
            frames.append(row)
            gt_frames.append([IdBox(o.id, pose.apply(o.box3d.center)[0]) for o in f.objects])
        report = mot_metrics(track_sequence_3d(frames, params), gt_frames)
        errors += report.fp + report.fn + report.ids
        gt_total += report.gt_count
        ids += report.ids
    mota = 1.0 - errors / gt_total if gt_total else float("nan")
    return mota, ids


def evaluate_detections(
    name: str,
    sequences: list[Sequence],
    dets: list[DetectionRecord],
    gts: list[GroundTruthRecord],
    tracker_params: TrackerParams,
    thresholds=IOU_THRESHOLDS,
) -> HeadroomRow:
    ap3 = {t: average_precision(dets, gts, iou_3d, t) for t in thresholds}
    apb = {t: average_precision(dets, gts, iou_bev, t) for t in thresholds}
    mota, ids = tracking_scores(sequences, dets, tracker_params)
    return HeadroomRow(name, ap3, apb, mota, ids)


# the headroom harness confirms tracks on their first detection, so perfect detections
# produce perfect tracks
HEADROOM_TRACKER = TrackerParams(min_hits=1, max_age=3)


@dataclass
class HeadroomReport:
    rows: list[HeadroomRow]
    profile: PerturbationProfile = field(default_factory=PerturbationProfile)

    def row(self, name: str) -> HeadroomRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def delta(self, name: str, key: str, baseline: str = "baseline") -> float:
        return self.row(name).flat()[key] - self.row(baseline).flat()[key]

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "rows": {r.name: r.flat() for r in self.rows},
            "deltas": {r.name: {k: self.delta(r.name, k) for k in r.flat()} for r in self.rows},
        }

    def table(self) -> str:
        return format_table(self.rows)

    def write(self, directory: str | Path, stem: str = "headroom") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        txt, js = d / f"{stem}.txt", d / f"{stem}.json"
        txt.write_text(self.table() + "\n")
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return txt, js


def format_table(rows: list[HeadroomRow], baseline: str = "baseline") -> str:
    """Aligned text table: one line per row, absolute values with deltas vs. baseline."""
    base = next((r for r in rows if r.name == baseline), None)
    keys = list(rows[0].flat()) if rows else []
    header = ["row"] + keys
    lines = [header]
    for r in rows:
        vals = r.flat()
        cells = [r.name]
        for k in keys:
            v = vals[k]
            txt = f"{v:d}" if isinstance(v, int) else f"{v:.4f}"
            if base is not None and r is not base:
                dv = v - base.flat()[k]
                txt += f" ({dv:+d})" if isinstance(dv, int) else f" ({dv:+.4f})"
            cells.append(txt)
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)


def headroom_report(
    sequences: list[Sequence],
    profile: PerturbationProfile = PerturbationProfile(),
    tracker_params: TrackerParams = HEADROOM_TRACKER,
    dets: list[DetectionRecord] | None = None,
    thresholds=IOU_THRESHOLDS,
) -> HeadroomReport:
    """Baseline plus one "+GT" row per attribute and the all-attribute row."""
    if not sequences:
        raise ValueError("no sequences")
    gts = ground_truth(sequences)
    if dets is None:
        cam = sequences[0].intrinsics
        dets = simulate_detector(gts, profile, cam.fx, cam.fy)
    rows = [evaluate_detections("baseline", sequences, dets, gts, tracker_params, thresholds)]
    for tag in (*ATTRIBUTES, AttributeTag.ALL):
        rows.append(evaluate_detections(tag.value, sequences, inject_gt(dets, gts, tag), gts, tracker_params, thresholds))
    return HeadroomReport(rows, profile)


def enhanced_depth_report(
    sequences: list[Sequence],
    depths: dict[tuple[int, int], float],
    profile: PerturbationProfile = PerturbationProfile(),
    tracker_params: TrackerParams = HEADROOM_TRACKER,
    thresholds=IOU_THRESHOLDS,
) -> HeadroomReport:
    """Baseline detections against the same detections with depths from a depth model."""
    gts = ground_truth(sequences)
    cam = sequences[0].intrinsics
    dets = simulate_detector(gts, profile, cam.fx, cam.fy)
    rows = [
        evaluate_detections("baseline", sequences, dets, gts, tracker_params, thresholds),
        evaluate_detections("enhanced", sequences, swap_depth(dets, depths), gts, tracker_params, thresholds),
    ]
    return HeadroomReport(rows, profile)
