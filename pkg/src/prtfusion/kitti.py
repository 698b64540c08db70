"""Read-only parsers for KITTI label, calibration and pose text files.

Every error names the offending 1-based line number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, RigidTransform

KITTI_CLASSES = frozenset(
    {"Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Person", "Cyclist", "Tram", "Misc", "DontCare"}
)
KITTI_IMAGE_SIZE = (1242, 375)
# text poses carry ~6 significant digits; rotations within this Frobenius distance of
# orthonormal are projected back onto SO(3), anything further is rejected
POSE_ORTHO_TOL = 1e-3


class KittiFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class KittiLabelRecord:
    frame: int | None
    track_id: int | None
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]
    rotation_y: float
    score: float | None = None


def _floats(tokens, line: int, what: str) -> list[float]:
    out = []
    for tok in tokens:
        try:
            v = float(tok)
        except ValueError:
            raise KittiFormatError(line, f"non-numeric {what} field {tok!r}") from None
        if not math.isfinite(v):
            raise KittiFormatError(line, f"non-finite {what} field {tok!r}")
        out.append(v)
    return out


def _int(tok: str, line: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise KittiFormatError(line, f"non-integer {what} field {tok!r}") from None


def _content_lines(text: str):
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if s:
            yield i, s


def parse_kitti_labels(text: str) -> list[KittiLabelRecord]:
    """Detection labels (15 columns, 16 with score) or tracking labels (17, 18 with score).

    Tracking rows lead with the frame number and track id.
    """
    records = []
    for i, line in _content_lines(text):
        tok = line.split()
        n = len(tok)
        if n in (17, 18):
            frame, track = _int(tok[0], i, "frame"), _int(tok[1], i, "track id")
            tok = tok[2:]
        elif n in (15, 16):
            frame = track = None
        else:
            raise KittiFormatError(i, f"expected 15/16 (detection) or 17/18 (tracking) columns, got {n}")
        kind = tok[0]
        if kind not in KITTI_CLASSES:
            raise KittiFormatError(i, f"unknown object type {kind!r}")
        truncated = _floats(tok[1:2], i, "truncated")[0]
        occluded = _int(tok[2], i, "occluded")
        vals = _floats(tok[3:], i, "numeric")
        records.append(
            KittiLabelRecord(
                frame,
                track,
                kind,
                truncated,
                occluded,
                vals[0],
                tuple(vals[1:5]),
                tuple(vals[5:8]),
                tuple(vals[8:11]),
                vals[11],
                vals[12] if len(vals) > 12 else None,
            )
        )
    return records


def parse_kitti_calib(text: str, image_size: tuple[int, int] = KITTI_IMAGE_SIZE, camera: str = "P2") -> CameraIntrinsics:
    """Intrinsics from a projection-matrix line such as ``P2: f 0 cx tx 0 f cy ty 0 0 1 tz``.

    Both the object (``P2:``) and tracking (``P2``) spellings are accepted.
    """
    for i, line in _content_lines(text):
        key, _, rest = line.partition(" ")
        if key.rstrip(":") != camera:
            continue
        vals = _floats(rest.split(), i, "calibration")
        if len(vals) != 12:
            raise KittiFormatError(i, f"{camera} needs 12 values, got {len(vals)}")
        p = np.array(vals).reshape(3, 4)
        try:
            return CameraIntrinsics(p[0, 0], p[1, 1], p[0, 2], p[1, 2], *image_size)
        except ValueError as err:
            raise KittiFormatError(i, str(err)) from None
    raise ValueError(f"no {camera} projection line found")


def parse_kitti_poses(text: str, tol: float = POSE_ORTHO_TOL) -> list[RigidTransform]:
    """One 3x4 row-major pose per line, promoted to 4x4."""
    poses = []
    for i, line in _content_lines(text):
        vals = _floats(line.split(), i, "pose")
        if len(vals) != 12:
            raise KittiFormatError(i, f"pose needs 12 values, got {len(vals)}")
        m = np.eye(4)
        m[:3, :] = np.array(vals).reshape(3, 4)
        rot = m[:3, :3]
        if np.linalg.norm(rot.T @ rot - np.eye(3)) > tol:
            raise KittiFormatError(i, "rotation block is not orthonormal")
        u, _, vt = np.linalg.svd(rot)
        fixed = u @ vt
        if np.linalg.det(fixed) < 0:
            raise KittiFormatError(i, "rotation block is a reflection")
        m[:3, :3] = fixed
        poses.append(RigidTransform(m))
    return poses
