"""Fixed (non-learned) input preparation for the encoders."""

from __future__ import annotations

import math

import numpy as np

from ..geometry import BBox2D

# local point offsets and centroid cues are expressed in units of these many meters
LOCAL_SCALE = 5.0
CENTROID_SCALE = 20.0
N_CUES = 4
N_GEOMETRY = 4


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Points sorted lexicographically by (x, y, z), so downstream sampling ignores input order."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points[np.lexsort((points[:, 2], points[:, 1], points[:, 0]))]


def resample_points(points: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Exactly ``n`` points: all points plus draws with replacement if fewer, else a
    seeded uniform subsample. Depends only on the point multiset, not its order."""
    pts = canonical_order(points)
    m = len(pts)
    if m == 0:
        return np.zeros((n, 3))
    rng = np.random.default_rng([int(seed), m])
    if m >= n:
        idx = np.sort(rng.choice(m, size=n, replace=False))
    else:
        idx = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    return pts[idx]


def patch_cues(points: np.ndarray) -> np.ndarray:
    """Global cue vector of a patch: scaled centroid and log centroid depth."""
    points = canonical_order(points)
    if len(points) == 0:
        return np.zeros(N_CUES)
    c = points.mean(axis=0)
    return np.array([c[0] / CENTROID_SCALE, c[1] / CENTROID_SCALE, c[2] / CENTROID_SCALE, math.log(max(c[2], 0.1))])


def prepare_patch(points: np.ndarray, n: int, seed: int) -> tuple[np.ndarray, np.ndarray, bool]:
    """(local point offsets (n, 3), cues, non-empty flag) for one patch."""
    # canonical order also makes the centroid sum bit-exact under permutation
    points = canonical_order(points)
    if len(points) == 0:
        return np.zeros((n, 3)), np.zeros(N_CUES), False
    centroid = points.mean(axis=0)
    local = (resample_points(points, n, seed) - centroid) / LOCAL_SCALE
    return local, patch_cues(points), True


def area_weights(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) area-averaging matrix: each output cell averages the source pixels it
    overlaps, weighted by overlap length. Works for both down- and up-sampling."""
    w = np.zeros((n_dst, n_src))
    scale = n_src / n_dst
    for i in range(n_dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_src)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / w.sum(axis=1, keepdims=True)


def box_geometry(box: BBox2D, width: int, height: int) -> np.ndarray:
    """Normalized box center (relative to image center) and log size; zero for the full image."""
    cu, cv = box.center
    return np.array(
        [cu / width - 0.5, cv / height - 0.5, math.log(box.width / width), math.log(box.height / height)]
    )


def clamp_box(box: BBox2D, width: int, height: int) -> BBox2D:
    x1, y1 = max(box.x1, 0.0), max(box.y1, 0.0)
    x2, y2 = min(box.x2, float(width)), min(box.y2, float(height))
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"box {box} has no area inside the {width}x{height} image")
    return BBox2D(x1, y1, x2, y2)


def pool_appearance(appearance: np.ndarray, box: BBox2D, grid: int) -> np.ndarray:
    """Crop (C, H, W) channels by the box and area-average to (C, grid, grid)."""
    c, h, w = appearance.shape
    box = clamp_box(box, w, h)
    u0, v0, u1, v1 = box.pixel_bounds(w, h)
    if u1 <= u0 or v1 <= v0:
        raise ValueError(f"box {box} covers no pixel centers")
    crop = np.asarray(appearance[:, v0:v1, u0:u1], dtype=np.float64)
    a_v = area_weights(v1 - v0, grid)
    a_u = area_weights(u1 - u0, grid)
    return np.einsum("gv,cvu,hu->cgh", a_v, crop, a_u)


def appearance_input(appearance: np.ndarray, box: BBox2D, grid: int) -> np.ndarray:
    """Flattened pooled channels followed by the box-geometry vector."""
    _, h, w = appearance.shape
    pooled = pool_appearance(appearance, box, grid)
    return np.concatenate([pooled.ravel(), box_geometry(clamp_box(box, w, h), w, h)])


def appearance_dim(grid: int, channels: int = 4) -> int:
    return channels * grid * grid + N_GEOMETRY
