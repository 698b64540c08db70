"""Fusion model: point-set encoder, appearance encoder, PR and tracklet fusion, depth head.

Every layer is a dense transform followed by a shifted softplus ``ssp(x) = softplus(x) - ln 2``
(a smooth ramp with ssp(0) = 0). Gradients are derived by hand in :meth:`FusionModel.backward`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from ..geometry import BBox2D, PseudoLiDARPatch, RigidTransform, compensate_ego_motion
from .features import N_CUES, appearance_dim, appearance_input, prepare_patch

LN2 = math.log(2.0)
KINDS = ("pl", "rgb", "pr", "t", "rgb-t", "prt")


def ssp(x):
    # softplus(x) = max(x, 0) + log1p(exp(-|x|)), evaluated in place for speed
    x = np.asarray(x, dtype=np.float64)
    y = np.abs(x)
    if not isinstance(y, np.ndarray):
        y = np.array(y)
    np.negative(y, out=y)
    np.exp(y, out=y)
    np.log1p(y, out=y)
    y += np.maximum(x, 0.0)
    y -= LN2
    return y if y.ndim else float(y)


def dssp(x):
    return expit(x)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "prt"
    window: int = 1
    compensate: bool = True
    n_points: int = 128
    grid: int = 8
    width: int = 64
    hidden: int = 128
    point_hidden: tuple[int, int] = (32, 64)
    init_log_depth: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if min(self.n_points, self.grid, self.width, self.hidden, *self.point_hidden) < 1:
            raise ValueError("all layer sizes must be >= 1")
        object.__setattr__(self, "point_hidden", tuple(int(h) for h in self.point_hidden))

    @property
    def temporal(self) -> bool:
        return self.kind in ("t", "rgb-t", "prt") and self.window > 0

    @property
    def slots(self) -> int:
        return self.window + 1 if self.kind in ("t", "rgb-t", "prt") else 1

    @property
    def uses_points(self) -> bool:
        return self.kind in ("pl", "pr", "t", "prt")

    @property
    def uses_appearance(self) -> bool:
        return self.kind in ("rgb", "pr", "rgb-t", "prt")

    @property
    def uses_pr_fusion(self) -> bool:
        return self.kind in ("pr", "prt")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["point_hidden"] = list(self.point_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["point_hidden"] = tuple(d.get("point_hidden", (32, 64)))
        return cls(**d)


@dataclass
class Batch:
    """Per-object inputs, slot axis ordered oldest -> newest (last slot = current frame)."""

    points: np.ndarray  # (B, K, N, 3) local offsets
    cues: np.ndarray  # (B, K, 4)
    nonempty: np.ndarray  # (B, K) bool
    slot_mask: np.ndarray  # (B, K) bool, real frame present
    appearance: np.ndarray  # (B, K, D)
    log_depth: np.ndarray | None = None  # (B,)

    def __len__(self) -> int:
        return self.points.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(
            self.points[idx],
            self.cues[idx],
            self.nonempty[idx],
            self.slot_mask[idx],
            self.appearance[idx],
            None if self.log_depth is None else self.log_depth[idx],
        )


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h1, h2 = cfg.point_hidden
    w, hid, k = cfg.width, cfg.hidden, cfg.slots
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.uses_points:
        shapes.update(
            p_w1=(3, h1), p_b1=(h1,), p_w2=(h1, h2), p_b2=(h2,),
            p_w3=(h2 + N_CUES, w), p_b3=(w,), p_empty=(w,),
        )
    if cfg.uses_appearance:
        shapes.update(a_w1=(appearance_dim(cfg.grid), hid), a_b1=(hid,), a_w2=(hid, w), a_b2=(w,))
    if cfg.uses_pr_fusion:
        shapes.update(g_w1=(2 * w, hid), g_b1=(hid,), g_w2=(hid, w), g_b2=(w,))
    if cfg.temporal:
        shapes.update(t_w1=(k * w + k, hid), t_b1=(hid,), t_w2=(hid, w), t_b2=(w,))
    shapes.update(h_w1=(w, hid), h_b1=(hid,), h_w2=(hid, hid), h_b2=(hid,), h_w3=(hid, 1), h_b3=(1,))
    return shapes


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if name == "p_empty":
            params[name] = rng.normal(0.0, 0.1, size=shape)
        elif len(shape) == 2:
            params[name] = rng.normal(0.0, math.sqrt(1.0 / shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    params["h_b3"][:] = cfg.init_log_depth
    return params


# ----------------------------------------------------------------------- components


def _points_forward(p, pts, cues, nonempty):
    n_p, n, _ = pts.shape
    h1 = p["p_w1"].shape[1]
    x = pts.reshape(n_p * n, 3)
    z1 = x @ p["p_w1"] + p["p_b1"]
    a1 = ssp(z1)
    z2 = (a1 @ p["p_w2"] + p["p_b2"]).reshape(n_p, n, -1)
    # ssp is monotone, so max-pooling pre-activations equals pooling activations
    idx = z2.argmax(axis=1)
    zmax = np.take_along_axis(z2, idx[:, None, :], axis=1)[:, 0, :]
    u = np.concatenate([ssp(zmax), cues], axis=1)
    z3 = u @ p["p_w3"] + p["p_b3"]
    out = np.where(nonempty[:, None], ssp(z3), p["p_empty"][None, :])
    cache = (x.reshape(n_p, n, 3), z1.reshape(n_p, n, h1), a1.reshape(n_p, n, h1), idx, zmax, u, z3, nonempty)
    return out, cache


def _points_backward(p, dout, cache, grads):
    x, z1, a1, idx, zmax, u, z3, nonempty = cache
    h2 = zmax.shape[1]
    grads["p_empty"] += dout[~nonempty].sum(axis=0)
    dz3 = dout * nonempty[:, None] * dssp(z3)
    grads["p_w3"] += u.T @ dz3
    grads["p_b3"] += dz3.sum(axis=0)
    dzmax = (dz3 @ p["p_w3"].T)[:, :h2] * dssp(zmax)
    # only argmax points receive gradient; sum per (patch, channel) pair
    rows = np.arange(x.shape[0])[:, None]
    a1_sel = a1[rows, idx]
    grads["p_w2"] += np.einsum("pjh,pj->hj", a1_sel, dzmax)
    grads["p_b2"] += dzmax.sum(axis=0)
    dz1_sel = dssp(z1[rows, idx]) * (dzmax[:, :, None] * p["p_w2"].T[None, :, :])
    grads["p_w1"] += np.einsum("pjc,pjh->ch", x[rows, idx], dz1_sel)
    grads["p_b1"] += dz1_sel.sum(axis=(0, 1))


def _mlp2_forward(x, w1, b1, w2, b2):
    z1 = x @ w1 + b1
    a1 = ssp(z1)
    z2 = a1 @ w2 + b2
    return ssp(z2), (x, z1, a1, z2)


def _mlp2_backward(dout, cache, w1, w2, grads, prefix):
    x, z1, a1, z2 = cache
    dz2 = dout * dssp(z2)
    grads[f"{prefix}_w2"] += a1.T @ dz2
    grads[f"{prefix}_b2"] += dz2.sum(axis=0)
    dz1 = (dz2 @ w2.T) * dssp(z1)
    grads[f"{prefix}_w1"] += x.T @ dz1
    grads[f"{prefix}_b1"] += dz1.sum(axis=0)
    return dz1 @ w1.T


def _tracklet_input(feats, mask):
    b, k, w = feats.shape
    m = mask.astype(np.float64)
    return np.concatenate([(feats * m[:, :, None]).reshape(b, k * w), m], axis=1)


def _head_forward(p, f):
    z1 = f @ p["h_w1"] + p["h_b1"]
    a1 = ssp(z1)
    z2 = a1 @ p["h_w2"] + p["h_b2"]
    a2 = ssp(z2)
    out = (a2 @ p["h_w3"] + p["h_b3"])[:, 0]
    return out, (f, z1, a1, z2, a2)


def _head_backward(p, dout, cache, grads):
    f, z1, a1, z2, a2 = cache
    d = dout[:, None]
    grads["h_w3"] += a2.T @ d
    grads["h_b3"] += d.sum(axis=0)
    dz2 = (d @ p["h_w3"].T) * dssp(z2)
    grads["h_w2"] += a1.T @ dz2
    grads["h_b2"] += dz2.sum(axis=0)
    dz1 = (dz2 @ p["h_w2"].T) * dssp(z1)
    grads["h_w1"] += f.T @ dz1
    grads["h_b1"] += dz1.sum(axis=0)
    return dz1 @ p["h_w1"].T


# ---------------------------------------------------------------------------- model


@dataclass
class FusionModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.config)
        expected = _param_shapes(self.config)
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match config {sorted(expected)}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "FusionModel":
        return FusionModel(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- building blocks on batches of features

    def encode_points_batch(self, pts, cues, nonempty):
        return _points_forward(self.params, pts, cues, nonempty)[0]

    def encode_appearance_batch(self, app):
        p = self.params
        return _mlp2_forward(app, p["a_w1"], p["a_b1"], p["a_w2"], p["a_b2"])[0]

    def fuse_pr_batch(self, pl, r):
        p = self.params
        return _mlp2_forward(np.concatenate([pl, r], axis=1), p["g_w1"], p["g_b1"], p["g_w2"], p["g_b2"])[0]

    def fuse_tracklet_batch(self, feats, mask):
        p = self.params
        return _mlp2_forward(_tracklet_input(feats, mask), p["t_w1"], p["t_b1"], p["t_w2"], p["t_b2"])[0]

    def head_batch(self, f):
        return _head_forward(self.params, f)[0]

    # -- full forward / backward

    def forward(self, batch: Batch):
        """Log-depth predictions (B,) and the cache needed by :meth:`backward`."""
        cfg, p = self.config, self.params
        b, k = batch.slot_mask.shape
        if k != cfg.slots:
            raise ValueError(f"batch has {k} slots, model expects {cfg.slots}")
        cache: dict = {}
        pl = r = None
        if cfg.uses_points:
            if cfg.temporal:
                n = batch.points.shape[2]
                flat, cache["points"] = _points_forward(
                    p, batch.points.reshape(b * k, n, 3), batch.cues.reshape(b * k, -1), batch.nonempty.reshape(b * k)
                )
                pl = flat.reshape(b, k, -1)
            else:
                pl, cache["points"] = _points_forward(
                    p, batch.points[:, -1], batch.cues[:, -1], batch.nonempty[:, -1]
                )
        if cfg.uses_appearance:
            if cfg.kind == "rgb-t" and cfg.temporal:
                flat, cache["app"] = _mlp2_forward(
                    batch.appearance.reshape(b * k, -1), p["a_w1"], p["a_b1"], p["a_w2"], p["a_b2"]
                )
                r = flat.reshape(b, k, -1)
            else:
                r, cache["app"] = _mlp2_forward(batch.appearance[:, -1], p["a_w1"], p["a_b1"], p["a_w2"], p["a_b2"])

        mask = batch.slot_mask
        if cfg.kind == "pl" or (cfg.kind == "t" and not cfg.temporal):
            f = pl
        elif cfg.kind == "rgb" or (cfg.kind == "rgb-t" and not cfg.temporal):
            f = r
        elif cfg.kind in ("t", "rgb-t"):
            seq = pl if cfg.kind == "t" else r
            f, cache["tf"] = _mlp2_forward(_tracklet_input(seq, mask), p["t_w1"], p["t_b1"], p["t_w2"], p["t_b2"])
        else:  # pr, prt
            if cfg.temporal:
                pl, cache["tf"] = _mlp2_forward(
                    _tracklet_input(pl, mask), p["t_w1"], p["t_b1"], p["t_w2"], p["t_b2"]
                )
            f, cache["pr"] = _mlp2_forward(
                np.concatenate([pl, r], axis=1), p["g_w1"], p["g_b1"], p["g_w2"], p["g_b2"]
            )
        out, cache["head"] = _head_forward(p, f)
        cache["shape"] = (b, k)
        cache["mask"] = mask
        return out, cache

    def backward(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        cfg, p = self.config, self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        b, k = cache["shape"]
        mask = cache["mask"].astype(np.float64)
        w = cfg.width
        df = _head_backward(p, dout, cache["head"], grads)
        dpl = dr = None
        if cfg.kind == "pl" or (cfg.kind == "t" and not cfg.temporal):
            dpl = df
        elif cfg.kind == "rgb" or (cfg.kind == "rgb-t" and not cfg.temporal):
            dr = df
        elif cfg.kind in ("t", "rgb-t"):
            dx = _mlp2_backward(df, cache["tf"], p["t_w1"], p["t_w2"], grads, "t")
            dseq = dx[:, : k * w].reshape(b, k, w) * mask[:, :, None]
            if cfg.kind == "t":
                dpl = dseq
            else:
                dr = dseq
        else:
            dx = _mlp2_backward(df, cache["pr"], p["g_w1"], p["g_w2"], grads, "g")
            dpl, dr = dx[:, :w], dx[:, w:]
            if cfg.temporal:
                dx = _mlp2_backward(dpl, cache["tf"], p["t_w1"], p["t_w2"], grads, "t")
                dpl = dx[:, : k * w].reshape(b, k, w) * mask[:, :, None]
        if dpl is not None:
            _points_backward(p, dpl.reshape(-1, w), cache["points"], grads)
        if dr is not None:
            _mlp2_backward(dr.reshape(-1, w), cache["app"], p["a_w1"], p["a_w2"], grads, "a")
        return grads

    def predict_log_depth(self, batch: Batch, batch_size: int = 512) -> np.ndarray:
        outs = [self.forward(batch.take(slice(i, i + batch_size)))[0] for i in range(0, len(batch), batch_size)]
        return np.concatenate(outs) if outs else np.zeros(0)

    def predict_depth(self, batch: Batch) -> np.ndarray:
        return np.exp(self.predict_log_depth(batch))


# ------------------------------------------------------------- single-object operations


def encode_patch(patch: PseudoLiDARPatch, model: FusionModel, seed: int | None = None) -> np.ndarray:
    """Pseudo-LiDAR feature of one patch; an empty patch maps to the learned empty embedding."""
    cfg = model.config
    local, cues, nonempty = prepare_patch(patch.points, cfg.n_points, cfg.seed if seed is None else seed)
    return model.encode_points_batch(local[None], cues[None], np.array([nonempty]))[0]


def encode_appearance(appearance: np.ndarray, box: BBox2D, model: FusionModel) -> np.ndarray:
    x = appearance_input(appearance, box, model.config.grid)
    return model.encode_appearance_batch(x[None])[0]


def fuse_pr(pl: np.ndarray, r: np.ndarray, model: FusionModel) -> np.ndarray:
    w = model.config.width
    pl, r = np.asarray(pl, float), np.asarray(r, float)
    if pl.shape != (w,) or r.shape != (w,):
        raise ValueError(f"expected two {w}-dim features, got {pl.shape} and {r.shape}")
    return model.fuse_pr_batch(pl[None], r[None])[0]


def fuse_tracklet(features, mask, model: FusionModel) -> np.ndarray:
    """Fuse up to window+1 features (oldest first, newest last) with a validity mask.

    Shorter lists are right-aligned so the newest feature always sits in the last slot.
    """
    k, w = model.config.slots, model.config.width
    if len(features) > k:
        raise ValueError(f"{len(features)} features exceed the {k}-frame window")
    if len(mask) != len(features):
        raise ValueError("mask length must equal the number of features")
    if not model.config.temporal:
        raise ValueError("model has no tracklet fusion stage")
    feats = np.zeros((1, k, w))
    m = np.zeros((1, k), dtype=bool)
    off = k - len(features)
    for i, (f, valid) in enumerate(zip(features, mask)):
        f = np.asarray(f, float)
        if f.shape != (w,):
            raise ValueError(f"feature {i} has shape {f.shape}, expected ({w},)")
        feats[0, off + i] = f
        m[0, off + i] = bool(valid)
    return model.fuse_tracklet_batch(feats, m)[0]


def predict_object_depth(feature: np.ndarray, model: FusionModel) -> float:
    """Depth in meters: exp of the regression head output."""
    return float(np.exp(model.head_batch(np.asarray(feature, float)[None])[0]))


def build_window(
    patches: list[PseudoLiDARPatch | None],
    poses: list[RigidTransform | None],
    model: FusionModel,
    seed: int | None = None,
):
    """Slot inputs for a patch window (oldest first, current frame last; None marks a gap).

    Patches are ego-motion compensated into the current camera frame when the model says so.
    """
    cfg = model.config
    k = cfg.slots
    if len(patches) > k or len(poses) != len(patches):
        raise ValueError(f"window of {len(patches)} patches does not fit {k} slots")
    if patches[-1] is None or poses[-1] is None:
        raise ValueError("the current frame must be present")
    n = cfg.n_points
    pts = np.zeros((k, n, 3))
    cues = np.zeros((k, N_CUES))
    nonempty = np.zeros(k, dtype=bool)
    mask = np.zeros(k, dtype=bool)
    off = k - len(patches)
    h_t = poses[-1]
    for i, (patch, pose) in enumerate(zip(patches, poses)):
        if patch is None:
            continue
        if cfg.compensate and i != len(patches) - 1:
            patch = compensate_ego_motion(patch, h_t, pose)
        local, c, ne = prepare_patch(patch.points, n, cfg.seed if seed is None else seed)
        pts[off + i], cues[off + i], nonempty[off + i], mask[off + i] = local, c, ne, True
    return pts, cues, nonempty, mask


def forward_prt(
    patches: list[PseudoLiDARPatch | None],
    poses: list[RigidTransform | None],
    appearance: np.ndarray,
    box: BBox2D,
    model: FusionModel,
    seed: int | None = None,
) -> float:
    """Depth of one object from its compensated patch window and current appearance crop."""
    if model.config.kind != "prt":
        raise ValueError("forward_prt needs a 'prt' model")
    pts, cues, nonempty, mask = build_window(patches, poses, model, seed)
    app = np.zeros((model.config.slots, appearance_dim(model.config.grid)))
    app[-1] = appearance_input(appearance, box, model.config.grid)
    batch = Batch(pts[None], cues[None], nonempty[None], mask[None], app[None])
    return float(model.predict_depth(batch)[0])
