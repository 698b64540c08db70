import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prtfusion.encoders import (
    KINDS,
    Batch,
    FusionModel,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    build_window,
    encode_patch,
    forward_prt,
    fuse_pr,
    fuse_tracklet,
    loss_and_gradients,
    predict_object_depth,
    train,
)
from prtfusion.encoders.features import (
    area_weights,
    appearance_dim,
    pool_appearance,
    prepare_patch,
    resample_points,
)
from prtfusion.encoders.model import dssp, ssp
from prtfusion.encoders.train import _lr_at, residual_loss
from prtfusion.geometry import BBox2D, PseudoLiDARPatch, pose_from_euler

TINY = dict(n_points=5, grid=2, width=4, hidden=5, point_hidden=(3, 4))


def tiny(kind, window=1, seed=0):
    return ModelConfig(kind=kind, window=window, seed=seed, **TINY)


def random_batch(cfg: ModelConfig, b: int, seed: int) -> Batch:
    rng = np.random.default_rng(seed)
    k = cfg.slots
    mask = np.ones((b, k), dtype=bool)
    nonempty = np.ones((b, k), dtype=bool)
    if k > 1:
        mask[0, 0] = False
    nonempty[-1, -1] = False  # exercises the learned empty embedding
    return Batch(
        rng.normal(size=(b, k, cfg.n_points, 3)),
        rng.normal(size=(b, k, 4)),
        nonempty,
        mask,
        rng.normal(size=(b, k, appearance_dim(cfg.grid))),
        rng.normal(3.0, 0.5, size=b),
    )


# ------------------------------------------------------------------ scalar oracle


def s_ssp(x):
    return math.log1p(math.exp(x)) - math.log(2.0) if x < 30 else x - math.log(2.0)


def s_dense(x, w, b, act=True):
    out = [b[j] + sum(x[i] * w[i][j] for i in range(len(x))) for j in range(len(b))]
    return [s_ssp(v) for v in out] if act else out


def s_mlp2(x, p, pre):
    return s_dense(s_dense(x, p[pre + "_w1"], p[pre + "_b1"]), p[pre + "_w2"], p[pre + "_b2"])


def s_points(p, pts, cues, nonempty):
    if not nonempty:
        return list(p["p_empty"])
    hidden = [s_dense(s_dense(list(q), p["p_w1"], p["p_b1"]), p["p_w2"], p["p_b2"]) for q in pts]
    pooled = [max(h[j] for h in hidden) for j in range(len(hidden[0]))]
    return s_dense(pooled + list(cues), p["p_w3"], p["p_b3"])


def s_tracklet(feats, mask, p):
    x = []
    for f, m in zip(feats, mask):
        x += [v * m for v in f]
    x += [float(m) for m in mask]
    return s_mlp2(x, p, "t")


def s_forward(model: FusionModel, batch: Batch, i: int) -> float:
    cfg = model.config
    p = {k: v.tolist() for k, v in model.params.items()}
    k = cfg.slots
    pls = [s_points(p, batch.points[i, s], batch.cues[i, s], batch.nonempty[i, s]) for s in range(k)] if cfg.uses_points else None
    rs = [s_mlp2(list(batch.appearance[i, s]), p, "a") for s in range(k)] if cfg.uses_appearance else None
    mask = list(batch.slot_mask[i])
    if cfg.kind == "pl" or (cfg.kind == "t" and not cfg.temporal):
        f = pls[-1]
    elif cfg.kind == "rgb" or (cfg.kind == "rgb-t" and not cfg.temporal):
        f = rs[-1]
    elif cfg.kind == "t":
        f = s_tracklet(pls, mask, p)
    elif cfg.kind == "rgb-t":
        f = s_tracklet(rs, mask, p)
    else:
        pl = s_tracklet(pls, mask, p) if cfg.temporal else pls[-1]
        f = s_mlp2(pl + rs[-1], p, "g")
    h = s_dense(s_dense(f, p["h_w1"], p["h_b1"]), p["h_w2"], p["h_b2"])
    return s_dense(h, p["h_w3"], p["h_b3"], act=False)[0]


CASES = [(k, w) for k in KINDS for w in (0, 1, 2)]


@pytest.mark.parametrize("kind,window", CASES)
def test_forward_matches_scalar_oracle(kind, window):
    model = FusionModel(tiny(kind, window, seed=3))
    batch = random_batch(model.config, 4, seed=9)
    out, _ = model.forward(batch)
    for i in range(len(batch)):
        assert out[i] == pytest.approx(s_forward(model, batch, i), abs=1e-10)


@pytest.mark.parametrize("kind,window", CASES)
def test_gradients_match_finite_differences(kind, window):
    model = FusionModel(tiny(kind, window, seed=1))
    batch = random_batch(model.config, 3, seed=2)
    cfg = TrainConfig(loss="l2")
    _, grads = loss_and_gradients(model, batch, cfg)
    h = 1e-6
    for name, value in model.params.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + h
            up, _ = loss_and_gradients(model, batch, cfg)
            value[idx] = old - h
            down, _ = loss_and_gradients(model, batch, cfg)
            value[idx] = old
            fd[idx] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(fd), np.linalg.norm(grads[name]))
        if scale > 0:
            assert np.linalg.norm(fd - grads[name]) / scale < 1e-4, name


def test_prt_without_history_equals_pr():
    prt = FusionModel(tiny("prt", window=0, seed=4))
    pr = FusionModel(tiny("pr", window=0, seed=4), {k: v.copy() for k, v in prt.params.items()})
    assert set(prt.params) == set(pr.params)
    batch = random_batch(pr.config, 6, seed=5)
    np.testing.assert_array_equal(prt.forward(batch)[0], pr.forward(batch)[0])


def test_slot_count_checked():
    model = FusionModel(tiny("t", 2))
    with pytest.raises(ValueError, match="slots"):
        model.forward(random_batch(tiny("t", 1), 2, 0))


def test_param_shape_mismatch_rejected():
    params = FusionModel(tiny("pr", 0)).params
    with pytest.raises(ValueError):
        FusionModel(tiny("prt", 1), params)


def test_unknown_kind():
    with pytest.raises(ValueError, match="kind"):
        ModelConfig(kind="lidar")


def test_config_round_trip():
    cfg = tiny("rgb-t", 3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------- activations, inputs


@given(st.floats(-50, 50))
def test_ssp_scalar_and_derivative(x):
    assert ssp(x) == pytest.approx(s_ssp(x), abs=1e-12)
    assert ssp(0.0) == 0.0
    h = 1e-5
    assert dssp(x) == pytest.approx((ssp(x + h) - ssp(x - h)) / (2 * h), abs=1e-6)


def test_ssp_stable_for_large_inputs():
    out = ssp(np.array([-1e4, 1e4]))
    assert np.all(np.isfinite(out))
    assert out[1] == pytest.approx(1e4 - math.log(2))


@settings(max_examples=30)
@given(st.integers(1, 40), st.integers(1, 16), st.integers(0, 1000))
def test_resample_is_order_invariant(m, n, seed):
    pts = np.random.default_rng(seed).normal(size=(m, 3))
    perm = np.random.default_rng(seed + 1).permutation(m)
    a = resample_points(pts, n, seed)
    assert a.shape == (n, 3)
    np.testing.assert_array_equal(a, resample_points(pts[perm], n, seed))


def test_encode_patch_permutation_invariant():
    model = FusionModel(tiny("pl", 0))
    pts = np.random.default_rng(0).normal([0, 0, 15], 1.0, size=(40, 3))
    a = encode_patch(PseudoLiDARPatch(pts), model)
    b = encode_patch(PseudoLiDARPatch(pts[::-1]), model)
    np.testing.assert_array_equal(a, b)


def test_empty_patch_uses_learned_embedding():
    model = FusionModel(tiny("pl", 0))
    np.testing.assert_array_equal(encode_patch(PseudoLiDARPatch(), model), model.params["p_empty"])
    local, cues, nonempty = prepare_patch(np.zeros((0, 3)), 5, 0)
    assert not nonempty and not local.any() and not cues.any()


@pytest.mark.parametrize("src,dst", [(7, 3), (3, 7), (8, 8), (1, 4)])
def test_area_weights_rows_sum_to_one(src, dst):
    w = area_weights(src, dst)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    # a constant image stays constant
    np.testing.assert_allclose(w @ np.full(src, 2.5), 2.5)


def test_pool_appearance_constant_and_mean():
    app = np.random.default_rng(1).normal(size=(4, 12, 20))
    pooled = pool_appearance(app, BBox2D(0, 0, 20, 12), 4)
    np.testing.assert_allclose(pooled.mean(axis=(1, 2)), app.mean(axis=(1, 2)))
    with pytest.raises(ValueError):
        pool_appearance(app, BBox2D(30, 30, 40, 40), 4)


# ------------------------------------------------------------------ fusion API


def test_fuse_tracklet_errors():
    model = FusionModel(tiny("t", 1))
    f = np.zeros(4)
    with pytest.raises(ValueError, match="window"):
        fuse_tracklet([f, f, f], [True] * 3, model)
    with pytest.raises(ValueError, match="mask"):
        fuse_tracklet([f], [True, True], model)
    with pytest.raises(ValueError, match="shape"):
        fuse_tracklet([np.zeros(3)], [True], model)
    with pytest.raises(ValueError, match="no tracklet"):
        fuse_tracklet([f], [True], FusionModel(tiny("t", 0)))


def test_fuse_tracklet_right_aligns_short_input():
    model = FusionModel(tiny("t", 2))
    f = np.arange(4.0)
    a = fuse_tracklet([f], [True], model)
    b = fuse_tracklet([np.ones(4), np.ones(4), f], [False, False, True], model)
    np.testing.assert_array_equal(a, b)


def test_fuse_pr_shape_checked():
    model = FusionModel(tiny("pr", 0))
    assert fuse_pr(np.zeros(4), np.zeros(4), model).shape == (4,)
    with pytest.raises(ValueError):
        fuse_pr(np.zeros(3), np.zeros(4), model)


def test_predict_object_depth_is_exp_of_head():
    model = FusionModel(tiny("pl", 0))
    f = np.random.default_rng(0).normal(size=4)
    assert predict_object_depth(f, model) == pytest.approx(math.exp(model.head_batch(f[None])[0]))


def test_build_window_compensates_into_current_frame():
    model = FusionModel(tiny("prt", 1))
    pts = np.random.default_rng(0).normal([0, 0, 15], 0.5, size=(30, 3))
    world = pose_from_euler((0, 0, 0), (0, 0, 0))
    moved = pose_from_euler((0, 0, 2.0), (0, 0, 0))
    # the same static points seen from a camera 2 m further along +z
    later = PseudoLiDARPatch(pts - [0, 0, 2.0])
    _, cues, _, mask = build_window([PseudoLiDARPatch(pts), later], [world, moved], model)
    np.testing.assert_allclose(cues[0], cues[1], atol=1e-12)
    assert mask.all()
    with pytest.raises(ValueError, match="current"):
        build_window([later, None], [world, None], model)


def test_forward_prt_requires_prt_model():
    app = np.zeros((4, 20, 30), dtype=np.float32)
    patch = PseudoLiDARPatch(np.random.default_rng(0).normal([0, 0, 10], 0.5, size=(20, 3)))
    pose = pose_from_euler((0, 0, 0), (0, 0, 0))
    z = forward_prt([patch], [pose], app, BBox2D(5, 5, 15, 15), FusionModel(tiny("prt", 1)))
    assert z > 0
    with pytest.raises(ValueError):
        forward_prt([patch], [pose], app, BBox2D(5, 5, 15, 15), FusionModel(tiny("pr", 0)))


# ------------------------------------------------------------------ training


def test_residual_loss_regimes():
    r = np.array([0.01, -0.2])
    loss, grad = residual_loss(r, beta=0.05)
    assert loss == pytest.approx(np.mean([0.5 * 0.01**2 / 0.05, 0.2 - 0.025]))
    np.testing.assert_allclose(grad, [0.01 / 0.05 / 2, -1 / 2])


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(learning_rate=1e-2, final_lr_fraction=0.1)
    assert _lr_at(cfg, 0, 100) == pytest.approx(1e-2)
    assert _lr_at(cfg, 99, 100) == pytest.approx(1e-3)


def _toy_dataset(cfg, n=64, seed=0):
    b = random_batch(cfg, n, seed)
    b.log_depth = 2.5 + 0.3 * np.tanh(b.cues[:, -1, 0])
    return b


def test_training_deterministic_and_reduces_loss():
    cfg = tiny("pl", 0)
    data = _toy_dataset(cfg)
    tc = TrainConfig(epochs=8, batch_size=16, seed=3)
    m1, h1 = train(FusionModel(cfg), data, tc)
    m2, h2 = train(FusionModel(cfg), data, tc)
    assert h1 == h2
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    assert h1[-1] < h1[0]


def test_training_does_not_mutate_input_model():
    model = FusionModel(tiny("rgb", 0))
    before = {k: v.copy() for k, v in model.params.items()}
    train(model, _toy_dataset(model.config, 16), TrainConfig(epochs=1))
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_divergence_detected():
    model = FusionModel(tiny("pl", 0))
    data = _toy_dataset(model.config, 8)
    data.log_depth[0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(model, data, TrainConfig(epochs=1))


def test_epoch_checkpoints(tmp_path):
    model = FusionModel(tiny("pl", 0))
    train(model, _toy_dataset(model.config, 8), TrainConfig(epochs=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_000.ckpt", "epoch_001.ckpt"]


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(epochs=0), dict(loss="l1"), dict(beta1=1.0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
