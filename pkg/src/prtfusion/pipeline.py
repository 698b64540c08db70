"""Sequences -> tracklets -> per-object model inputs, plus the standard benchmark experiment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .encoders.features import N_CUES, appearance_dim, appearance_input, prepare_patch
from .encoders.model import Batch, FusionModel, ModelConfig
from .encoders.train import TrainConfig, train
from .geometry import PseudoLiDARPatch, compensate_ego_motion, crop_patch
from .metrics import DepthMetrics, depth_metrics
from .scenesim import Sequence, SimConfig, generate_sequence
from .tracking import TrackerParams, Tracklet, TrackletEntry, track_sequence_2d

log = logging.getLogger(__name__)

ASSOCIATIONS = ("gt", "predicted")


def gt_tracklets(seq: Sequence) -> list[Tracklet]:
    """Tracklets from simulator object ids; entry payloads are label indices."""
    by_id: dict[int, Tracklet] = {}
    for frame in seq.frames:
        for li, obj in enumerate(frame.objects):
            by_id.setdefault(obj.id, Tracklet(obj.id)).entries.append(
                TrackletEntry(frame.frame_index, obj.bbox2d, li)
            )
    return [by_id[k] for k in sorted(by_id)]


def predicted_tracklets(seq: Sequence, params: TrackerParams = TrackerParams()) -> list[Tracklet]:
    """Tracklets from the 2D Kalman tracker run on the ground-truth 2D boxes."""
    return track_sequence_2d([[o.bbox2d for o in f.objects] for f in seq.frames], params)


def tracklets_for(seq: Sequence, association: str, params: TrackerParams = TrackerParams()) -> list[Tracklet]:
    if association == "gt":
        return gt_tracklets(seq)
    if association == "predicted":
        return predicted_tracklets(seq, params)
    raise ValueError(f"association must be one of {ASSOCIATIONS}, got {association!r}")


@dataclass(frozen=True)
class ObjectRef:
    sequence: int
    frame: int
    label: int
    object_id: int


def _patch_seed(seq_seed: int, frame: int, label: int) -> int:
    return (int(seq_seed) * 1_000_003 + frame * 1009 + label) % (2**63)


class _SequenceCache:
    def __init__(self, seq: Sequence, grid: int):
        self.seq = seq
        self.grid = grid
        self._patch: dict[tuple[int, int], PseudoLiDARPatch] = {}
        self._app: dict[tuple[int, int], np.ndarray] = {}
        self._prepared: dict[tuple, tuple[np.ndarray, np.ndarray, bool]] = {}
        self._tracklets: dict[tuple, list[Tracklet]] = {}

    def prepared(self, frame: int, label: int, into: int | None, n: int):
        """Encoder inputs for a patch, optionally ego-compensated into frame ``into``."""
        key = (frame, label, into, n)
        if key not in self._prepared:
            patch = self.patch(frame, label)
            if into is not None:
                patch = compensate_ego_motion(patch, self.seq.frames[into].ego_pose, self.seq.frames[frame].ego_pose)
            self._prepared[key] = prepare_patch(patch.points, n, _patch_seed(self.seq.seed, frame, label))
        return self._prepared[key]

    def tracklets(self, association: str, params: TrackerParams) -> list[Tracklet]:
        key = (association, params)
        if key not in self._tracklets:
            self._tracklets[key] = tracklets_for(self.seq, association, params)
        return self._tracklets[key]

    def patch(self, frame: int, label: int) -> PseudoLiDARPatch:
        key = (frame, label)
        if key not in self._patch:
            fo = self.seq.frames[frame]
            self._patch[key] = crop_patch(fo.depth_noisy, self.seq.intrinsics, fo.objects[label].bbox2d, frame)
        return self._patch[key]

    def appearance(self, frame: int, label: int) -> np.ndarray:
        key = (frame, label)
        if key not in self._app:
            fo = self.seq.frames[frame]
            self._app[key] = appearance_input(fo.appearance, fo.objects[label].bbox2d, self.grid)
        return self._app[key]


class SampleCache:
    """Reuses cropped, compensated and resampled patches across calls to
    :func:`build_samples` (e.g. several heads trained on the same sequences).
    Holds references to the sequences it has seen."""

    def __init__(self):
        self._by_seq: dict[tuple[int, int], _SequenceCache] = {}

    def get(self, seq: Sequence, grid: int) -> _SequenceCache:
        key = (id(seq), grid)
        if key not in self._by_seq:
            self._by_seq[key] = _SequenceCache(seq, grid)
        return self._by_seq[key]


def build_samples(
    sequences: list[Sequence],
    model_config: ModelConfig,
    association: str = "gt",
    tracker_params: TrackerParams = TrackerParams(),
    cache: SampleCache | None = None,
) -> tuple[Batch, list[ObjectRef]]:
    """One sample per labeled object per frame; the window holds the object's tracklet
    entries at frames t-n .. t (missing frames are masked slots)."""
    if association not in ASSOCIATIONS:
        raise ValueError(f"association must be one of {ASSOCIATIONS}, got {association!r}")
    cache = cache if cache is not None else SampleCache()
    k = model_config.slots
    window = k - 1
    n = model_config.n_points
    d_app = appearance_dim(model_config.grid)
    pts, cues, nonempty, masks, apps, targets, refs = [], [], [], [], [], [], []
    for si, seq in enumerate(sequences):
        sc = cache.get(seq, model_config.grid)
        lookup: dict[tuple[int, int], tuple[Tracklet, int]] = {}
        if window > 0:
            for tr in sc.tracklets(association, tracker_params):
                for ei, e in enumerate(tr.entries):
                    lookup[(e.frame_index, e.payload)] = (tr, ei)
        for frame in seq.frames:
            t = frame.frame_index
            for li, obj in enumerate(frame.objects):
                s_pts = np.zeros((k, n, 3))
                s_cues = np.zeros((k, N_CUES))
                s_ne = np.zeros(k, dtype=bool)
                s_mask = np.zeros(k, dtype=bool)
                s_app = np.zeros((k, d_app))
                window_entries = {t: li}
                if (t, li) in lookup:
                    tr, ei = lookup[(t, li)]
                    for e in tr.entries[:ei]:
                        if t - window <= e.frame_index < t:
                            window_entries[e.frame_index] = e.payload
                for f, lab in window_entries.items():
                    slot = k - 1 - (t - f)
                    into = t if (f != t and model_config.compensate) else None
                    local, c, ne = sc.prepared(f, lab, into, n)
                    s_pts[slot], s_cues[slot], s_ne[slot], s_mask[slot] = local, c, ne, True
                    s_app[slot] = sc.appearance(f, lab)
                pts.append(s_pts)
                cues.append(s_cues)
                nonempty.append(s_ne)
                masks.append(s_mask)
                apps.append(s_app)
                targets.append(math.log(obj.gt_depth))
                refs.append(ObjectRef(si, t, li, obj.id))
    if not refs:
        empty = Batch(np.zeros((0, k, n, 3)), np.zeros((0, k, N_CUES)), np.zeros((0, k), bool),
                      np.zeros((0, k), bool), np.zeros((0, k, d_app)), np.zeros(0))
        return empty, refs
    batch = Batch(
        np.stack(pts), np.stack(cues), np.stack(nonempty), np.stack(masks), np.stack(apps), np.array(targets)
    )
    return batch, refs


# ------------------------------------------------------------------ benchmark


def benchmark_sim_config() -> SimConfig:
    """Standard synthetic benchmark scene: moving ego with body pitch jitter, mixed
    static/moving vehicles, i.i.d. depth noise at 8% mean relative error plus an
    object-scale structured error."""
    return SimConfig(n_frames=16, n_vehicles=10, ego_speed_range=(5.0, 20.0), ego_curvature_max=0.03, pitch_jitter=0.01, pitch_correlation_time=2.0, structured_noise=0.09)


HEAD_CONFIGS: dict[str, dict] = {
    "pl": dict(kind="pl", window=0),
    "rgb": dict(kind="rgb", window=0),
    "pr": dict(kind="pr", window=0),
    "t": dict(kind="t", window=1, compensate=True),
    "t-nocomp": dict(kind="t", window=1, compensate=False),
    "t3": dict(kind="t", window=3, compensate=True),
    "t3-nocomp": dict(kind="t", window=3, compensate=False),
    "rgb-t": dict(kind="rgb-t", window=1, compensate=False),
    "prt": dict(kind="prt", window=1, compensate=True),
    "prt3": dict(kind="prt", window=3, compensate=True),
}


# heads trained by the standard benchmark; "t-nocomp" and "prt3" remain available
DEFAULT_HEADS = ("pl", "rgb", "pr", "t", "t3", "t3-nocomp", "rgb-t", "prt")


@dataclass
class BenchmarkConfig:
    sim: SimConfig = field(default_factory=benchmark_sim_config)
    n_train_sequences: int = 32
    n_eval_sequences: int = 8
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))
    heads: tuple[str, ...] = DEFAULT_HEADS
    # 64 points per patch keeps three seeds of every head inside the runtime budget
    model_overrides: dict = field(default_factory=lambda: {"n_points": 64})

    def model_config(self, head: str, seed: int) -> ModelConfig:
        if head not in HEAD_CONFIGS:
            raise ValueError(f"unknown head {head!r}; expected one of {tuple(HEAD_CONFIGS)}")
        return ModelConfig(**{**HEAD_CONFIGS[head], **self.model_overrides, "seed": seed})


def benchmark_sequences(cfg: BenchmarkConfig, seed: int) -> tuple[list[Sequence], list[Sequence]]:
    base = 10_000 * (seed + 1)
    train_seqs = [generate_sequence(cfg.sim, base + i) for i in range(cfg.n_train_sequences)]
    eval_seqs = [generate_sequence(cfg.sim, base + 5_000 + i) for i in range(cfg.n_eval_sequences)]
    return train_seqs, eval_seqs


def train_head(cfg: BenchmarkConfig, head: str, seed: int, train_seqs: list[Sequence], cache: SampleCache | None = None):
    """Train one head on ground-truth association."""
    mcfg = cfg.model_config(head, seed)
    data, _ = build_samples(train_seqs, mcfg, "gt", cache=cache)
    model, history = train(FusionModel(mcfg), data, replace(cfg.train, seed=seed))
    return model, history


def evaluate_head(model: FusionModel, eval_seqs: list[Sequence], association: str = "gt", cache: SampleCache | None = None):
    data, refs = build_samples(eval_seqs, model.config, association, cache=cache)
    pred = model.predict_depth(data)
    gt = np.exp(data.log_depth)
    return depth_metrics(pred, gt), pred, refs


@dataclass
class SeedResult:
    seed: int
    metrics: dict[str, dict[str, DepthMetrics]]  # head -> association -> metrics
    histories: dict[str, list[float]]
    models: dict[str, FusionModel]
    eval_sequences: list[Sequence]
    predictions: dict[str, dict[str, tuple[np.ndarray, list[ObjectRef]]]]


def run_seed(cfg: BenchmarkConfig, seed: int, associations=ASSOCIATIONS) -> SeedResult:
    train_seqs, eval_seqs = benchmark_sequences(cfg, seed)
    cache = SampleCache()
    metrics, histories, models, preds = {}, {}, {}, {}
    for head in cfg.heads:
        model, history = train_head(cfg, head, seed, train_seqs, cache)
        models[head], histories[head] = model, history
        metrics[head], preds[head] = {}, {}
        for assoc in associations:
            m, p, refs = evaluate_head(model, eval_seqs, assoc, cache)
            metrics[head][assoc] = m
            preds[head][assoc] = (p, refs)
        log.info("seed %d head %s: %s", seed, head, {a: round(metrics[head][a].abs_rel, 5) for a in associations})
    return SeedResult(seed, metrics, histories, models, eval_seqs, preds)


def median_abs_rel(results: list[SeedResult], head: str, association: str = "gt") -> float:
    return float(np.median([r.metrics[head][association].abs_rel for r in results]))
