"""YAML run configuration and report writers.

A config file is a mapping with optional sections ``sim``, ``model``, ``train``, ``tracker``,
``profile`` and ``benchmark``. Missing keys keep their defaults; unknown keys are errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .encoders.train import TrainConfig
from .headroom import PerturbationProfile
from .metrics import DepthMetrics
from .pipeline import BenchmarkConfig, benchmark_sim_config
from .scenesim import SimConfig
from .tracking import TrackerParams

SECTIONS = ("sim", "model", "train", "tracker", "profile", "benchmark")


class ConfigError(ValueError):
    pass


def _apply(obj, data: dict | None, section: str):
    if data is None:
        return obj
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return replace(obj, **values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {section!r} section: {err}") from None


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=benchmark_sim_config)
    model: dict = field(default_factory=lambda: {"n_points": 64})  # ModelConfig overrides
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20))
    tracker: TrackerParams = field(default_factory=TrackerParams)
    profile: PerturbationProfile = field(default_factory=PerturbationProfile)
    n_train_sequences: int = 32
    n_eval_sequences: int = 8

    @classmethod
    def from_mapping(cls, data: dict | None) -> "RunConfig":
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}; expected {list(SECTIONS)}")
        cfg = cls()
        cfg.sim = _apply(cfg.sim, data.get("sim"), "sim")
        try:
            cfg.sim.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        model = data.get("model") or {}
        if not isinstance(model, dict):
            raise ConfigError("section 'model' must be a mapping")
        cfg.model = {**cfg.model, **model}
        cfg.train = _apply(cfg.train, data.get("train"), "train")
        cfg.tracker = _apply(cfg.tracker, data.get("tracker"), "tracker")
        cfg.profile = _apply(cfg.profile, data.get("profile"), "profile")
        bench = data.get("benchmark") or {}
        unknown = sorted(set(bench) - {"n_train_sequences", "n_eval_sequences"})
        if unknown:
            raise ConfigError(f"unknown keys in 'benchmark': {unknown}")
        cfg.n_train_sequences = int(bench.get("n_train_sequences", cfg.n_train_sequences))
        cfg.n_eval_sequences = int(bench.get("n_eval_sequences", cfg.n_eval_sequences))
        return cfg

    def benchmark(self, heads: tuple[str, ...] | None = None) -> BenchmarkConfig:
        cfg = BenchmarkConfig(
            sim=self.sim,
            n_train_sequences=self.n_train_sequences,
            n_eval_sequences=self.n_eval_sequences,
            train=self.train,
            model_overrides=dict(self.model),
        )
        return cfg if heads is None else replace(cfg, heads=tuple(heads))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML ({err})") from None
    return RunConfig.from_mapping(data)


# -------------------------------------------------------------------- reports

DEPTH_COLUMNS = (("abs_rel", "Abs Rel"), ("sq_rel", "Sq Rel"), ("rmse", "RMSE"), ("rmse_log", "RMSE log"), ("delta1", "d<1.25"))


def format_depth_table(rows: dict[str, DepthMetrics], title: str | None = None) -> str:
    """One row per head, the five depth metrics as columns (Abs Rel in percent)."""
    header = ["head"] + [label for _, label in DEPTH_COLUMNS]
    lines = [header]
    for name, m in rows.items():
        d = m.as_dict()
        cells = [name, f"{100 * d['abs_rel']:.3f}%"] + [f"{d[k]:.4f}" for k, _ in DEPTH_COLUMNS[1:]]
        lines.append(cells)
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    body = "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in lines)
    return f"{title}\n{body}" if title else body


def write_key_values(path: str | Path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
