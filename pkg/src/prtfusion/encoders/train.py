"""Smooth-L1 log-depth loss, Adam optimizer and the deterministic training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import Batch, FusionModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 64
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    final_lr_fraction: float = 0.05
    loss: str = "smooth_l1"
    huber_beta: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam moment coefficients must lie in [0, 1)")
        if self.loss not in ("smooth_l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.huber_beta <= 0:
            raise ValueError("huber_beta must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def residual_loss(residual: np.ndarray, kind: str = "smooth_l1", beta: float = 0.05):
    """Mean loss over log-depth residuals and its derivative w.r.t. each residual."""
    n = residual.size
    if kind == "l2":
        return float(0.5 * np.mean(residual**2)), residual / n
    a = np.abs(residual)
    quad = a < beta
    loss = np.where(quad, 0.5 * residual**2 / beta, a - 0.5 * beta)
    grad = np.where(quad, residual / beta, np.sign(residual)) / n
    return float(loss.mean()), grad


def loss_and_gradients(model: FusionModel, batch: Batch, config: TrainConfig = TrainConfig()):
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.log_depth is None:
        raise ValueError("batch carries no depth targets")
    out, cache = model.forward(batch)
    loss, dres = residual_loss(out - batch.log_depth, config.loss, config.huber_beta)
    return loss, model.backward(cache, dres)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.cfg = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1c = 1 - c.beta1**self.t
        b2c = 1 - c.beta2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params[k] -= lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + c.eps)


def _lr_at(config: TrainConfig, step: int, total: int) -> float:
    # cosine decay from lr to lr * final_lr_fraction
    frac = step / max(total - 1, 1)
    lo = config.learning_rate * config.final_lr_fraction
    return lo + 0.5 * (config.learning_rate - lo) * (1 + math.cos(math.pi * frac))


def train(model: FusionModel, dataset: Batch, config: TrainConfig, checkpoint_dir: str | Path | None = None):
    """Mini-batch Adam on a copy of ``model``. Returns (trained model, per-epoch mean loss)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    from ..archive import write_checkpoint

    model = model.copy()
    opt = Adam(model.params, config)
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size : (s + 1) * config.batch_size]
            loss, grads = loss_and_gradients(model, dataset.take(idx), config)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, step {s} (loss={loss})")
            opt.step(model.params, grads, _lr_at(config, step, total))
            if not all(np.all(np.isfinite(v)) for v in model.params.values()):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}, step {s}")
            step += 1
            losses.append(loss * len(idx))
        history.append(float(np.sum(losses) / n))
        log.debug("epoch %d loss %.5f", epoch, history[-1])
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir)
            path.mkdir(parents=True, exist_ok=True)
            write_checkpoint(model, path / f"epoch_{epoch:03d}.ckpt")
    return model, history
