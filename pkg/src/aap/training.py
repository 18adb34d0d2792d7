"""Nesterov-SGD training loop with a step LR schedule and mask preservation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import TrainConfig
from .data import Dataset, augment, batch_indices
from .graph import ModelGraph


class DivergedTrainingError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


def lr_at(config: TrainConfig, epoch: int) -> float:
    if not (0 <= epoch < config.total_epochs):
        raise ValueError(f"epoch {epoch} out of range [0, {config.total_epochs})")
    n_decays = sum(1 for d in config.decay_epochs if d <= epoch)
    return config.initial_lr * config.decay_factor ** n_decays


@dataclass
class OptimizerState:
    """Per-parameter Nesterov momentum buffers."""
    velocity: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, model: ModelGraph) -> "OptimizerState":
        return cls({i: {k: np.zeros_like(v) for k, v in p.items()}
                    for i, p in model.params.items()})


def sgd_step(model: ModelGraph, grads, state: OptimizerState,
             lr: float, momentum: float, weight_decay: float) -> None:
    for i, p in model.params.items():
        mask = model.masks.get(i)
        for key in ("w", "b"):
            g = grads[i][key]
            if weight_decay and key == "w":
                g = g + weight_decay * p[key]
            v = state.velocity[i][key]
            v *= momentum
            v += g
            p[key] -= lr * (g + momentum * v)
        if mask is not None:
            p["w"][~mask] = 0
            p["b"][~mask] = 0


def train_run(model: ModelGraph, dataset: Dataset, config: TrainConfig,
              start_epoch: int, end_epoch: int,
              state: Optional[OptimizerState] = None,
              epoch_hook: Optional[Callable[[int, ModelGraph], None]] = None,
              ) -> OptimizerState:
    """Train `model` in place for epochs [start_epoch, end_epoch).

    `epoch_hook(n, model)` fires after `n` epochs have completed. The LR
    schedule is a pure function of the epoch index, so resuming from
    `start_epoch` reproduces a rewound schedule exactly.
    """
    if not (0 <= start_epoch <= end_epoch <= config.total_epochs):
        raise ValueError(f"bad epoch range [{start_epoch}, {end_epoch})")
    if state is None:
        state = OptimizerState.zeros_like(model)
    model.apply_masks()
    for epoch in range(start_epoch, end_epoch):
        lr = lr_at(config, epoch)
        aug_rng = np.random.default_rng((config.seed, epoch, 0xA06))
        for idx in batch_indices(len(dataset), config.batch_size, config.seed, epoch):
            x = dataset.images[idx]
            y = dataset.labels[idx]
            x = augment(x, config.augment, aug_rng)
            loss, grads = model.loss_and_grads(x, y)
            if not np.isfinite(loss):
                raise DivergedTrainingError(epoch)
            sgd_step(model, grads, state, lr, config.momentum, config.weight_decay)
        if epoch_hook is not None:
            epoch_hook(epoch + 1, model)
    return state


def evaluate_accuracy(model: ModelGraph, dataset: Dataset, batch_size: int = 512) -> float:
    """Top-1 accuracy in percent; argmax ties break to the lowest class index."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation split")
    correct = 0
    for lo in range(0, len(dataset), batch_size):
        x = dataset.images[lo:lo + batch_size]
        y = dataset.labels[lo:lo + batch_size]
        logits, _, _ = model.forward(x)
        correct += int((logits.argmax(axis=1) == y).sum())
    return 100.0 * correct / len(dataset)
