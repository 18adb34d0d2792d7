"""Per-filter importance scoring from post-ReLU activation maps, plus
weight-magnitude baseline criteria."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import AttentionConfig
from .data import Dataset
from .graph import ModelGraph


@dataclass
class AttentionReport:
    """Scores over the ACTIVE filters of each prunable layer for one batch."""
    scores: dict[int, np.ndarray]            # layer id -> scores, len == active count
    filter_indices: dict[int, np.ndarray]    # layer id -> original filter indices
    batch_seed: int = 0
    round_index: int = 0

    def as_rows(self):
        for layer, s in sorted(self.scores.items()):
            for f, v in zip(self.filter_indices[layer], s):
                yield layer, int(f), float(v)


def attention_value(a: np.ndarray, function: str = "mean", p: float = 1.0) -> float:
    """Scalar importance of one activation map: mean/max/sum of |a|^p."""
    a = np.asarray(a)
    if a.size == 0:
        raise ValueError("empty activation map")
    powered = np.abs(a) ** p
    if function == "mean":
        return float(powered.mean())
    if function == "max":
        return float(powered.max())
    if function == "sum":
        return float(powered.sum())
    raise ValueError(f"unknown attention function {function!r}")


def _batch_scores(act: np.ndarray, function: str, p: float) -> np.ndarray:
    """Per-filter score for a batch of maps [B, F, ...]: per-image attention
    averaged over the batch."""
    powered = np.abs(act.reshape(act.shape[0], act.shape[1], -1)) ** p
    if function == "mean":
        per_image = powered.mean(axis=2)
    elif function == "max":
        per_image = powered.max(axis=2)
    elif function == "sum":
        per_image = powered.sum(axis=2)
    else:
        raise ValueError(f"unknown attention function {function!r}")
    return per_image.mean(axis=0)


def evaluate_model_attentions(model: ModelGraph, dataset: Dataset,
                              config: AttentionConfig, round_index: int = 0,
                              ) -> AttentionReport:
    """Score every active filter on ONE randomly drawn batch of data."""
    if config.batch_size > len(dataset):
        raise ValueError(f"batch_size {config.batch_size} > dataset size {len(dataset)}")
    rng = np.random.default_rng((config.batch_seed, round_index))
    idx = rng.choice(len(dataset), size=config.batch_size, replace=False)
    x = dataset.images[idx]
    return attentions_for_batch(model, x, config, round_index)


def attentions_for_batch(model: ModelGraph, x: np.ndarray,
                         config: AttentionConfig, round_index: int = 0,
                         ) -> AttentionReport:
    _, _, activations = model.forward(x, capture=True)
    scores: dict[int, np.ndarray] = {}
    indices: dict[int, np.ndarray] = {}
    for layer in model.prunable_layers():
        mask = model.masks[layer]
        act = activations[layer]
        if act.ndim == 2:  # linear units: 1x1 maps
            act = act[:, :, None]
        all_scores = _batch_scores(act, config.function, config.power)
        indices[layer] = np.flatnonzero(mask)
        scores[layer] = all_scores[mask]
    return AttentionReport(scores, indices, config.batch_seed, round_index)


def l1_criterion(filter_weights: np.ndarray, normalize_by_size: bool = False) -> float:
    """L1 magnitude of one filter; optionally divided by its element count."""
    w = np.asarray(filter_weights)
    total = float(np.abs(w).sum())
    return total / w.size if normalize_by_size else total
