"""Deterministic stand-in for the train/evaluate cycle.

Maps the model's current parameter reduction to a synthetic accuracy and
hands out fixed pseudo-random per-filter scores, so the controller's rollback,
step-halving and convergence logic can be exercised exhaustively in
milliseconds. Masking, accounting and checkpointing are the real thing; only
training is substituted.
"""

from __future__ import annotations

import math

import numpy as np

from .accounting import cost_table, layer_weights, reductions
from .attention import AttentionReport
from .config import OracleSpec
from .graph import ModelGraph


def oracle_evaluate(spec: OracleSpec, params_reduction_pct: float) -> float:
    """Synthetic accuracy for a given parameter-reduction percentage."""
    red = float(params_reduction_pct)
    if not (0 <= red <= 100):
        raise ValueError(f"reduction {red} out of [0, 100]")
    if spec.curve == "step":
        acc = spec.plateau if red <= spec.knee else spec.plateau - spec.drop
    elif spec.curve == "logistic":
        acc = spec.plateau - spec.drop / (1 + math.exp(-(red - spec.knee) / spec.width))
    else:  # piecewise-linear
        acc = spec.plateau - spec.slope * max(0.0, red - spec.knee)
    if spec.noise_std > 0:
        rng = np.random.default_rng((spec.seed, int(round(red * 1e6))))
        acc += float(rng.normal(0, spec.noise_std))
    return acc


class OracleTrainer:
    """Trainer backend driven by an accuracy curve instead of real training.

    Per-filter scores are drawn once per filter and scaled by the layer's
    current cost share, so a global threshold T prunes exactly the filters
    whose latent score is <= T (mirroring how layer-local thresholds divide
    out the layer weights).
    """

    def __init__(self, spec: OracleSpec, goal: str = "params"):
        self.spec = spec
        self.goal = goal
        self.base_table = None
        self._latent: dict[int, np.ndarray] = {}

    def baseline(self, model: ModelGraph) -> float:
        rng = np.random.default_rng(self.spec.seed)
        for layer in model.prunable_layers():
            self._latent[layer] = rng.uniform(0.0, 1.0, size=model.masks[layer].size)
        self.base_table = cost_table(model)
        return oracle_evaluate(self.spec, 0.0)

    def current_reduction(self, model: ModelGraph) -> float:
        pred, fred = reductions(cost_table(model), self.base_table)
        return pred if self.goal == "params" else fred

    def rewind(self, model: ModelGraph) -> None:
        model.apply_masks()

    def retrain(self, model: ModelGraph) -> float:
        return oracle_evaluate(self.spec, self.current_reduction(model))

    def attentions(self, model: ModelGraph, round_index: int = 0) -> AttentionReport:
        weights = layer_weights(cost_table(model), self.goal)
        scores, indices = {}, {}
        for layer in model.prunable_layers():
            mask = model.masks[layer]
            indices[layer] = np.flatnonzero(mask)
            scores[layer] = self._latent[layer][mask] * weights[layer]
        return AttentionReport(scores, indices, self.spec.seed, round_index)

    def feasible_reductions(self, model: ModelGraph) -> list[tuple[float, float]]:
        """(threshold, reduction) pairs achievable by sweeping the latent
        score cutoff. Test oracle for the controller's converged optimum."""
        probe = model.copy()
        points = [(0.0, 0.0)]
        cuts = sorted(set(float(v) for lat in self._latent.values() for v in lat))
        for t in cuts:
            probe2 = model.copy()
            for layer in probe2.prunable_layers():
                lat = self._latent[layer]
                doomed = [int(j) for j in np.argsort(lat) if lat[j] <= t]
                if doomed:
                    probe2.prune_filters(layer, doomed)
            pred, fred = reductions(cost_table(probe2), self.base_table)
            points.append((t, pred if self.goal == "params" else fred))
        del probe
        return points
