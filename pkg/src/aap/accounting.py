"""Parameter/FLOP estimators and layer-aware threshold derivation.

Counts follow the weight-only estimates: a conv layer costs
n_in * k^2 * n_out parameters and 2 * h_out * w_out * that FLOPs; linear
layers are the k = 1, h = w = 1 case. Biases and ReLU/pool work are excluded.
All entries use effective (masked) dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import ModelGraph


def layer_params(n_in: int, k: int, n_out: int) -> int:
    return n_in * k * k * n_out


def layer_flops(h: int, w: int, n_params: int) -> int:
    return 2 * h * w * n_params


@dataclass(frozen=True)
class LayerCost:
    layer_id: int
    kind: str
    n_in: int
    n_out: int
    kernel: int
    out_h: int
    out_w: int
    params: int
    flops: int
    prunable: bool


@dataclass(frozen=True)
class CostTable:
    layers: tuple[LayerCost, ...]
    total_params: int
    total_flops: int
    prunable_params: int
    prunable_flops: int

    def by_layer(self) -> dict[int, LayerCost]:
        return {c.layer_id: c for c in self.layers}


def cost_table(model: ModelGraph) -> CostTable:
    counts = model.active_counts()
    shapes = model.layer_shapes()
    rows = []
    for i in model.param_layers():
        s = model.specs[i]
        n_out, n_in = counts[i]
        if s.kind == "conv2d":
            k = s.kernel
            _, h, w = shapes[i]
        else:
            k, h, w = 1, 1, 1
        p = layer_params(n_in, k, n_out)
        rows.append(LayerCost(i, s.kind, n_in, n_out, k, h, w, p,
                              layer_flops(h, w, p), s.prunable))
    return CostTable(
        layers=tuple(rows),
        total_params=sum(r.params for r in rows),
        total_flops=sum(r.flops for r in rows),
        prunable_params=sum(r.params for r in rows if r.prunable),
        prunable_flops=sum(r.flops for r in rows if r.prunable),
    )


def layer_weights(table: CostTable, goal: str = "params") -> dict[int, float]:
    """Each prunable layer's share of remaining cost; shares sum to 1."""
    if goal == "params":
        total = table.prunable_params
        value = lambda r: r.params
    elif goal == "flops":
        total = table.prunable_flops
        value = lambda r: r.flops
    else:
        raise ValueError(f"unknown goal {goal!r}")
    if total <= 0:
        raise ValueError("no prunable cost remaining")
    return {r.layer_id: value(r) / total for r in table.layers if r.prunable}


def local_thresholds(table: CostTable, global_t: float, goal: str = "params",
                     ) -> dict[int, float]:
    """Per-layer threshold: the global threshold scaled by the layer's share."""
    if global_t < 0:
        raise ValueError("global threshold must be >= 0")
    return {i: global_t * w for i, w in layer_weights(table, goal).items()}


def reductions(now: CostTable, baseline: CostTable) -> tuple[float, float]:
    """(params, flops) percentage drop of `now` relative to `baseline`."""
    if baseline.total_params <= 0 or baseline.total_flops <= 0:
        raise ValueError("baseline totals must be positive")
    return (100.0 * (1.0 - now.total_params / baseline.total_params),
            100.0 * (1.0 - now.total_flops / baseline.total_flops))
