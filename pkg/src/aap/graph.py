"""Masked model representation: layer specs, parameters, filter masks.

A ModelGraph is a plain sequential network (conv2d / relu / maxpool2d /
flatten / linear). Prunable layers (conv2d and linear, except the final
classifier) carry a boolean filter mask over their output channels/units.
Pruning is structured: a whole filter is masked, and `compact()` materializes
the physically smaller dense model, removing the coupled input slices of the
downstream consumer layer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn


class LayerExhaustedError(RuntimeError):
    """Pruning request would deactivate every filter of a layer."""

    def __init__(self, layer_id: int):
        super().__init__(f"layer {layer_id} would have no active filters")
        self.layer_id = layer_id


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv2d | relu | maxpool2d | flatten | linear
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool_size: int = 2
    in_units: int = 0
    out_units: int = 0
    prunable: bool = False

    def __post_init__(self):
        if self.kind == "conv2d":
            if self.kernel < 1 or self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"invalid conv2d spec: {self}")
        elif self.kind == "linear":
            if self.in_units < 1 or self.out_units < 1:
                raise ValueError(f"invalid linear spec: {self}")
        elif self.kind not in ("relu", "maxpool2d", "flatten"):
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def n_out(self) -> int:
        return self.out_channels if self.kind == "conv2d" else self.out_units


@dataclass
class PruneResult:
    layer_id: int
    pruned: list[int]
    skipped: list[int] = field(default_factory=list)
    exhausted: bool = False


class ModelGraph:
    def __init__(self, specs: list[LayerSpec], input_shape: tuple[int, int, int],
                 dtype=np.float32):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.params: dict[int, dict[str, np.ndarray]] = {}
        self.masks: dict[int, np.ndarray] = {
            i: np.ones(s.n_out, dtype=bool) for i, s in enumerate(self.specs) if s.prunable
        }
        self._validate_chain()

    # ---------------- construction ----------------

    def _validate_chain(self):
        shape = self.input_shape
        for i, s in enumerate(self.specs):
            shape = self._propagate(s, shape, i)
        self._out_shape = shape

    def _propagate(self, s: LayerSpec, shape, i):
        if s.kind == "conv2d":
            c, h, w = shape
            if c != s.in_channels:
                raise ValueError(f"layer {i}: expected {s.in_channels} channels, got {c}")
            return (s.out_channels,
                    nn.conv_out_size(h, s.kernel, s.stride, s.padding),
                    nn.conv_out_size(w, s.kernel, s.stride, s.padding))
        if s.kind == "maxpool2d":
            c, h, w = shape
            return (c, h // s.pool_size, w // s.pool_size)
        if s.kind == "flatten":
            return (int(np.prod(shape)),)
        if s.kind == "linear":
            (n,) = shape
            if n != s.in_units:
                raise ValueError(f"layer {i}: expected {s.in_units} units, got {n}")
            return (s.out_units,)
        return shape  # relu

    def layer_shapes(self) -> list[tuple]:
        """Output shape (without batch dim) of every layer."""
        shapes = []
        shape = self.input_shape
        for i, s in enumerate(self.specs):
            shape = self._propagate(s, shape, i)
            shapes.append(shape)
        return shapes

    def init_params(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        for i, s in enumerate(self.specs):
            if s.kind == "conv2d":
                fan_in = s.in_channels * s.kernel * s.kernel
                w = rng.normal(0, np.sqrt(2.0 / fan_in),
                               (s.out_channels, s.in_channels, s.kernel, s.kernel))
                self.params[i] = {"w": w.astype(self.dtype),
                                  "b": np.zeros(s.out_channels, dtype=self.dtype)}
            elif s.kind == "linear":
                w = rng.normal(0, np.sqrt(2.0 / s.in_units), (s.out_units, s.in_units))
                self.params[i] = {"w": w.astype(self.dtype),
                                  "b": np.zeros(s.out_units, dtype=self.dtype)}
        return self

    def astype(self, dtype) -> "ModelGraph":
        m = self.copy()
        m.dtype = np.dtype(dtype)
        for p in m.params.values():
            p["w"] = p["w"].astype(dtype)
            p["b"] = p["b"].astype(dtype)
        return m

    def copy(self) -> "ModelGraph":
        m = ModelGraph(self.specs, self.input_shape, self.dtype)
        m.params = {i: {k: v.copy() for k, v in p.items()} for i, p in self.params.items()}
        m.masks = {i: v.copy() for i, v in self.masks.items()}
        return m

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"input": self.input_shape,
             "layers": [vars(s) if not hasattr(s, "__dataclass_fields__") else
                        {f: getattr(s, f) for f in s.__dataclass_fields__}
                        for s in self.specs]},
            sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # ---------------- structure queries ----------------

    def param_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.kind in ("conv2d", "linear")]

    def prunable_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.prunable]

    def upstream_prunable(self, layer_id: int) -> Optional[int]:
        """Nearest prunable param layer feeding `layer_id`'s input channels."""
        for j in range(layer_id - 1, -1, -1):
            s = self.specs[j]
            if s.kind in ("conv2d", "linear"):
                return j if s.prunable else None
        return None

    def downstream_consumer(self, layer_id: int) -> Optional[int]:
        """Param layer whose input channels are fed by `layer_id`'s filters."""
        for j in range(layer_id + 1, len(self.specs)):
            if self.specs[j].kind in ("conv2d", "linear"):
                return j
        return None

    def spatial_multiplicity(self, layer_id: int) -> int:
        """Flattened units per channel of layer_id's output at its consumer."""
        consumer = self.downstream_consumer(layer_id)
        if consumer is None or self.specs[consumer].kind != "linear":
            return 1
        if self.specs[layer_id].kind == "linear":
            return 1
        shapes = self.layer_shapes()
        # shape right before the flatten
        for j in range(layer_id, consumer):
            if self.specs[j].kind == "flatten":
                c, h, w = shapes[j - 1]
                return h * w
        return 1

    def active_mask(self, layer_id: int) -> np.ndarray:
        s = self.specs[layer_id]
        if layer_id in self.masks:
            return self.masks[layer_id]
        return np.ones(s.n_out, dtype=bool)

    def input_channel_mask(self, layer_id: int) -> np.ndarray:
        """Active input channels/units of a param layer, after upstream masking."""
        s = self.specs[layer_id]
        n_in = s.in_channels if s.kind == "conv2d" else s.in_units
        up = self.upstream_prunable(layer_id)
        if up is None:
            return np.ones(n_in, dtype=bool)
        upmask = self.masks[up]
        mult = self.spatial_multiplicity(up)
        return np.repeat(upmask, mult)

    def active_counts(self) -> dict[int, tuple[int, int]]:
        """Per param layer: (active output filters/units, active input channels/units)."""
        out = {}
        for i in self.param_layers():
            s = self.specs[i]
            n_out = int(self.active_mask(i).sum())
            up = self.upstream_prunable(i)
            if up is None:
                n_in = s.in_channels if s.kind == "conv2d" else s.in_units
            elif s.kind == "conv2d":
                n_in = int(self.masks[up].sum())
            else:
                n_in = int(self.masks[up].sum()) * self.spatial_multiplicity(up)
            out[i] = (n_out, n_in)
        return out

    # ---------------- masking ----------------

    def apply_masks(self) -> "ModelGraph":
        for i, mask in self.masks.items():
            p = self.params[i]
            p["w"][~mask] = 0
            p["b"][~mask] = 0
        return self

    def prune_filters(self, layer_id: int, filter_indices) -> PruneResult:
        if layer_id not in self.masks:
            raise ValueError(f"layer {layer_id} is not prunable")
        mask = self.masks[layer_id]
        indices = list(dict.fromkeys(int(j) for j in filter_indices))
        for j in indices:
            if not (0 <= j < mask.size):
                raise ValueError(f"filter index {j} out of range for layer {layer_id}")
            if not mask[j]:
                raise ValueError(f"filter {j} of layer {layer_id} already pruned")
        result = PruneResult(layer_id, pruned=indices)
        if len(indices) >= int(mask.sum()):
            # floor rule: keep at least one filter; callers order indices by
            # ascending importance, so the tail of the list is retained
            keep = int(mask.sum()) - 1
            result = PruneResult(layer_id, pruned=indices[:keep],
                                 skipped=indices[keep:], exhausted=True)
        mask[result.pruned] = False
        self.apply_masks()
        return result

    # ---------------- execution ----------------

    def forward(self, x, capture: bool = False):
        """Returns (logits, caches, activations).

        `activations` maps prunable layer id -> its post-ReLU output for the
        batch (the raw layer output if no ReLU follows it directly).
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise nn.ShapeError(f"batch shape {x.shape[1:]} != model input {self.input_shape}")
        caches = []
        activations: dict[int, np.ndarray] = {}
        pending: Optional[int] = None  # prunable layer awaiting its ReLU
        for i, s in enumerate(self.specs):
            if s.kind == "conv2d":
                p = self.params[i]
                x, c = nn.conv2d_forward(x, p["w"], p["b"], s.stride, s.padding)
            elif s.kind == "linear":
                p = self.params[i]
                x, c = nn.linear_forward(x, p["w"], p["b"])
            elif s.kind == "relu":
                x, c = nn.relu_forward(x)
            elif s.kind == "maxpool2d":
                x, c = nn.maxpool2d_forward(x, s.pool_size)
            else:
                x, c = nn.flatten_forward(x)
            caches.append(c)
            if capture:
                if s.prunable:
                    pending = i
                    activations[i] = x  # overwritten by a directly following ReLU
                elif s.kind == "relu" and pending == i - 1:
                    activations[pending] = x
                    pending = None
                else:
                    pending = None
        return x, caches, activations

    def backward(self, dlogits, caches):
        """Gradients of every param layer; masked filters get exactly zero."""
        grads: dict[int, dict[str, np.ndarray]] = {}
        d = dlogits
        for i in range(len(self.specs) - 1, -1, -1):
            s = self.specs[i]
            c = caches[i]
            if s.kind == "conv2d":
                d, dw, db = nn.conv2d_backward(d, c)
                grads[i] = {"w": dw, "b": db}
            elif s.kind == "linear":
                d, dw, db = nn.linear_backward(d, c, self.params[i]["w"])
                grads[i] = {"w": dw, "b": db}
            elif s.kind == "relu":
                d = nn.relu_backward(d, c)
            elif s.kind == "maxpool2d":
                d = nn.maxpool2d_backward(d, c)
            else:
                d = nn.flatten_backward(d, c)
        for i, mask in self.masks.items():
            grads[i]["w"][~mask] = 0
            grads[i]["b"][~mask] = 0
        return grads

    def loss_and_grads(self, x, labels):
        logits, caches, _ = self.forward(x)
        loss, dlogits = nn.cross_entropy_loss(logits, labels)
        return loss, self.backward(dlogits, caches)

    # ---------------- compaction ----------------

    def compact(self) -> "ModelGraph":
        """Materialize the masked model as a physically smaller dense model."""
        self.apply_masks()
        new_specs: list[LayerSpec] = []
        new_params: dict[int, dict[str, np.ndarray]] = {}
        shapes = self.layer_shapes()
        for i, s in enumerate(self.specs):
            if s.kind in ("conv2d", "linear"):
                out_mask = self.active_mask(i)
                in_mask = self.input_channel_mask(i)
                w = self.params[i]["w"]
                b = self.params[i]["b"]
                if s.kind == "conv2d":
                    w2 = w[out_mask][:, in_mask]
                    spec2 = replace(s, in_channels=int(in_mask.sum()),
                                    out_channels=int(out_mask.sum()))
                else:
                    w2 = w[np.ix_(out_mask, in_mask)]
                    spec2 = replace(s, in_units=int(in_mask.sum()),
                                    out_units=int(out_mask.sum()))
                new_specs.append(spec2)
                new_params[len(new_specs) - 1] = {"w": np.ascontiguousarray(w2),
                                                  "b": b[out_mask].copy()}
            else:
                new_specs.append(s)
        m = ModelGraph(new_specs, self.input_shape, self.dtype)
        m.params = new_params
        return m


# ---------------- presets ----------------

def lenet5(num_classes: int = 10) -> ModelGraph:
    specs = [
        LayerSpec("conv2d", in_channels=1, out_channels=6, kernel=5, prunable=True),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", pool_size=2),
        LayerSpec("conv2d", in_channels=6, out_channels=16, kernel=5, prunable=True),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", pool_size=2),
        LayerSpec("flatten"),
        LayerSpec("linear", in_units=256, out_units=120, prunable=True),
        LayerSpec("relu"),
        LayerSpec("linear", in_units=120, out_units=84, prunable=True),
        LayerSpec("relu"),
        LayerSpec("linear", in_units=84, out_units=num_classes),
    ]
    return ModelGraph(specs, (1, 28, 28))


def lenet300(num_classes: int = 10) -> ModelGraph:
    specs = [
        LayerSpec("flatten"),
        LayerSpec("linear", in_units=784, out_units=300, prunable=True),
        LayerSpec("relu"),
        LayerSpec("linear", in_units=300, out_units=100, prunable=True),
        LayerSpec("relu"),
        LayerSpec("linear", in_units=100, out_units=num_classes),
    ]
    return ModelGraph(specs, (1, 28, 28))


def smallconv(num_classes: int = 10, image_size: int = 16) -> ModelGraph:
    s = image_size
    feat = 16 * (s // 4) * (s // 4)
    specs = [
        LayerSpec("conv2d", in_channels=1, out_channels=8, kernel=3, padding=1, prunable=True),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", pool_size=2),
        LayerSpec("conv2d", in_channels=8, out_channels=16, kernel=3, padding=1, prunable=True),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", pool_size=2),
        LayerSpec("flatten"),
        LayerSpec("linear", in_units=feat, out_units=32, prunable=True),
        LayerSpec("relu"),
        LayerSpec("linear", in_units=32, out_units=num_classes),
    ]
    return ModelGraph(specs, (1, s, s))


PRESETS = {"lenet5": lenet5, "lenet300": lenet300, "smallconv": smallconv}


def build_preset(name: str, num_classes: int = 10, image_size: int = 16) -> ModelGraph:
    if name == "smallconv":
        return smallconv(num_classes, image_size)
    if name in PRESETS:
        return PRESETS[name](num_classes)
    raise ValueError(f"unknown model preset {name!r}")
