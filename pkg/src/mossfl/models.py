"""Architecture specs, the three shipped device tiers, and device-side training.

An :class:`ArchitectureSpec` is a declarative, sequential layer graph.  It is
compiled into a :class:`GraphNet` whose forward pass returns the feature maps
of the spec's tap layers alongside the logits, which is what the transfer
module matches across architectures.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetView


class ShapeError(ValueError):
    """Input batch does not match the architecture's input shape."""


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class Layer:
    """One node of a layer graph.

    ``kind`` is one of ``conv``, ``relu``, ``maxpool``, ``adaptive_avgpool``,
    ``global_avgpool``, ``flatten``, ``linear`` or ``residual``.  ``args`` holds
    the kind's settings (``out``, ``kernel``, ``stride``, ``groups``, ``size``).
    A ``conv`` with ``groups="depthwise"`` uses one group per input channel.
    """

    id: str
    kind: str
    args: dict[str, Any] = field(default_factory=dict)


@dataclass
class ArchitectureSpec:
    name: str
    layers: list[Layer]
    feature_taps: list[str]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.name}: duplicate layer ids")
        missing = [t for t in self.feature_taps if t not in ids]
        if missing:
            raise ValueError(f"{self.name}: feature taps {missing} are not layers")
        self._shapes: dict[str, tuple[int, ...]] | None = None
        self._param_count: int | None = None

    @property
    def param_count(self) -> int:
        if self._param_count is None:
            self._param_count = sum(p.numel() for p in GraphNet(self).parameters())
        return self._param_count

    @property
    def weight_layer_count(self) -> int:
        return sum(1 for p in GraphNet(self).parameters() if p.dim() > 1)

    def feature_shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample shape of every tap output; vectors are reported as (D,)."""
        if self._shapes is None:
            net = GraphNet(self)
            with torch.no_grad():
                feats, _ = net(torch.zeros((1, *self.input_shape)))
            self._shapes = {k: tuple(v.shape[1:]) for k, v in feats.items()}
        return dict(self._shapes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": [{"id": l.id, "kind": l.kind, "args": dict(l.args)} for l in self.layers],
            "feature_taps": list(self.feature_taps),
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }


class _Residual(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class _Flatten(nn.Module):
    def forward(self, x):
        return x.flatten(1)


class _GlobalAvgPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


def _build_layer(layer: Layer, in_shape: tuple[int, ...]) -> nn.Module:
    a = layer.args
    if layer.kind == "conv":
        cin = in_shape[0]
        groups = cin if a.get("groups") == "depthwise" else int(a.get("groups", 1))
        out = int(a.get("out", cin))
        k = int(a.get("kernel", 3))
        return nn.Conv2d(cin, out, k, stride=int(a.get("stride", 1)),
                         padding=int(a.get("padding", k // 2)), groups=groups)
    if layer.kind == "linear":
        return nn.Linear(math.prod(in_shape), int(a["out"]))
    if layer.kind == "residual":
        return _Residual(in_shape[0])
    if layer.kind == "relu":
        return nn.ReLU()
    if layer.kind == "maxpool":
        return nn.MaxPool2d(int(a.get("kernel", 2)))
    if layer.kind == "adaptive_avgpool":
        return nn.AdaptiveAvgPool2d(int(a.get("size", 1)))
    if layer.kind == "global_avgpool":
        return _GlobalAvgPool()
    if layer.kind == "flatten":
        return _Flatten()
    raise ValueError(f"unknown layer kind {layer.kind!r}")


class GraphNet(nn.Module):
    """Compiled sequential layer graph returning ``(features, logits)``."""

    def __init__(self, arch: ArchitectureSpec):
        super().__init__()
        self.taps = tuple(arch.feature_taps)
        self.order = [layer.id for layer in arch.layers]
        self.body = nn.ModuleDict()
        shape = arch.input_shape
        probe = torch.zeros((1, *shape))
        for layer in arch.layers:
            mod = _build_layer(layer, tuple(probe.shape[1:]))
            self.body[layer.id] = mod
            with torch.no_grad():
                probe = mod(probe)
        if probe.shape[1:] != (arch.num_classes,):
            raise ValueError(f"{arch.name}: graph emits {tuple(probe.shape[1:])}, "
                             f"expected ({arch.num_classes},)")

    def forward(self, x):
        feats = {}
        for lid in self.order:
            x = self.body[lid](x)
            if lid in self.taps:
                feats[lid] = x
        return feats, x


# --------------------------------------------------------------------------- tiers

def small_tier(input_shape=(1, 8, 8), num_classes: int = 10) -> ArchitectureSpec:
    """Two-conv LeNet-style net, about 5.7K parameters."""
    layers = [
        Layer("conv1", "conv", {"out": 6, "kernel": 3}), Layer("relu1", "relu"),
        Layer("pool1", "maxpool", {"kernel": 2}),
        Layer("conv2", "conv", {"out": 16, "kernel": 3}), Layer("relu2", "relu"),
        Layer("pool2", "maxpool", {"kernel": 2}),
        Layer("squeeze", "adaptive_avgpool", {"size": 2}), Layer("flatten", "flatten"),
        Layer("fc1", "linear", {"out": 64}), Layer("relu3", "relu"),
        Layer("fc2", "linear", {"out": num_classes}),
    ]
    return ArchitectureSpec("small", layers, ["pool1", "pool2", "relu3"], input_shape, num_classes)


def medium_tier(input_shape=(1, 8, 8), num_classes: int = 10) -> ArchitectureSpec:
    """Depthwise-separable conv net, about 30K parameters."""
    layers = [Layer("stem", "conv", {"out": 24, "kernel": 3}), Layer("stem_relu", "relu")]
    taps = []
    for k, (width, pool) in enumerate([(48, True), (112, True), (176, False)], start=1):
        layers += [
            Layer(f"dw{k}", "conv", {"groups": "depthwise", "kernel": 3}), Layer(f"dw{k}_relu", "relu"),
            Layer(f"pw{k}", "conv", {"out": width, "kernel": 1}), Layer(f"block{k}", "relu"),
        ]
        taps.append(f"block{k}")
        if pool:
            layers.append(Layer(f"pool{k}", "maxpool", {"kernel": 2}))
    layers += [Layer("gap", "global_avgpool"), Layer("fc", "linear", {"out": num_classes})]
    return ArchitectureSpec("medium", layers, taps + ["gap"], input_shape, num_classes)


def large_tier(input_shape=(1, 8, 8), num_classes: int = 10) -> ArchitectureSpec:
    """Small residual conv net, about 110K parameters."""
    layers = [
        Layer("stem", "conv", {"out": 32, "kernel": 3}), Layer("stem_relu", "relu"),
        Layer("res1", "residual"),
        Layer("down", "conv", {"out": 64, "kernel": 3, "stride": 2}), Layer("down_relu", "relu"),
        Layer("res2", "residual"),
        Layer("gap", "global_avgpool"),
        Layer("fc", "linear", {"out": num_classes}),
    ]
    return ArchitectureSpec("large", layers, ["res1", "res2", "gap"], input_shape, num_classes)


TIERS = {"large": large_tier, "medium": medium_tier, "small": small_tier}


def tier_spec(name: str, input_shape, num_classes: int) -> ArchitectureSpec:
    try:
        return TIERS[name](tuple(input_shape), num_classes)
    except KeyError:
        raise ValueError(f"unknown tier {name!r}; choose from {sorted(TIERS)}") from None


# --------------------------------------------------------------------------- models

@dataclass
class DeviceModel:
    arch: ArchitectureSpec
    net: GraphNet
    owner: Any = "pre-aggregate"

    @property
    def weights(self) -> "OrderedDict[str, torch.Tensor]":
        return self.net.state_dict()

    def copy(self, owner: Any = None) -> "DeviceModel":
        return DeviceModel(self.arch, copy.deepcopy(self.net),
                           self.owner if owner is None else owner)

    def flat(self) -> torch.Tensor:
        return torch.cat([t.detach().reshape(-1) for t in self.weights.values()])

    def load(self, weights: Mapping[str, torch.Tensor]) -> None:
        self.net.load_state_dict(weights)

    def to(self, dtype: torch.dtype) -> "DeviceModel":
        self.net.to(dtype)
        return self


def init_weights(net: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform (He) init: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases 0."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                bound = math.sqrt(6.0 / mod.weight[0].numel())
                w = torch.rand(mod.weight.shape, generator=g, dtype=torch.float64)
                mod.weight.copy_(w.mul_(2 * bound).sub_(bound).to(mod.weight.dtype))
                if mod.bias is not None:
                    mod.bias.zero_()


def instantiate(arch: ArchitectureSpec, seed: int, dtype: torch.dtype = torch.float32,
                owner: Any = "pre-aggregate") -> DeviceModel:
    net = GraphNet(arch)
    init_weights(net, seed)
    return DeviceModel(arch, net.to(dtype), owner)


def _dtype_of(model: DeviceModel) -> torch.dtype:
    return next(model.net.parameters()).dtype


def check_batch(model: DeviceModel, batch: torch.Tensor) -> torch.Tensor:
    if tuple(batch.shape[1:]) != model.arch.input_shape:
        raise ShapeError(f"{model.arch.name} expects inputs of shape {model.arch.input_shape}, "
                         f"got {tuple(batch.shape[1:])}")
    return batch.to(_dtype_of(model))


def forward_features(model: DeviceModel, batch: torch.Tensor):
    """Tap features and logits without tracking gradients or touching weights."""
    batch = check_batch(model, batch)
    with torch.no_grad():
        return model.net(batch)


@dataclass(frozen=True)
class TrainingHyperparams:
    learning_rate: float = 1e-3
    momentum: float = 0.05
    batch_size: int = 32
    local_epochs: int = 5

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.batch_size < 1 or self.local_epochs < 0:
            raise ValueError(f"invalid training hyperparameters {self}")


def batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def local_train(model: DeviceModel, shard: DatasetView, hp: TrainingHyperparams,
                seed: int, epochs: int | None = None) -> DeviceModel:
    """Mini-batch SGD with momentum on cross-entropy; returns a trained copy."""
    if len(shard) == 0:
        raise ValueError("cannot train on an empty shard")
    out = model.copy()
    x, y = shard.tensors()
    x = check_batch(out, x)
    opt = torch.optim.SGD(out.net.parameters(), lr=hp.learning_rate, momentum=hp.momentum)
    g = torch.Generator().manual_seed(seed)
    out.net.train()
    for epoch in range(hp.local_epochs if epochs is None else epochs):
        for b, idx in enumerate(batches(len(y), hp.batch_size, g)):
            _, logits = out.net(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence(epoch, b, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
    return out


def predict_logits(model: DeviceModel, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    x = check_batch(model, x)
    with torch.no_grad():
        return torch.cat([model.net(x[s:s + batch_size])[1] for s in range(0, len(x), batch_size)])


def evaluate(model: DeviceModel, dataset: DatasetView) -> float:
    """Top-1 accuracy on the view."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x, y = dataset.tensors()
    pred = predict_logits(model, x).argmax(dim=1)
    return float((pred == y).double().mean())
