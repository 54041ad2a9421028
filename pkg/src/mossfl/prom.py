"""Proxy architecture choice and same-architecture (FedAvg) pre-aggregation."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Sequence

import torch

from .models import ArchitectureSpec, DeviceModel, instantiate


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class ProxyModel:
    """A server-side model on the proxy architecture; ``type_index`` is an int or "global"."""

    model: DeviceModel
    type_index: Any

    @property
    def arch(self) -> ArchitectureSpec:
        return self.model.arch

    @property
    def weights(self):
        return self.model.weights

    def copy(self, type_index: Any = None) -> "ProxyModel":
        ti = self.type_index if type_index is None else type_index
        return ProxyModel(self.model.copy(owner=("proxy", ti)), ti)


def choose_proxy_architecture(specs: Sequence[ArchitectureSpec]) -> ArchitectureSpec:
    """Largest spec by parameter count; ties go to the lexicographically smallest name."""
    if not specs:
        raise ValueError("need at least one architecture")
    return min(specs, key=lambda s: (-s.param_count, s.name))


def init_proxies(proxy_arch: ArchitectureSpec, n_types: int, seed: int,
                 dtype: torch.dtype = torch.float32) -> list[ProxyModel]:
    """One proxy per type, all starting from the same weights."""
    base = instantiate(proxy_arch, seed, dtype)
    return [ProxyModel(base.copy(owner=("proxy", i)), i) for i in range(n_types)]


def weighted_average(state_dicts: Sequence[dict], weights: Sequence[float]) -> "OrderedDict[str, torch.Tensor]":
    """Element-wise sum of ``w_k * state_k``; weights are used as given."""
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for key in state_dicts[0]:
        ref = state_dicts[0][key]
        acc = torch.zeros_like(ref, dtype=torch.float64)
        for sd, w in zip(state_dicts, weights):
            acc += float(w) * sd[key].to(torch.float64)
        out[key] = acc.to(ref.dtype)
    return out


def pre_aggregate(models: Sequence[DeviceModel], sample_counts: Sequence[int],
                  owner: Any = "pre-aggregate") -> DeviceModel:
    """FedAvg: element-wise mean of the models weighted by local sample counts."""
    if not models or len(models) != len(sample_counts):
        raise ValueError("models and sample_counts must be non-empty and aligned")
    if any(c <= 0 for c in sample_counts):
        raise ValueError("sample counts must be positive")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch.name != arch.name or list(m.weights) != list(models[0].weights):
            raise ArchitectureMismatch(f"cannot average {m.arch.name} with {arch.name}")
    total = float(sum(sample_counts))
    avg = weighted_average([m.weights for m in models], [c / total for c in sample_counts])
    out = models[0].copy(owner=owner)
    out.load(avg)
    return out
