"""Meta-learned weight-wise knowledge transfer between two architectures.

For every (source tap m, target tap n) pair a one-layer location unit scores
how much target layer n should imitate source layer m, and a one-layer degree
unit weights the channels of that match.  Both read the globally pooled
source feature.  A learnable 1x1 projection plus linear spatial resampling
(the adapter) brings target feature n to the shape of source feature m.

Objective per batch::

    loc[m, :]   = softmax_n(TL_mn(pool(S_m)))             (batch mean)
    deg[m, n]   = C_m * softmax_c(TD_mn(pool(S_m)))        (batch mean)
    l_deg[m, n] = mean_{b,c,h,w} deg[m,n]_c * (adapt_mn(T_n) - S_m)^2
    l_loc       = sum_{m,n} loc[m, n] * l_deg[m, n]
    l_final     = CE(target logits, labels) + l_loc

Target weights, adapters and TL/TD units are updated jointly by SGD; the
source model is never modified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal

import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetView
from .models import ArchitectureSpec, DeviceModel, TrainingHyperparams, batches, check_batch

LossVariant = Literal["full", "location_only", "ce_only", "ce_mse"]
LOSS_VARIANTS = ("full", "location_only", "ce_only", "ce_mse")


class TransferDivergence(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite transfer loss {value} at epoch {epoch}")
        self.epoch = epoch


class InternalConsistencyError(RuntimeError):
    pass


Pair = tuple[str, str]


def candidate_pairs(source: ArchitectureSpec, target: ArchitectureSpec) -> list[Pair]:
    """Every (source tap, target tap) combination, source-major."""
    if not source.feature_taps or not target.feature_taps:
        raise ValueError("both architectures need feature taps")
    return [(m, n) for m in source.feature_taps for n in target.feature_taps]


def _key(pair: Pair) -> str:
    return f"{pair[0]}__{pair[1]}"


def _as_map(t: torch.Tensor) -> torch.Tensor:
    return t if t.dim() == 4 else t.reshape(t.shape[0], -1, 1, 1)


def _channels(shape: tuple[int, ...]) -> int:
    return shape[0]


def _spatial(shape: tuple[int, ...]) -> tuple[int, int]:
    return (shape[1], shape[2]) if len(shape) == 3 else (1, 1)


class Adapter(nn.Module):
    """1x1 channel projection followed by linear spatial resampling.

    Shrinking uses area averaging, growing uses bilinear interpolation; both
    are fixed linear maps so the adapter as a whole stays linear.
    """

    def __init__(self, in_channels: int, out_channels: int, out_size: tuple[int, int]):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        self.out_size = tuple(out_size)
        with torch.no_grad():
            self.proj.weight.zero_()
            eye = torch.eye(out_channels, in_channels)
            self.proj.weight.copy_(eye.reshape(out_channels, in_channels, 1, 1))
            self.proj.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.proj(_as_map(x))
        h, w = x.shape[-2:]
        if (h, w) == self.out_size:
            return x
        if h >= self.out_size[0] and w >= self.out_size[1]:
            return F.adaptive_avg_pool2d(x, self.out_size)
        return F.interpolate(x, size=self.out_size, mode="bilinear", align_corners=False)


class MetaNetworkPair(nn.Module):
    """TL/TD units and adapters for one transfer direction.

    TL and TD units start at zero, so the first step sees a uniform location
    row and unit channel weights (plain MSE feature matching).
    """

    def __init__(self, source: ArchitectureSpec, target: ArchitectureSpec,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.source_name = source.name
        self.target_name = target.name
        self.source_taps = list(source.feature_taps)
        self.target_taps = list(target.feature_taps)
        self.pairs = candidate_pairs(source, target)
        src, tgt = source.feature_shapes(), target.feature_shapes()
        self.tl = nn.ModuleDict()
        self.td = nn.ModuleDict()
        self.adapters = nn.ModuleDict()
        for m, n in self.pairs:
            cm = _channels(src[m])
            self.tl[_key((m, n))] = nn.Linear(cm, 1)
            self.td[_key((m, n))] = nn.Linear(cm, cm)
            self.adapters[_key((m, n))] = Adapter(_channels(tgt[n]), cm, _spatial(src[m]))
        with torch.no_grad():
            for unit in [*self.tl.values(), *self.td.values()]:
                unit.weight.zero_()
                unit.bias.zero_()
        self.to(dtype)

    @property
    def direction(self) -> tuple[str, str]:
        return self.source_name, self.target_name

    def meta_parameters(self) -> list[nn.Parameter]:
        return [*self.tl.parameters(), *self.td.parameters()]

    def adapter_parameters(self) -> list[nn.Parameter]:
        return list(self.adapters.parameters())

    def unit_manifest(self) -> list[dict]:
        return [{"source": m, "target": n, "key": _key((m, n))} for m, n in self.pairs]


def _pool(feature: torch.Tensor) -> torch.Tensor:
    return feature.mean(dim=(2, 3)) if feature.dim() == 4 else feature


def transfer_location(meta: MetaNetworkPair, source_features: dict[str, torch.Tensor]) -> dict[Pair, torch.Tensor]:
    """Batch-averaged softmax over target taps of each source tap's TL logits."""
    loc = {}
    for m in meta.source_taps:
        pooled = _pool(source_features[m])
        logits = torch.stack([meta.tl[_key((m, n))](pooled).squeeze(-1) for n in meta.target_taps], dim=1)
        row = torch.softmax(logits, dim=1).mean(dim=0)
        for j, n in enumerate(meta.target_taps):
            loc[(m, n)] = row[j]
    return loc


def transfer_degree(meta: MetaNetworkPair, source_features: dict[str, torch.Tensor]) -> dict[Pair, torch.Tensor]:
    """Batch-averaged channel weights, softmax scaled by channel count (mean weight 1)."""
    deg = {}
    for m, n in meta.pairs:
        pooled = _pool(source_features[m])
        logits = meta.td[_key((m, n))](pooled)
        deg[(m, n)] = (torch.softmax(logits, dim=1) * logits.shape[1]).mean(dim=0)
    return deg


def degree_loss(source_feature: torch.Tensor, target_feature: torch.Tensor,
                deg: torch.Tensor, adapter: nn.Module) -> torch.Tensor:
    adapted = adapter(target_feature)
    src = _as_map(source_feature)
    if adapted.shape != src.shape:
        raise InternalConsistencyError(f"adapter produced {tuple(adapted.shape)}, "
                                       f"source feature is {tuple(src.shape)}")
    return (deg.reshape(1, -1, 1, 1) * (adapted - src) ** 2).mean()


def location_loss(loc: dict[Pair, torch.Tensor], l_degree: dict[Pair, torch.Tensor]) -> torch.Tensor:
    if set(loc) != set(l_degree):
        raise InternalConsistencyError("location signals and degree losses cover different pairs")
    return sum(loc[p] * l_degree[p] for p in loc)


@dataclass
class LossBundle:
    l_degree: dict[Pair, float] = field(default_factory=dict)
    l_location: float = 0.0
    l_ce: float = 0.0
    l_final: float = 0.0

    def to_dict(self) -> dict:
        return {
            "l_ce": self.l_ce,
            "l_location": self.l_location,
            "l_final": self.l_final,
            "l_degree": {_key(p): v for p, v in self.l_degree.items()},
        }


def transfer_losses(source_features: dict[str, torch.Tensor], target_features: dict[str, torch.Tensor],
                    target_logits: torch.Tensor, labels: torch.Tensor, meta: MetaNetworkPair,
                    variant: LossVariant = "full") -> dict:
    """Differentiable loss terms for one batch under the given ablation variant."""
    terms: dict = {"l_ce": F.cross_entropy(target_logits, labels)}
    if variant == "ce_only":
        zero = terms["l_ce"].new_zeros(())
        terms.update(l_degree={}, loc={}, deg={}, l_location=zero, l_final=terms["l_ce"])
        return terms
    if variant == "ce_mse":
        loc = {p: terms["l_ce"].new_tensor(1.0 / len(meta.target_taps)) for p in meta.pairs}
        deg = {p: None for p in meta.pairs}
    else:
        loc = transfer_location(meta, source_features)
        deg = transfer_degree(meta, source_features)
    l_degree = {}
    for m, n in meta.pairs:
        d = deg[(m, n)]
        if d is None:
            d = terms["l_ce"].new_ones(_as_map(source_features[m]).shape[1])
        l_degree[(m, n)] = degree_loss(source_features[m], target_features[n], d,
                                       meta.adapters[_key((m, n))])
    l_location = location_loss(loc, l_degree)
    l_final = l_location if variant == "location_only" else terms["l_ce"] + l_location
    terms.update(l_degree=l_degree, loc=loc, deg=deg, l_location=l_location, l_final=l_final)
    return terms


def _check_direction(source: DeviceModel, target: DeviceModel, meta: MetaNetworkPair) -> None:
    if meta.direction != (source.arch.name, target.arch.name):
        raise ValueError(f"meta pair is {meta.direction}, models are "
                         f"({source.arch.name}, {target.arch.name})")


def wire_transfer(source, target, meta: MetaNetworkPair, public: DatasetView, epochs: int,
                  hp: TrainingHyperparams, seed: int,
                  variant: LossVariant = "full") -> tuple[DeviceModel, MetaNetworkPair, list[LossBundle]]:
    """Transfer knowledge from ``source`` into a copy of ``target``.

    ``source``/``target`` may be device or proxy models.  ``meta`` is updated
    in place (it persists across rounds) and returned for convenience.  The
    trace holds one batch-size-weighted epoch average per epoch.
    """
    source = getattr(source, "model", source)
    target = getattr(target, "model", target)
    _check_direction(source, target, meta)
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    if len(public) == 0:
        raise ValueError("public dataset is empty")
    out = target.copy()
    if epochs <= 0:
        return out, meta, []
    x, y = public.tensors()
    x_src = check_batch(source, x)
    x_tgt = check_batch(out, x)
    params = list(out.net.parameters()) + meta.adapter_parameters()
    if variant in ("full", "location_only"):
        params += meta.meta_parameters()
    opt = torch.optim.SGD(params, lr=hp.learning_rate, momentum=hp.momentum)
    g = torch.Generator().manual_seed(seed)
    source.net.eval()
    trace = []
    for epoch in range(epochs):
        acc = {"l_ce": 0.0, "l_location": 0.0}
        acc_deg = {p: 0.0 for p in meta.pairs}
        seen = 0
        for idx in batches(len(y), hp.batch_size, g):
            with torch.no_grad():
                src_feats, _ = source.net(x_src[idx])
            tgt_feats, logits = out.net(x_tgt[idx])
            terms = transfer_losses(src_feats, tgt_feats, logits, y[idx], meta, variant)
            if not torch.isfinite(terms["l_final"]):
                raise TransferDivergence(epoch, terms["l_final"].item())
            opt.zero_grad()
            terms["l_final"].backward()
            opt.step()
            b = len(idx)
            seen += b
            acc["l_ce"] += b * terms["l_ce"].item()
            acc["l_location"] += b * terms["l_location"].item()
            for p, v in terms["l_degree"].items():
                acc_deg[p] += b * v.item()
        bundle = LossBundle(
            l_degree={p: v / seen for p, v in acc_deg.items()} if variant != "ce_only" else {},
            l_location=acc["l_location"] / seen,
            l_ce=acc["l_ce"] / seen,
        )
        if variant == "location_only":
            bundle.l_final = bundle.l_location
        elif variant == "ce_only":
            bundle.l_final = bundle.l_ce
        else:
            bundle.l_final = bundle.l_ce + bundle.l_location
        if not math.isfinite(bundle.l_final):
            raise TransferDivergence(epoch, bundle.l_final)
        # a finite loss can still take a step that overflows the weights
        if not all(torch.isfinite(p).all() for p in params):
            raise TransferDivergence(epoch, float("nan"))
        trace.append(bundle)
    return out, meta, trace


def measure_transfer(source, target, meta: MetaNetworkPair, public: DatasetView,
                     variant: LossVariant = "full") -> LossBundle:
    """Loss terms over the whole public set without updating anything."""
    source = getattr(source, "model", source)
    target = getattr(target, "model", target)
    _check_direction(source, target, meta)
    x, y = public.tensors()
    with torch.no_grad():
        src_feats, _ = source.net(check_batch(source, x))
        tgt_feats, logits = target.net(check_batch(target, x))
        terms = transfer_losses(src_feats, tgt_feats, logits, y, meta, variant)
    return LossBundle(
        l_degree={p: float(v) for p, v in terms["l_degree"].items()},
        l_location=float(terms["l_location"]),
        l_ce=float(terms["l_ce"]),
        l_final=float(terms["l_final"]),
    )


def signal_rows(loc: dict[Pair, torch.Tensor], source_taps: Iterable[str]) -> dict[str, float]:
    """Sum of each source tap's location row (1 up to rounding)."""
    return {m: float(sum(v.detach() for (mm, _), v in loc.items() if mm == m)) for m in source_taps}


def save_meta(meta: MetaNetworkPair, path) -> int:
    """Write the TL/TD units and adapters in the model checkpoint format.

    Tensor names in the manifest carry the unit key ``<source tap>__<target tap>``.
    """
    from . import checkpoint

    return checkpoint.save(path, meta.state_dict(), f"{meta.source_name}->{meta.target_name}", kind="meta")


def load_meta(meta: MetaNetworkPair, path) -> MetaNetworkPair:
    from . import checkpoint

    name, tensors = checkpoint.load(path)
    if name != f"{meta.source_name}->{meta.target_name}":
        raise ValueError(f"checkpoint holds meta pair {name!r}")
    dtype = next(meta.parameters()).dtype
    meta.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})
    return meta
