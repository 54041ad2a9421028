"""Fidelity scores and fidelity-weighted aggregation of proxy models."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch

from .data import DatasetView
from .models import predict_logits
from .prom import ArchitectureMismatch, ProxyModel, weighted_average

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FidelityScore:
    type_index: int
    value: float
    zero_norm_samples: int = 0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"fidelity {self.value} outside [0, 1]")


def logit_fidelity(reference: torch.Tensor, candidate: torch.Tensor) -> tuple[float, int]:
    """Mean per-sample cosine of two logit batches, mapped to [0, 1].

    A sample where either vector has zero norm counts as cosine 0; the number
    of such samples is returned alongside the score.
    """
    a = reference.to(torch.float64)
    b = candidate.to(torch.float64)
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise FloatingPointError("non-finite logits")
    na, nb = a.norm(dim=1), b.norm(dim=1)
    degenerate = (na == 0) | (nb == 0)
    cos = (a * b).sum(dim=1) / torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = torch.where(degenerate, torch.zeros_like(cos), cos).clamp(-1.0, 1.0)
    return float((cos.mean() + 1.0) / 2.0), int(degenerate.sum())


def fidelity(m, pm: ProxyModel, public: DatasetView, type_index: int | None = None) -> FidelityScore:
    """How closely the proxy's public-set logits follow the pre-aggregate's."""
    if len(public) == 0:
        raise ValueError("public dataset is empty")
    m = getattr(m, "model", m)
    if m.arch.num_classes != pm.arch.num_classes:
        raise ArchitectureMismatch("models disagree on output dimensionality")
    x, _ = public.tensors()
    value, zeros = logit_fidelity(predict_logits(m, x), predict_logits(pm.model, x))
    if zeros:
        log.info("fidelity: %d zero-norm logit vectors treated as cosine 0", zeros)
    ti = pm.type_index if type_index is None else type_index
    return FidelityScore(ti, value, zeros)


def aggregation_weights(fids: Sequence[float], exponent: float = 1.0,
                        uniform: bool = False) -> list[float]:
    """Normalized ``fid ** exponent``; all-zero or ``uniform`` gives equal weights."""
    if uniform:
        return [1.0 / len(fids)] * len(fids)
    powered = [float(f) ** exponent if f > 0 else 0.0 for f in fids]
    total = sum(powered)
    if total <= 0:
        log.warning("all fidelities are zero; falling back to uniform aggregation weights")
        return [1.0 / len(fids)] * len(fids)
    return [p / total for p in powered]


def aggregate(pms: Sequence[ProxyModel], fids: Sequence[FidelityScore | float],
              exponent: float = 1.0, uniform: bool = False) -> ProxyModel:
    """Fidelity-weighted element-wise average of the proxies (the global proxy)."""
    if not pms or len(pms) != len(fids):
        raise ValueError("proxies and fidelities must be non-empty and aligned")
    keys = list(pms[0].weights)
    for pm in pms[1:]:
        if pm.arch.name != pms[0].arch.name or list(pm.weights) != keys:
            raise ArchitectureMismatch("proxies must share one architecture")
    values = [f.value if isinstance(f, FidelityScore) else float(f) for f in fids]
    weights = aggregation_weights(values, exponent, uniform)
    merged = weighted_average([pm.weights for pm in pms], weights)
    out = pms[0].copy(type_index="global")
    out.model.load(merged)
    return out
