"""Round loop for proxy-based heterogeneous FL, the two baselines, and metrics.

A :class:`Simulation` owns the data split, the per-tier device models, the
proxies and the persistent meta-network pairs.  Each ``run_round`` executes:

1. broadcast the tier model to the selected devices of that tier;
2. local training on every selected device (device actor);
3. FedAvg pre-aggregation per tier;
4. transfer tier model -> its proxy (one call per tier);
5. fidelity-weighted aggregation of the proxies into the global proxy;
6. transfer global proxy -> tier model (one call per tier);
7. evaluation and accounting.

With ``no_prom`` steps 4-6 are replaced by direct transfers from every tier
into every architecture (N^2 calls) followed by a per-architecture mean.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .config import DatasetSource, ExperimentConfig
from .data import (AccessLog, DatasetView, LabeledDataset, acting_as, dirichlet_partition,
                   load_dataset, load_digits_dataset, sample_public, synthetic_dataset)
from .fidelity import FidelityScore, aggregate, fidelity
from .models import (DeviceModel, TrainingDivergence, batches, evaluate, instantiate, local_train,
                     predict_logits, tier_spec)
from .prom import ProxyModel, choose_proxy_architecture, init_proxies, pre_aggregate, weighted_average
from .wire import MetaNetworkPair, TransferDivergence, wire_transfer

log = logging.getLogger(__name__)


class RoundAborted(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"round aborted in stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(seed: int, *tags: Any) -> int:
    """Stable 31-bit seed for a (seed, tag, ...) path."""
    words = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0] & 0x7FFFFFFF)


def select_participants(devices_per_type: Sequence[int], fraction: float, seed: int) -> list[list[int]]:
    """Per type, ceil(fraction * K_i) device indices drawn without replacement, sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("participation fraction must be in (0, 1]")
    out = []
    for i, k in enumerate(devices_per_type):
        n = min(k, math.ceil(round(fraction * k, 9)))
        if n == k:
            out.append(list(range(k)))
            continue
        rng = np.random.default_rng(derive_seed(seed, "participants", i))
        out.append(sorted(int(j) for j in rng.choice(k, size=n, replace=False)))
    return out


def detect_convergence(history: Sequence[float], window: int = 3, epsilon: float = 0.005) -> int | None:
    """Earliest round t whose next ``window`` accuracies (t included) gain at most ``epsilon``.

    The window is ``history[t:t + window]`` and must fit inside the history.
    """
    tol = 1e-12
    for t in range(len(history) - window + 1):
        if max(history[t:t + window]) - history[t] <= epsilon + tol:
            return t
    return None


def transmission_bytes(payload: DeviceModel | ProxyModel | torch.Tensor | dict) -> int:
    """Serialized size of a model (weights) or a logit batch in the checkpoint wire format."""
    if isinstance(payload, torch.Tensor):
        return checkpoint.payload_nbytes({"logits": payload}, "logits", kind="logits")
    if isinstance(payload, ProxyModel):
        payload = payload.model
    if isinstance(payload, DeviceModel):
        return checkpoint.payload_nbytes(payload.weights, payload.arch.name)
    return checkpoint.payload_nbytes(payload, "state")


def _resolve_dataset(src: DatasetSource, seed: int) -> LabeledDataset:
    if src.source == "digits":
        return load_digits_dataset()
    if src.source == "synthetic":
        return synthetic_dataset(src.synthetic_size, src.synthetic_classes, (1, 8, 8), seed)
    return load_dataset(src.path)


@dataclass
class RoundRecord:
    round: int
    participants: dict[str, list[int]]
    accuracy: dict[str, float]
    fidelity: dict[str, float] = field(default_factory=dict)
    bytes_up: dict[str, int] = field(default_factory=dict)
    bytes_down: dict[str, int] = field(default_factory=dict)
    bytes_up_total: int = 0
    bytes_down_total: int = 0
    cumulative_bytes: int = 0
    wire_calls: int = 0
    losses: list[dict] = field(default_factory=list)
    device_accuracy: dict[str, float] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, separators=(",", ":"))


class Simulation:
    """One experiment: data split, models and round loop for the configured method."""

    def __init__(self, config: ExperimentConfig, dataset: LabeledDataset | None = None,
                 public_dataset: LabeledDataset | None = None):
        self.config = config
        self.audit = AccessLog()
        self.counters: Counter = Counter()
        self.history: list[RoundRecord] = []
        self.cumulative_bytes = 0
        self._pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
        self._setup_data(dataset, public_dataset)
        self._setup_models()

    # ------------------------------------------------------------------ setup

    def _setup_data(self, dataset, public_dataset):
        cfg = self.config
        ds = dataset if dataset is not None else _resolve_dataset(cfg.dataset, cfg.seed)
        self.dataset = ds
        n_devices = sum(t.devices for t in cfg.tiers)
        part = dirichlet_partition(ds, n_devices, cfg.alpha, cfg.samples_per_device,
                                   derive_seed(cfg.seed, "partition"))
        taken = {i for shard in part.device_shards for i in shard}
        if cfg.public_dataset is None and public_dataset is None:
            part.public_ids = sample_public(ds, taken, cfg.public_size, derive_seed(cfg.seed, "public"))
            pub_ds = ds
        else:
            pub_ds = public_dataset if public_dataset is not None else _resolve_dataset(
                cfg.public_dataset, derive_seed(cfg.seed, "public-source"))
            part.public_ids = sample_public(pub_ds, [], cfg.public_size, derive_seed(cfg.seed, "public"))
        self.partition = part
        held = taken | (set(part.public_ids) if pub_ds is ds else set())
        test_ids = [int(i) for i in ds.ids if int(i) not in held]
        if cfg.test_size is not None:
            rng = np.random.default_rng(derive_seed(cfg.seed, "test"))
            test_ids = sorted(int(i) for i in rng.choice(test_ids, size=min(cfg.test_size, len(test_ids)),
                                                         replace=False))
        self.public = pub_ds.view(part.public_ids, owner="server:public", log=self.audit)
        self.test = ds.view(test_ids, owner="server:test", log=self.audit)
        self.shards: list[list[DatasetView]] = []
        k = 0
        for i, tier in enumerate(cfg.tiers):
            row = []
            for j in range(tier.devices):
                row.append(ds.view(part.device_shards[k], owner=f"device:{i}:{j}", log=self.audit))
                k += 1
            self.shards.append(row)

    def _setup_models(self):
        cfg = self.config
        shape, classes = self.dataset.input_shape, self.dataset.num_classes
        self.archs = [tier_spec(t.arch, shape, classes) for t in cfg.tiers]
        if cfg.method == "fedavg_homogeneous" and len({a.name for a in self.archs}) != 1:
            raise ValueError("fedavg_homogeneous needs every tier on one architecture")
        # tiers sharing an architecture also share the initial weights
        self.tier_models = [instantiate(a, derive_seed(cfg.seed, "init", a.name), owner=("tier", i))
                            for i, a in enumerate(self.archs)]
        self.metas: dict[tuple, MetaNetworkPair] = {}
        self.proxies: list[ProxyModel] = []
        self.global_proxy: ProxyModel | None = None
        if cfg.method == "moss" and not cfg.ablation.no_prom:
            self.proxy_arch = choose_proxy_architecture(self.archs)
            self.proxies = init_proxies(self.proxy_arch, len(self.archs), derive_seed(cfg.seed, "proxy"))
        if cfg.method == "logit_distillation":
            self.device_models = [[m.copy(owner=(i, j)) for j in range(cfg.tiers[i].devices)]
                                  for i, m in enumerate(self.tier_models)]

    def _meta(self, key: tuple, source, target) -> MetaNetworkPair:
        if key not in self.metas or self.config.ablation.reinit_meta:
            self.metas[key] = MetaNetworkPair(source, target)
        return self.metas[key]

    # ------------------------------------------------------------------ helpers

    def _device_map(self, fn, jobs):
        if self._pool is None:
            return [fn(*job) for job in jobs]
        return list(self._pool.map(lambda job: fn(*job), jobs))

    def _train_device(self, i: int, j: int, model: DeviceModel, seed: int):
        with acting_as(f"device:{i}:{j}"):
            try:
                return local_train(model, self.shards[i][j], self.config.training, seed), None
            except TrainingDivergence as exc:
                return None, f"device {i}:{j} dropped: {exc}"

    def _wire(self, stage: str, key: tuple, source, target, seed: int, record: RoundRecord):
        src_model = getattr(source, "model", source)
        tgt_model = getattr(target, "model", target)
        meta = self._meta(key, src_model.arch, tgt_model.arch)
        try:
            out, _, trace = wire_transfer(src_model, tgt_model, meta, self.public, self.config.wire_epochs,
                                          self.config.training, seed, self.config.ablation.loss_variant)
        except TransferDivergence as exc:
            raise RoundAborted(stage, exc) from exc
        self.counters["wire_calls"] += 1
        record.wire_calls += 1
        record.losses.append({
            "stage": stage,
            "l_final": [b.l_final for b in trace],
            "l_ce": [b.l_ce for b in trace],
            "l_location": [b.l_location for b in trace],
        })
        return out

    def _tier_name(self, i: int) -> str:
        return self.config.tiers[i].name

    def _evaluate(self, record: RoundRecord):
        with acting_as("server"):
            if self.config.method == "logit_distillation":
                for i, row in enumerate(self.device_models):
                    accs = [evaluate(m, self.test) for m in row]
                    record.accuracy[self._tier_name(i)] = float(np.mean(accs))
                    if self.config.eval_per_device:
                        for j, a in enumerate(accs):
                            record.device_accuracy[f"{i}:{j}"] = a
            else:
                for i, m in enumerate(self.tier_models):
                    acc = evaluate(m, self.test)
                    record.accuracy[self._tier_name(i)] = acc
                    if self.config.eval_per_device:
                        for j in range(self.config.tiers[i].devices):
                            record.device_accuracy[f"{i}:{j}"] = acc

    def _finish(self, record: RoundRecord) -> RoundRecord:
        record.bytes_up_total = sum(record.bytes_up.values())
        record.bytes_down_total = sum(record.bytes_down.values())
        self.cumulative_bytes += record.bytes_up_total + record.bytes_down_total
        record.cumulative_bytes = self.cumulative_bytes
        self._evaluate(record)
        self.history.append(record)
        return record

    # ------------------------------------------------------------------ rounds

    def run_round(self) -> RoundRecord:
        t = len(self.history)
        round_seed = derive_seed(self.config.seed, "round", t)
        method = self.config.method
        if method == "moss":
            return self._round_moss(t, round_seed)
        if method == "fedavg_homogeneous":
            return self._round_fedavg(t, round_seed)
        return self._round_distill(t, round_seed)

    def _local_phase(self, t: int, round_seed: int, record: RoundRecord, sources: list,
                     download: bool = True):
        """Broadcast, train and upload; returns surviving (models, counts) per tier."""
        selected = select_participants([t_.devices for t_ in self.config.tiers],
                                       self.config.participation_fraction, round_seed)
        jobs = []
        for i, devs in enumerate(selected):
            record.participants[self._tier_name(i)] = devs
            for j in devs:
                model = sources[i] if not isinstance(sources[i], list) else sources[i][j]
                if download:
                    record.bytes_down[f"{i}:{j}"] = transmission_bytes(model)
                jobs.append((i, j, model, derive_seed(round_seed, "train", i, j)))
        results = self._device_map(self._train_device, jobs)
        trained: list[list[tuple[int, DeviceModel]]] = [[] for _ in self.config.tiers]
        for (i, j, _, _), (model, event) in zip(jobs, results):
            if model is None:
                record.events.append(event)
                log.warning(event)
                continue
            record.bytes_up[f"{i}:{j}"] = transmission_bytes(model)
            trained[i].append((j, model))
        return trained

    def _pre_aggregate(self, trained, record) -> list[DeviceModel]:
        out = []
        with acting_as("server"):
            for i, models in enumerate(trained):
                if not models:
                    record.events.append(f"tier {i}: no surviving devices, model kept")
                    out.append(self.tier_models[i])
                    continue
                counts = [len(self.shards[i][j]) for j, _ in models]
                out.append(pre_aggregate([m for _, m in models], counts, owner=("tier", i)))
        return out

    def _round_moss(self, t: int, round_seed: int) -> RoundRecord:
        cfg = self.config
        record = RoundRecord(round=t, participants={}, accuracy={})
        trained = self._local_phase(t, round_seed, record, self.tier_models)
        pre = self._pre_aggregate(trained, record)
        with acting_as("server"):
            if cfg.ablation.no_prom:
                self.tier_models = self._direct_transfers(pre, round_seed, record)
            else:
                self.tier_models = self._proxy_transfers(pre, round_seed, record)
        return self._finish(record)

    def _proxy_transfers(self, pre, round_seed, record) -> list[DeviceModel]:
        cfg = self.config
        n = len(pre)
        if cfg.proxy_start == "global" and self.global_proxy is not None:
            starts = [self.global_proxy.copy(type_index=i) for i in range(n)]
        else:
            starts = self.proxies
        proxies = []
        for i in range(n):
            out = self._wire(f"to_proxy:{i}", ("up", i), pre[i], starts[i],
                             derive_seed(round_seed, "wire-up", i), record)
            proxies.append(ProxyModel(out, i))
        self.proxies = proxies
        fids: list[FidelityScore] = []
        for i in range(n):
            try:
                fids.append(fidelity(pre[i], proxies[i], self.public, i))
            except FloatingPointError as exc:
                raise RoundAborted(f"fidelity:{i}", exc) from exc
        for i, f in enumerate(fids):
            record.fidelity[self._tier_name(i)] = f.value
        self.global_proxy = aggregate(proxies, fids, exponent=cfg.ablation.fidelity_exponent,
                                      uniform=cfg.ablation.no_file)
        updated = []
        for i in range(n):
            updated.append(self._wire(f"from_global:{i}", ("down", i), self.global_proxy, pre[i],
                                      derive_seed(round_seed, "wire-down", i), record))
        return updated

    def _direct_transfers(self, pre, round_seed, record) -> list[DeviceModel]:
        n = len(pre)
        updated = []
        for i in range(n):
            copies = []
            for k in range(n):
                copies.append(self._wire(f"direct:{k}->{i}", ("direct", k, i), pre[k], pre[i],
                                         derive_seed(round_seed, "wire-direct", k, i), record))
            merged = copies[0].copy(owner=("tier", i))
            merged.load(weighted_average([c.weights for c in copies], [1.0 / n] * n))
            updated.append(merged)
        return updated

    def _round_fedavg(self, t: int, round_seed: int) -> RoundRecord:
        record = RoundRecord(round=t, participants={}, accuracy={})
        trained = self._local_phase(t, round_seed, record, [self.tier_models[0]] * len(self.tier_models))
        flat = [m for row in trained for m in row]
        with acting_as("server"):
            if flat:
                counts = [len(self.shards[i][j]) for i, row in enumerate(trained) for j, _ in row]
                merged = pre_aggregate([m for _, m in flat], counts, owner="global")
                self.tier_models = [merged.copy(owner=("tier", i)) for i in range(len(self.tier_models))]
        return self._finish(record)

    def _round_distill(self, t: int, round_seed: int) -> RoundRecord:
        cfg = self.config
        record = RoundRecord(round=t, participants={}, accuracy={})
        trained = self._local_phase(t, round_seed, record, self.device_models, download=False)
        x_pub = None
        uploads = []
        for i, row in enumerate(trained):
            for j, model in row:
                with acting_as(f"device:{i}:{j}"):
                    if x_pub is None:
                        x_pub, _ = self.public.tensors()
                    logits = predict_logits(model, x_pub)
                record.bytes_up[f"{i}:{j}"] = transmission_bytes(logits)
                uploads.append((i, j, model, logits))
        if not uploads:
            return self._finish(record)
        with acting_as("server"):
            consensus = torch.stack([u[3] for u in uploads]).mean(dim=0)
        for i, j, model, _ in uploads:
            record.bytes_down[f"{i}:{j}"] = transmission_bytes(consensus)
            with acting_as(f"device:{i}:{j}"):
                self.device_models[i][j] = distill_to_logits(
                    model, x_pub, consensus, cfg.wire_epochs, cfg.training,
                    derive_seed(round_seed, "distill", i, j))
        return self._finish(record)

    # ------------------------------------------------------------------ driver

    def run(self, rounds: int | None = None, on_record=None) -> list[RoundRecord]:
        for _ in range(self.config.rounds if rounds is None else rounds):
            rec = self.run_round()
            if on_record is not None:
                on_record(rec)
        return self.history

    def accuracy_history(self) -> dict[str, list[float]]:
        return {t.name: [r.accuracy[t.name] for r in self.history] for t in self.config.tiers}

    def summary(self) -> dict:
        cfg = self.config
        conv = {name: detect_convergence(h, cfg.convergence.window, cfg.convergence.epsilon)
                for name, h in self.accuracy_history().items()}
        final = {name: (h[-1] if h else None) for name, h in self.accuracy_history().items()}
        done = None if not conv or any(v is None for v in conv.values()) else max(conv.values())
        until = (self.history[done].cumulative_bytes if done is not None
                 else (self.history[-1].cumulative_bytes if self.history else 0))
        finals = [v for v in final.values() if v is not None]
        return {
            "name": cfg.name,
            "method": cfg.method,
            "tag": cfg.tag,
            "rounds_run": len(self.history),
            "convergence_round": conv,
            "converged": done,
            "final_accuracy": final,
            "mean_final_accuracy": float(np.mean(finals)) if finals else None,
            "cumulative_bytes": self.cumulative_bytes,
            "bytes_until_convergence": until,
            "wire_calls": int(self.counters["wire_calls"]),
            "audit": self.audit.summary(),
        }

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def distill_to_logits(model: DeviceModel, x: torch.Tensor, target_logits: torch.Tensor,
                      epochs: int, hp, seed: int) -> DeviceModel:
    """MSE regression of the model's logits onto ``target_logits``; returns a copy."""
    out = model.copy()
    opt = torch.optim.SGD(out.net.parameters(), lr=hp.learning_rate, momentum=hp.momentum)
    g = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        for b, idx in enumerate(batches(len(x), hp.batch_size, g)):
            _, logits = out.net(x[idx])
            loss = F.mse_loss(logits, target_logits[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergence(epoch, b, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
    return out


def run_baseline_fedavg(config: ExperimentConfig, **kw) -> list[RoundRecord]:
    sim = Simulation(config.model_copy(update={"method": "fedavg_homogeneous"}), **kw)
    try:
        return sim.run()
    finally:
        sim.close()


def run_baseline_logit_distillation(config: ExperimentConfig, **kw) -> list[RoundRecord]:
    sim = Simulation(config.model_copy(update={"method": "logit_distillation"}), **kw)
    try:
        return sim.run()
    finally:
        sim.close()
