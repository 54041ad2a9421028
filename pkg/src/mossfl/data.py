"""Labeled datasets, non-IID device partitions and access-audited views.

Partitions are expressed purely in sample ids; tensors are never copied into
a partition.  A :class:`DatasetView` is the only way training and transfer
code touches sample tensors, and every read is attributed to the actor
currently set with :func:`acting_as`, so a run can prove that server-side
code never read a device shard.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

DATASET_FORMAT = 1


class CapacityError(ValueError):
    """Not enough samples left to satisfy a sampling request."""


class DataDomainError(ValueError):
    """Invalid argument to a partitioning routine."""


@dataclass(frozen=True)
class LabeledDataset:
    inputs: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    ids: np.ndarray
    groups: tuple[str, ...] | None = None
    name: str = "dataset"

    def __post_init__(self):
        n = len(self.labels)
        if self.inputs.shape[0] != n or len(self.ids) != n:
            raise DataDomainError("inputs, labels and ids must have the same length")
        if n and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise DataDomainError("labels must lie in [0, num_classes)")
        if len(np.unique(self.ids)) != n:
            raise DataDomainError("sample ids must be unique")
        if self.groups is not None and len(self.groups) != n:
            raise DataDomainError("groups must have one tag per sample")
        object.__setattr__(self, "_row", {int(i): r for r, i in enumerate(self.ids)})

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def rows(self, ids: Iterable[int]) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataDomainError(f"unknown sample id {exc.args[0]}") from None

    def labels_np(self) -> np.ndarray:
        return self.labels.numpy()

    def view(self, ids: Iterable[int] | None = None, owner: str = "server",
             log: "AccessLog | None" = None) -> "DatasetView":
        ids = self.ids if ids is None else np.asarray(sorted(int(i) for i in ids), dtype=np.int64)
        return DatasetView(self, ids, owner, log)


# --------------------------------------------------------------------------- audit

_ACTOR: contextvars.ContextVar[str] = contextvars.ContextVar("mossfl_actor", default="unattributed")


@contextlib.contextmanager
def acting_as(actor: str) -> Iterator[None]:
    """Attribute every dataset read inside the block to ``actor``."""
    token = _ACTOR.set(actor)
    try:
        yield
    finally:
        _ACTOR.reset(token)


def current_actor() -> str:
    return _ACTOR.get()


@dataclass
class AccessLog:
    """Thread-safe record of (reader, view owner) pairs."""

    entries: list[tuple[str, str]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, reader: str, owner: str) -> None:
        with self._lock:
            self.entries.append((reader, owner))

    def server_reads_of_device_data(self) -> list[tuple[str, str]]:
        return [(r, o) for r, o in self.entries
                if not r.startswith("device:") and o.startswith("device:")]

    def summary(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for reader, owner in self.entries:
            key = f"{reader.split(':')[0]}->{owner.split(':')[0]}"
            out[key] = out.get(key, 0) + 1
        out["server_reads_of_device_shards"] = len(self.server_reads_of_device_data())
        return dict(sorted(out.items()))


class DatasetView:
    """A subset of a dataset addressed by sample id and owned by one party."""

    def __init__(self, dataset: LabeledDataset, ids: np.ndarray, owner: str,
                 log: AccessLog | None = None):
        self.dataset = dataset
        self.ids = ids
        self.owner = owner
        self.log = log
        self._rows = dataset.rows(ids)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return self.dataset.num_classes

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.dataset.input_shape

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self.log is not None:
            self.log.record(current_actor(), self.owner)
        rows = torch.from_numpy(self._rows)
        return self.dataset.inputs[rows], self.dataset.labels[rows]


# --------------------------------------------------------------------------- partitions

@dataclass
class Partition:
    device_shards: list[list[int]]
    public_ids: list[int] = field(default_factory=list)
    alpha: float | None = None
    seed: int = 0

    def validate(self, dataset: LabeledDataset | None = None,
                 samples_per_device: int | None = None) -> None:
        public = set(self.public_ids)
        for k, shard in enumerate(self.device_shards):
            if public & set(shard):
                raise DataDomainError(f"device {k} shard overlaps the public set")
            if samples_per_device is not None and len(shard) != samples_per_device:
                raise DataDomainError(f"device {k} has {len(shard)} samples, "
                                      f"expected {samples_per_device}")
        if dataset is not None:
            known = set(int(i) for i in dataset.ids)
            for shard in [*self.device_shards, self.public_ids]:
                if not set(shard) <= known:
                    raise DataDomainError("partition references ids outside the dataset")

    def to_json(self) -> str:
        doc = {
            "alpha": self.alpha,
            "devices": [sorted(int(i) for i in s) for s in self.device_shards],
            "public": sorted(int(i) for i in self.public_ids),
            "seed": self.seed,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        doc = json.loads(text)
        return cls(device_shards=[list(s) for s in doc["devices"]],
                   public_ids=list(doc["public"]), alpha=doc.get("alpha"),
                   seed=int(doc.get("seed", 0)))


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable ordering: bigger remainder first, then lower class index
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def _clamp_to_capacity(counts: np.ndarray, props: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Cap counts at availability, spreading any deficit over classes with room."""
    counts = counts.copy()
    while True:
        over = counts > avail
        deficit = int((counts[over] - avail[over]).sum())
        counts[over] = avail[over]
        if deficit == 0:
            return counts
        room = avail - counts
        open_ = room > 0
        weights = np.where(open_, props, 0.0)
        if weights.sum() <= 0:
            weights = room.astype(float)
        counts += _largest_remainder(weights, deficit)


def dirichlet_partition(dataset: LabeledDataset, n_devices: int, alpha: float,
                        samples_per_device: int, seed: int) -> Partition:
    """Draw one Dirichlet class mix per device and fill each shard from it.

    Draw order, all from ``np.random.default_rng(seed)``: one permutation of
    each class's ids (class order, ids ascending before shuffling), then for
    each device a ``dirichlet(alpha * ones(C))`` followed by a
    ``multinomial(samples_per_device, p)``.  Requests for more of a class than
    remains are capped and the shortfall is re-spread over the classes that
    still have samples, in proportion to the device's mix.
    """
    if alpha <= 0:
        raise DataDomainError("alpha must be positive")
    if n_devices * samples_per_device > len(dataset):
        raise CapacityError(f"{n_devices} x {samples_per_device} samples requested, "
                            f"dataset holds {len(dataset)}")
    rng = np.random.default_rng(seed)
    labels = dataset.labels_np()
    n_classes = dataset.num_classes
    pools = []
    for c in range(n_classes):
        ids = np.sort(dataset.ids[labels == c])
        pools.append(list(rng.permutation(ids)))
    cursor = np.zeros(n_classes, dtype=np.int64)
    sizes = np.array([len(p) for p in pools], dtype=np.int64)

    shards = []
    for _ in range(n_devices):
        props = rng.dirichlet(np.full(n_classes, alpha))
        counts = rng.multinomial(samples_per_device, props)
        counts = _clamp_to_capacity(counts, props, sizes - cursor)
        shard = []
        for c in range(n_classes):
            take = int(counts[c])
            shard.extend(int(i) for i in pools[c][cursor[c]:cursor[c] + take])
            cursor[c] += take
        shards.append(shard)
    return Partition(device_shards=shards, alpha=float(alpha), seed=seed)


def sample_public(dataset: LabeledDataset, exclude: Iterable[int], size: int,
                  seed: int) -> list[int]:
    """Uniformly pick ``size`` ids that are not in ``exclude``."""
    excluded = set(int(i) for i in exclude)
    pool = np.array(sorted(int(i) for i in dataset.ids if int(i) not in excluded), dtype=np.int64)
    if size > len(pool):
        raise CapacityError(f"public set of {size} requested, only {len(pool)} ids remain")
    if size == 0:
        return []
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(pool, size=size, replace=False)]


def group_partition(dataset: LabeledDataset, group_key: Sequence[str] | None,
                    assignment: Sequence[str], samples_per_device: int,
                    seed: int) -> Partition:
    """Fill each device's shard uniformly from the group it is assigned to.

    Devices assigned to the same group draw disjoint samples.  ``group_key``
    defaults to the dataset's own group tags.
    """
    tags = list(group_key if group_key is not None else (dataset.groups or ()))
    if len(tags) != len(dataset):
        raise DataDomainError("group_key must tag every sample")
    rng = np.random.default_rng(seed)
    pools: dict[str, list[int]] = {}
    for g in sorted(set(tags)):
        ids = np.sort(np.array([int(i) for i, t in zip(dataset.ids, tags) if t == g]))
        pools[g] = list(rng.permutation(ids))
    used: dict[str, int] = {g: 0 for g in pools}
    shards = []
    for k, g in enumerate(assignment):
        if g not in pools:
            raise DataDomainError(f"device {k} assigned to unknown group {g!r}")
        start = used[g]
        if start + samples_per_device > len(pools[g]):
            raise CapacityError(f"group {g!r} exhausted at device {k}")
        shards.append([int(i) for i in pools[g][start:start + samples_per_device]])
        used[g] = start + samples_per_device
    return Partition(device_shards=shards, alpha=None, seed=seed)


def label_entropy_bits(dataset: LabeledDataset, ids: Iterable[int]) -> float:
    labels = dataset.labels_np()[dataset.rows(ids)]
    counts = np.bincount(labels, minlength=dataset.num_classes).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


# --------------------------------------------------------------------------- ingestion

def load_digits_dataset() -> LabeledDataset:
    """scikit-learn's 8x8 handwritten digits, standardized to zero mean and unit
    variance over the whole set, shape (N, 1, 8, 8)."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = bunch.images / 16.0
    images = (images - images.mean()) / images.std()
    x = torch.tensor(images, dtype=torch.float32).unsqueeze(1)
    y = torch.tensor(bunch.target, dtype=torch.int64)
    return LabeledDataset(x, y, 10, np.arange(len(y), dtype=np.int64), name="digits")


def synthetic_dataset(n: int, num_classes: int, input_shape: Sequence[int] = (1,),
                      seed: int = 0, groups: Sequence[str] | None = None) -> LabeledDataset:
    """Random inputs with random labels; handy for partition-scale experiments."""
    g = torch.Generator().manual_seed(seed)
    x = torch.randn((n, *input_shape), generator=g)
    y = torch.randint(0, num_classes, (n,), generator=g)
    return LabeledDataset(x, y, num_classes, np.arange(n, dtype=np.int64),
                          tuple(groups) if groups is not None else None, name="synthetic")


def save_dataset(dataset: LabeledDataset, path: str | Path) -> Path:
    """Write the single-archive layout: an ``.npz`` holding tensors and a JSON index."""
    path = Path(path)
    index = {
        "format": DATASET_FORMAT,
        "name": dataset.name,
        "num_classes": dataset.num_classes,
        "input_shape": list(dataset.input_shape),
        "has_groups": dataset.groups is not None,
    }
    arrays = {
        "inputs": dataset.inputs.numpy().astype("<f4"),
        "labels": dataset.labels.numpy().astype("<i8"),
        "ids": dataset.ids.astype("<i8"),
        "index": np.array(json.dumps(index, sort_keys=True)),
    }
    if dataset.groups is not None:
        arrays["groups"] = np.array(dataset.groups)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_dataset(path: str | Path) -> LabeledDataset:
    """Load either on-disk layout.

    * archive: ``<name>.npz`` with ``inputs``, ``labels``, ``ids``, ``index``
      (and optionally ``groups``), as produced by :func:`save_dataset`;
    * directory: ``index.json`` plus one ``.npy`` tensor per sample, the index
      listing ``{"id", "label", "file"[, "group"]}`` for each.
    """
    path = Path(path)
    if path.is_dir():
        return _load_directory(path)
    with np.load(path, allow_pickle=False) as z:
        index = json.loads(str(z["index"]))
        _check_format(index, path)
        groups = tuple(str(g) for g in z["groups"]) if "groups" in z.files else None
        return LabeledDataset(torch.from_numpy(z["inputs"].astype(np.float32)),
                              torch.from_numpy(z["labels"].astype(np.int64)),
                              int(index["num_classes"]), z["ids"].astype(np.int64),
                              groups, name=index.get("name", path.stem))


def _check_format(index: dict, path: Path) -> None:
    if index.get("format") != DATASET_FORMAT:
        raise DataDomainError(f"{path}: unsupported dataset format {index.get('format')!r}")


def _load_directory(path: Path) -> LabeledDataset:
    index = json.loads((path / "index.json").read_text())
    _check_format(index, path)
    samples = index["samples"]
    x = np.stack([np.load(path / s["file"]).astype(np.float32) for s in samples])
    y = np.array([int(s["label"]) for s in samples], dtype=np.int64)
    ids = np.array([int(s["id"]) for s in samples], dtype=np.int64)
    groups = tuple(s["group"] for s in samples) if all("group" in s for s in samples) else None
    return LabeledDataset(torch.from_numpy(x), torch.from_numpy(y), int(index["num_classes"]),
                          ids, groups, name=index.get("name", path.name))
