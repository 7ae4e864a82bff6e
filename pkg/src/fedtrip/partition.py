"""Non-IID label partitioners: Dirichlet label skew and orthogonal clusters."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError

# Stream tags mixed into seeds so independent draws never share a stream.
_POOL_STREAM = 0
_CLIENT_STREAM = 1


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "dirichlet"
    alpha: float = 0.5
    num_clusters: int = 5
    samples_per_client: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("dirichlet", "orthogonal"):
            raise ConfigError(f"unknown partition kind {self.kind!r}")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise ConfigError("dirichlet partition needs alpha > 0")
        if self.kind == "orthogonal" and self.num_clusters < 1:
            raise ConfigError("orthogonal partition needs num_clusters >= 1")
        if self.samples_per_client < 1:
            raise ConfigError("samples_per_client must be positive")


@dataclass(frozen=True, eq=False)
class PartitionResult:
    shards: list[np.ndarray]
    label_histograms: np.ndarray  # (n_clients, num_classes)

    @property
    def n_clients(self) -> int:
        return len(self.shards)


def _num_classes(labels: np.ndarray, num_classes: int | None) -> int:
    return int(labels.max()) + 1 if num_classes is None else num_classes


def _class_pools(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> list[list[int]]:
    pools = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        pools.append(idx.tolist())
    return pools


def _histograms(shards, labels, num_classes) -> np.ndarray:
    return np.stack([np.bincount(labels[s], minlength=num_classes) for s in shards])


def _check_capacity(labels, n_clients, spec):
    need = n_clients * spec.samples_per_client
    if need > labels.size:
        raise CapacityError(
            f"{n_clients} clients x {spec.samples_per_client} samples = {need} "
            f"exceeds the {labels.size} available"
        )


def dirichlet_simplex(alpha: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet(alpha * 1) draw via normalized Gamma(alpha, 1) variates."""
    g = rng.gamma(alpha, 1.0, size=num_classes)
    total = g.sum()
    if total == 0.0:  # every variate underflowed (tiny alpha)
        g = np.zeros(num_classes)
        g[rng.integers(num_classes)] = 1.0
        total = 1.0
    return g / total


def dirichlet_partition(
    labels, n_clients: int, spec: PartitionSpec, num_classes: int | None = None
) -> PartitionResult:
    """Each client draws its own class proportions and fills its shard from
    shared class pools without replacement.

    Clients are filled in id order. When a class pool runs dry, the client's
    remaining demand is redistributed over the classes that still have stock,
    in proportion to its drawn vector.
    """
    if spec.kind != "dirichlet":
        raise ConfigError("spec.kind must be 'dirichlet'")
    labels = np.asarray(labels, dtype=np.int64)
    _check_capacity(labels, n_clients, spec)
    C = _num_classes(labels, num_classes)
    pools = _class_pools(labels, C, np.random.default_rng([spec.seed, _POOL_STREAM]))
    # Position of the next unused index in each pool.
    taken = np.zeros(C, dtype=np.int64)
    stock = np.array([len(p) for p in pools], dtype=np.int64)

    shards = []
    for k in range(n_clients):
        rng = np.random.default_rng([spec.seed, _CLIENT_STREAM, k])
        probs = dirichlet_simplex(spec.alpha, C, rng)
        counts = np.zeros(C, dtype=np.int64)
        remaining = spec.samples_per_client
        while remaining > 0:
            avail = stock - taken - counts
            weights = np.where(avail > 0, probs, 0.0)
            if weights.sum() == 0.0:
                # The drawn vector has no mass on any class with stock left.
                weights = (avail > 0).astype(np.float64)
            draw = rng.multinomial(remaining, weights / weights.sum())
            draw = np.minimum(draw, avail)
            counts += draw
            remaining -= int(draw.sum())
        shard = []
        for c in range(C):
            shard.extend(pools[c][taken[c] : taken[c] + counts[c]])
        taken += counts
        shards.append(np.sort(np.array(shard, dtype=np.int64)))
    return PartitionResult(shards, _histograms(shards, labels, C))


def cluster_classes(num_classes: int, num_clusters: int) -> list[np.ndarray]:
    """Near-even split of class ids, in ascending order, into disjoint groups."""
    if num_clusters > num_classes:
        raise ConfigError(f"{num_clusters} clusters need at least as many classes, got {num_classes}")
    return np.array_split(np.arange(num_classes), num_clusters)


def orthogonal_partition(
    labels, n_clients: int, spec: PartitionSpec, num_classes: int | None = None
) -> PartitionResult:
    """Clients are dealt round-robin into clusters with disjoint class sets and
    sample IID, without replacement, from their cluster's classes."""
    if spec.kind != "orthogonal":
        raise ConfigError("spec.kind must be 'orthogonal'")
    labels = np.asarray(labels, dtype=np.int64)
    C = _num_classes(labels, num_classes)
    groups = cluster_classes(C, spec.num_clusters)
    _check_capacity(labels, n_clients, spec)
    rng = np.random.default_rng([spec.seed, _POOL_STREAM])
    pools = []
    for g in groups:
        idx = np.flatnonzero(np.isin(labels, g))
        rng.shuffle(idx)
        pools.append(idx)
    taken = [0] * len(groups)
    shards = []
    for k in range(n_clients):
        j = k % spec.num_clusters
        end = taken[j] + spec.samples_per_client
        if end > pools[j].size:
            raise CapacityError(
                f"cluster {j} (classes {groups[j].tolist()}) has only {pools[j].size} "
                f"samples; client {k} would need sample #{end}"
            )
        shards.append(np.sort(pools[j][taken[j] : end]))
        taken[j] = end
    return PartitionResult(shards, _histograms(shards, labels, C))


def partition(labels, n_clients: int, spec: PartitionSpec, num_classes: int | None = None):
    if spec.kind == "dirichlet":
        return dirichlet_partition(labels, n_clients, spec, num_classes)
    return orthogonal_partition(labels, n_clients, spec, num_classes)


@dataclass(frozen=True)
class PartitionStats:
    entropy: np.ndarray  # nats, per client
    effective_classes: np.ndarray

    @property
    def mean_entropy(self) -> float:
        return float(self.entropy.mean())


def partition_stats(result: PartitionResult) -> PartitionStats:
    h = result.label_histograms.astype(np.float64)
    p = h / h.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    ent = terms.sum(axis=1)
    return PartitionStats(ent, np.exp(ent))


def partition_stats_csv(result: PartitionResult) -> str:
    """CSV with columns client_id, class_0..class_{C-1}, entropy."""
    stats = partition_stats(result)
    C = result.label_histograms.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", *(f"class_{c}" for c in range(C)), "entropy"])
    for k, row in enumerate(result.label_histograms):
        w.writerow([k, *(int(v) for v in row), repr(float(stats.entropy[k]))])
    return buf.getvalue()
