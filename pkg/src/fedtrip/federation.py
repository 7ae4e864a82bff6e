"""Synchronous federated round loop (select, broadcast, local train, aggregate).

Random streams are derived from the run seed with fixed tags, so results do
not depend on the order in which clients happen to be trained.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import costs
from .errors import ConfigError, LayoutError
from .nn import (
    Dataset,
    MlpSpec,
    ParamVector,
    SgdmState,
    accuracy,
    check_layout,
    init_params,
    loss_and_grad,
    sgdm_step,
)
from .objectives import MethodTag, RegularizerParams, modified_direction
from .partition import PartitionResult

_INIT_STREAM = 10
_SELECT_STREAM = 11
_SHUFFLE_STREAM = 12

XI_MODES = ("reciprocal_gap", "constant")
WEIGHTINGS = ("data_size", "uniform")


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 10
    clients_per_round: int = 4
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    method: MethodTag = MethodTag.FEDTRIP
    mu: float = 1.0
    xi_mode: str = "reciprocal_gap"
    xi_constant: float = 1.0
    aggregation_weights: str = "data_size"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", MethodTag.parse(self.method))
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigError(
                f"need 1 <= clients_per_round <= n_clients, got "
                f"{self.clients_per_round} and {self.n_clients}"
            )
        if self.rounds < 0 or self.local_epochs < 0 or self.batch_size < 1:
            raise ConfigError("rounds and local_epochs must be >= 0, batch_size >= 1")
        if self.mu < 0:
            raise ConfigError("mu must be nonnegative")
        if self.xi_mode not in XI_MODES:
            raise ConfigError(f"xi_mode must be one of {XI_MODES}")
        if self.aggregation_weights not in WEIGHTINGS:
            raise ConfigError(f"aggregation_weights must be one of {WEIGHTINGS}")

    @classmethod
    def from_dict(cls, d: dict) -> FederationConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown FederationConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["method"] = self.method.value
        return d


@dataclass(frozen=True, eq=False)
class ClientState:
    id: int
    shard: np.ndarray
    hist_model: ParamVector | None = None
    last_round: int | None = None

    def __post_init__(self):
        if (self.hist_model is None) != (self.last_round is None):
            raise ValueError("hist_model and last_round must be set together")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_accuracy: float
    mean_train_loss: float
    selected: tuple[int, ...]
    cum_flops: float
    cum_comm_bytes: float


def select_clients(n: int, k: int, seed: int, round: int) -> list[int]:
    """Uniform sample of ``k`` distinct client ids for ``round``, ascending."""
    if not 1 <= k <= n:
        raise ConfigError(f"cannot select {k} of {n} clients")
    rng = np.random.default_rng([seed, _SELECT_STREAM, round])
    return sorted(int(i) for i in rng.choice(n, size=k, replace=False))


def xi_value(current_round: int, last_round: int, mode: str = "reciprocal_gap", constant: float = 1.0) -> float:
    gap = current_round - last_round
    if gap <= 0:
        raise ValueError(f"participation gap must be positive, got {gap}")
    if mode == "reciprocal_gap":
        return 1.0 / gap
    if mode == "constant":
        return float(constant)
    raise ConfigError(f"unknown xi_mode {mode!r}")


def client_xi(client: ClientState, round: int, cfg: FederationConfig) -> float | None:
    if client.last_round is None:
        return None
    return xi_value(round, client.last_round, cfg.xi_mode, cfg.xi_constant)


def epoch_orders(shard: np.ndarray, cfg: FederationConfig, client_id: int, round: int) -> list[np.ndarray]:
    """Shuffled sample order for each local epoch of one client in one round."""
    rng = np.random.default_rng([cfg.seed, _SHUFFLE_STREAM, client_id, round])
    return [rng.permutation(shard) for _ in range(cfg.local_epochs)]


def local_train(
    client: ClientState,
    w_global: ParamVector,
    cfg: FederationConfig,
    round: int,
    spec: MlpSpec,
    data: Dataset,
) -> tuple[ParamVector, float]:
    """Run ``cfg.local_epochs`` epochs of mini-batch SGDm from ``w_global``.

    Momentum starts from zero every round. Returns the final local model and
    the mean mini-batch loss (NaN if no step was taken).
    """
    if len(client.shard) == 0:
        raise ConfigError(f"client {client.id} has an empty shard")
    xi = client_xi(client, round, cfg)
    reg = RegularizerParams(cfg.mu, 0.0 if xi is None else xi)
    w = w_global
    state = SgdmState.fresh(w, cfg.lr, cfg.momentum)
    losses = []
    for order in epoch_orders(client.shard, cfg, client.id, round):
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = loss_and_grad(spec, w, data.features[idx], data.labels[idx])
            h = modified_direction(cfg.method, grad, w, w_global, client.hist_model, reg)
            w, state = sgdm_step(w, h, state)
            losses.append(loss)
    return w, (float(np.mean(losses)) if losses else math.nan)


def aggregate(models: list[ParamVector], weights: list[float]) -> ParamVector:
    """Weighted sum, accumulated in the order given."""
    if len(models) != len(weights) or not models:
        raise ConfigError("need one weight per model and at least one model")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ConfigError(f"aggregation weights must be nonnegative and sum to 1, got {w.sum()!r}")
    check_layout(*models)
    acc = np.zeros_like(models[0].values)
    for m, a in zip(models, w):
        acc = acc + a * m.values
    return models[0].like(acc)


def aggregation_weights(sizes: list[int], mode: str) -> list[float]:
    if mode == "uniform":
        return [1.0 / len(sizes)] * len(sizes)
    total = sum(sizes)
    return [s / total for s in sizes]


class Federation:
    """Mutable simulation state; :meth:`step` runs one communication round.

    ``workers > 1`` trains the selected clients in threads. Each worker only
    reads the shared global model and its own client state, and results are
    consumed in ascending client id, so the outcome is identical.
    """

    def __init__(
        self,
        cfg: FederationConfig,
        partition: PartitionResult,
        train: Dataset,
        test: Dataset,
        spec: MlpSpec | None = None,
        init: ParamVector | None = None,
        workers: int = 1,
    ):
        if partition.n_clients != cfg.n_clients:
            raise ConfigError(
                f"partition has {partition.n_clients} shards but n_clients={cfg.n_clients}"
            )
        self.cfg = cfg
        self.train = train
        self.test = test
        self.spec = spec or MlpSpec(train.dim, (100,), train.num_classes)
        if init is None:
            init = init_params(self.spec, np.random.default_rng([cfg.seed, _INIT_STREAM]))
        elif init.layout != self.spec.layout:
            raise LayoutError("initial model does not match the network spec")
        self.global_model = init
        self.clients = [ClientState(k, np.asarray(s)) for k, s in enumerate(partition.shards)]
        self.profile = costs.custom_profile(self.spec)
        self.round = 0
        self.cum_flops = 0.0
        self.cum_comm_bytes = 0.0
        self.last_local_models: dict[int, ParamVector] = {}
        self.last_xis: dict[int, float | None] = {}
        self.workers = workers

    def _train_one(self, k: int, rnd: int):
        return local_train(self.clients[k], self.global_model, self.cfg, rnd, self.spec, self.train)

    def step(self) -> RoundRecord:
        cfg = self.cfg
        rnd = self.round + 1
        selected = select_clients(cfg.n_clients, cfg.clients_per_round, cfg.seed, rnd)
        self.last_xis = {k: client_xi(self.clients[k], rnd, cfg) for k in selected}
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(lambda k: self._train_one(k, rnd), selected))
        else:
            results = [self._train_one(k, rnd) for k in selected]

        models = [m for m, _ in results]
        sizes = [len(self.clients[k].shard) for k in selected]
        self.global_model = aggregate(models, aggregation_weights(sizes, cfg.aggregation_weights))
        self.last_local_models = dict(zip(selected, models))
        for k, m in zip(selected, models):
            self.clients[k] = replace(self.clients[k], hist_model=m, last_round=rnd)

        for n in sizes:
            self.cum_flops += costs.training_flops(
                cfg.method, 1, 1, n, cfg.batch_size, cfg.local_epochs, self.profile
            )
        self.cum_comm_bytes += costs.round_comm_bytes(cfg.method, len(selected), self.profile)
        self.round = rnd
        losses = [l for _, l in results]
        return RoundRecord(
            round=rnd,
            test_accuracy=accuracy(self.spec, self.global_model, self.test),
            mean_train_loss=float(np.mean(losses)),
            selected=tuple(selected),
            cum_flops=self.cum_flops,
            cum_comm_bytes=self.cum_comm_bytes,
        )

    def run(self, rounds: int | None = None) -> list[RoundRecord]:
        return [self.step() for _ in range(self.cfg.rounds if rounds is None else rounds)]


def run_federation(
    cfg: FederationConfig,
    partition: PartitionResult,
    train: Dataset,
    test: Dataset,
    spec: MlpSpec | None = None,
    init: ParamVector | None = None,
) -> list[RoundRecord]:
    return Federation(cfg, partition, train, test, spec, init).run()


METRICS_COLUMNS = ("round", "test_accuracy", "mean_train_loss", "cum_flops", "cum_comm_bytes", "selected_ids")


def metrics_csv(records: list[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in records:
        w.writerow([
            r.round,
            repr(r.test_accuracy),
            repr(r.mean_train_loss),
            repr(r.cum_flops),
            repr(r.cum_comm_bytes),
            ";".join(str(i) for i in r.selected),
        ])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[RoundRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        RoundRecord(
            round=int(r["round"]),
            test_accuracy=float(r["test_accuracy"]),
            mean_train_loss=float(r["mean_train_loss"]),
            selected=tuple(int(i) for i in r["selected_ids"].split(";") if i),
            cum_flops=float(r["cum_flops"]),
            cum_comm_bytes=float(r["cum_comm_bytes"]),
        )
        for r in rows
    ]


# Checkpoint: b"FTCK", u32 header length, JSON layout header, raw <f8 values.
_CKPT_MAGIC = b"FTCK"


def save_checkpoint(path, params: ParamVector) -> None:
    header = json.dumps({"layout": [[n, list(s)] for n, s in params.layout]}).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamVector:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    layout = tuple((n, tuple(s)) for n, s in header["layout"])
    values = np.frombuffer(raw[8 + hlen :], dtype="<f8").astype(np.float64)
    return ParamVector(values, layout)
