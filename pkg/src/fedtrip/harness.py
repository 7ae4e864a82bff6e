"""Experiment plans: load from JSON, run every (method, seed), summarize.

A plan file looks like::

    {
      "base": {"rounds": 100, "mu": 1.0},
      "methods": ["fedavg", "fedprox", "fedtrip"],
      "mu_by_method": {"fedprox": 0.1},
      "seeds": [0, 1, 2],
      "partition": {"kind": "dirichlet", "alpha": 0.1, "samples_per_client": 600},
      "dataset": {"kind": "synthetic_blobs"},
      "target_accuracy": 0.85
    }

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import load_mnist_idx, make_synthetic_blobs
from .errors import ConfigError
from .federation import FederationConfig, RoundRecord, metrics_csv, run_federation
from .nn import Dataset, MlpSpec
from .objectives import MethodTag
from .partition import PartitionResult, PartitionSpec, partition

FINAL_WINDOW = 10

_DATASET_KEYS = {
    "synthetic_blobs": {"kind", "n_classes", "dim", "samples_per_class", "test_samples_per_class",
                        "spread", "radius", "seed"},
    "mnist_idx": {"kind", "train_images", "train_labels", "test_images", "test_labels"},
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic_blobs"
    n_classes: int = 10
    dim: int = 20
    samples_per_class: int = 1000
    test_samples_per_class: int = 200
    spread: float = 0.8
    radius: float = 3.0
    seed: int = 1
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        kind = d.get("kind", "synthetic_blobs")
        if kind not in _DATASET_KEYS:
            raise ConfigError(f"unknown dataset kind {kind!r}")
        unknown = set(d) - _DATASET_KEYS[kind]
        if unknown:
            raise ConfigError(f"unknown keys for dataset {kind!r}: {sorted(unknown)}")
        spec = cls(**d)
        if kind == "mnist_idx" and None in (spec.train_images, spec.train_labels,
                                             spec.test_images, spec.test_labels):
            raise ConfigError("mnist_idx needs train_images, train_labels, test_images, test_labels")
        return spec

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in sorted(_DATASET_KEYS[self.kind])}

    def load(self, base_dir: Path | None = None) -> tuple[Dataset, Dataset]:
        if self.kind == "synthetic_blobs":
            train = make_synthetic_blobs(self.n_classes, self.dim, self.samples_per_class,
                                         self.spread, self.seed, self.radius)
            test = make_synthetic_blobs(self.n_classes, self.dim, self.test_samples_per_class,
                                        self.spread, self.seed + 1, self.radius)
            return train, test
        root = base_dir or Path.cwd()
        p = lambda s: root / s  # noqa: E731
        return (load_mnist_idx(p(self.train_images), p(self.train_labels)),
                load_mnist_idx(p(self.test_images), p(self.test_labels)))


def _strict(cls, d: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class ExperimentPlan:
    base: FederationConfig = field(default_factory=FederationConfig)
    methods: tuple[MethodTag, ...] = (MethodTag.FEDAVG, MethodTag.FEDPROX, MethodTag.FEDTRIP)
    seeds: tuple[int, ...] = tuple(range(10))
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    target_accuracy: float = 0.85
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    mu_by_method: dict = field(default_factory=dict)
    hidden_dims: tuple[int, ...] = (100,)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(MethodTag.parse(m) for m in self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        mus = {MethodTag.parse(m).value: float(v) for m, v in dict(self.mu_by_method).items()}
        object.__setattr__(self, "mu_by_method", mus)
        if not self.methods or not self.seeds:
            raise ConfigError("a plan needs at least one method and one seed")
        if not 0 < self.target_accuracy < 1:
            raise ConfigError("target_accuracy must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentPlan:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        if "base" in d:
            d["base"] = FederationConfig.from_dict(d["base"])
        if "partition" in d:
            d["partition"] = _strict(PartitionSpec, d["partition"], "partition")
        if "dataset" in d:
            d["dataset"] = DatasetSpec.from_dict(d["dataset"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "methods": [m.value for m in self.methods],
            "seeds": list(self.seeds),
            "partition": {f.name: getattr(self.partition, f.name) for f in fields(self.partition)},
            "target_accuracy": self.target_accuracy,
            "dataset": self.dataset.to_dict(),
            "mu_by_method": dict(self.mu_by_method),
            "hidden_dims": list(self.hidden_dims),
        }

    def config_for(self, method: MethodTag, seed: int, mu: float | None = None) -> FederationConfig:
        if mu is None:
            mu = self.mu_by_method.get(MethodTag(method).value, self.base.mu)
        return replace(self.base, method=method, mu=mu, seed=seed)

    def partition_for(self, seed: int) -> PartitionSpec:
        # One partition per seed, shared by every method for a fair comparison.
        derived = int(np.random.SeedSequence([self.partition.seed, seed]).generate_state(1)[0])
        return replace(self.partition, seed=derived)


def load_plan(path) -> ExperimentPlan:
    with open(path, encoding="utf-8") as f:
        return ExperimentPlan.from_dict(json.load(f))


def rounds_to_target(records: list[RoundRecord], target: float) -> int | None:
    for r in records:
        if r.test_accuracy >= target:
            return r.round
    return None


def final_accuracy(records: list[RoundRecord], window: int = FINAL_WINDOW) -> float:
    return float(np.mean([r.test_accuracy for r in records[-window:]]))


@dataclass(frozen=True)
class SummaryRow:
    method: str
    rounds_median: float  # inf when the median run never reached the target
    rounds_mean: float | None  # None unless every seed reached the target
    n_reached: int
    n_runs: int
    final_accuracy: float
    total_flops: float
    total_comm_bytes: float
    speedup_vs_baseline: float
    speedup_bound: str  # "=", ">", "<" or "?" (neither run reached the target)


class PlanRunner:
    """Holds loaded data and cached partitions for one plan."""

    def __init__(self, plan: ExperimentPlan, base_dir: Path | None = None):
        self.plan = plan
        self.train, self.test = plan.dataset.load(base_dir)
        self.spec = MlpSpec(self.train.dim, plan.hidden_dims, self.train.num_classes)
        self._partitions: dict[int, PartitionResult] = {}

    def partition(self, seed: int) -> PartitionResult:
        if seed not in self._partitions:
            self._partitions[seed] = partition(
                self.train.labels, self.plan.base.n_clients, self.plan.partition_for(seed),
                self.train.num_classes,
            )
        return self._partitions[seed]

    def run(self, method: MethodTag, seed: int, mu: float | None = None) -> list[RoundRecord]:
        cfg = self.plan.config_for(method, seed, mu)
        return run_federation(cfg, self.partition(seed), self.train, self.test, self.spec)


def _median_rounds(values: list[int | None], T: int) -> float:
    return float(np.median([math.inf if v is None else v for v in values]))


def summarize(plan: ExperimentPlan, curves: dict[tuple[str, int], list[RoundRecord]]) -> list[SummaryRow]:
    T = plan.base.rounds
    per_method = {}
    for m in plan.methods:
        runs = [curves[(m.value, s)] for s in plan.seeds]
        hits = [rounds_to_target(r, plan.target_accuracy) for r in runs]
        per_method[m.value] = (runs, hits, _median_rounds(hits, T))
    baseline = MethodTag.FEDAVG.value if MethodTag.FEDAVG in plan.methods else plan.methods[0].value
    base_med = per_method[baseline][2]
    rows = []
    for m in plan.methods:
        runs, hits, med = per_method[m.value]
        if math.isfinite(med) and math.isfinite(base_med):
            speedup, bound = base_med / med, "="
        elif math.isfinite(med):
            speedup, bound = T / med, ">"
        elif math.isfinite(base_med):
            speedup, bound = base_med / T, "<"
        else:
            speedup, bound = math.nan, "?"
        reached = [h for h in hits if h is not None]
        rows.append(SummaryRow(
            method=m.value,
            rounds_median=med,
            rounds_mean=float(np.mean(reached)) if len(reached) == len(hits) else None,
            n_reached=len(reached),
            n_runs=len(hits),
            final_accuracy=float(np.mean([final_accuracy(r) for r in runs])),
            total_flops=float(np.mean([r[-1].cum_flops for r in runs])) if runs[0] else 0.0,
            total_comm_bytes=float(np.mean([r[-1].cum_comm_bytes for r in runs])) if runs[0] else 0.0,
            speedup_vs_baseline=speedup,
            speedup_bound=bound,
        ))
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


SUMMARY_COLUMNS = ("method", "rounds_to_target_median", "rounds_to_target_mean", "n_reached", "n_runs",
                   "final_accuracy", "total_flops", "total_comm_bytes", "speedup_vs_baseline")


def summary_csv(rows: list[SummaryRow], rounds: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        median = _fmt(r.rounds_median) if math.isfinite(r.rounds_median) else f">{rounds}"
        mean = "" if r.rounds_mean is None else _fmt(r.rounds_mean)
        if r.speedup_bound == "?":
            speed = "nan"
        else:
            speed = ("" if r.speedup_bound == "=" else r.speedup_bound) + _fmt(r.speedup_vs_baseline)
        w.writerow([r.method, median, mean, r.n_reached, r.n_runs, _fmt(r.final_accuracy),
                    _fmt(r.total_flops), _fmt(r.total_comm_bytes), speed])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def run_curve_name(method: str, seed: int) -> str:
    return f"{method}_seed{seed}.csv"


def run_plan(plan: ExperimentPlan, out_dir=None, base_dir: Path | None = None) -> list[SummaryRow]:
    """Run every (method, seed) pair. With ``out_dir``, writes
    ``runs/<method>_seed<s>.csv`` per run and ``summary.csv``."""
    runner = PlanRunner(plan, base_dir)
    curves = {}
    for seed in plan.seeds:
        for m in plan.methods:
            curves[(m.value, seed)] = runner.run(m, seed)
    rows = summarize(plan, curves)
    if out_dir is not None:
        out = Path(out_dir)
        for (m, s), recs in curves.items():
            _write(out / "runs" / run_curve_name(m, s), metrics_csv(recs))
        _write(out / "summary.csv", summary_csv(rows, plan.base.rounds))
    return rows


@dataclass(frozen=True)
class SweepRow:
    mu: float
    final_accuracy_mean: float
    final_accuracy_std: float
    final_accuracy_var: float
    rounds_mean: float
    rounds_std: float
    rounds_var: float
    n_reached: int
    n_runs: int


def _mean_var(values: list[float]) -> tuple[float, float, float]:
    if not values:
        return math.nan, math.nan, math.nan
    mean = statistics.fmean(values)
    if len(values) < 2:
        return mean, math.nan, math.nan
    var = statistics.variance(values)
    return mean, math.sqrt(var), var


SWEEP_COLUMNS = ("mu", "final_accuracy_mean", "final_accuracy_std", "final_accuracy_var",
                 "rounds_to_target_mean", "rounds_to_target_std", "rounds_to_target_var",
                 "n_reached", "n_runs")


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.mu), _fmt(r.final_accuracy_mean), _fmt(r.final_accuracy_std),
                    _fmt(r.final_accuracy_var), _fmt(r.rounds_mean), _fmt(r.rounds_std),
                    _fmt(r.rounds_var), r.n_reached, r.n_runs])
    return buf.getvalue()


def mu_sweep(plan: ExperimentPlan, mu_values, out_dir=None, base_dir: Path | None = None) -> list[SweepRow]:
    """FedTrip at each mu. Accuracy stats use every seed; rounds-to-target
    stats use only the seeds that reached the target (count in ``n_reached``).
    Variances are unbiased sample variances."""
    if MethodTag.FEDTRIP not in plan.methods:
        raise ConfigError("mu_sweep needs fedtrip among the plan's methods")
    runner = PlanRunner(plan, base_dir)
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    for mu in mu_values:
        accs, hits = [], []
        for seed in plan.seeds:
            recs = runner.run(MethodTag.FEDTRIP, seed, mu=float(mu))
            if out is not None:
                _write(out / "runs" / f"mu{float(mu)!r}_seed{seed}.csv", metrics_csv(recs))
            accs.append(final_accuracy(recs))
            h = rounds_to_target(recs, plan.target_accuracy)
            if h is not None:
                hits.append(float(h))
        am, asd, av = _mean_var(accs)
        rm, rsd, rv = _mean_var(hits)
        rows.append(SweepRow(float(mu), am, asd, av, rm, rsd, rv, len(hits), len(accs)))
    if out is not None:
        _write(out / "mu_sweep.csv", sweep_csv(rows))
    return rows
