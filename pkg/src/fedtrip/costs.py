"""Resource accounting: per-method attaching-operation FLOPs and
communication volume per round.

Symbols used in the formula table:
    K  local iterations per round      M  batch size
    n  local samples                   w  parameter count |w|
    FP / BP  FLOPs of one sample's feedforward / backprop
    p  number of historical models (MOON)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError
from .nn import MlpSpec

MB = 1e6  # decimal megabyte


@dataclass(frozen=True)
class ModelCostProfile:
    name: str
    param_count: float
    fp_per_sample: float
    bp_per_sample: float
    comm_bytes_per_transfer: float

    @property
    def bytes_per_param(self) -> float:
        return self.comm_bytes_per_transfer / self.param_count


def _preset(name: str, comm_mb: float, params_m: float, mflops: float) -> ModelCostProfile:
    # Backprop is taken as twice the forward cost.
    return ModelCostProfile(name, params_m * 1e6, mflops * 1e6, 2 * mflops * 1e6, comm_mb * MB)


PRESETS: dict[str, ModelCostProfile] = {
    "mlp": _preset("mlp", 0.3, 0.8, 0.08),
    "cnn": _preset("cnn", 0.24, 0.62, 0.42),
    "alexnet": _preset("alexnet", 10.42, 2.72, 145.93),
}


def custom_profile(spec: MlpSpec, bytes_per_param: int = 8) -> ModelCostProfile:
    """Profile of a live MLP: FP = 2 x MACs, BP = 2 x FP, float64 transport."""
    fp = 2.0 * spec.macs_per_sample
    return ModelCostProfile(
        "custom", float(spec.param_count), fp, 2.0 * fp, float(bytes_per_param * spec.param_count)
    )


@dataclass(frozen=True)
class MethodCostFormula:
    method: str
    attach_flops: str  # expression in K, M, n, w, FP, BP, p
    extra_comm: str  # expression in w (parameters moved per selected client)


FORMULAS: dict[str, MethodCostFormula] = {
    f.method: f
    for f in (
        MethodCostFormula("scaffold", "2*(K+1)*w + n*(FP+BP)", "2*w"),
        MethodCostFormula("mimelite", "n*(FP+BP)", "2*w"),
        MethodCostFormula("moon", "K*(M*(1+p)*FP)", "0"),
        MethodCostFormula("fedprox", "2*K*w", "0"),
        MethodCostFormula("feddyn", "4*K*w", "0"),
        MethodCostFormula("fedtrip", "4*K*w", "0"),
        MethodCostFormula("fedavg", "0", "0"),
    )
}


def _method(method) -> str:
    name = getattr(method, "value", method)
    if name not in FORMULAS:
        raise ConfigError(f"no cost formula for method {name!r}")
    return name


def attach_flops(method, K: float, M: float, n: float, profile: ModelCostProfile, p_hist: int = 1) -> float:
    name = _method(method)
    w, FP, BP = profile.param_count, profile.fp_per_sample, profile.bp_per_sample
    if name == "scaffold":
        return 2 * (K + 1) * w + n * (FP + BP)
    if name == "mimelite":
        return n * (FP + BP)
    if name == "moon":
        return K * (M * (1 + p_hist) * FP)
    if name == "fedprox":
        return 2 * K * w
    if name in ("feddyn", "fedtrip"):
        return 4 * K * w
    return 0.0


def extra_comm_params(method, profile: ModelCostProfile) -> float:
    """Extra parameters moved per selected client per round, beyond the model itself."""
    name = _method(method)
    return 2 * profile.param_count if name in ("scaffold", "mimelite") else 0.0


def round_comm_bytes(method, k_selected: int, profile: ModelCostProfile) -> float:
    """Downlink plus uplink of the model for each selected client, plus any
    method-specific extra state."""
    extra = extra_comm_params(method, profile) * profile.bytes_per_param
    return k_selected * (2 * profile.comm_bytes_per_transfer + extra)


def local_iterations(n_samples: int, batch_size: int, local_epochs: int) -> int:
    return local_epochs * math.ceil(n_samples / batch_size)


def training_flops(
    method,
    rounds: int,
    k_selected: int,
    n_samples: int,
    batch_size: int,
    local_epochs: int,
    profile: ModelCostProfile,
    p_hist: int = 1,
) -> float:
    """Feedforward plus attaching FLOPs over ``rounds`` rounds. Backprop is
    deliberately left out."""
    K = local_iterations(n_samples, batch_size, local_epochs)
    feedforward = K * batch_size * profile.fp_per_sample
    attach = attach_flops(method, K, batch_size, n_samples, profile, p_hist)
    return rounds * k_selected * (feedforward + attach)
