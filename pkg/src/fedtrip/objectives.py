"""Local-objective modifiers for FedAvg, FedProx and FedTrip.

Each method turns the plain mini-batch gradient of the local loss into the
direction the optimizer actually follows. FedTrip adds the gradient of

    (mu/2) * (||w_local - w_global||^2 - xi * ||w_local - w_hist||^2)

which pulls the local model toward the global model and pushes it away from
the client's previous local model.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError
from .nn import ParamVector, check_layout, l2_norm_sq


class MethodTag(str, Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDTRIP = "fedtrip"

    @classmethod
    def parse(cls, value) -> MethodTag:
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown method {value!r}; expected one of "
                              f"{[m.value for m in cls]}") from None


@dataclass(frozen=True)
class RegularizerParams:
    mu: float = 0.0
    xi: float = 1.0

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigError("mu must be nonnegative")


def triplet_penalty(
    w_local: ParamVector, w_global: ParamVector, w_hist: ParamVector, p: RegularizerParams
) -> float:
    # Signed: negative whenever the historical model is closer than the global one.
    check_layout(w_local, w_global, w_hist)
    return 0.5 * p.mu * (l2_norm_sq(w_local - w_global) - p.xi * l2_norm_sq(w_local - w_hist))


def triplet_grad(
    w_local: ParamVector, w_global: ParamVector, w_hist: ParamVector, p: RegularizerParams
) -> ParamVector:
    check_layout(w_local, w_global, w_hist)
    wl, wg, wh = w_local.values, w_global.values, w_hist.values
    return w_local.like(p.mu * ((wl - wg) + p.xi * (wh - wl)))


def prox_grad(w_local: ParamVector, w_global: ParamVector, mu: float) -> ParamVector:
    check_layout(w_local, w_global)
    return w_local.like(mu * (w_local.values - w_global.values))


def modified_direction(
    method: MethodTag,
    base_grad: ParamVector,
    w_local: ParamVector,
    w_global: ParamVector,
    w_hist: ParamVector | None,
    p: RegularizerParams,
) -> ParamVector:
    """Update direction ``h`` for one mini-batch step.

    FedTrip without a historical model (first participation) degrades to the
    proximal term. With ``mu == 0`` every method returns ``base_grad`` itself,
    so the three methods produce bit-identical trajectories.
    """
    method = MethodTag(method)
    check_layout(base_grad, w_local, w_global)
    if method is MethodTag.FEDAVG or p.mu == 0:
        return base_grad
    if method is MethodTag.FEDPROX or w_hist is None:
        return base_grad + prox_grad(w_local, w_global, p.mu)
    return base_grad + triplet_grad(w_local, w_global, w_hist, p)


def gamma_inexactness(
    w_new: ParamVector,
    w_global: ParamVector,
    w_hist: ParamVector,
    p: RegularizerParams,
    grad_at_new: ParamVector,
    grad_at_global: ParamVector,
) -> float | None:
    """Achieved inexactness ``||grad h(w_new)|| / ||grad F_k(w_global)||``.

    ``grad_at_new`` and ``grad_at_global`` are gradients of the client's plain
    loss at ``w_new`` and ``w_global``. Returns ``None`` when the denominator
    vanishes (the global model is already stationary for this client).
    """
    check_layout(w_new, w_global, w_hist, grad_at_new, grad_at_global)
    denom = float(np.linalg.norm(grad_at_global.values))
    if denom == 0.0:
        return None
    grad_h = grad_at_new + triplet_grad(w_new, w_global, w_hist, p)
    return float(np.linalg.norm(grad_h.values)) / denom
