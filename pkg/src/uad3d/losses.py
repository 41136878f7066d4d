"""ELBO and the collapse-robust loss with cyclical KL annealing.

The robust loss is ``recon / sigma + beta(t) * kl`` where ``recon`` is the mean
absolute reconstruction error, ``sigma`` the mean of the previous ``L`` raw
reconstruction values (a constant with respect to gradients) and ``beta`` a
ramp from 0 to 1 over the first half of each cycle of length ``T``, then flat.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

DEFAULT_T = 50
DEFAULT_L = 10
EPSILON_FLOOR = 1e-8

LOG_COLUMNS = ("t", "beta", "raw_recon", "sigma", "normalized_recon", "kl", "total")


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def l1_reconstruction(x: Tensor, x_hat: Tensor) -> Tensor:
    _same_shape(x, x_hat, "l1_reconstruction")
    return T.mean(T.abs(T.sub(x, x_hat)))


def l2_reconstruction(x: Tensor, x_hat: Tensor) -> Tensor:
    _same_shape(x, x_hat, "l2_reconstruction")
    return T.mean(T.square(T.sub(x, x_hat)))


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)): summed over latent units, averaged over the batch."""
    _same_shape(mu, logvar, "kl_divergence")
    per = T.sub(T.sub(T.add(T.square(mu), T.exp(logvar)), logvar), 1.0)
    return T.mul(T.sum(per), 0.5 / mu.shape[0])


def kl_per_unit(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Batch-mean KL of every latent unit (all non-batch axes flattened)."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    per = 0.5 * (mu * mu + np.exp(logvar) - logvar - 1.0)
    return per.reshape(per.shape[0], -1).mean(axis=0)


def beta(t: int, T: int = DEFAULT_T) -> float:
    """Cyclical annealing weight: 2*tau/T for tau = t mod T below T/2, else 1."""
    if T < 2 or t < 0:
        raise ValueError(f"beta needs T >= 2 and t >= 0, got t={t}, T={T}")
    tau = t % T
    if 2 * tau < T:
        return 2 * tau / T
    return 1.0


def elbo_loss(x: Tensor, x_hat: Tensor, mu: Tensor, logvar: Tensor, d: int = 1) -> Tensor:
    if d == 1:
        recon = l1_reconstruction(x, x_hat)
    elif d == 2:
        recon = l2_reconstruction(x, x_hat)
    else:
        raise ValueError(f"d must be 1 or 2, got {d}")
    return T.add(recon, kl_divergence(mu, logvar))


@dataclass
class BetaSchedule:
    T: int = DEFAULT_T
    t: int = 0
    mode: str = "cyclical"  # or "constant"
    constant: float = 1.0

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("cycle length T must be >= 2")
        if self.mode not in ("cyclical", "constant"):
            raise ValueError(f"unknown beta mode {self.mode!r}")

    def value(self, t: Optional[int] = None) -> float:
        if self.mode == "constant":
            return float(self.constant)
        return beta(self.t if t is None else t, self.T)


@dataclass
class MovingMean:
    L: int = DEFAULT_L
    epsilon_floor: float = EPSILON_FLOOR
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("window length L must be >= 1")
        self.window = deque(self.window, maxlen=self.L)

    def value(self, current: float) -> float:
        """Mean of the stored window; ``current`` stands in when the window is empty."""
        if not self.window:
            return max(float(current), self.epsilon_floor)
        # shifted mean: exact when every entry is equal
        ref = self.window[0]
        m = ref + math.fsum(v - ref for v in self.window) / len(self.window)
        return max(m, self.epsilon_floor)

    def push(self, raw: float) -> None:
        self.window.append(float(raw))


@dataclass
class LossComponents:
    t: int
    beta: float
    raw_recon: float
    sigma: float
    normalized_recon: float
    kl: float
    total: float

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in LOG_COLUMNS)


class LossState:
    def __init__(self, T: int = DEFAULT_T, L: int = DEFAULT_L, beta_mode: str = "cyclical",
                 constant_beta: float = 1.0, epsilon_floor: float = EPSILON_FLOOR):
        self.schedule = BetaSchedule(T=T, mode=beta_mode, constant=constant_beta)
        self.sigma = MovingMean(L=L, epsilon_floor=epsilon_floor)
        self.last: Optional[LossComponents] = None

    def __repr__(self) -> str:
        return (f"LossState(t={self.schedule.t}, T={self.schedule.T}, L={self.sigma.L}, "
                f"window={list(self.sigma.window)}, last={self.last})")


def robust_loss(state: LossState, x: Tensor, x_hat: Tensor, mu: Tensor, logvar: Tensor,
                advance: bool = True) -> Tuple[Tensor, LossState]:
    """Collapse-robust loss at the state's current iteration.

    The moving mean excludes the current value and enters as a plain float, so no
    gradient flows through it. With ``advance`` the window and iteration counter
    move forward by one.
    """
    recon = l1_reconstruction(x, x_hat)
    kl = kl_divergence(mu, logvar)
    raw = float(recon.data)
    sigma = state.sigma.value(raw)
    b = state.schedule.value()
    normalized = T.div(recon, sigma)
    total = T.add(normalized, T.mul(kl, b))
    state.last = LossComponents(
        t=state.schedule.t, beta=b, raw_recon=raw, sigma=sigma,
        normalized_recon=float(normalized.data), kl=float(kl.data), total=float(total.data),
    )
    if advance:
        state.sigma.push(raw)
        state.schedule.t += 1
    return total, state
