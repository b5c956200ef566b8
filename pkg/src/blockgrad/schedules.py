"""Weight, stepsize, and momentum schedules.

A WeightSequence supplies the per-step weights a_t used to accumulate
squared gradients, together with their running sum A_t and the equivalent
exponential-moving-average coefficient alpha_t = 1 - a_t/A_t.  Supported
variants:

  constant     a_t = a                    (alpha_t = 1 - 1/t)
  polynomial   a_t = t^tau
  exponential  a_t = alpha^-t             (alpha_t = alpha(1-alpha^(t-1))/(1-alpha^t))
  poly_decay   EMA-first variant with alpha_t = 1 - (c+1)/(t+c)

For the exponential variant the raw weights overflow double precision
near t ~ 700/log10(1/alpha); its EMA coefficient is therefore always
computed from the closed form in alpha, which is exact at every t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = ["WeightSequence", "StepsizeSchedule", "MomentumSchedule"]


class WeightSequence:
    """Positive, non-decreasing per-step weights a_t with running sum A_t."""

    _KINDS = ("constant", "polynomial", "exponential", "poly_decay")

    def __init__(self, kind: str, param: float):
        if kind not in self._KINDS:
            raise ValueError(f"unknown weight sequence {kind!r}")
        if kind == "constant" and param <= 0:
            raise ValueError("constant weight a must be positive")
        if kind == "polynomial" and param <= 0:
            raise ValueError("polynomial exponent tau must be positive")
        if kind == "exponential" and not 0 < param < 1:
            raise ValueError("exponential base alpha must be in (0, 1)")
        if kind == "poly_decay" and param < 0:
            raise ValueError("poly_decay constant c must be >= 0")
        self.kind = kind
        self.param = float(param)

    @classmethod
    def constant(cls, a: float = 1.0) -> "WeightSequence":
        return cls("constant", a)

    @classmethod
    def polynomial(cls, tau: float) -> "WeightSequence":
        return cls("polynomial", tau)

    @classmethod
    def exponential(cls, alpha: float) -> "WeightSequence":
        return cls("exponential", alpha)

    @classmethod
    def poly_decay(cls, c: float = 0.0) -> "WeightSequence":
        return cls("poly_decay", c)

    def a_next(self, t: int, a_prev_sum: float) -> float:
        """a_t given the accumulated A_{t-1} (needed only by poly_decay)."""
        if t < 1:
            raise ValueError("step index must be >= 1")
        if self.kind == "constant":
            return self.param
        if self.kind == "polynomial":
            return float(t) ** self.param
        if self.kind == "exponential":
            return self.param ** (-t)
        # poly_decay: a_t/A_t = (c+1)/(t+c) inverted to a recurrence on A
        if t == 1:
            return 1.0
        return a_prev_sum * (self.param + 1.0) / (t - 1.0)

    def weight_at(self, t: int) -> tuple[float, float]:
        """Stateless (a_t, A_t); O(t) for the polynomial variants."""
        if t < 1:
            raise ValueError("step index must be >= 1")
        if self.kind == "constant":
            return self.param, self.param * t
        if self.kind == "exponential":
            alpha = self.param
            return alpha ** (-t), (alpha ** (-t) - 1.0) / (1.0 - alpha)
        total = 0.0
        a = 0.0
        for i in range(1, t + 1):
            a = self.a_next(i, total)
            total += a
        return a, total

    def ema_next(self, t: int, a_prev_sum: float) -> float:
        """alpha_t = 1 - a_t/A_t given A_{t-1}; closed forms where needed."""
        if t < 1:
            raise ValueError("step index must be >= 1")
        if self.kind == "exponential":
            alpha = self.param
            if t == 1:
                return 0.0
            return alpha * (1.0 - alpha ** (t - 1)) / (1.0 - alpha ** t)
        if self.kind == "poly_decay":
            return 1.0 - (self.param + 1.0) / (t + self.param)
        a = self.a_next(t, a_prev_sum)
        return 1.0 - a / (a_prev_sum + a)

    def ema_coeff(self, t: int) -> float:
        """Stateless alpha_t."""
        if self.kind in ("exponential", "poly_decay"):
            return self.ema_next(t, 0.0)
        if t == 1:
            return 0.0
        _, a_sum_prev = self.weight_at(t - 1)
        return self.ema_next(t, a_sum_prev)


@dataclass(frozen=True)
class MomentumSchedule:
    """Momentum parameters beta_t with 0 <= beta_t <= beta < 1.

    constant:   beta_t = beta
    increasing: beta_t = beta * (1 - 1/t^tau)
    """

    kind: str
    beta: float
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "increasing"):
            raise ValueError(f"unknown momentum schedule {self.kind!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @classmethod
    def constant(cls, beta: float) -> "MomentumSchedule":
        return cls("constant", beta)

    @classmethod
    def increasing(cls, beta: float, tau: float = 1.0) -> "MomentumSchedule":
        return cls("increasing", beta, tau)

    def beta_at(self, t: int) -> float:
        if t < 1:
            raise ValueError("step index must be >= 1")
        if self.kind == "constant":
            return self.beta
        return self.beta * (1.0 - 1.0 / float(t) ** self.tau)

    def beta_prod(self, t: int) -> float:
        """Running product beta_1 * ... * beta_t (the bias-correction term)."""
        if self.kind == "constant":
            return self.beta ** t
        prod = 1.0
        for i in range(1, t + 1):
            prod *= self.beta_at(i)
        return prod


@dataclass(frozen=True)
class StepsizeSchedule:
    """Stepsize eta_t > 0.

    constant:       eta_t = eta
    inv_sqrt:       eta_t = eta / sqrt(t)
    bias_corrected: eta_t = eta / (sqrt(t) * (1 - beta_prod_t)) with the
                    paired momentum schedule supplying beta_prod_t.
    """

    kind: str
    eta: float
    momentum: MomentumSchedule | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "inv_sqrt", "bias_corrected"):
            raise ValueError(f"unknown stepsize schedule {self.kind!r}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.kind == "bias_corrected" and self.momentum is None:
            raise ValueError("bias_corrected stepsize needs a momentum schedule")

    @classmethod
    def constant(cls, eta: float) -> "StepsizeSchedule":
        return cls("constant", eta)

    @classmethod
    def inv_sqrt(cls, eta: float) -> "StepsizeSchedule":
        return cls("inv_sqrt", eta)

    @classmethod
    def bias_corrected(cls, eta: float, momentum: MomentumSchedule) -> "StepsizeSchedule":
        return cls("bias_corrected", eta, momentum)

    def value(self, t: int, beta_prod: float | None = None) -> float:
        """eta_t; the running beta product may be passed to avoid recompute."""
        if t < 1:
            raise ValueError("step index must be >= 1")
        if self.kind == "constant":
            return self.eta
        if self.kind == "inv_sqrt":
            return self.eta / math.sqrt(t)
        if beta_prod is None:
            beta_prod = self.momentum.beta_prod(t)
        if beta_prod >= 1.0:
            raise ValueError("momentum product reached 1; beta_t must stay below 1")
        return self.eta / (math.sqrt(t) * (1.0 - beta_prod))

    def stepsize_at(self, t: int) -> float:
        """Stateless eta_t."""
        return self.value(t)
