"""Two-strategy forwarding game: payoffs, fitness and complete-network dynamics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

#: Neutral-game threshold on |u_ff - 2 u_fn + u_nn| and |u_fn - u_nn|.
NEUTRAL_TOL = 1e-12


@dataclass(frozen=True)
class PayoffMatrix:
    """Symmetric payoff table for forward (f) / not-forward (n).

    The default constructor enforces the normalisation ``0 < u < 1``.  Use
    :meth:`unconstrained` for matrices recovered from data, which may fall
    outside that interval.
    """

    u_ff: float
    u_fn: float
    u_nn: float
    constrained: bool = True

    def __post_init__(self):
        vals = (self.u_ff, self.u_fn, self.u_nn)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"payoffs must be finite, got {vals}")
        if self.constrained and not all(0.0 < v < 1.0 for v in vals):
            raise ValueError(f"payoffs must lie in (0, 1), got {vals}")

    @classmethod
    def unconstrained(cls, u_ff: float, u_fn: float, u_nn: float) -> "PayoffMatrix":
        return cls(float(u_ff), float(u_fn), float(u_nn), constrained=False)

    @classmethod
    def case(cls, number: int) -> "PayoffMatrix":
        """One of the four benchmark matrices (1: ff>fn>nn ... 4: nn>fn>ff)."""
        try:
            return cls(*PAYOFF_CASES[number])
        except KeyError:
            raise ValueError(f"payoff case must be 1-4, got {number}") from None

    @property
    def values(self) -> tuple[float, float, float]:
        return (self.u_ff, self.u_fn, self.u_nn)

    @property
    def curvature(self) -> float:
        """u_ff - 2 u_fn + u_nn."""
        return self.u_ff - 2.0 * self.u_fn + self.u_nn

    @property
    def popularity(self) -> float:
        return self.u_ff - self.u_nn

    @property
    def is_neutral(self) -> bool:
        return abs(self.curvature) < NEUTRAL_TOL and abs(self.u_fn - self.u_nn) < NEUTRAL_TOL


class UpdateRule(str, Enum):
    """Strategy update rules: birth-death, death-birth, imitation."""

    BD = "BD"
    DB = "DB"
    IM = "IM"

    @classmethod
    def parse(cls, value) -> "UpdateRule":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"update rule must be one of BD, DB, IM; got {value!r}") from None


PAYOFF_CASES = {
    1: (0.8, 0.6, 0.4),
    2: (0.6, 0.8, 0.4),
    3: (0.4, 0.8, 0.6),
    4: (0.4, 0.6, 0.8),
}


@dataclass(frozen=True)
class SelectionIntensity:
    """Selection intensity, constant or decaying as ``scale * exp(-decay * t)``.

    ``SelectionIntensity(0.025)`` is constant; ``SelectionIntensity(1.0, 0.05)``
    decays.  Every evaluated value must lie in (0, 1].
    """

    scale: float
    decay: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.scale <= 1.0):
            raise ValueError(f"selection intensity scale must be in (0, 1], got {self.scale}")
        if self.decay < 0.0 or not math.isfinite(self.decay):
            raise ValueError(f"decay rate must be >= 0, got {self.decay}")

    def __call__(self, t):
        return self.scale * np.exp(-self.decay * np.asarray(t, dtype=float))

    def values(self, slots: int) -> np.ndarray:
        """Intensity evaluated at t = 0, 1, ..., slots - 1."""
        out = self.scale * np.exp(-self.decay * np.arange(slots, dtype=float))
        # exp underflow would leave (0, 1]; keep the schedule strictly positive
        return np.maximum(out, np.finfo(float).tiny)

    @property
    def is_constant(self) -> bool:
        return self.decay == 0.0


@dataclass(frozen=True)
class PopulationState:
    """Global, edge and local (conditional) forwarding states."""

    x_f: float
    x_ff: float = math.nan
    x_fn: float = math.nan
    x_nn: float = math.nan
    x_f_given_f: float = math.nan
    x_f_given_n: float = math.nan

    def __post_init__(self):
        if not 0.0 <= self.x_f <= 1.0:
            raise ValueError(f"x_f must be in [0, 1], got {self.x_f}")

    @property
    def x_n(self) -> float:
        return 1.0 - self.x_f

    @property
    def has_edges(self) -> bool:
        return not math.isnan(self.x_ff)


@dataclass(frozen=True)
class DynamicsCoefficients:
    """Coefficients of ``xdot = alpha * prefactor * x (1 - x) (a x + b)``."""

    a: float
    b: float
    prefactor: float = 1.0

    @property
    def is_neutral(self) -> bool:
        return abs(self.a) < NEUTRAL_TOL and abs(self.b) < NEUTRAL_TOL

    def interior_root(self) -> float | None:
        """Root ``-b/a`` of the affine factor, if it lies strictly inside (0, 1)."""
        if abs(self.a) < NEUTRAL_TOL:
            return None
        r = -self.b / self.a
        return r if 0.0 < r < 1.0 else None

    def rate(self, x, alpha):
        """Population dynamics evaluated at ``x`` (scalar or array)."""
        if self.is_neutral:
            return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0
        x = np.asarray(x, dtype=float) if np.ndim(x) else float(x)
        return alpha * self.prefactor * x * (1.0 - x) * (self.a * x + self.b)


def _check_alpha(alpha: float):
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"selection intensity must lie in (0, 1], got {alpha}")


def fitness(baseline: float, payoff_share: float, alpha: float) -> float:
    """Convex combination ``(1 - alpha) * baseline + alpha * payoff_share``."""
    _check_alpha(alpha)
    return (1.0 - alpha) * baseline + alpha * payoff_share


def mean_fitness_by_strategy(state: PopulationState | float, payoff: PayoffMatrix,
                             alpha: float) -> tuple[float, float, float]:
    """Average fitness of forwarders, non-forwarders and the whole population.

    Uses well-mixed encounter probabilities and a unit baseline fitness.
    ``alpha = 0`` is accepted here and gives the no-selection limit.
    """
    x = state.x_f if isinstance(state, PopulationState) else float(state)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x_f must be in [0, 1], got {x}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"selection intensity must lie in [0, 1], got {alpha}")
    u_ff, u_fn, u_nn = payoff.values
    psi_f = 1.0 - alpha + alpha * (x * u_ff + (1.0 - x) * u_fn)
    psi_n = 1.0 - alpha + alpha * (x * u_fn + (1.0 - x) * u_nn)
    psi = x * psi_f + (1.0 - x) * psi_n
    return psi_f, psi_n, psi


def coefficients_complete(payoff: PayoffMatrix) -> DynamicsCoefficients:
    return DynamicsCoefficients(a=payoff.curvature, b=payoff.u_fn - payoff.u_nn, prefactor=1.0)


def replicator_step_complete(x_f: float, payoff: PayoffMatrix,
                             alpha_t: float) -> tuple[float, float]:
    """One discrete replicator update on the complete network.

    Returns ``(xdot, x_next)`` with ``x_next`` clamped to [0, 1].
    """
    if not 0.0 <= x_f <= 1.0:
        raise ValueError(f"x_f must be in [0, 1], got {x_f}")
    xdot = coefficients_complete(payoff).rate(x_f, alpha_t)
    return xdot, min(1.0, max(0.0, x_f + xdot))
