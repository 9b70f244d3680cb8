"""Closed-form population dynamics on complete, uniform and heterogeneous networks.

Every network class reduces to the same shape,
``xdot = alpha * C * x (1 - x) (a x + b)``; this module supplies ``C``, ``a``
and ``b`` per class and update rule, the local (pair) equilibria, and an RK4
integrator for the time-decaying form
``dx/dt = exp(-eps t) x (1 - x) (beta x + delta)`` used for data fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .game import (
    DynamicsCoefficients,
    PayoffMatrix,
    SelectionIntensity,
    UpdateRule,
    coefficients_complete,
)
from .trajectory import Trajectory

#: Below this |beta| the factored parameter gamma = delta / beta is not reported.
AFFINE_BETA_TOL = 1e-6
RANGE_TOL = 1e-9
MAX_HALVINGS = 10


class UnsupportedDynamicsError(ValueError):
    """No closed form exists for the requested (network class, rule) pair."""


@dataclass(frozen=True)
class NetworkClass:
    """Network scenario for the closed forms.

    Build with :meth:`complete`, :meth:`uniform`, :meth:`nonuniform`,
    :meth:`er` or :meth:`ba`.  ``k`` is the degree for uniform networks, the
    mean degree otherwise; ``k2`` is the second degree moment.
    """

    kind: str
    k: float = math.nan
    k2: float = math.nan
    n: int | None = None

    def __post_init__(self):
        if self.kind == "uniform" and not (self.k >= 3 and float(self.k).is_integer()):
            raise ValueError(f"uniform networks need integer degree k >= 3, got {self.k}")
        if self.kind in ("nonuniform", "er", "ba") and not self.k2 > 2 * self.k:
            raise ValueError(f"{self.kind} network needs E[k^2] > 2 E[k] "
                             f"(got E[k]={self.k}, E[k^2]={self.k2})")
        if self.kind not in ("complete", "uniform", "nonuniform", "er", "ba"):
            raise ValueError(f"unknown network kind {self.kind!r}")

    @classmethod
    def complete(cls) -> "NetworkClass":
        return cls("complete")

    @classmethod
    def uniform(cls, k: int) -> "NetworkClass":
        return cls("uniform", float(k), float(k) ** 2)

    @classmethod
    def nonuniform(cls, mean_degree: float, second_moment: float) -> "NetworkClass":
        return cls("nonuniform", float(mean_degree), float(second_moment))

    @classmethod
    def er(cls, mean_degree: float) -> "NetworkClass":
        # Poisson degrees: E[k^2] = kbar (kbar + 1)
        if not mean_degree > 1:
            raise ValueError(f"ER dynamics need mean degree > 1, got {mean_degree}")
        return cls("er", float(mean_degree), mean_degree * (mean_degree + 1.0))

    @classmethod
    def ba(cls, mean_degree: float, n: int) -> "NetworkClass":
        # power law with exponent 3: E[k^2] ~ kbar^2 ln(N) / 4
        return cls("ba", float(mean_degree), ba_second_moment(mean_degree, n), int(n))

    def as_nonuniform(self) -> "NetworkClass":
        if self.kind == "complete":
            raise UnsupportedDynamicsError("complete networks have no degree moments")
        return NetworkClass.nonuniform(self.k, self.k2)

    def describe(self) -> str:
        if self.kind == "complete":
            return "complete"
        if self.kind == "uniform":
            return f"uniform(k={int(self.k)})"
        if self.kind == "ba":
            return f"ba(kbar={self.k:g},n={self.n})"
        if self.kind == "er":
            return f"er(kbar={self.k:g})"
        return f"nonuniform(kbar={self.k:g},k2bar={self.k2:g})"


def ba_second_moment(mean_degree: float, n: int) -> float:
    return mean_degree ** 2 * math.log(n) / 4.0


def local_equilibrium(network: NetworkClass, x_f) -> tuple:
    """Fast-relaxing pair states ``(x*_{f|n}, x*_{f|f})`` at global state ``x_f``."""
    if network.kind == "complete":
        raise UnsupportedDynamicsError(
            "local states coincide with the global state on a complete network")
    x = np.asarray(x_f, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("x_f must lie in [0, 1]")
    kbar, k2 = network.k, network.k2
    # uniform(k) is the degenerate case k2 = k^2
    den = k2 - kbar
    x_fn = (k2 - 2 * kbar) * x / den
    x_ff = ((k2 - 2 * kbar) * x + kbar) / den
    if np.ndim(x_f) == 0:
        return float(x_fn), float(x_ff)
    return x_fn, x_ff


def coefficients(network: NetworkClass, payoff: PayoffMatrix) -> DynamicsCoefficients:
    """BD-rule coefficients (a, b, prefactor) for ``network``."""
    if network.kind == "complete":
        return coefficients_complete(payoff)
    u_ff, u_fn, u_nn = payoff.values
    curv = payoff.curvature
    if network.kind == "uniform":
        k = network.k
        return DynamicsCoefficients(
            a=(k - 2) * curv,
            b=u_ff + (k - 2) * u_fn - (k - 1) * u_nn,
            prefactor=(k - 2) / (k - 1),
        )
    kbar, k2 = network.k, network.k2
    return DynamicsCoefficients(
        a=(k2 - 2 * kbar) * curv,
        b=kbar * u_ff + (k2 - 2 * kbar) * u_fn - (k2 - kbar) * u_nn,
        prefactor=(kbar - 1) * (k2 - 2 * kbar) / (k2 - kbar) ** 2,
    )


def rule_prefactor(rule, k: float) -> float:
    """Degree-dependent prefactor of the uniform-network dynamics per rule."""
    rule = UpdateRule.parse(rule)
    if rule is UpdateRule.BD:
        return (k - 2) / (k - 1)
    if rule is UpdateRule.DB:
        return (k - 2) * (k + 1) / (k * (k - 1))
    return k * (k - 2) * (k + 3) / ((k - 1) * (k + 1) ** 2)


def dynamics(network: NetworkClass, rule=UpdateRule.BD,
             payoff: PayoffMatrix | None = None) -> DynamicsCoefficients:
    """Coefficients for ``(network, rule)``; the prefactor includes the rule factor."""
    rule = UpdateRule.parse(rule)
    if rule is not UpdateRule.BD and network.kind != "uniform":
        raise UnsupportedDynamicsError(
            f"{rule.value} closed form exists only for uniform-degree networks "
            f"(uniform-degree equivalence result); {network.describe()} supports BD only")
    c = coefficients(network, payoff)
    if network.kind == "uniform":
        return DynamicsCoefficients(c.a, c.b, rule_prefactor(rule, network.k))
    return c


def population_step(network: NetworkClass, rule, x_f, payoff: PayoffMatrix, alpha_t):
    """Population dynamics ``xdot`` (per slot) for the given class and rule."""
    return dynamics(network, rule, payoff).rate(x_f, alpha_t)


def er_step(mean_degree: float, x_f, payoff: PayoffMatrix, alpha_t):
    """ER closed form, written out directly in the mean degree."""
    if not mean_degree > 1:
        raise ValueError(f"ER dynamics need mean degree > 1, got {mean_degree}")
    k = mean_degree
    u_ff, u_fn, u_nn = payoff.values
    x = np.asarray(x_f, dtype=float) if np.ndim(x_f) else float(x_f)
    bracket = (k - 1) * payoff.curvature * x + u_ff + (k - 1) * u_fn - k * u_nn
    return alpha_t * ((k - 1) / k) ** 2 * x * (1 - x) * bracket


def ba_step(mean_degree: float, n: int, x_f, payoff: PayoffMatrix, alpha_t):
    k2 = ba_second_moment(mean_degree, n)
    if not k2 > 2 * mean_degree:
        raise ValueError(f"BA dynamics need kbar^2 ln(N)/4 > 2 kbar "
                         f"(kbar={mean_degree}, N={n})")
    return population_step(NetworkClass.nonuniform(mean_degree, k2), UpdateRule.BD,
                           x_f, payoff, alpha_t)


def interior_equilibrium(network: NetworkClass, payoff: PayoffMatrix) -> float | None:
    """Interior rest point ``-b/a`` of the dynamics, if it lies in (0, 1).

    Stable when ``a < 0`` (anti-coordination), unstable when ``a > 0``.
    """
    return coefficients(network, payoff).interior_root()


def _alpha_values(alpha, slots: int) -> np.ndarray:
    if isinstance(alpha, SelectionIntensity):
        return alpha.values(slots)
    return np.full(slots, float(alpha))


def theory_trajectory(network: NetworkClass, payoff: PayoffMatrix, alpha, x0: float,
                      slots: int, rule=UpdateRule.BD) -> Trajectory:
    """Iterate ``x(t+1) = clamp(x(t) + xdot(t))`` for ``slots`` slots."""
    if not 0.0 <= x0 <= 1.0:
        raise ValueError(f"x0 must be in [0, 1], got {x0}")
    coef = dynamics(network, rule, payoff)
    alphas = _alpha_values(alpha, slots + 1)
    x = np.empty(slots + 1)
    xdot = np.empty(slots + 1)
    x[0] = x0
    for t in range(slots + 1):
        xdot[t] = coef.rate(x[t], alphas[t])
        if t < slots:
            x[t + 1] = min(1.0, max(0.0, x[t] + xdot[t]))
    return Trajectory(np.arange(slots + 1), x, xdot=xdot,
                      meta={"source": "theory", "network": network.describe(),
                            "rule": UpdateRule.parse(rule).value,
                            "payoff": payoff.values})


@dataclass(frozen=True)
class GeneralODEParams:
    """Parameters of ``dx/dt = exp(-eps t) x (1 - x) (beta x + delta)``.

    The factored form ``beta x (1 - x)(x + gamma)`` has ``delta = beta *
    gamma``.  Give either ``gamma`` or ``delta``; ``gamma`` is left ``None``
    when ``|beta| < AFFINE_BETA_TOL`` because it is then ill-defined.
    """

    beta: float
    gamma: float | None = None
    epsilon: float = 0.0
    x0: float = 0.5
    delta: float | None = None

    def __post_init__(self):
        if self.gamma is None and self.delta is None:
            raise ValueError("need gamma or delta")
        if self.delta is None:
            object.__setattr__(self, "delta", self.beta * self.gamma)
        elif self.gamma is None and abs(self.beta) >= AFFINE_BETA_TOL:
            object.__setattr__(self, "gamma", self.delta / self.beta)
        if self.epsilon < 0 or not math.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 < self.x0 < 1.0:
            raise ValueError(f"x0 must lie in (0, 1), got {self.x0}")

    @classmethod
    def affine(cls, beta: float, delta: float, epsilon: float, x0: float) -> "GeneralODEParams":
        return cls(beta=beta, epsilon=epsilon, x0=x0, delta=delta)

    @classmethod
    def from_coefficients(cls, coef: DynamicsCoefficients, alpha: float, x0: float,
                          epsilon: float = 0.0) -> "GeneralODEParams":
        """Map ``alpha * C * x(1-x)(a x + b)`` onto the general form."""
        s = alpha * coef.prefactor
        return cls.affine(s * coef.a, s * coef.b, epsilon, x0)

    def rate(self, t, x):
        return np.exp(-self.epsilon * np.asarray(t, dtype=float)) * x * (1 - x) * (
            self.beta * x + self.delta)


@numba.njit(cache=True)
def _general_rhs(t, x, beta, delta, eps):
    return math.exp(-eps * t) * x * (1.0 - x) * (beta * x + delta)


@numba.njit(cache=True)
def rk4_general(beta, delta, eps, x0, n_out, dt, sub):
    """RK4 with ``sub`` substeps per output interval ``dt``.

    Returns ``(x, ok)``; ``ok`` is False once x leaves [0, 1] by more than
    ``RANGE_TOL`` (the remaining samples are then undefined).
    """
    h = dt / sub
    x = x0
    out = np.empty(n_out)
    out[0] = x0
    t = 0.0
    for i in range(1, n_out):
        for _ in range(sub):
            k1 = _general_rhs(t, x, beta, delta, eps)
            k2 = _general_rhs(t + 0.5 * h, x + 0.5 * h * k1, beta, delta, eps)
            k3 = _general_rhs(t + 0.5 * h, x + 0.5 * h * k2, beta, delta, eps)
            k4 = _general_rhs(t + h, x + h * k3, beta, delta, eps)
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
            if x < -1e-9 or x > 1.0 + 1e-9 or x != x:
                return out, False
        out[i] = x
    return out, True


def integrate_general(params: GeneralODEParams, horizon: float, dt: float = 1.0) -> Trajectory:
    """Integrate the general diffusion ODE on ``t = 0, dt, ..., horizon``.

    The step is halved internally (up to ``MAX_HALVINGS`` times) while the
    solution leaves [0, 1]; the output grid stays at spacing ``dt``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    n_out = int(round(horizon / dt)) + 1
    sub = 1
    for _ in range(MAX_HALVINGS + 1):
        x, ok = rk4_general(params.beta, params.delta, params.epsilon, params.x0,
                            n_out, float(dt), sub)
        if ok:
            break
        sub *= 2
    else:
        raise FloatingPointError(
            f"solution left [0, 1] even with dt/{sub // 2}; reduce dt or check parameters")
    x = np.clip(x, 0.0, 1.0)
    t = np.arange(n_out) * dt
    if float(dt).is_integer() and dt == 1:
        t = t.astype(np.int64)
    return Trajectory(t, x, xdot=params.rate(t, x),
                      meta={"source": "general_ode", "beta": params.beta,
                            "gamma": params.gamma, "delta": params.delta,
                            "epsilon": params.epsilon, "x0": params.x0, "substeps": sub})


def implicit_lhs(x, gamma: float):
    """First integral of the general ODE in ``x``.

    ``[(g+1) ln x - g ln(1-x) - ln|x+g|] / (g (g+1))`` has derivative
    ``1 / (x (1-x)(x+g))``, so along any solution it equals
    ``-(beta/eps) exp(-eps t) + c``.
    """
    if gamma == 0 or gamma == -1:
        raise ValueError(f"gamma must not be 0 or -1, got {gamma}")
    x = np.asarray(x, dtype=float)
    if np.any((x <= 0) | (x >= 1)):
        raise ValueError("x must lie in (0, 1)")
    if np.any(x + gamma == 0):
        raise ValueError("x + gamma must be nonzero")
    g = gamma
    val = ((g + 1) * np.log(x) - g * np.log1p(-x) - np.log(np.abs(x + g))) / (g * (g + 1))
    return float(val) if val.ndim == 0 else val


def first_integral_constant(params: GeneralODEParams) -> float:
    """The constant ``c`` of the implicit solution fixed by ``x(0) = x0``."""
    g = params.gamma
    if g is None or g in (0.0, -1.0) or params.x0 + g == 0:
        return math.nan
    lhs0 = implicit_lhs(params.x0, g)
    if params.epsilon > 0:
        return lhs0 + params.beta / params.epsilon
    return lhs0
