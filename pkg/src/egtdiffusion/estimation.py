"""Fitting the time-decaying diffusion ODE to cascade time series.

A cascade is a series of mention counts per slot.  Two normalised views are
kept: increments scaled by their maximum, and the running total scaled to end
at 1.  The diffusion model is fitted to the cumulative view by forward RK4
integration (shooting) and multi-start Nelder-Mead; the pulse model
``q1 t^q2 exp(-q3 t)`` is fitted to the increments as a reference.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy.optimize import least_squares, minimize

from .game import PayoffMatrix
from .theory import (
    AFFINE_BETA_TOL,
    GeneralODEParams,
    first_integral_constant,
    integrate_general,
    rk4_general,
)
from .trajectory import Trajectory, atomic_write

log = logging.getLogger(__name__)

MIN_POINTS = 8
N_STARTS = 16
MAX_EVALS = 2000
OBJ_TOL = 1e-10
HIST_BIN_WIDTH = 0.05
PREDICT_PRESETS = (0.25, 0.30, 0.40, 0.60)
_PENALTY = 1e6


class SeriesParseError(ValueError):
    """Malformed cascade CSV; carries the 1-based row number."""

    def __init__(self, row: int, msg: str):
        super().__init__(f"row {row}: {msg}")
        self.row = row


class FitFailure(RuntimeError):
    """No start converged to a finite objective."""

    def __init__(self, msg: str, best_residual: float = math.inf):
        super().__init__(f"{msg} (best residual {best_residual:.6g})")
        self.best_residual = best_residual


@dataclass(frozen=True)
class CascadeSeries:
    """One cascade: slot index, raw per-slot increments and both normalised views."""

    t: np.ndarray
    raw: np.ndarray
    increments: np.ndarray
    cumulative: np.ndarray
    name: str = "series"
    #: ``cumulative == cumsum(raw) / scale``
    scale: float = 1.0

    def __len__(self):
        return self.t.size

    @classmethod
    def from_counts(cls, counts, t=None, name: str = "series") -> "CascadeSeries":
        c = np.asarray(counts, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("counts must be a non-empty 1-D sequence")
        if np.any(c < 0):
            raise ValueError(f"negative count at row {int(np.argmax(c < 0)) + 1}")
        total = c.sum()
        if total <= 0:
            raise ValueError("all counts are zero; nothing to fit")
        t = np.arange(c.size) if t is None else np.asarray(t)
        _check_time(t)
        return cls(t, c, c / c.max(), np.cumsum(c) / total, name, float(total))

    @classmethod
    def from_cumulative(cls, x, t=None, strict: bool = True,
                        name: str = "series") -> "CascadeSeries":
        """Wrap an already normalised cumulative curve without rescaling it.

        ``strict=False`` accepts noisy, non-monotone curves (synthetic data);
        the increments are then the raw first differences.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("cumulative series must be a non-empty 1-D sequence")
        inc = np.diff(x, prepend=0.0)
        if strict and (np.any(inc < 0) or x[-1] > 1 + 1e-12):
            raise ValueError("cumulative series must be nondecreasing and end at most at 1")
        peak = np.abs(inc).max()
        t = np.arange(x.size) if t is None else np.asarray(t)
        _check_time(t)
        return cls(t, inc, inc / peak if peak > 0 else inc, x.copy(), name)

    def prefix(self, fraction: float) -> int:
        """Number of leading points used for a given data fraction."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        return max(1, int(math.floor(fraction * len(self) + 1e-9)))


def _check_time(t):
    if t.size > 1 and np.any(np.diff(t) <= 0):
        row = int(np.argmax(np.diff(t) <= 0)) + 2
        raise ValueError(f"time index not strictly increasing at row {row}")


def ingest_series(source, name: str | None = None) -> CascadeSeries:
    """Read a ``t,count`` CSV (optional header) from a path or open file."""
    if hasattr(source, "read"):
        rows = list(csv.reader(source))
        name = name or getattr(source, "name", "series")
    else:
        with open(source, newline="") as fh:
            rows = list(csv.reader(fh))
        name = name or str(source)
    ts, counts = [], []
    for i, row in enumerate(rows, start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        if i == 1 and row[0].strip().lower() == "t":
            continue
        if len(row) < 2:
            raise SeriesParseError(i, f"expected 't,count', got {row!r}")
        try:
            t, c = int(row[0]), float(row[1])
        except ValueError:
            raise SeriesParseError(i, f"non-numeric value in {row!r}") from None
        if not math.isfinite(c) or c < 0:
            raise SeriesParseError(i, f"count must be a finite non-negative number, got {row[1]}")
        if ts and t <= ts[-1]:
            raise SeriesParseError(i, f"time {t} does not increase (previous {ts[-1]})")
        ts.append(t)
        counts.append(c)
    if not counts:
        raise ValueError("series is empty")
    return CascadeSeries.from_counts(counts, np.array(ts), name=name)


@dataclass
class DiffusionFit:
    """Fitted ``dx/dt = exp(-eps t) x(1-x)(beta x + delta)``; ``gamma = delta / beta``."""

    beta: float
    delta: float
    epsilon: float
    x0: float
    rmse: float
    fraction_used: float
    n_points: int
    gamma: float | None = None
    c: float = math.nan
    neutral: bool = False
    start_index: int = -1
    evaluations: int = 0

    @property
    def params(self) -> GeneralODEParams:
        return GeneralODEParams.affine(self.beta, self.delta, self.epsilon, self.x0)

    def report(self) -> dict:
        pay, pop = recover_payoff(self)
        out = {k: v for k, v in asdict(self).items()}
        out.update(u_ff=pay.u_ff, u_fn=pay.u_fn, u_nn=pay.u_nn, popularity=pop)
        return out


@numba.njit(cache=True)
def _sse(beta, delta, eps, x0, data):
    n = data.shape[0]
    for sub in (1, 4, 16):
        x, ok = rk4_general(beta, delta, eps, x0, n, 1.0, sub)
        if ok:
            s = 0.0
            for i in range(n):
                r = x[i] - data[i]
                s += r * r
            return s
    return np.inf


@numba.njit(cache=True)
def _sse_increments(beta, delta, eps, x0, data, factor):
    # data[i] ~ factor * (x(i) - x(i-1)), with x(-1) = 0
    n = data.shape[0]
    for sub in (1, 4, 16):
        x, ok = rk4_general(beta, delta, eps, x0, n, 1.0, sub)
        if ok:
            s = 0.0
            prev = 0.0
            for i in range(n):
                r = factor * (x[i] - prev) - data[i]
                prev = x[i]
                s += r * r
            return s
    return np.inf


def _unpack(theta, x0_fixed):
    beta, delta = theta[0], theta[1]
    eps = math.exp(min(theta[2], 5.0))
    x0 = x0_fixed if x0_fixed is not None else 1.0 / (1.0 + math.exp(-theta[3]))
    return beta, delta, eps, x0


def _start_grid(x0_guess):
    # beta sign/scale x gamma regime x eps decade; gamma sign follows beta so
    # half the starts rise toward an interior root and half toward 1
    starts = []
    for beta in (-1.0, -0.3, 0.3, 1.0):
        for gamma in ((-0.3, -0.7) if beta < 0 else (0.1, 0.4)):
            for eps in (0.01, 0.1):
                starts.append((beta, beta * gamma, math.log(eps), math.log(x0_guess / (1 - x0_guess))))
    return starts


def fit_diffusion(series: CascadeSeries, fraction: float = 1.0, pin_x0: bool = False,
                  starts: int = N_STARTS, target: str = "cumulative") -> DiffusionFit:
    """Least-squares fit of the diffusion ODE to the data prefix.

    ``target="cumulative"`` shoots x(t) at the cumulative view;
    ``"increments"`` matches the per-slot changes of x(t) to the
    max-normalised increments.  Starts are tried in a fixed order and the
    lowest objective wins, ties going to the earlier start.  With ``pin_x0``
    the initial fraction is the first cumulative value instead of a free
    parameter.  ``rmse`` is always measured on the cumulative view.
    """
    if target not in ("cumulative", "increments"):
        raise ValueError(f"target must be 'cumulative' or 'increments', got {target!r}")
    n = series.prefix(fraction)
    if n < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} points, fraction {fraction} gives {n}")
    data = np.ascontiguousarray(series.cumulative[:n], dtype=float)
    inc = np.ascontiguousarray(series.increments[:n], dtype=float)
    peak = np.abs(series.raw).max()
    factor = series.scale / peak if peak > 0 else 1.0
    x0_guess = float(np.clip(data[0], 1e-3, 0.5))
    x0_fixed = float(np.clip(data[0], 1e-6, 1 - 1e-6)) if pin_x0 else None

    if np.ptp(data) < 1e-12:
        x0 = float(np.clip(data[0], 1e-6, 1 - 1e-6))
        return DiffusionFit(0.0, 0.0, 0.0, x0, float(np.sqrt(np.mean((data - x0) ** 2))),
                            fraction, n, neutral=True)

    def objective(theta):
        if target == "cumulative":
            v = _sse(*_unpack(theta, x0_fixed), data)
        else:
            v = _sse_increments(*_unpack(theta, x0_fixed), inc, factor)
        return v if np.isfinite(v) else _PENALTY

    best, best_i, evals = None, -1, 0
    for i, s in enumerate(_start_grid(x0_guess)[:starts]):
        s = np.array(s[:3] if pin_x0 else s)
        res = minimize(objective, s, method="Nelder-Mead",
                       options={"maxfev": MAX_EVALS, "xatol": 1e-10, "fatol": OBJ_TOL})
        evals += res.nfev
        if best is None or res.fun < best.fun:
            best, best_i = res, i
    if best is None or best.fun >= _PENALTY:
        raise FitFailure("every start left the feasible region",
                         best.fun if best is not None else math.inf)
    beta, delta, eps, x0 = _unpack(best.x, x0_fixed)
    fit = DiffusionFit(float(beta), float(delta), float(eps), float(x0),
                       float(math.sqrt(_sse(beta, delta, eps, x0, data) / n)), fraction, n,
                       start_index=best_i, evaluations=evals)
    fit.neutral = abs(beta) < AFFINE_BETA_TOL and abs(delta) < AFFINE_BETA_TOL
    p = fit.params
    fit.gamma = p.gamma
    fit.c = first_integral_constant(p)
    return fit


def recover_payoff(fit) -> tuple[PayoffMatrix, float]:
    """Payoffs implied by a fit with ``u_fn`` normalised to 1, plus popularity.

    ``u_nn = 1 - beta*gamma`` and ``u_ff = 1 + beta + beta*gamma``; the
    popularity ``u_ff - u_nn = beta (1 + 2 gamma)`` is positive for content
    whose forwarding is mutually rewarding.  Accepts a :class:`DiffusionFit`
    or a ``(beta, gamma)`` pair.
    """
    if isinstance(fit, tuple):
        beta, gamma = fit
        delta = beta * gamma
    else:
        beta, delta = fit.beta, fit.delta
    pay = PayoffMatrix.unconstrained(1.0 + beta + delta, 1.0, 1.0 - delta)
    if not all(0.0 < u < 1.0 for u in pay.values):
        # always the case with u_fn pinned to 1; informational only
        log.info("recovered payoffs %s leave (0, 1)", pay.values)
    return pay, pay.u_ff - pay.u_nn


def payoff_to_params(payoff: PayoffMatrix) -> tuple[float, float]:
    """Inverse of :func:`recover_payoff`: ``(beta, gamma)`` from a payoff matrix."""
    beta = payoff.curvature
    delta = payoff.u_fn - payoff.u_nn
    if abs(beta) < AFFINE_BETA_TOL:
        raise ValueError("beta vanishes; gamma is undefined")
    return beta, delta / beta


@dataclass
class BaselineFit:
    """``dx/dt = q1 tau^q2 exp(-q3 tau)`` with tau counted from the first nonzero increment."""

    q1: float
    q2: float
    q3: float
    rmse: float
    offset: int
    fraction_used: float
    q3_at_bound: bool = False

    def rate(self, t):
        tau = np.asarray(t, dtype=float) - self.offset + 1.0
        out = np.zeros_like(tau)
        pos = tau > 0
        out[pos] = self.q1 * tau[pos] ** self.q2 * np.exp(-self.q3 * tau[pos])
        return out


def fit_baseline(series: CascadeSeries, fraction: float = 1.0,
                 target: str = "normalized") -> BaselineFit:
    """Least-squares pulse fit to the (max-normalised or raw) increments."""
    y_all = {"normalized": series.increments, "raw": series.raw}.get(target)
    if y_all is None:
        raise ValueError(f"target must be 'normalized' or 'raw', got {target!r}")
    n = series.prefix(fraction)
    y = y_all[:n]
    nz = np.flatnonzero(y > 0)
    if nz.size < 3:
        raise FitFailure("fewer than three positive increments")
    off = int(nz[0])
    tau = np.arange(n, dtype=float) - off + 1.0
    use = tau > 0
    tau, yy = tau[use], y[use]
    pos = yy > 0
    # log-linear least squares for the starting point
    A = np.column_stack([np.ones(pos.sum()), np.log(tau[pos]), -tau[pos]])
    coef, *_ = np.linalg.lstsq(A, np.log(yy[pos]), rcond=None)
    q0 = np.array([math.exp(np.clip(coef[0], -50, 50)), coef[1], max(coef[2], 1e-6)])
    q0 = np.clip(q0, [1e-12, -5.0, 0.0], [1e12, 20.0, 10.0])

    def resid(q):
        return q[0] * tau ** q[1] * np.exp(-q[2] * tau) - yy

    res = least_squares(resid, q0, bounds=([0.0, -5.0, 0.0], [np.inf, 20.0, 10.0]),
                        x_scale="jac", max_nfev=MAX_EVALS * 5)
    if not res.success or not np.all(np.isfinite(res.x)):
        raise FitFailure(f"baseline fit did not converge: {res.message}",
                         float(np.sqrt(np.mean(res.fun ** 2))))
    q1, q2, q3 = map(float, res.x)
    fit = BaselineFit(q1, q2, q3, 0.0, off, fraction, q3_at_bound=q3 < 1e-6)
    fit.rmse = float(np.sqrt(np.mean((fit.rate(np.arange(n)) - y) ** 2)))
    if fit.q3_at_bound:
        log.warning("baseline decay rate hit its lower bound; the pulse does not decay")
    return fit


def egt_increments(fit: DiffusionFit, series: CascadeSeries, horizon: int | None = None):
    """Max-normalised increments implied by a cumulative-scale diffusion fit."""
    n = len(series) if horizon is None else horizon
    x = integrate_general(fit.params, n - 1).x_f
    inc = np.diff(x, prepend=0.0)
    peak = np.abs(series.raw).max()
    return inc * series.scale / peak if peak > 0 else inc


def compare_models(series: CascadeSeries, fraction: float = 1.0) -> dict:
    """RMSE of both models on the max-normalised increments of the fitted prefix.

    Both models are fitted to that same target.
    """
    egt = fit_diffusion(series, fraction, target="increments")
    base = fit_baseline(series, fraction)
    n = egt.n_points
    y = series.increments[:n]
    egt_rmse = float(np.sqrt(np.mean((egt_increments(egt, series, n) - y) ** 2)))
    return {"egt_rmse": egt_rmse, "baseline_rmse": base.rmse,
            "egt_cumulative_rmse": egt.rmse, "egt": egt.report(), "baseline": asdict(base)}


@dataclass
class Prediction:
    fit: DiffusionFit
    trajectory: Trajectory
    holdout_rmse: float | None
    holdout_increment_rmse: float | None
    in_sample_rmse: float
    peak_slot: int
    meta: dict = field(default_factory=dict)


def predict(series: CascadeSeries, fraction: float, holdout_start: int | None = None,
            fit: DiffusionFit | None = None, target: str = "cumulative") -> Prediction:
    """Fit on the leading ``fraction`` and extrapolate over the whole series.

    Holdout errors are measured from ``holdout_start`` (default: the first
    point after the prefix) and are ``None`` when that set is empty.  The
    peak slot is the slot of the largest predicted ``dx/dt``.
    """
    fit = fit or fit_diffusion(series, fraction, target=target)
    n = len(series)
    tr = integrate_general(fit.params, n - 1)
    start = fit.n_points if holdout_start is None else int(holdout_start)
    if start < n:
        hold = float(np.sqrt(np.mean((tr.x_f[start:] - series.cumulative[start:]) ** 2)))
        inc = egt_increments(fit, series)
        hold_inc = float(np.sqrt(np.mean((inc[start:] - series.increments[start:]) ** 2)))
    else:
        hold = hold_inc = None
    tr.meta.update(fraction=fraction, series=series.name)
    return Prediction(fit, tr, hold, hold_inc, fit.rmse, int(np.argmax(tr.xdot)),
                      meta={"holdout_start": start, "n": n})


def popularity_histogram(fits, bin_width: float = HIST_BIN_WIDTH):
    """Histogram of ``u_ff - u_nn`` with bins aligned to multiples of ``bin_width``.

    Returns ``(edges, counts)``.
    """
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    pops = np.array([f if isinstance(f, (int, float)) else recover_payoff(f)[1] for f in fits],
                    dtype=float)
    if pops.size == 0:
        raise ValueError("no fits to histogram")
    lo = math.floor(pops.min() / bin_width)
    hi = math.floor(pops.max() / bin_width) + 1
    edges = np.arange(lo, hi + 1) * bin_width
    counts = np.bincount(np.floor(pops / bin_width).astype(int) - lo, minlength=hi - lo)
    return edges, counts


def write_histogram(path, edges, counts) -> None:
    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(round(float(lo), 12)), repr(round(float(hi), 12)), int(c)])

    atomic_write(path, write)


def read_histogram(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    lows = [float(r["bin_low"]) for r in rows]
    edges = np.array(lows + [float(rows[-1]["bin_high"])]) if rows else np.array([])
    return edges, np.array([int(r["count"]) for r in rows])


def synthetic_cascade(params: GeneralODEParams, horizon: int, noise: float = 0.0,
                      rng=None, name: str = "synthetic") -> CascadeSeries:
    """Cumulative curve from the diffusion ODE plus Gaussian noise of std ``noise``."""
    rng = np.random.default_rng(rng)
    x = integrate_general(params, horizon).x_f
    if noise > 0:
        x = x + noise * rng.standard_normal(x.size)
    return CascadeSeries.from_cumulative(x, strict=False, name=name)


def synthetic_counts(params: GeneralODEParams, horizon: int, volume: float = 1e4,
                     rng=None, name: str = "synthetic") -> CascadeSeries:
    """Poisson mention counts whose expected cumulative share follows the ODE."""
    rng = np.random.default_rng(rng)
    x = integrate_general(params, horizon).x_f
    lam = np.clip(np.diff(x, prepend=0.0), 0.0, None) * volume
    counts = rng.poisson(lam)
    if counts.sum() == 0:
        counts[np.argmax(lam)] = 1
    return CascadeSeries.from_counts(counts, name=name)


def synthetic_pulse(q1: float, q2: float, q3: float, horizon: int, noise: float = 0.0,
                    rng=None, name: str = "pulse") -> CascadeSeries:
    """Increments ``q1 t^q2 exp(-q3 t)`` for t = 1..horizon, noise relative to the peak."""
    rng = np.random.default_rng(rng)
    t = np.arange(1, horizon + 1, dtype=float)
    y = q1 * t ** q2 * np.exp(-q3 * t)
    if noise > 0:
        y = y + noise * y.max() * rng.standard_normal(y.size)
    return CascadeSeries.from_counts(np.clip(y, 0.0, None), t=np.arange(horizon), name=name)
