"""Agent-based forwarding-strategy dynamics on graphs (BD, DB and IM rules).

One time slot is N sequential micro-updates.  The hot loops live in
:mod:`egtdiffusion._kernels`; this module holds the pure-Python reference
update (used by the tests as an oracle), state measurement, single runs and
seeded ensembles.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .game import PayoffMatrix, PopulationState, SelectionIntensity, UpdateRule
from .graphs import Graph, gen_ba, gen_complete, gen_er, gen_regular
from .trajectory import Trajectory

CONV_WINDOW = 50
CONV_TOL = 1e-4
#: Runs absorbed at x_f = 0 at or before this slot are dropped under survival conditioning.
SURVIVAL_SLOT = 10
DEFAULT_REGEN_EVERY = 500
PAYOFF_MODES = ("sum", "mean")

_RULE_CODE = {UpdateRule.BD: K.RULE_BD, UpdateRule.DB: K.RULE_DB, UpdateRule.IM: K.RULE_IM}
_MODE_CODE = {"sum": K.MODE_SUM, "mean": K.MODE_MEAN}


def check_payoff_mode(mode: str) -> str:
    """``sum`` accumulates payoffs over neighbours, ``mean`` averages them."""
    if mode not in PAYOFF_MODES:
        raise ValueError(f"payoff mode must be one of {PAYOFF_MODES}, got {mode!r}")
    return mode


def _as_intensity(alpha) -> SelectionIntensity:
    return alpha if isinstance(alpha, SelectionIntensity) else SelectionIntensity(float(alpha))


def _strategies(graph: Graph, strategies) -> np.ndarray:
    s = np.asarray(strategies)
    if s.shape != (graph.n,):
        raise ValueError(f"strategy vector has shape {s.shape}, graph has {graph.n} nodes")
    return s


def node_fitness(graph: Graph, strategies, node: int, payoff: PayoffMatrix, alpha_t: float,
                 mode: str = "sum") -> float:
    """Fitness ``1 - alpha + alpha * payoff`` of one node.

    The payoff is summed over neighbours (``mode="sum"``) or averaged
    (``"mean"``); an isolated node earns 0.
    """
    s = _strategies(graph, strategies)
    if not 0 <= node < graph.n:
        raise IndexError(f"node {node} out of range")
    nb = graph.neighbors(node)
    d = nb.size
    if d == 0:
        return 1.0 - alpha_t
    kf = int(np.count_nonzero(s[nb]))
    if s[node]:
        p = kf * payoff.u_ff + (d - kf) * payoff.u_fn
    else:
        p = kf * payoff.u_fn + (d - kf) * payoff.u_nn
    if mode == "mean":
        p /= d
    return 1.0 - alpha_t + alpha_t * p


def _all_fitness(graph, s, payoff, alpha_t, mode):
    return np.array([node_fitness(graph, s, i, payoff, alpha_t, mode) for i in range(graph.n)])


def _roulette(weights, rng):
    total = weights.sum()
    if not total > 0:
        raise RuntimeError("selection weights sum to zero")
    return int(rng.choice(weights.size, p=weights / total))


def micro_update(graph: Graph, strategies, rule, payoff: PayoffMatrix, alpha_t: float,
                 rng: np.random.Generator, mode: str = "sum") -> int | None:
    """Apply one update in place; return the flipped node or ``None``.

    Reference implementation, O(N) per call.  BD: a fitness-proportional
    node copies its strategy onto a random neighbour.  DB: a random node
    copies a neighbour picked in proportion to fitness.  IM: as DB but the
    node itself is also a candidate.
    """
    s = _strategies(graph, strategies)
    rule = UpdateRule.parse(rule)
    if rule is UpdateRule.BD:
        i = _roulette(_all_fitness(graph, s, payoff, alpha_t, mode), rng)
        nb = graph.neighbors(i)
        if nb.size == 0:
            return None
        j = int(nb[rng.integers(nb.size)])
        if s[j] != s[i]:
            s[j] = s[i]
            return j
        return None
    i = int(rng.integers(graph.n))
    cand = graph.neighbors(i)
    if cand.size == 0:
        return None
    if rule is UpdateRule.IM:
        cand = np.append(cand, i)
    w = np.array([node_fitness(graph, s, int(j), payoff, alpha_t, mode) for j in cand])
    j = int(cand[_roulette(w, rng)])
    if s[j] != s[i]:
        s[i] = s[j]
        return i
    return None


def _check_positive_fitness(graph: Graph, payoff: PayoffMatrix, alpha: float, mode: str):
    umin = min(payoff.values)
    if umin >= 0:
        return
    scale = graph.degrees.max() if mode == "sum" else 1.0
    if 1.0 - alpha + alpha * umin * scale <= 0:
        raise ValueError("payoffs and selection intensity allow non-positive fitness")


def _seed_from(rng) -> int:
    return int(rng.integers(2**31 - 1))


def run_slot(graph: Graph, strategies: np.ndarray, rule, payoff: PayoffMatrix, alpha_t: float,
             rng: np.random.Generator, mode: str = "sum") -> np.ndarray:
    """Run one slot (N micro-updates) in place on an int8 strategy vector."""
    s = _strategies(graph, strategies)
    if s.dtype != np.int8:
        raise TypeError("run_slot works in place and needs an int8 strategy vector")
    _check_positive_fitness(graph, payoff, alpha_t, mode)
    K.run_graph(graph.indptr, graph.indices, graph.degrees, s, _RULE_CODE[UpdateRule.parse(rule)],
                _MODE_CODE[mode], *payoff.values, np.array([float(alpha_t)]),
                _seed_from(rng), 0, 0.0)
    return s


def measure_states(graph: Graph, strategies) -> PopulationState:
    s = _strategies(graph, strategies).astype(np.int8)
    x_f = float(s.mean())
    eff, enn, e = K.edge_counts(graph.indptr, graph.indices, s)
    if e == 0:
        return PopulationState(x_f)
    x_ff, x_nn = eff / e, enn / e
    x_fn = (e - eff - enn) / e
    given_f = x_ff / x_f if x_f > 0 else 0.0
    given_n = (1.0 - given_f) * x_f / (1.0 - x_f) if x_f < 1 else 0.0
    return PopulationState(x_f, x_ff, x_fn, x_nn, given_f, given_n)


def initial_strategies(n: int, init, rng: np.random.Generator) -> np.ndarray:
    """Build an int8 strategy vector.

    ``init`` is ``None`` (one random forwarder), a fraction in [0, 1]
    (that share of random forwarders, rounded) or an iterable of node ids.
    """
    s = np.zeros(n, dtype=np.int8)
    if init is None:
        s[rng.integers(n)] = 1
    elif isinstance(init, (float, np.floating)):
        if not 0.0 <= init <= 1.0:
            raise ValueError(f"initial fraction must be in [0, 1], got {init}")
        s[rng.choice(n, size=int(round(init * n)), replace=False)] = 1
    else:
        idx = np.fromiter((int(i) for i in init), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValueError("initial forwarder id out of range")
        s[idx] = 1
    return s


def run_trajectory(graph: Graph, rule, payoff: PayoffMatrix, alpha, init=None,
                   slots: int = 2000, rng=None, payoff_mode: str = "sum",
                   converge: bool = False) -> Trajectory:
    """Simulate up to ``slots`` slots and record x_f and edge states per slot.

    With ``converge`` the run stops once x_f moved less than ``CONV_TOL``
    over the last ``CONV_WINDOW`` slots, or on absorption; the remaining
    samples repeat the final state so every run has ``slots + 1`` samples.
    ``meta['stopped_at']`` is the last simulated slot.
    """
    if slots < 1:
        raise ValueError(f"slots must be >= 1, got {slots}")
    rng = np.random.default_rng(rng)
    rule = UpdateRule.parse(rule)
    intensity = _as_intensity(alpha)
    mode = check_payoff_mode(payoff_mode)
    alphas = intensity.values(slots)
    _check_positive_fitness(graph, payoff, float(alphas.max()), mode)
    s = initial_strategies(graph.n, init, rng)
    seed = _seed_from(rng)
    window = CONV_WINDOW if converge else 0
    args = (_RULE_CODE[rule], _MODE_CODE[mode], *payoff.values, alphas, seed, window, CONV_TOL)
    if graph.is_complete:
        xf, xff, xnn, n_run = K.run_complete(graph.n, int(s.sum()), *args)
    else:
        xf, xff, xnn, n_run = K.run_graph(graph.indptr, graph.indices, graph.degrees, s, *args)
    x_fn = np.clip(1.0 - xff - xnn, 0.0, 1.0) if graph.n_edges else None
    if not graph.n_edges:
        xff = xnn = None
    return Trajectory(np.arange(slots + 1), xf, x_ff=xff, x_fn=x_fn, x_nn=xnn,
                      meta={"source": "simulation", "rule": rule.value, "graph": graph.name,
                            "payoff": payoff.values, "payoff_mode": mode,
                            "alpha": (intensity.scale, intensity.decay),
                            "stopped_at": int(n_run)})


@dataclass(frozen=True)
class NetworkSpec:
    """Recipe for the network of an ensemble; random families are rebuilt per realization."""

    family: str
    n: int = 1000
    k: int | None = None
    m: int | None = None
    kbar: float | None = None
    graph: Graph | None = field(default=None, compare=False)

    def __post_init__(self):
        need = {"regular": "k", "er": "kbar", "ba": "m"}.get(self.family)
        if self.family not in ("complete", "regular", "er", "ba", "edges"):
            raise ValueError(f"unknown network family {self.family!r}")
        if need and getattr(self, need) is None:
            raise ValueError(f"network family {self.family!r} needs {need}")
        if self.family == "edges" and self.graph is None:
            raise ValueError("family 'edges' needs a loaded graph")

    @property
    def is_random(self) -> bool:
        return self.family in ("regular", "er", "ba")

    def build(self, seed=None) -> Graph:
        if self.family == "complete":
            return gen_complete(self.n)
        if self.family == "regular":
            return gen_regular(self.n, self.k, seed)
        if self.family == "er":
            return gen_er(self.n, self.kbar, seed)
        if self.family == "ba":
            return gen_ba(self.n, self.m, seed)
        return self.graph


@dataclass(frozen=True)
class EnsembleParams:
    network: NetworkSpec
    rule: UpdateRule = UpdateRule.BD
    payoff: PayoffMatrix = field(default_factory=lambda: PayoffMatrix.case(1))
    alpha: SelectionIntensity = field(default_factory=lambda: SelectionIntensity(0.025))
    slots: int = 2000
    init: object = None
    payoff_mode: str = "sum"
    converge: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rule", UpdateRule.parse(self.rule))
        object.__setattr__(self, "alpha", _as_intensity(self.alpha))
        check_payoff_mode(self.payoff_mode)


def derive_seed(master_seed: int, stream: int, index: int) -> int:
    """Deterministic child seed for (stream, index); independent of worker count.

    Stream 0 seeds graph realizations, stream 1 seeds runs.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=(stream, index))
    return int(ss.generate_state(1)[0])


def _run_batch(params: EnsembleParams, master_seed: int, graph_index: int, run_ids):
    graph = params.network.build(derive_seed(master_seed, 0, graph_index))
    out = []
    for r in run_ids:
        tr = run_trajectory(graph, params.rule, params.payoff, params.alpha, params.init,
                            params.slots, derive_seed(master_seed, 1, r), params.payoff_mode,
                            params.converge)
        out.append((r, tr.x_f, tr.x_ff, tr.x_nn, tr.meta["stopped_at"]))
    return out


def default_jobs() -> int:
    return max(1, int(os.environ.get("EGTDIFF_JOBS", "1")))


def _survived(xf, stopped_at) -> bool:
    return not (xf[-1] == 0.0 and stopped_at <= SURVIVAL_SLOT)


def ensemble(params: EnsembleParams, runs: int, regen_every: int = DEFAULT_REGEN_EVERY,
             master_seed: int = 0, condition: str = "survival", jobs: int | None = None,
             max_attempts: int | None = None) -> Trajectory:
    """Mean trajectory over ``runs`` runs with pointwise standard errors.

    ``condition="survival"`` keeps only runs not absorbed at 0 within the
    first ``SURVIVAL_SLOT`` slots and keeps simulating until ``runs`` such
    runs exist (at most ``max_attempts``, default ``100 * runs``).
    ``condition="plain"`` averages every run.  Attempt ``r`` uses graph
    realization ``r // regen_every`` and its own derived seed, and runs are
    reduced in attempt order, so the output depends only on the arguments,
    never on ``jobs``.
    """
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if regen_every < 1:
        raise ValueError(f"regen_every must be >= 1, got {regen_every}")
    if condition not in ("survival", "plain"):
        raise ValueError(f"condition must be 'survival' or 'plain', got {condition!r}")
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    max_attempts = max_attempts or (100 * runs if condition == "survival" else runs)
    if not params.network.is_random:
        regen_every = max_attempts

    kept, attempts, stops = [], 0, []
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    try:
        while len(kept) < runs and attempts < max_attempts:
            need = min(runs - len(kept), max_attempts - attempts)
            if condition == "survival" and kept:
                # scale the next batch by the survival rate seen so far
                need = min(max_attempts - attempts,
                           math.ceil(need * attempts / len(kept) * 1.1) + jobs)
            ids = range(attempts, attempts + need)
            batches = {}
            for r in ids:
                batches.setdefault(r // regen_every, []).append(r)
            chunks = []
            for g, rs in batches.items():
                step = max(1, math.ceil(len(rs) / jobs))
                chunks += [(g, rs[i:i + step]) for i in range(0, len(rs), step)]
            if pool is None:
                results = [_run_batch(params, master_seed, g, rs) for g, rs in chunks]
            else:
                futs = [pool.submit(_run_batch, params, master_seed, g, rs) for g, rs in chunks]
                results = [f.result() for f in futs]
            for r, xf, xff, xnn, stop in sorted((x for b in results for x in b),
                                                key=lambda x: x[0]):
                if len(kept) < runs and (condition == "plain" or _survived(xf, stop)):
                    kept.append((r, xf, xff, xnn))
                    stops.append(stop)
            attempts += need
    finally:
        if pool is not None:
            pool.shutdown()
    if not kept:
        raise RuntimeError(f"no run survived in {attempts} attempts")
    used = max(r for r, *_ in kept) + 1
    x = np.stack([k[1] for k in kept])
    mean = x.mean(axis=0)
    stderr = x.std(axis=0, ddof=1) / np.sqrt(len(kept)) if len(kept) > 1 else np.zeros_like(mean)
    has_edges = kept[0][2] is not None
    xff = np.stack([k[2] for k in kept]).mean(axis=0) if has_edges else None
    xnn = np.stack([k[3] for k in kept]).mean(axis=0) if has_edges else None
    xfn = np.clip(1.0 - xff - xnn, 0.0, 1.0) if has_edges else None
    meta = {"source": "ensemble", "runs": len(kept), "attempts": used,
            "discarded": used - len(kept), "condition": condition,
            "graph_realizations": (used - 1) // regen_every + 1, "master_seed": master_seed,
            "regen_every": regen_every, "rule": params.rule.value,
            "network": params.network.family, "payoff": params.payoff.values,
            "alpha": (params.alpha.scale, params.alpha.decay),
            "final_x_f": float(mean[-1]), "convergence_slot": convergence_slot(mean),
            "max_stop_slot": int(max(stops))}
    return Trajectory(np.arange(mean.size), mean, x_ff=xff, x_fn=xfn, x_nn=xnn,
                      stderr=stderr, meta=meta)


def convergence_slot(x, window: int = CONV_WINDOW, tol: float = CONV_TOL) -> int | None:
    """First slot t with |x(t) - x(t - window)| < tol from then on, else None."""
    x = np.asarray(x)
    if x.size <= window:
        return None
    moving = np.abs(x[window:] - x[:-window]) >= tol
    if not moving.any():
        return window
    last = int(np.flatnonzero(moving)[-1]) + window
    return last + 1 if last + 1 < x.size else None

