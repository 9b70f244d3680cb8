"""Undirected simple graphs, the four benchmark network families and degree statistics."""

from __future__ import annotations

import io
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

REGULAR_MAX_TRIES = 100


class EdgeListParseError(ValueError):
    """Malformed edge-list input; carries the offending 1-based line number."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected simple graph in CSR form over node ids 0..n-1.

    ``indices[indptr[i]:indptr[i+1]]`` are the sorted neighbours of ``i``.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    name: str = "graph"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    @classmethod
    def from_edges(cls, n: int, edges, name: str = "graph", meta: dict | None = None) -> "Graph":
        """Build from an (m, 2) array of node pairs.

        Self-loops and duplicate (including reversed) pairs are dropped.
        """
        if n < 1:
            raise ValueError(f"node count must be positive, got {n}")
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValueError("edge endpoint out of range")
        e = e[e[:, 0] != e[:, 1]]
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0)
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(both[:, 0], minlength=n), out=indptr[1:])
        return cls(n, indptr, both[:, 1].copy(), name=name, meta=dict(meta or {}))

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def n_edges(self) -> int:
        return int(self.indices.shape[0] // 2)

    @property
    def is_complete(self) -> bool:
        return self.n >= 2 and bool(np.all(self.degrees == self.n - 1))

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def edges(self) -> np.ndarray:
        """(m, 2) array of edges with i < j."""
        src = np.repeat(np.arange(self.n), self.degrees)
        keep = src < self.indices
        return np.column_stack([src[keep], self.indices[keep]])

    def is_connected(self) -> bool:
        adj = csr_matrix((np.ones_like(self.indices), self.indices, self.indptr),
                         shape=(self.n, self.n))
        ncomp, _ = connected_components(adj, directed=False)
        return ncomp == 1

    def __repr__(self):
        return f"Graph({self.name}, n={self.n}, edges={self.n_edges})"


def gen_complete(n: int) -> Graph:
    if n < 2:
        raise ValueError(f"complete graph needs n >= 2, got {n}")
    i, j = np.triu_indices(n, k=1)
    return Graph.from_edges(n, np.column_stack([i, j]), name=f"complete(n={n})")


def _regular_attempt(n, k, rng):
    # Steger-Wormald style pairing: pair free stubs at random, keep the
    # legal pairs and re-pair the rest until nothing is left or we get stuck.
    edges = set()
    stubs = np.repeat(np.arange(n), k)
    while stubs.size:
        rng.shuffle(stubs)
        leftover = defaultdict(int)
        for a, b in stubs.reshape(-1, 2):
            a, b = (a, b) if a < b else (b, a)
            if a != b and (a, b) not in edges:
                edges.add((a, b))
            else:
                leftover[a] += 1
                leftover[b] += 1
        if not leftover:
            break
        nodes = list(leftover)
        # stuck when no legal pair is left among the remaining stubs
        if not any((min(u, v), max(u, v)) not in edges
                   for u, v in combinations(nodes, 2)):
            return None
        stubs = np.repeat(np.array(nodes, dtype=np.int64),
                          [leftover[u] for u in nodes])
    return edges


def gen_regular(n: int, k: int, seed=None) -> Graph:
    """Random k-regular simple graph.

    Retries the stub pairing up to ``REGULAR_MAX_TRIES`` times.  The result is
    not guaranteed to be connected; a warning is logged when it is not and
    ``meta['connected']`` records the outcome.
    """
    if k < 0 or k >= n:
        raise ValueError(f"need 0 <= k < n, got n={n}, k={k}")
    if (n * k) % 2:
        raise ValueError(f"n*k must be even, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    if k == n - 1:
        g = gen_complete(n)
        return Graph(g.n, g.indptr, g.indices, name=f"regular(n={n},k={k})",
                     meta={"connected": True})
    for attempt in range(REGULAR_MAX_TRIES):
        edges = _regular_attempt(n, k, rng)
        if edges is not None:
            break
    else:
        raise RuntimeError(f"failed to build a {k}-regular graph on {n} nodes "
                           f"in {REGULAR_MAX_TRIES} attempts")
    arr = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    g = Graph.from_edges(n, arr, name=f"regular(n={n},k={k})")
    connected = g.is_connected()
    if not connected:
        log.warning("%s is not connected", g.name)
    g.meta.update(connected=connected, attempts=attempt + 1)
    return g


def gen_er(n: int, mean_degree: float, seed=None) -> Graph:
    """Erdos-Renyi G(n, p) with ``p = mean_degree / (n - 1)``."""
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    p = mean_degree / (n - 1)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability {p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    src, dst = [], []
    for i in range(n - 1):
        hit = np.flatnonzero(rng.random(n - 1 - i) < p)
        if hit.size:
            src.append(np.full(hit.size, i))
            dst.append(hit + i + 1)
    edges = (np.column_stack([np.concatenate(src), np.concatenate(dst)])
             if src else np.empty((0, 2), dtype=np.int64))
    return Graph.from_edges(n, edges, name=f"er(n={n},kbar={mean_degree:g})",
                            meta={"p": p})


def gen_ba(n: int, m: int, seed=None) -> Graph:
    """Barabasi-Albert growth from a complete seed graph on ``m + 1`` nodes."""
    if m < 1 or m >= n:
        raise ValueError(f"need 1 <= m < n, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    seed_n = m + 1
    i, j = np.triu_indices(seed_n, k=1)
    edges = [np.column_stack([i, j])]
    # every edge endpoint, so a uniform draw is degree-proportional
    ends = np.empty(2 * (len(i) + (n - seed_n) * m), dtype=np.int64)
    ends[:2 * len(i)] = np.concatenate([i, j])
    n_ends = 2 * len(i)
    for v in range(seed_n, n):
        targets = set()
        while len(targets) < m:
            targets.add(int(ends[rng.integers(n_ends)]))
        t = np.fromiter(targets, dtype=np.int64, count=m)
        edges.append(np.column_stack([np.full(m, v), t]))
        ends[n_ends:n_ends + m] = t
        ends[n_ends + m:n_ends + 2 * m] = v
        n_ends += 2 * m
    return Graph.from_edges(n, np.concatenate(edges), name=f"ba(n={n},m={m})")


def _iter_lines(source):
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            yield from fh
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        yield from source
    else:
        yield from source


def load_edge_list(source, name: str | None = None) -> Graph:
    """Parse a whitespace-separated edge list (SNAP style).

    ``source`` is a path, an open text file or an iterable of lines.  Lines
    starting with ``#`` and blank lines are skipped.  Node labels are
    compacted to 0..n-1 in order of first appearance; self-loops and
    duplicate edges are dropped and counted in ``meta``.
    """
    pairs = []
    for lineno, line in enumerate(_iter_lines(source), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) < 2:
            raise EdgeListParseError(lineno, f"expected two node ids, got {s!r}")
        try:
            pairs.append((int(tok[0]), int(tok[1])))
        except ValueError:
            raise EdgeListParseError(lineno, f"non-integer node id in {s!r}") from None
    if not pairs:
        raise ValueError("edge list is empty")
    raw = np.array(pairs, dtype=np.int64)
    labels, first = np.unique(raw.ravel(), return_index=True)
    # relabel by order of first appearance
    order = np.argsort(first)
    relabel = np.empty(labels.size, dtype=np.int64)
    relabel[order] = np.arange(labels.size)
    e = relabel[np.searchsorted(labels, raw)]
    self_loops = int(np.sum(e[:, 0] == e[:, 1]))
    g = Graph.from_edges(labels.size, e, name=name or "edge_list")
    duplicates = len(pairs) - self_loops - g.n_edges
    g.meta.update(lines=len(pairs), self_loops=self_loops, duplicates=duplicates)
    if self_loops or duplicates:
        log.info("edge list: dropped %d self-loops and %d duplicate edges",
                 self_loops, duplicates)
    return g


@dataclass(frozen=True)
class DegreeProfile:
    """Empirical degree law: ``probs[i]`` is the share of nodes of degree ``degrees[i]``."""

    degrees: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        if self.degrees.shape != self.probs.shape or self.degrees.size == 0:
            raise ValueError("degrees and probs must be non-empty and aligned")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("degree probabilities must be >= 0 and sum to 1")

    @classmethod
    def from_dict(cls, law: dict) -> "DegreeProfile":
        ks = np.array(sorted(law), dtype=np.int64)
        return cls(ks, np.array([law[k] for k in ks], dtype=float))

    @property
    def mean(self) -> float:
        return float(np.dot(self.degrees, self.probs))

    @property
    def second_moment(self) -> float:
        return float(np.dot(self.degrees.astype(float) ** 2, self.probs))

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean ** 2

    def as_dict(self) -> dict:
        return {int(k): float(p) for k, p in zip(self.degrees, self.probs)}


def degree_profile(graph: Graph) -> DegreeProfile:
    deg = graph.degrees
    if deg.size == 0:
        raise ValueError("empty graph")
    ks, counts = np.unique(deg, return_counts=True)
    return DegreeProfile(ks, counts / deg.size)


def neighbor_degree_mean(profile: DegreeProfile) -> float:
    """Mean degree of a random edge endpoint, ``E[k^2] / E[k]``."""
    kbar = profile.mean
    if kbar <= 0:
        raise ValueError("mean degree must be positive")
    return profile.second_moment / kbar


def powerlaw_exponent(degrees, k_min: int | None = None) -> float:
    """Discrete power-law exponent by the continuous-approximation MLE.

    ``xi = 1 + n / sum(ln(k / (k_min - 1/2)))`` over degrees ``>= k_min``
    (Clauset, Shalizi & Newman 2009, eq. 3.7).
    """
    k = np.asarray(degrees, dtype=float)
    if k_min is None:
        k_min = int(k.min())
    tail = k[k >= k_min]
    if tail.size == 0 or k_min < 1:
        raise ValueError("no degrees in the fitted tail")
    return 1.0 + tail.size / np.sum(np.log(tail / (k_min - 0.5)))
