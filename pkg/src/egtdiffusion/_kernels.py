"""Compiled inner loops for the agent-based simulator.

Strategies are stored as int8 (1 = forward, 0 = not forward).  Each node
also carries ``kf``, the number of forwarding neighbours, so that fitness is
an O(1) lookup and a flip costs O(degree).
"""

import numba
import numpy as np

RULE_BD = 0
RULE_DB = 1
RULE_IM = 2

MODE_SUM = 0
MODE_MEAN = 1


@numba.njit(cache=True, inline="always")
def _payoff(s, kf, d, uff, ufn, unn, mode):
    if d == 0:
        return 0.0
    if s == 1:
        p = kf * uff + (d - kf) * ufn
    else:
        p = kf * ufn + (d - kf) * unn
    if mode == MODE_MEAN:
        p /= d
    return p


@numba.njit(cache=True, inline="always")
def _fit(s, kf, d, uff, ufn, unn, mode, alpha):
    return 1.0 - alpha + alpha * _payoff(s, kf, d, uff, ufn, unn, mode)


@numba.njit(cache=True)
def count_forward_neighbours(indptr, indices, strat):
    n = strat.shape[0]
    kf = np.zeros(n, dtype=np.int32)
    for i in range(n):
        c = 0
        for p in range(indptr[i], indptr[i + 1]):
            c += strat[indices[p]]
        kf[i] = c
    return kf


@numba.njit(cache=True)
def edge_counts(indptr, indices, strat):
    """Return (#ff edges, #nn edges, #edges)."""
    n = strat.shape[0]
    eff = 0
    enn = 0
    e = 0
    for i in range(n):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j > i:
                e += 1
                if strat[i] == 1 and strat[j] == 1:
                    eff += 1
                elif strat[i] == 0 and strat[j] == 0:
                    enn += 1
    return eff, enn, e


@numba.njit(cache=True)
def _flip(j, indptr, indices, deg, strat, kf):
    """Flip node j; return the change in the forwarder count."""
    if strat[j] == 1:
        strat[j] = 0
        delta = -1
    else:
        strat[j] = 1
        delta = 1
    for p in range(indptr[j], indptr[j + 1]):
        kf[indices[p]] += delta
    return delta


@numba.njit(cache=True)
def micro_step(indptr, indices, deg, strat, kf, rule, mode, uff, ufn, unn,
               alpha, fmax):
    """One sub-slot update.  Returns the flipped node id or -1.

    ``fmax`` must bound every node's fitness from above (BD rejection
    sampling).
    """
    n = strat.shape[0]
    if rule == RULE_BD:
        # fitness-proportional reproducer by rejection against fmax
        while True:
            i = np.random.randint(0, n)
            f = _fit(strat[i], kf[i], deg[i], uff, ufn, unn, mode, alpha)
            if np.random.random() * fmax < f:
                break
        if deg[i] == 0:
            return -1
        j = indices[indptr[i] + np.random.randint(0, deg[i])]
        if strat[j] != strat[i]:
            _flip(j, indptr, indices, deg, strat, kf)
            return j
        return -1

    i = np.random.randint(0, n)
    d = deg[i]
    if d == 0:
        return -1
    start = indptr[i]
    total = 0.0
    for p in range(start, start + d):
        j = indices[p]
        total += _fit(strat[j], kf[j], deg[j], uff, ufn, unn, mode, alpha)
    fself = 0.0
    if rule == RULE_IM:
        fself = _fit(strat[i], kf[i], d, uff, ufn, unn, mode, alpha)
        total += fself
    r = np.random.random() * total
    if rule == RULE_IM:
        if r < fself:
            return -1
        r -= fself
    chosen = indices[start + d - 1]
    acc = 0.0
    for p in range(start, start + d):
        j = indices[p]
        acc += _fit(strat[j], kf[j], deg[j], uff, ufn, unn, mode, alpha)
        if r < acc:
            chosen = j
            break
    if strat[chosen] != strat[i]:
        _flip(i, indptr, indices, deg, strat, kf)
        return i
    return -1


@numba.njit(cache=True)
def run_graph(indptr, indices, deg, strat, rule, mode, uff, ufn, unn, alphas,
              seed, conv_window, conv_tol):
    """Run ``len(alphas)`` slots of N micro-updates on an explicit graph.

    Returns ``(xf, xff, xnn, n_run)``; samples after ``n_run`` slots repeat
    the last state (absorption or convergence stop).
    """
    np.random.seed(seed)
    n = strat.shape[0]
    slots = alphas.shape[0]
    kf = count_forward_neighbours(indptr, indices, strat)
    dmax = 0
    for i in range(n):
        if deg[i] > dmax:
            dmax = deg[i]
    umax = max(uff, max(ufn, unn))
    if umax < 0.0:
        umax = 0.0
    scale = 1.0 if mode == MODE_MEAN else float(dmax)

    eff, enn, ne = edge_counts(indptr, indices, strat)
    nf = 0
    for i in range(n):
        nf += strat[i]

    xf = np.empty(slots + 1)
    xff = np.empty(slots + 1)
    xnn = np.empty(slots + 1)
    inv_e = 1.0 / ne if ne > 0 else 0.0
    xf[0] = nf / n
    xff[0] = eff * inv_e
    xnn[0] = enn * inv_e
    n_run = slots
    for t in range(slots):
        alpha = alphas[t]
        fmax = 1.0 - alpha + alpha * umax * scale
        if 0 < nf < n:
            for _ in range(n):
                j = micro_step(indptr, indices, deg, strat, kf, rule, mode,
                               uff, ufn, unn, alpha, fmax)
                if j >= 0:
                    if strat[j] == 1:
                        nf += 1
                        eff += kf[j]
                        enn -= deg[j] - kf[j]
                    else:
                        nf -= 1
                        eff -= kf[j]
                        enn += deg[j] - kf[j]
                    if nf == 0 or nf == n:
                        break
        xf[t + 1] = nf / n
        xff[t + 1] = eff * inv_e
        xnn[t + 1] = enn * inv_e
        stop = nf == 0 or nf == n
        if not stop and conv_window > 0 and t + 1 >= conv_window:
            if abs(xf[t + 1] - xf[t + 1 - conv_window]) < conv_tol:
                stop = True
        if stop:
            for s in range(t + 2, slots + 1):
                xf[s] = xf[t + 1]
                xff[s] = xff[t + 1]
                xnn[s] = xnn[t + 1]
            n_run = t + 1
            break
    return xf, xff, xnn, n_run


@numba.njit(cache=True)
def _complete_fitness(nf, n, mode, uff, ufn, unn, alpha):
    # forwarder sees nf-1 forwarders, non-forwarder sees nf, out of n-1
    d = n - 1
    pf = _fit(1, nf - 1, d, uff, ufn, unn, mode, alpha)
    pn = _fit(0, nf, d, uff, ufn, unn, mode, alpha)
    return pf, pn


@numba.njit(cache=True)
def run_complete(n, nf0, rule, mode, uff, ufn, unn, alphas, seed,
                 conv_window, conv_tol):
    """Same contract as :func:`run_graph` for the complete graph K_n.

    All nodes are exchangeable, so the forwarder count alone is a Markov
    chain with the same transition law as the per-node process.
    """
    np.random.seed(seed)
    slots = alphas.shape[0]
    nf = nf0
    ne = n * (n - 1) // 2
    xf = np.empty(slots + 1)
    xff = np.empty(slots + 1)
    xnn = np.empty(slots + 1)

    def _edges(nf):
        return (nf * (nf - 1) // 2) / ne, ((n - nf) * (n - nf - 1) // 2) / ne

    xf[0] = nf / n
    a, b = _edges(nf)
    xff[0] = a
    xnn[0] = b
    n_run = slots
    for t in range(slots):
        alpha = alphas[t]
        if 0 < nf < n:
            for _ in range(n):
                pf, pn = _complete_fitness(nf, n, mode, uff, ufn, unn, alpha)
                if rule == RULE_BD:
                    wf = nf * pf
                    if np.random.random() * (wf + (n - nf) * pn) < wf:
                        if np.random.random() * (n - 1) < n - nf:
                            nf += 1
                    else:
                        if np.random.random() * (n - 1) < nf:
                            nf -= 1
                else:
                    self_w = 1 if rule == RULE_IM else 0
                    if np.random.random() * n < nf:
                        # focal forwarder; candidates exclude it unless IM
                        wf = (nf - 1 + self_w) * pf
                        wn = (n - nf) * pn
                        if np.random.random() * (wf + wn) >= wf:
                            nf -= 1
                    else:
                        wf = nf * pf
                        wn = (n - nf - 1 + self_w) * pn
                        if np.random.random() * (wf + wn) < wf:
                            nf += 1
                if nf == 0 or nf == n:
                    break
        xf[t + 1] = nf / n
        a, b = _edges(nf)
        xff[t + 1] = a
        xnn[t + 1] = b
        stop = nf == 0 or nf == n
        if not stop and conv_window > 0 and t + 1 >= conv_window:
            if abs(xf[t + 1] - xf[t + 1 - conv_window]) < conv_tol:
                stop = True
        if stop:
            for s in range(t + 2, slots + 1):
                xf[s] = xf[t + 1]
                xff[s] = xff[t + 1]
                xnn[s] = xnn[t + 1]
            n_run = t + 1
            break
    return xf, xff, xnn, n_run


@numba.njit(cache=True)
def flip_frequencies(indptr, indices, deg, strat, rule, mode, uff, ufn, unn,
                     alpha, reps, seed):
    """Apply one micro-update ``reps`` times from the same state.

    Returns counts per flipped node; index n counts updates with no flip.
    Used to check the update law against exact transition probabilities.
    """
    np.random.seed(seed)
    n = strat.shape[0]
    kf = count_forward_neighbours(indptr, indices, strat)
    dmax = 0
    for i in range(n):
        if deg[i] > dmax:
            dmax = deg[i]
    umax = max(uff, max(ufn, unn))
    scale = 1.0 if mode == MODE_MEAN else float(dmax)
    fmax = 1.0 - alpha + alpha * max(umax, 0.0) * scale
    counts = np.zeros(n + 1, dtype=np.int64)
    for _ in range(reps):
        j = micro_step(indptr, indices, deg, strat, kf, rule, mode, uff, ufn, unn,
                       alpha, fmax)
        if j < 0:
            counts[n] += 1
        else:
            counts[j] += 1
            _flip(j, indptr, indices, deg, strat, kf)
    return counts
