import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from egtdiffusion import _kernels as K
from egtdiffusion.game import PayoffMatrix, SelectionIntensity, UpdateRule
from egtdiffusion.graphs import Graph, gen_complete, gen_er, gen_regular, load_edge_list
from egtdiffusion.sim import (
    EnsembleParams,
    NetworkSpec,
    check_payoff_mode,
    convergence_slot,
    derive_seed,
    ensemble,
    initial_strategies,
    measure_states,
    micro_update,
    node_fitness,
    run_slot,
    run_trajectory,
)

CASES = [PayoffMatrix.case(i) for i in range(1, 5)]
RULE_CODE = {UpdateRule.BD: K.RULE_BD, UpdateRule.DB: K.RULE_DB, UpdateRule.IM: K.RULE_IM}
MODE_CODE = {"sum": K.MODE_SUM, "mean": K.MODE_MEAN}

# small irregular graph: degrees 3, 2, 2, 2, 2, 1
SMALL = load_edge_list(["0 1", "0 2", "0 3", "1 2", "3 4", "4 5"])
SMALL_STATE = np.array([1, 0, 1, 0, 1, 0], dtype=np.int8)


def exact_flip_probs(graph: Graph, s, rule, payoff, alpha, mode):
    """Probability that one micro-update flips each node; last entry is no flip."""
    rule = UpdateRule.parse(rule)
    n = graph.n
    fit = np.array([node_fitness(graph, s, i, payoff, alpha, mode) for i in range(n)])
    p = np.zeros(n + 1)
    if rule is UpdateRule.BD:
        for i in range(n):
            nb = graph.neighbors(i)
            for j in nb:
                if s[j] != s[i]:
                    p[j] += fit[i] / fit.sum() / nb.size
    else:
        for i in range(n):
            cand = list(graph.neighbors(i))
            if not cand:
                continue
            if rule is UpdateRule.IM:
                cand.append(i)
            w = fit[cand]
            p[i] += sum(wj for j, wj in zip(cand, w) if s[j] != s[i]) / w.sum() / n
    p[n] = 1.0 - p[:n].sum()
    return p


def kernel_flip_counts(graph, s, rule, payoff, alpha, mode, reps, seed):
    return K.flip_frequencies(graph.indptr, graph.indices, graph.degrees, s.copy(),
                              RULE_CODE[UpdateRule.parse(rule)], MODE_CODE[mode],
                              *payoff.values, alpha, reps, seed)


def chisq_pvalue(counts, probs):
    keep = probs > 0
    assert counts[~keep].sum() == 0
    return stats.chisquare(counts[keep], probs[keep] * counts.sum()).pvalue


class TestNodeFitness:
    def test_examples(self):
        star = load_edge_list(["0 1", "0 2", "0 3", "0 4"])
        s = np.array([1, 1, 1, 1, 1])
        assert node_fitness(star, s, 0, CASES[0], 0.1) == pytest.approx(1.22)
        path = load_edge_list(["0 1", "1 2"])
        assert node_fitness(path, np.zeros(3), 1, CASES[3], 1.0) == pytest.approx(1.6)

    def test_no_selection(self):
        for i in range(SMALL.n):
            assert node_fitness(SMALL, SMALL_STATE, i, CASES[1], 0.0) == 1.0

    def test_isolated(self):
        g = gen_er(3, 0.0, seed=0)
        assert node_fitness(g, np.array([1, 0, 0]), 0, CASES[0], 0.3) == pytest.approx(0.7)

    def test_mean_mode(self):
        star = load_edge_list(["0 1", "0 2", "0 3", "0 4"])
        s = np.array([1, 1, 1, 0, 0])
        # centre: 2 forwarding neighbours of 4, payoff mean (2*0.8 + 2*0.6)/4
        assert node_fitness(star, s, 0, CASES[0], 0.5, "mean") == pytest.approx(0.5 + 0.5 * 0.7)

    def test_bad_node(self):
        with pytest.raises(IndexError):
            node_fitness(SMALL, SMALL_STATE, 6, CASES[0], 0.1)
        with pytest.raises(ValueError):
            node_fitness(SMALL, np.zeros(3), 0, CASES[0], 0.1)


class TestMicroUpdate:
    def test_two_node_bd(self):
        g = gen_complete(2)
        rng = np.random.default_rng(0)
        hits = 0
        for _ in range(4000):
            s = np.array([1, 0], dtype=np.int8)
            j = micro_update(g, s, "BD", CASES[0], 1.0, rng)
            assert j is not None and s[0] == s[1]
            hits += int(s[0] == 1)
        assert stats.binomtest(hits, 4000, 0.5).pvalue > 1e-3

    def test_isolated_im_keeps_strategy(self):
        g = gen_er(3, 0.0, seed=0)
        s = np.array([1, 0, 0], dtype=np.int8)
        rng = np.random.default_rng(1)
        for _ in range(50):
            assert micro_update(g, s, "IM", CASES[0], 0.5, rng) is None
        assert s.tolist() == [1, 0, 0]

    @pytest.mark.parametrize("rule", list(UpdateRule))
    @pytest.mark.parametrize("mode", ["sum", "mean"])
    def test_kernel_matches_exact_law(self, rule, mode):
        p = exact_flip_probs(SMALL, SMALL_STATE, rule, CASES[1], 0.6, mode)
        counts = kernel_flip_counts(SMALL, SMALL_STATE, rule, CASES[1], 0.6, mode, 200_000, 5)
        assert chisq_pvalue(counts, p) > 1e-4

    @pytest.mark.parametrize("rule", list(UpdateRule))
    def test_reference_matches_exact_law(self, rule):
        p = exact_flip_probs(SMALL, SMALL_STATE, rule, CASES[2], 0.8, "sum")
        rng = np.random.default_rng(2)
        counts = np.zeros(SMALL.n + 1, dtype=np.int64)
        for _ in range(6000):
            s = SMALL_STATE.copy()
            j = micro_update(SMALL, s, rule, CASES[2], 0.8, rng)
            counts[SMALL.n if j is None else j] += 1
        assert chisq_pvalue(counts, p) > 1e-4

    def test_im_candidates_equiprobable_weak_selection(self):
        # star centre (non-forwarder) with 2 of 4 forwarding leaves: under weak
        # selection it copies a forwarder with probability 2/5 when picked
        star = load_edge_list(["0 1", "0 2", "0 3", "0 4"])
        s = np.array([0, 1, 1, 0, 0], dtype=np.int8)
        counts = kernel_flip_counts(star, s, "IM", CASES[0], 1e-9, "sum", 200_000, 9)
        assert stats.binomtest(int(counts[0]), 200_000, 0.2 * 0.4).pvalue > 1e-4
        # each forwarding leaf sees itself and the centre: flip with 1/2
        assert stats.binomtest(int(counts[1]), 200_000, 0.2 * 0.5).pvalue > 1e-4

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(3, 30), seed=st.integers(0, 10**6), value=st.sampled_from([0, 1]),
           rule=st.sampled_from(list(UpdateRule)), case=st.integers(0, 3))
    def test_homogeneous_states_absorb(self, n, seed, value, rule, case):
        g = gen_er(n, min(n - 1, 3.0), seed)
        s = np.full(n, value, dtype=np.int8)
        counts = kernel_flip_counts(g, s, rule, CASES[case], 0.5, "sum", 200, seed)
        assert counts[n] == 200
        assert micro_update(g, s.copy(), rule, CASES[case], 0.5, np.random.default_rng(seed)) is None


class TestRunSlot:
    def test_requires_int8(self):
        with pytest.raises(TypeError):
            run_slot(SMALL, SMALL_STATE.astype(np.int64), "BD", CASES[0], 0.1,
                     np.random.default_rng(0))

    def test_homogeneous_unchanged(self):
        g = gen_regular(50, 4, seed=1)
        s = np.ones(50, dtype=np.int8)
        run_slot(g, s, "DB", CASES[1], 0.3, np.random.default_rng(0))
        assert s.sum() == 50

    @pytest.mark.parametrize("rule", list(UpdateRule))
    def test_one_slot_is_n_updates(self, rule):
        # exact law of 3 chained updates on a 3-node path vs one simulated slot
        path = load_edge_list(["0 1", "1 2"])
        pay, alpha = CASES[1], 0.7
        states = [np.array([(b >> i) & 1 for i in range(3)], dtype=np.int8) for b in range(8)]
        trans = np.zeros((8, 8))
        for a, s in enumerate(states):
            p = exact_flip_probs(path, s, rule, pay, alpha, "sum")
            trans[a, a] += p[3]
            for j in range(3):
                trans[a, a ^ (1 << j)] += p[j]
        start = 0b001
        target = np.linalg.matrix_power(trans, 3)[start]
        rng = np.random.default_rng(4)
        counts = np.zeros(8, dtype=np.int64)
        for _ in range(20_000):
            s = states[start].copy()
            run_slot(path, s, rule, pay, alpha, rng)
            counts[int(s[0]) + 2 * int(s[1]) + 4 * int(s[2])] += 1
        assert chisq_pvalue(counts, target) > 1e-4


class TestMeasureStates:
    def test_triangle(self):
        st_ = measure_states(gen_complete(3), [1, 0, 0])
        assert st_.x_f == pytest.approx(1 / 3)
        assert (st_.x_ff, st_.x_fn, st_.x_nn) == pytest.approx((0.0, 2 / 3, 1 / 3))
        assert (st_.x_f_given_f, st_.x_f_given_n) == pytest.approx((0.0, 0.5))

    def test_all_forwarders(self):
        st_ = measure_states(gen_complete(5), np.ones(5))
        assert st_.x_f == 1.0 and st_.x_ff == 1.0

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(2, 40), seed=st.integers(0, 10**6), data=st.data())
    def test_identities(self, n, seed, data):
        g = gen_er(n, min(n - 1, 4.0), seed)
        s = np.array(data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)))
        m = measure_states(g, s)
        if g.n_edges:
            assert m.x_ff + m.x_fn + m.x_nn == pytest.approx(1.0, abs=1e-12)
        if 0 < m.x_f < 1:
            assert m.x_f_given_n * (1 - m.x_f) == pytest.approx((1 - m.x_f_given_f) * m.x_f,
                                                                abs=1e-12)


class TestInit:
    def test_variants(self):
        rng = np.random.default_rng(0)
        assert initial_strategies(10, None, rng).sum() == 1
        assert initial_strategies(10, 0.3, rng).sum() == 3
        assert initial_strategies(10, [2, 5], rng).tolist() == [0, 0, 1, 0, 0, 1, 0, 0, 0, 0]
        with pytest.raises(ValueError):
            initial_strategies(10, 1.5, rng)
        with pytest.raises(ValueError):
            initial_strategies(10, [10], rng)

    def test_payoff_mode(self):
        assert check_payoff_mode("mean") == "mean"
        with pytest.raises(ValueError):
            check_payoff_mode("median")
        with pytest.raises(ValueError):
            run_trajectory(gen_complete(5), "BD", CASES[0], 0.1, slots=2, payoff_mode="auto")


class TestRunTrajectory:
    def test_case4_dies_out(self):
        g = gen_regular(200, 6, seed=3)
        tr = run_trajectory(g, "BD", CASES[3], 0.5, slots=500, rng=1, converge=True)
        assert tr.final == 0.0
        assert tr.x_f.size == 501 and tr.meta["stopped_at"] < 500

    def test_case1_complete_takes_over(self):
        tr = run_trajectory(gen_complete(1000), "BD", CASES[0], 0.025, init=0.1, slots=3000,
                            rng=2)
        assert tr.final >= 0.99
        assert tr.meta["payoff_mode"] == "sum"

    def test_mean_payoff_mode(self):
        # averaged payoffs on K_n: weak drift, x stays in range and the mode is recorded
        tr = run_trajectory(gen_complete(200), "BD", CASES[0], 0.5, init=0.5, slots=200, rng=2,
                            payoff_mode="mean")
        assert tr.meta["payoff_mode"] == "mean" and tr.final > 0.5

    def test_neutral_drift(self):
        # neutral payoffs: the ensemble mean stays at the initial share
        g = gen_complete(100)
        neutral = PayoffMatrix(0.5, 0.5, 0.5)
        finals = [run_trajectory(g, "BD", neutral, 0.01, init=0.3, slots=100, rng=s).final
                  for s in range(300)]
        se = np.std(finals, ddof=1) / np.sqrt(len(finals))
        assert abs(np.mean(finals) - 0.3) <= 3 * se

    def test_samples_in_range_and_consistent(self):
        g = gen_er(300, 8.0, seed=5)
        tr = run_trajectory(g, "DB", CASES[1], SelectionIntensity(0.3, 0.01), init=0.2,
                            slots=100, rng=3)
        assert np.all((tr.x_f >= 0) & (tr.x_f <= 1))
        assert np.allclose(tr.x_ff + tr.x_fn + tr.x_nn, 1.0)
        assert tr.x_f[0] == pytest.approx(0.2)

    def test_nonpositive_fitness_rejected(self):
        bad = PayoffMatrix.unconstrained(-2.0, 0.5, 0.5)
        with pytest.raises(ValueError):
            run_trajectory(gen_regular(20, 4, seed=0), "BD", bad, 0.9, slots=5, rng=0)

    def test_complete_chain_matches_graph_kernel(self):
        # the count chain on K_n and the per-node kernel share one transition law
        n, nf0, slots = 30, 5, 15
        g = gen_complete(n)
        for rule in UpdateRule:
            args = (RULE_CODE[rule], K.MODE_MEAN, *CASES[1].values, np.full(slots, 0.6))
            chain = [K.run_complete(n, nf0, *args, seed, 0, 0.0)[0][-1] for seed in range(1500)]
            s0 = np.zeros(n, dtype=np.int8)
            s0[:nf0] = 1
            node = [K.run_graph(g.indptr, g.indices, g.degrees, s0.copy(), *args, seed, 0, 0.0)[0][-1]
                    for seed in range(1500)]
            assert stats.ks_2samp(chain, node).pvalue > 1e-3


class TestEnsemble:
    def params(self, **kw):
        base = dict(network=NetworkSpec("regular", 40, k=4), payoff=CASES[1], alpha=0.3,
                    slots=30)
        base.update(kw)
        return EnsembleParams(**base)

    def test_deterministic(self):
        a = ensemble(self.params(), 20, regen_every=7, master_seed=11)
        b = ensemble(self.params(), 20, regen_every=7, master_seed=11)
        assert np.array_equal(a.x_f, b.x_f) and np.array_equal(a.stderr, b.stderr)
        c = ensemble(self.params(), 20, regen_every=7, master_seed=12)
        assert not np.array_equal(a.x_f, c.x_f)

    def test_independent_of_jobs(self):
        a = ensemble(self.params(), 12, regen_every=5, master_seed=3, jobs=1)
        b = ensemble(self.params(), 12, regen_every=5, master_seed=3, jobs=2)
        assert np.array_equal(a.x_f, b.x_f)
        assert a.meta == b.meta

    def test_regeneration_count(self):
        tr = ensemble(self.params(slots=2), 1000, regen_every=500, condition="plain")
        assert tr.meta["graph_realizations"] == 2 and tr.meta["runs"] == 1000

    def test_single_run_equals_trajectory(self):
        p = self.params()
        tr = ensemble(p, 1, master_seed=4, condition="plain")
        g = p.network.build(derive_seed(4, 0, 0))
        ref = run_trajectory(g, p.rule, p.payoff, p.alpha, None, p.slots, derive_seed(4, 1, 0))
        assert np.array_equal(tr.x_f, ref.x_f)
        assert np.all(tr.stderr == 0)

    def test_survival_conditioning(self):
        tr = ensemble(self.params(payoff=CASES[3]), 10, master_seed=2)
        assert tr.meta["runs"] == 10
        assert tr.meta["attempts"] == 10 + tr.meta["discarded"]
        assert tr.meta["discarded"] > 0

    def test_fixed_network_single_realization(self):
        tr = ensemble(self.params(network=NetworkSpec("complete", 30)), 5, regen_every=1,
                      condition="plain")
        assert tr.meta["graph_realizations"] == 1

    def test_rejects(self):
        with pytest.raises(ValueError):
            ensemble(self.params(), 0)
        with pytest.raises(ValueError):
            ensemble(self.params(), 2, condition="median")
        with pytest.raises(ValueError):
            NetworkSpec("regular", 10)
        with pytest.raises(RuntimeError):
            # nothing survives Case 4 at strong selection on two attempts
            ensemble(self.params(payoff=CASES[3], alpha=1.0, slots=20), 1, max_attempts=2,
                     master_seed=0)


def test_convergence_slot():
    x = np.concatenate([np.linspace(0, 1, 100), np.ones(200)])
    assert convergence_slot(x) == 149
    assert convergence_slot(np.zeros(30)) is None
    assert convergence_slot(np.linspace(0, 1, 300)) is None
    assert convergence_slot(np.zeros(60)) == 50
