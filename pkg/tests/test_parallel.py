import math
from collections import Counter

import numpy as np
import pytest

import pardespot.parallel as par
from pardespot.backend import ParallelBackend
from pardespot.model import ParticleBelief, make_model
from pardespot.parallel import (
    augmented_upper,
    augmented_weu,
    parallel_search,
    select_action_parallel,
    select_obs_parallel,
)
from pardespot.tree import ActionBranch, BeliefNode, SearchConfig, audit_tree, iter_nodes, serial_search, weu


def bandit(n_scen, visits, branch_visits, uppers):
    node = BeliefNode(0, np.arange(n_scen), 0, 100.0, -100.0)
    node.visit_count = visits
    node.children = {}
    for a, (nv, u) in enumerate(zip(branch_visits, uppers)):
        br = ActionBranch(a, 0.0)
        br.upper, br.lower, br.visit_count = u, 0.0, nv
        node.children[a] = br
    return node


def test_augmented_upper_hand_value():
    n = bandit(100, 10, [2], [5.0])
    want = 5.0 + math.sqrt(math.log(1000) / 200)
    assert augmented_upper(n, 0, 1.0) == pytest.approx(want, abs=1e-15)
    assert augmented_upper(n, 0, 1.0) == pytest.approx(5.18584, abs=1e-5)


def test_augmented_upper_reduces_to_po_uct_for_one_scenario():
    n = bandit(1, 7, [3], [1.0])
    assert augmented_upper(n, 0, 2.0) == pytest.approx(1.0 + 2.0 * math.sqrt(math.log(7) / 3), abs=1e-15)


def test_augmented_upper_edge_cases():
    n = bandit(10, 5, [0, 5], [1.0, 2.0])
    assert augmented_upper(n, 0, 1.0) == math.inf
    assert augmented_upper(n, 1, 0.0) == 2.0
    fresh = bandit(10, 0, [0, 0], [1.0, 2.0])
    assert augmented_upper(fresh, 0, 1.0) == 1.0


def test_zero_exploration_matches_plain_selection():
    gen = np.random.default_rng(0)
    for _ in range(200):
        us = gen.integers(-3, 3, size=4).astype(float).tolist()
        n = bandit(20, int(gen.integers(0, 9)), gen.integers(0, 5, size=4).tolist(), us)
        assert select_action_parallel(n, 0.0) == us.index(max(us))


def test_untried_branch_preferred():
    n = bandit(10, 4, [4, 0, 0], [9.0, -5.0, -5.0])
    assert select_action_parallel(n, 0.5) == 1


def _kid(nid, n, u, l, active=0):
    c = BeliefNode(nid, np.arange(n), 1, u, l)
    c.active_threads = active
    return c


def test_virtual_loss_values():
    c = _kid(1, 20, 2.2, 1.0)
    base = weu(c, 4.0, 100, 0.95)
    assert augmented_weu(c, 4.0, 100, 0.95, 0.01) == base
    c.active_threads = 1
    assert augmented_weu(c, 4.0, 100, 0.95, 0.01) == pytest.approx(0.40, abs=1e-12)
    c.active_threads = 3
    assert augmented_weu(c, 4.0, 100, 0.95, 0.01, loss_gap=2.0) == pytest.approx(base - 3 * 0.01 * 2.0)


def test_occupied_child_repels_peers():
    a, b = _kid(1, 10, 3.0, 0.0, active=1), _kid(2, 10, 3.0, 0.0)
    parent = BeliefNode(0, np.arange(20), 0, 10, 0)
    br = ActionBranch(0, 0.0)
    br.children = {(0,): a, (1,): b}
    parent.children = {0: br}
    assert select_obs_parallel(parent, 0, 4.0, 20, 0.95, 0.1, 4.0) is b
    a.active_threads = 0
    assert select_obs_parallel(parent, 0, 4.0, 20, 0.95, 0.1, 4.0) is a
    b.active_threads = 1
    assert select_obs_parallel(parent, 0, 4.0, 20, 0.95, 0.1, 4.0) is a


# -- whole searches -------------------------------------------------------------------------


def _belief(m, seed=0, n=300):
    return m.initial_belief(n, np.random.default_rng(seed))


@pytest.mark.parametrize("domain,params", [("tiger", {}), ("navigation", {"size": 7})])
@pytest.mark.parametrize("seed", [0, 1])
def test_degenerate_parallel_equals_serial(domain, params, seed):
    m = make_model(domain, **params)
    b = _belief(m, seed)
    cfg = SearchConfig(K=80, max_trials=40, time_budget=None, workers=1, c_a=0.0, c_o=0.0, seed=seed,
                       trace=True, backend="parallel")
    s_stats, s_tree = serial_search(b, m, cfg)
    p_stats, p_tree = parallel_search(b, m, cfg)
    assert s_stats.node_count == p_stats.node_count
    assert (s_stats.root_upper, s_stats.root_lower) == (p_stats.root_upper, p_stats.root_lower)
    assert s_stats.root_action == p_stats.root_action
    assert [e["selections"] for e in s_stats.trial_log] == [e["selections"] for e in p_stats.trial_log]
    assert s_tree.to_json() == p_tree.to_json()


def test_counts_match_logged_trials():
    m = make_model("navigation", size=9)
    cfg = SearchConfig(K=100, time_budget=0.5, workers=4, trace=True, audit=True, backend="parallel")
    stats, tree = parallel_search(_belief(m), m, cfg)
    assert stats.audit == []
    assert audit_tree(tree) == []
    node_visits, branch_visits = Counter(), Counter()
    for entry in stats.trial_log:
        for nid, a in entry["selections"]:
            node_visits[nid] += 1
            branch_visits[(nid, a)] += 1
    for node in iter_nodes(tree.root):
        assert node.visit_count == node_visits[node.id]
        assert node.active_threads == 0
        if node.expanded:
            assert sum(b.visit_count for b in node.children.values()) == node.visit_count
            for a, b in node.children.items():
                assert b.visit_count == branch_visits[(node.id, a)]
    assert len(stats.trial_log) == stats.trials


def test_zero_budget_is_root_only():
    m = make_model("tiger")
    stats, tree = parallel_search(ParticleBelief([0, 1]), m, SearchConfig(K=10, time_budget=0.0, workers=3))
    assert stats.trials == 0 and stats.node_count == 1 and not tree.root.expanded
    assert stats.root_action is None


def test_workers_and_backends_agree_on_tree_invariants():
    m = make_model("mars", n=5, m=3)
    for backend in ("serial", "parallel"):
        cfg = SearchConfig(K=40, max_trials=25, time_budget=None, workers=3, backend=backend,
                           record_bounds=True, audit=True)
        stats, tree = parallel_search(_belief(m), m, cfg)
        assert stats.trials == 25
        assert audit_tree(tree) == [] and stats.audit == []
        tr = stats.bound_trace
        assert all(b[0] <= a[0] + 1e-12 and b[1] >= a[1] - 1e-12 for a, b in zip(tr, tr[1:]))


class _Exploding(ParallelBackend):
    def __init__(self, *a, fail_after=3, **kw):
        super().__init__(*a, **kw)
        self.left = fail_after

    def submit(self, request):
        self.left -= 1
        if self.left < 0:
            raise RuntimeError("backend exploded")
        return super().submit(request)


def test_backend_failure_propagates_and_releases_markers(monkeypatch):
    trees = []

    class Recording(par.BeliefTree):
        def __init__(self, *a, **kw):
            super().__init__(*a, **kw)
            trees.append(self)

    monkeypatch.setattr(par, "BeliefTree", Recording)
    m = make_model("navigation", size=7)
    backend = _Exploding(m)
    try:
        with pytest.raises(RuntimeError, match="exploded"):
            parallel_search(_belief(m), m, SearchConfig(K=50, time_budget=2.0, workers=4), backend)
    finally:
        backend.shutdown()
    (tree,) = trees
    for node in iter_nodes(tree.root):
        assert node.active_threads == 0
        assert node.lock.owner is None


def test_lock_audit_flags_unlocked_mutation():
    audit = par.LockAudit(True)
    n = BeliefNode(0, np.arange(1), 0, 1.0, 0.0)
    audit.check(n, "count")
    with n.lock:
        audit.check(n, "count")
    assert audit.findings == ["count on node 0 without its lock"]
    assert par.LockAudit(False).findings == []


def test_serial_backend_variant_also_runs():
    m = make_model("tiger")
    stats, tree = parallel_search(ParticleBelief([0, 1]), m,
                                  SearchConfig(K=50, time_budget=0.2, workers=2, backend="serial"))
    assert tree.root.expanded and stats.root_action in (0, 1, 2)
    assert stats.backend["requests"] == stats.expansions
