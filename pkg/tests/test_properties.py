"""Property-based checks on the random streams, expansion and backup."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from pardespot import rng as prng
from pardespot.backend import expand_serial
from pardespot.model import make_model
from pardespot.tree import backup, evaluate_tree
from test_backend import random_requests
from treegen import build, path_to, random_spec
from oracles import tree_value

seeds = st.integers(0, (1 << 64) - 1)
DOMAINS = [("tiger", {}), ("chain", {"n_states": 4}), ("navigation", {"size": 5}), ("mars", {"n": 5, "m": 3})]


@given(seeds, st.integers(0, 500), st.integers(0, prng.MAX_DRAWS_PER_STEP - 1))
def test_uniform_is_pure_and_in_range(seed, depth, index):
    u = prng.uniform(seed, depth, index)
    assert 0.0 <= u < 1.0
    assert u == prng.uniform(seed, depth, index)
    arr = prng.uniform_array(np.array([seed], dtype=np.uint64), depth, index)
    assert arr[0] == u


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(DOMAINS), st.integers(0, 2**32))
def test_expansion_partitions_and_repeats(domain, seed):
    name, params = domain
    m = make_model(name, **params)
    (req,) = random_requests(m, 1, np.random.default_rng(seed), max_n=10)
    a = expand_serial(req, m, m.spec.max_rollout_depth)
    b = expand_serial(req, m, m.spec.max_rollout_depth)
    assert a.identical(b)
    for act in range(m.spec.action_count):
        kids = [c for c in a.children if c.action == act]
        ids = np.sort(np.concatenate([c.scenario_ids for c in kids]))
        assert np.array_equal(ids, req.scenario_ids)
        assert len({c.observation for c in kids}) == len(kids)
    assert all(c.lower <= c.upper for c in a.children)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 25), st.booleans(), st.floats(0.5, 0.99))
def test_backup_order_does_not_matter(seed, n, clamp, gamma):
    gen = np.random.default_rng(seed)
    spec = random_spec(gen, n, 0)
    root, pending = build(spec)
    order = list(pending.values())
    gen.shuffle(order)
    # expand parents before children, otherwise in random order
    order.sort(key=lambda item: item[0].depth)
    for node, branches in order:
        node.children = branches
        backup(path_to(node), gamma, clamp)
    u, l = tree_value(spec, gamma, clamp)
    assert abs(root.upper - u) <= 1e-9 and abs(root.lower - l) <= 1e-9
    assert root.lower <= root.upper
    eu, el = evaluate_tree(root, gamma, clamp)
    assert abs(eu - u) <= 1e-9 and abs(el - l) <= 1e-9
