import math

import numpy as np
import pytest
from scipy import stats

from pardespot import rng as prng
from pardespot.model import (
    ContractViolation,
    EmptyBeliefError,
    ModelSpec,
    ParticleBelief,
    Scenario,
    batch_equal,
    batch_take,
    domain_names,
    make_model,
    sample_scenarios,
)
from pardespot.domains.navigation import MOVES, NavState


def _seed_where(pred, depth=1, index=0):
    for s in range(1, 10_000):
        if pred(prng.uniform(s, depth, index)):
            return s
    raise AssertionError("no seed found")


# -- random streams ----------------------------------------------------------


def test_uniform_is_a_pure_function_of_its_counters():
    forward = {(d, i): prng.uniform(99, d, i) for d in range(1, 5) for i in range(3)}
    backward = {(d, i): prng.uniform(99, d, i) for d in reversed(range(1, 5)) for i in reversed(range(3))}
    assert forward == backward
    assert len(set(forward.values())) == len(forward)
    assert all(0.0 <= x < 1.0 for x in forward.values())


def test_uniform_array_matches_scalar_bitwise():
    seeds = np.array([1, 2, 3, 2**63 + 5], dtype=np.uint64)
    got = prng.uniform_array(seeds, 7, 2)
    want = [prng.uniform(int(s), 7, 2) for s in seeds]
    assert got.tolist() == want
    depths = np.array([1, 4, 9, 2])
    got = prng.uniform_array(seeds, depths, 0)
    assert got.tolist() == [prng.uniform(int(s), int(d), 0) for s, d in zip(seeds, depths)]


def test_uniform_is_roughly_uniform():
    xs = prng.uniform_array(np.arange(20_000, dtype=np.uint64), 3, 1)
    assert stats.kstest(xs, "uniform").pvalue > 0.001


# -- spec and contracts --------------------------------------------------------


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(0, 0.9, 10)
    with pytest.raises(ValueError):
        ModelSpec(2, 1.0, 10)
    with pytest.raises(ValueError):
        ModelSpec(2, 0.9, 0)


def test_registry_lists_all_domains():
    assert {"navigation", "mars", "driving", "tiger", "chain"} <= set(domain_names())
    with pytest.raises(KeyError):
        make_model("nope")


def test_invalid_action_is_a_contract_violation(small_model):
    s = small_model.sample_initial_state(np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        small_model.step(s, small_model.spec.action_count, 1, 1)
    with pytest.raises(ContractViolation):
        small_model.step(s, -1, 1, 1)
    with pytest.raises(ContractViolation):
        small_model.step(s, 0, 1, 0)


def test_step_is_deterministic(small_model):
    gen = np.random.default_rng(5)
    for _ in range(20):
        s = small_model.sample_initial_state(gen)
        a = int(gen.integers(small_model.spec.action_count))
        sc = Scenario(0, s, int(gen.integers(1 << 62)))
        assert small_model.step(s, a, sc, 3) == small_model.step(s, a, sc, 3)


def test_scalar_and_batch_faces_agree(small_model):
    m = small_model
    gen = np.random.default_rng(11)
    states = [m.sample_initial_state(gen) for _ in range(40)]
    seeds = gen.integers(0, 1 << 63, size=40, dtype=np.int64).astype(np.uint64)
    batch = m.pack(states)
    assert m.unpack(batch) == states
    for depth in (1, 4):
        acts = gen.integers(m.spec.action_count, size=40)
        for _ in range(3):  # walk a few steps so non-initial states are covered
            out = m.step_batch(batch, acts, seeds, depth)
            scalar = [m.step(s, int(a), int(sd), depth) for s, a, sd in zip(m.unpack(batch), acts, seeds)]
            assert m.unpack(out.next_states) == [o.next_state for o in scalar]
            assert [tuple(r) for r in out.observations.tolist()] == [tuple(o.observation) for o in scalar]
            assert out.rewards.tolist() == [o.reward for o in scalar]
            assert out.terminal.tolist() == [o.terminal for o in scalar]
            roll = m.rollout_step_batch(batch, acts, seeds, depth)
            assert batch_equal(roll[0], out.next_states)
            assert roll[1].tolist() == out.rewards.tolist()
            for s, a, sd, o in zip(m.unpack(batch), acts, seeds, scalar):
                assert m.rollout_step(s, int(a), int(sd), depth) == (o.next_state, o.reward, o.terminal)
            batch = out.next_states
            depth += 1
        states = m.unpack(batch)
        assert m.terminal_batch(batch).tolist() == [m.is_terminal(s) for s in states]
        assert m.upper_bound_batch(batch).tolist() == [m.upper_bound_heuristic(s) for s in states]
        assert m.lower_bound_batch(batch).tolist() == [m.lower_bound_heuristic(s) for s in states]
        assert m.default_policy_batch(batch, 2).tolist() == [m.default_policy_action(s, 2) for s in states]


def test_likelihood_of_emitted_observation_is_positive(small_model):
    m = small_model
    gen = np.random.default_rng(3)
    for _ in range(60):
        s = m.sample_initial_state(gen)
        a = int(gen.integers(m.spec.action_count))
        out = m.step(s, a, int(gen.integers(1 << 62)), 2)
        p = m.observation_likelihood(out.next_state, a, out.observation)
        assert 0.0 < p <= 1.0
        lb = m.likelihood_batch(m.pack([out.next_state]), a, out.observation)
        assert lb.tolist() == [p]


def test_degenerate_factoring_equals_step():
    m = make_model("tiger")
    assert m.spec.factored_element_count == 1
    for seed in range(10):
        assert m.step_factored(0, 0, seed, 1, 0) == m.step(0, 0, seed, 1)
        assert m.step_via_factors(1, 0, seed, 2) == m.step(1, 0, seed, 2)
    with pytest.raises(ContractViolation):
        m.step_factored(0, 0, 1, 1, 1)


# -- domain examples through the model interface -------------------------------------


def test_navigation_goal_step():
    m = make_model("navigation")
    n = m.n
    goal = m.layout.goal
    pos = goal - 1  # west of the goal on the bottom row
    s = NavState(pos, m.layout.static_occ, 0)
    east = MOVES.index((0, 1))
    seed = _seed_where(lambda u: u >= m.move_failure)
    out = m.step(s, east, seed, 1)
    assert out.reward == 20.0 and out.terminal and out.next_state.pos == goal
    assert divmod(goal, n) == (n - 1, n // 2)


def test_navigation_upper_bound_at_goal():
    m = make_model("navigation")
    assert m.upper_bound_heuristic(NavState(m.layout.goal, m.layout.static_occ, 1)) == 20.0


def test_navigation_all_readings_correct():
    m = make_model("navigation")
    s = m.sample_initial_state(np.random.default_rng(0))
    seed = _seed_where(lambda u: True)
    truth = m.step(s, 0, seed, 1)  # stay: readings of the current cell
    # strip the noise: rebuild the exact reading from the map
    r, c = divmod(truth.next_state.pos, n := m.n)
    bits = 0
    for k in range(8):
        dr, dc = MOVES[k + 1]
        rr, cc = r + dr, c + dc
        occ = not (0 <= rr < n and 0 <= cc < n) or (s.occ >> (rr * n + cc)) & 1
        bits |= int(bool(occ)) << k
    assert m.observation_likelihood(truth.next_state, 0, (bits,)) == pytest.approx(0.97 ** 8, rel=1e-15)
    assert m.observation_likelihood(truth.next_state, 0, (256,)) == 0.0


def test_navigation_likelihood_sums_to_one_on_small_map():
    m = make_model("navigation", size=3)
    gen = np.random.default_rng(8)
    for _ in range(5):
        s = m.sample_initial_state(gen)
        for a in (0, 3):
            total = math.fsum(m.observation_likelihood(s, a, (z,)) for z in range(256))
            assert total == pytest.approx(1.0, abs=1e-9)


def test_mars_sample_good_rock():
    m = make_model("mars", n=11, m=11)
    k = 0
    cell = m.rock_cells[k]
    rocks = (1 << m.m) - 1
    from pardespot.domains.mars import NORTH, SAMPLE, MarsState
    s = MarsState(cell, m.starts[1], rocks)
    out = m.step(s, m.joint(SAMPLE, NORTH), 7, 1)
    assert out.reward == 10.0
    assert not (out.next_state.rocks >> k) & 1
    assert out.next_state.p1 == m.starts[1] - m.n
    # sampling the now-Bad rock costs 10
    assert m.step(out.next_state, m.joint(SAMPLE, NORTH), 7, 2).reward == -10.0


def test_mars_upper_bound_with_bad_rocks_at_east_border():
    from pardespot.domains.mars import EXITED, MarsState
    m = make_model("mars", n=11, m=11)
    s = MarsState(5 * 11 + 10, EXITED, 0)
    assert m.upper_bound_heuristic(s) == 10.0


def test_tiger_default_policy_listens():
    m = make_model("tiger")
    assert {m.default_policy_action(s, d) for s in (0, 1) for d in range(5)} == {0}


# -- scenario sampling ----------------------------------------------------------------


def test_single_particle_single_scenario():
    b = ParticleBelief(["only"])
    (sc,) = sample_scenarios(b, 1, 42)
    assert sc.initial_state == "only" and sc.id == 0


def test_scenarios_are_deterministic_and_contiguous():
    b = ParticleBelief(list(range(10)), np.arange(1, 11) / 55)
    a1 = sample_scenarios(b, 50, 9)
    a2 = sample_scenarios(b, 50, 9)
    assert a1 == a2
    assert [s.id for s in a1] == list(range(50))
    assert len({s.stream_seed for s in a1}) == 50
    assert a1 != sample_scenarios(b, 50, 10)


def test_scenario_errors():
    with pytest.raises(EmptyBeliefError):
        sample_scenarios(ParticleBelief([]), 3, 0)
    with pytest.raises(ValueError):
        sample_scenarios(ParticleBelief([1]), 0, 0)


def test_scenario_start_positions_match_belief():
    m = make_model("navigation")
    belief = m.initial_belief(2000, np.random.default_rng(4))
    K = 5000
    sc = sample_scenarios(belief, K, 17)
    positions = sorted({s.pos for s in belief.states})
    weight = {p: 0.0 for p in positions}
    for s, w in zip(belief.states, belief.weights):
        weight[s.pos] += w
    observed = [sum(1 for x in sc if x.initial_state.pos == p) for p in positions]
    expected = [K * weight[p] for p in positions]
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_particle_belief_json_round_trip(small_model):
    m = small_model
    b = m.initial_belief(7, np.random.default_rng(2))
    back = ParticleBelief.from_json(b.to_json(m), m)
    assert back.states == b.states
    assert back.weights.tolist() == b.weights.tolist()
    assert sorted(back.aux) == sorted(b.aux)


def test_batch_take_keeps_rows():
    m = make_model("mars", n=5, m=3)
    states = [m.sample_initial_state(np.random.default_rng(i)) for i in range(6)]
    batch = m.pack(states)
    assert m.unpack(batch_take(batch, np.array([4, 1]))) == [states[4], states[1]]
