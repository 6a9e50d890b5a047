import math

import numpy as np
import pytest

from oracles import nav4_layout, nav_mdp_values, tiger_solve
from pardespot import rng as prng
from pardespot.domains.driving import ACCELERATE, DECELERATE, MAINTAIN, DriveState
from pardespot.domains.mars import EXITED, FIRST_SENSE, GOOD, NORTH, SAMPLE, MarsState
from pardespot.domains.navigation import MOVES, STAY, NavState
from pardespot.model import Scenario, make_model


def seed_with(pred, depth=1, index=0, start=1):
    s = start
    while not pred(prng.uniform(s, depth, index)):
        s += 1
    return s


# -- navigation --------------------------------------------------------------------


def test_navigation_declared_sizes():
    m = make_model("navigation")
    assert m.spec.action_count == 9
    assert len(m.layout.unknown_cells) == 124
    assert m.state_space_size == 169 * 2 ** 124
    assert (m.move_failure, m.obs_error, m.unknown_prob) == (0.03, 0.03, 0.1)


def test_navigation_stay_penalty():
    m = make_model("navigation")
    s = m.sample_initial_state(np.random.default_rng(1))
    assert m.step(s, STAY, 5, 1).reward == -0.2


def test_navigation_crash_into_known_obstacle():
    m = make_model("navigation")
    n = m.n
    wall_cell = m.layout.wall_row * n  # column 0 of the wall row is never a gate
    pos = wall_cell - n
    s = NavState(pos, m.layout.static_occ | (1 << m.layout.gates[1]), 0)
    south = MOVES.index((1, 0))
    seed = seed_with(lambda u: u >= 0.03)
    out = m.step(s, south, seed, 1)
    assert out.reward == -1.0 and out.next_state.pos == pos and not out.terminal


def test_navigation_failed_move_stays_put():
    m = make_model("navigation")
    s = NavState(2, m.layout.static_occ, 0)
    seed = seed_with(lambda u: u < 0.03)
    out = m.step(s, MOVES.index((1, 0)), seed, 1)
    assert out.next_state.pos == 2 and out.reward == -0.1


def test_navigation_default_policy_is_legal():
    m = make_model("navigation")
    gen = np.random.default_rng(0)
    for _ in range(50):
        a = m.default_policy_action(m.sample_initial_state(gen), 0)
        assert 0 <= a < 9


def test_small_navigation_layout_matches_oracle_map():
    m = make_model("navigation", size=4)
    lay = nav4_layout()
    n = lay["size"]
    cells = lambda rc: {r * n + c for r, c in rc}  # noqa: E731
    assert set(m.layout.unknown_cells) == cells(lay["unknown"])
    assert set(m.layout.gates) == cells(lay["gates"])
    assert m.layout.goal == lay["goal"][0] * n + lay["goal"][1]
    static = {c for c in range(n * n) if (m.layout.static_occ >> c) & 1}
    assert static == cells(lay["walls"])


def test_navigation_upper_bound_dominates_exact_values():
    m = make_model("navigation", size=4)
    lay = nav4_layout()
    V, _ = nav_mdp_values(lay)
    n = lay["size"]
    unknown = lay["unknown"]
    worst = math.inf
    for (r, c, mask, g), v in V.items():
        occ = m.layout.static_occ | (1 << m.layout.gates[1 - g])
        for k, (ur, uc) in enumerate(unknown):
            if (mask >> k) & 1:
                occ |= 1 << (ur * n + uc)
        if (occ >> (r * n + c)) & 1:
            continue  # robot cannot stand on an occupied cell
        ub = m.upper_bound_heuristic(NavState(r * n + c, occ, g))
        worst = min(worst, ub - v)
        assert ub >= v - 1e-12, (r, c, mask, g, ub, v)
    assert worst >= 0.0


def test_navigation_noise_free_shortest_path_reaches_goal():
    m = make_model("navigation", move_failure=0.0, obs_error=0.0)
    gen = np.random.default_rng(3)
    for trial in range(10):
        s = m.sample_initial_state(gen)
        s = NavState(s.pos, m.layout.static_occ | (1 << m.layout.gates[1 - s.gate]), s.gate)  # no clutter
        # obstacle-free move count; landmarks may force a short detour
        budget = m.distance_to_goal(s) + 4
        for t in range(budget):
            s = m.step(s, m.default_policy_action(s, t), trial, t + 1).next_state
            if m.is_terminal(s):
                break
        assert m.is_terminal(s)


# -- MARS --------------------------------------------------------------------------


@pytest.mark.parametrize("n,count", [(11, 256), (15, 400), (20, 625)])
def test_mars_action_counts(n, count):
    assert make_model("mars", n=n, m=n).spec.action_count == count


def test_mars_joint_action_decodes_uniquely():
    m = make_model("mars", n=5, m=3)
    seen = set()
    for a in range(m.spec.action_count):
        a0, a1 = m.split(a)
        assert m.joint(a0, a1) == a
        seen.add((a0, a1))
    assert len(seen) == m.spec.action_count


def test_mars_sensing_at_distance_zero_is_exact():
    m = make_model("mars", n=7, m=4)
    k = 2
    cell = m.rock_cells[k]
    assert m.accuracy[0] == 1.0
    for rocks in (0, 1 << k):
        s = MarsState(cell, m.starts[1], rocks)
        for seed in range(50):
            out = m.step(s, m.joint(FIRST_SENSE + k, NORTH), seed, 1)
            o0 = out.observation[0] // 3
            assert (o0 == GOOD) == bool(rocks)


def test_mars_sample_plus_second_robot_move():
    m = make_model("mars", n=11, m=11)
    s = MarsState(m.rock_cells[3], m.starts[1], 1 << 3)
    out = m.step(s, m.joint(SAMPLE, NORTH), 1, 1)
    assert out.reward == 10.0
    assert out.next_state.p1 == m.starts[1] - 11


def test_mars_exit_and_termination():
    m = make_model("mars", n=5, m=2)
    from pardespot.domains.mars import EAST
    s = MarsState(4, 9, 0)  # both on the east column
    out = m.step(s, m.joint(EAST, EAST), 0, 1)
    assert out.reward == 20.0 and out.terminal
    assert out.next_state.p0 == EXITED == out.next_state.p1


def test_mars_sample_reward_audit():
    """Sample rewards on any trajectory never exceed 10 per Good rock."""
    m = make_model("mars", n=6, m=4)
    gen = np.random.default_rng(9)
    for _ in range(30):
        s = m.sample_initial_state(gen)
        goods = bin(s.rocks).count("1")
        total_sample = 0.0
        for t in range(40):
            a = int(gen.integers(m.spec.action_count))
            out = m.step(s, a, int(gen.integers(1 << 62)), t + 1)
            exits = sum(1 for p, q in ((s.p0, out.next_state.p0), (s.p1, out.next_state.p1))
                        if p != EXITED and q == EXITED)
            total_sample += out.reward - 10.0 * exits
            s = out.next_state
            if out.terminal:
                break
        assert total_sample <= 10.0 * goods + 20.0


# -- driving ---------------------------------------------------------------------------


def test_driving_actions_and_factoring():
    m = make_model("driving", num_pedestrians=12)
    assert m.spec.action_count == 3
    assert m.spec.factored_element_count == 13
    s = m.sample_initial_state(np.random.default_rng(0))
    assert m.default_policy_action(s, 0) in (ACCELERATE, DECELERATE, MAINTAIN)


def test_driving_factored_composition_is_exact():
    m = make_model("driving", num_pedestrians=20)
    gen = np.random.default_rng(2024)
    states = []
    for _ in range(50):
        s = m.sample_initial_state(gen)
        states.append(s._replace(x=float(gen.uniform(0, 29)), v=float(gen.integers(0, 9)) * 0.25))
    for _ in range(1000):
        s = states[int(gen.integers(len(states)))]
        a = int(gen.integers(3))
        sc = Scenario(0, s, int(gen.integers(1 << 62)))
        depth = int(gen.integers(1, 60))
        assert m.step_via_factors(s, a, sc, depth) == m.step(s, a, sc, depth)


def test_driving_inert_maintain():
    m = make_model("driving", num_pedestrians=1)
    s = DriveState(0.0, 0.0, ((20.0, 7.0, 0),), 0)
    out = m.step(s, MAINTAIN, 3, 1)
    assert out.reward == m.time_cost and not out.terminal and out.next_state.x == 0.0


def test_driving_accelerate_failure_keeps_speed():
    m = make_model("driving", num_pedestrians=1)
    s = DriveState(0.0, 0.5, ((20.0, 7.0, 0),), 0)
    bad = seed_with(lambda u: u < 0.01)
    good = seed_with(lambda u: u >= 0.01)
    assert m.step(s, ACCELERATE, bad, 1).next_state.v == 0.5
    assert m.step(s, ACCELERATE, good, 1).next_state.v == 0.75


def test_driving_goals_are_not_observed():
    m = make_model("driving", num_pedestrians=3)
    s = m.sample_initial_state(np.random.default_rng(5))
    t = s._replace(peds=tuple((px, py, (g + 1) % len(m.goals)) for px, py, g in s.peds))
    # the observation only depends on the observable components
    assert m._observe(s.x, s.v, s.peds) == m._observe(t.x, t.v, t.peds)
    out_s = m.step(s, MAINTAIN, 1, 1)
    assert m.observation_likelihood(out_s.next_state._replace(
        peds=tuple((px, py, 0) for px, py, _ in out_s.next_state.peds)), MAINTAIN, out_s.observation) == 1.0


# -- tiger ------------------------------------------------------------------------------


def test_tiger_open_correct_door():
    m = make_model("tiger")
    out = m.step(0, 2, 1, 1)  # tiger left, open right
    assert (out.reward, out.terminal) == (10.0, True)
    assert m.step(0, 1, 1, 1).reward == -100.0


def test_tiger_listen_accuracy():
    m = make_model("tiger")
    correct = sum(m.step(0, 0, s, 1).observation == (0,) for s in range(20_000))
    assert abs(correct / 20_000 - 0.85) < 0.01


def test_tiger_oracle_listens_under_uniform_belief():
    value, action, _ = tiger_solve()
    assert action(0) == 0
    assert value() == pytest.approx(3.7698507263617, abs=1e-9)
