"""Two-robot rock sampling on an n x n grid with m rocks.

Each robot picks one of ``4 + 1 + m`` sub-actions (N, S, E, W, Sample,
Sense rock k); the joint action index is ``a0 * (5 + m) + a1``. Moving east
off the last column exits the map for +10. Moves and samples are applied
robot 0 first, then robot 1; sensing reads the resulting state, so an
observation is always consistent with the next state.

Sensing accuracy at Euclidean distance ``d`` is ``0.5 * (1 + 2 ** (-d / d0))``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from pardespot import rng as _rng
from pardespot.model import BatchStep, Model, ModelSpec, StepOutcome, register

NORTH, SOUTH, EAST, WEST, SAMPLE = 0, 1, 2, 3, 4
FIRST_SENSE = 5
EXITED = -1
NONE, GOOD, BAD = 0, 1, 2

_MOVE = {NORTH: (-1, 0), SOUTH: (1, 0), EAST: (0, 1), WEST: (0, -1)}


class MarsState(NamedTuple):
    p0: int
    p1: int
    rocks: int  # bit k set when rock k is Good


class MarsModel(Model):
    name = "mars"

    def __init__(self, n: int = 11, m: int = 11, discount: float = 0.95, layout_seed: int = 0,
                 sense_d0: float = 4.0, good_prob: float = 0.5, max_depth: int | None = None,
                 sample_reward: float = 10.0, exit_reward: float = 10.0):
        if n < 1 or m < 1:
            raise ValueError("n and m must be >= 1")
        if m > min(60, n * n - 2):
            raise ValueError("too many rocks for the grid")
        self.n, self.m = n, m
        self.per_robot = 5 + m
        self.spec = ModelSpec(self.per_robot ** 2, discount, max_depth or 2 * n + 4)
        self.sample_reward = sample_reward
        self.exit_reward = exit_reward
        self.good_prob = good_prob
        self.sense_d0 = sense_d0
        self.starts = ((n // 4) * n, (3 * n // 4) * n)
        gen = np.random.default_rng(layout_seed)
        free = [c for c in range(n * n) if c not in self.starts]
        self.rock_cells = tuple(int(c) for c in gen.choice(free, size=m, replace=False))
        self.rock_at = np.full(n * n, -1, dtype=np.int64)
        for k, cell in enumerate(self.rock_cells):
            self.rock_at[cell] = k
        self._rock_r = np.array([c // n for c in self.rock_cells])
        self._rock_c = np.array([c % n for c in self.rock_cells])
        # tables shared by both faces
        self.accuracy = [0.5 * (1.0 + 2.0 ** (-math.sqrt(sq) / sense_d0)) for sq in range(2 * n * n + 1)]
        self._acc = np.array(self.accuracy)
        self._gpow = [discount ** k for k in range(4 * n + 2)]
        self._gpow_arr = np.array(self._gpow)

    # -- joint action coding -----------------------------------------------------

    def joint(self, a0: int, a1: int) -> int:
        return a0 * self.per_robot + a1

    def split(self, action: int) -> tuple[int, int]:
        return divmod(action, self.per_robot)

    # -- scalar face ---------------------------------------------------------

    def _act(self, pos, sub, rocks):
        """Movement or sampling for one robot; returns (pos, rocks, reward)."""
        if pos == EXITED:
            return pos, rocks, 0.0
        n = self.n
        if sub == SAMPLE:
            k = int(self.rock_at[pos])
            if k < 0:
                return pos, rocks, -self.sample_reward
            if (rocks >> k) & 1:
                return pos, rocks & ~(1 << k), self.sample_reward
            return pos, rocks, -self.sample_reward
        if sub in _MOVE:
            r, c = divmod(pos, n)
            dr, dc = _MOVE[sub]
            if sub == EAST and c == n - 1:
                return EXITED, rocks, self.exit_reward
            nr, nc = r + dr, c + dc
            if 0 <= nr < n and 0 <= nc < n:
                return nr * n + nc, rocks, 0.0
        return pos, rocks, 0.0

    def _sense(self, pos, sub, rocks, u):
        if pos == EXITED or sub < FIRST_SENSE:
            return NONE
        k = sub - FIRST_SENSE
        r, c = divmod(pos, self.n)
        sq = (r - self.rock_cells[k] // self.n) ** 2 + (c - self.rock_cells[k] % self.n) ** 2
        good = (rocks >> k) & 1 == 1
        if u >= self.accuracy[sq]:
            good = not good
        return GOOD if good else BAD

    def _step(self, state, action, seed, depth):
        p0, p1, rocks = state
        if p0 == EXITED and p1 == EXITED:
            return StepOutcome(state, (0,), 0.0, True)
        a0, a1 = self.split(action)
        p0, rocks, r0 = self._act(p0, a0, rocks)
        p1, rocks, r1 = self._act(p1, a1, rocks)
        o0 = self._sense(p0, a0, rocks, _rng.uniform(seed, depth, 0))
        o1 = self._sense(p1, a1, rocks, _rng.uniform(seed, depth, 1))
        nxt = MarsState(p0, p1, rocks)
        return StepOutcome(nxt, (o0 * 3 + o1,), r0 + r1, p0 == EXITED and p1 == EXITED)

    def is_terminal(self, state):
        return state.p0 == EXITED and state.p1 == EXITED

    def upper_bound_heuristic(self, state):
        """Every Good rock sampled by the nearest robot plus every exit, each
        discounted by its minimum move count."""
        n = self.n
        active = [p for p in (state.p0, state.p1) if p != EXITED]
        total = 0.0
        if not active:
            return total
        for k in range(self.m):
            if (state.rocks >> k) & 1:
                rr, rc = self._rock_r[k], self._rock_c[k]
                d = min(abs(p // n - rr) + abs(p % n - rc) for p in active)
                total += self.sample_reward * self._gpow[int(d)]
        for p in (state.p0, state.p1):
            if p != EXITED:
                total += self.exit_reward * self._gpow[n - 1 - p % n]
        return total

    def lower_bound_heuristic(self, state):
        return 0.0

    def _default_sub(self, pos, rocks):
        if pos != EXITED:
            k = int(self.rock_at[pos])
            if k >= 0 and (rocks >> k) & 1:
                return SAMPLE
        return EAST

    def default_policy_action(self, state, depth):
        """Sample a Good rock underfoot, otherwise head east."""
        a0 = self._default_sub(state.p0, state.rocks)
        rocks = state.rocks
        if a0 == SAMPLE:
            rocks &= ~(1 << int(self.rock_at[state.p0]))
        return self.joint(a0, self._default_sub(state.p1, rocks))

    def observation_likelihood(self, next_state, action, observation):
        (z,) = observation
        if not 0 <= z < 9:
            return 0.0
        p = 1.0
        for pos, sub, o in zip((next_state.p0, next_state.p1), self.split(action), divmod(z, 3)):
            if pos == EXITED or sub < FIRST_SENSE:
                p *= 1.0 if o == NONE else 0.0
                continue
            if o == NONE:
                return 0.0
            k = sub - FIRST_SENSE
            r, c = divmod(pos, self.n)
            sq = (r - self.rock_cells[k] // self.n) ** 2 + (c - self.rock_cells[k] % self.n) ** 2
            acc = self.accuracy[sq]
            good = (next_state.rocks >> k) & 1 == 1
            p *= acc if good == (o == GOOD) else 1.0 - acc
        return p

    def sample_initial_state(self, rng):
        goods = rng.random(self.m) < self.good_prob
        rocks = 0
        for k, g in enumerate(goods.tolist()):
            if g:
                rocks |= 1 << k
        return MarsState(self.starts[0], self.starts[1], rocks)

    # -- batch face ----------------------------------------------------------

    def pack(self, states):
        return {
            "p0": np.array([s.p0 for s in states], dtype=np.int64),
            "p1": np.array([s.p1 for s in states], dtype=np.int64),
            "rocks": np.array([s.rocks for s in states], dtype=np.int64),
        }

    def unpack(self, batch):
        return [MarsState(*t) for t in zip(batch["p0"].tolist(), batch["p1"].tolist(), batch["rocks"].tolist())]

    def _act_batch(self, pos, sub, rocks):
        n = self.n
        active = pos != EXITED
        safe = np.where(active, pos, 0)
        r, c = np.divmod(safe, n)
        k = self.rock_at[safe]
        sampling = active & (sub == SAMPLE)
        has_rock = k >= 0
        kk = np.where(has_rock, k, 0)
        good = ((rocks >> kk) & 1) == 1
        hit = sampling & has_rock & good
        reward = np.where(sampling, np.where(hit, self.sample_reward, -self.sample_reward), 0.0)
        rocks = np.where(hit, rocks & ~(np.int64(1) << kk), rocks)
        exiting = active & (sub == EAST) & (c == n - 1)
        dr = np.where(sub == NORTH, -1, np.where(sub == SOUTH, 1, 0))
        dc = np.where(sub == EAST, 1, np.where(sub == WEST, -1, 0))
        nr, nc = r + dr, c + dc
        inside = (nr >= 0) & (nr < n) & (nc >= 0) & (nc < n)
        moving = active & (sub < SAMPLE) & inside & ~exiting
        pos = np.where(moving, nr * n + nc, pos)
        pos = np.where(exiting, EXITED, pos)
        reward = np.where(exiting, self.exit_reward, reward)
        return pos, rocks, reward

    def _sense_batch(self, pos, sub, rocks, u):
        sensing = (pos != EXITED) & (sub >= FIRST_SENSE)
        k = np.where(sensing, sub - FIRST_SENSE, 0)
        safe = np.where(sensing, pos, 0)
        r, c = np.divmod(safe, self.n)
        sq = (r - self._rock_r[k]) ** 2 + (c - self._rock_c[k]) ** 2
        good = ((rocks >> k) & 1) == 1
        good = good ^ (u >= self._acc[sq])
        return np.where(sensing, np.where(good, GOOD, BAD), NONE)

    def step_batch(self, batch, actions, seeds, depth):
        p0, p1, rocks = batch["p0"], batch["p1"], batch["rocks"]
        a = np.broadcast_to(np.asarray(actions, dtype=np.int64), p0.shape)
        a0, a1 = np.divmod(a, self.per_robot)
        done = (p0 == EXITED) & (p1 == EXITED)
        q0, rocks, r0 = self._act_batch(p0, a0, rocks)
        q1, rocks, r1 = self._act_batch(p1, a1, rocks)
        o0 = self._sense_batch(q0, a0, rocks, _rng.uniform_array(seeds, depth, 0))
        o1 = self._sense_batch(q1, a1, rocks, _rng.uniform_array(seeds, depth, 1))
        obs = np.where(done, 0, o0 * 3 + o1)
        reward = np.where(done, 0.0, r0 + r1)
        nxt = {"p0": q0, "p1": q1, "rocks": rocks}
        return BatchStep(nxt, obs.reshape(-1, 1), reward, (q0 == EXITED) & (q1 == EXITED))

    def terminal_batch(self, batch):
        return (batch["p0"] == EXITED) & (batch["p1"] == EXITED)

    def upper_bound_batch(self, batch):
        n = self.n
        p0, p1, rocks = batch["p0"], batch["p1"], batch["rocks"]
        a0, a1 = p0 != EXITED, p1 != EXITED
        r0, c0 = np.divmod(np.where(a0, p0, 0), n)
        r1, c1 = np.divmod(np.where(a1, p1, 0), n)
        big = 10 * n
        total = np.zeros(len(p0))
        for k in range(self.m):
            d0 = np.where(a0, abs(r0 - self._rock_r[k]) + abs(c0 - self._rock_c[k]), big)
            d1 = np.where(a1, abs(r1 - self._rock_r[k]) + abs(c1 - self._rock_c[k]), big)
            d = np.minimum(d0, d1)
            good = (((rocks >> k) & 1) == 1) & (a0 | a1)
            total = total + np.where(good, self.sample_reward * self._gpow_arr[np.where(good, d, 0)], 0.0)
        total = total + np.where(a0, self.exit_reward * self._gpow_arr[n - 1 - c0], 0.0)
        total = total + np.where(a1, self.exit_reward * self._gpow_arr[n - 1 - c1], 0.0)
        return total

    def lower_bound_batch(self, batch):
        return np.zeros(len(batch["p0"]))

    def default_policy_batch(self, batch, depth):
        p0, p1, rocks = batch["p0"], batch["p1"], batch["rocks"]

        def sub(pos, rocks):
            active = pos != EXITED
            k = self.rock_at[np.where(active, pos, 0)]
            good = active & (k >= 0) & (((rocks >> np.where(k >= 0, k, 0)) & 1) == 1)
            return np.where(good, SAMPLE, EAST), np.where(good, k, 0)

        s0, k0 = sub(p0, rocks)
        rocks = np.where(s0 == SAMPLE, rocks & ~(np.int64(1) << k0), rocks)
        s1, _ = sub(p1, rocks)
        return s0 * self.per_robot + s1

    def state_to_json(self, state):
        return list(state)

    def state_from_json(self, data):
        return MarsState(*(int(v) for v in data))


@register("mars")
def mars_model(**params) -> MarsModel:
    return MarsModel(**params)
