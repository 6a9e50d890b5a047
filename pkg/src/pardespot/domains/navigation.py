"""Grid navigation through a partially known map.

The robot starts somewhere on the top row and must reach the goal cell at
the bottom centre, passing the middle wall through whichever of the two
gates is open. Cells not part of the fixed layout are occupied with a small
prior probability. Eight noisy bump-style readings report the occupancy of
the adjacent cells (off-map counts as occupied).

States are ``NavState(pos, occ, gate)`` with ``occ`` a Python int bitmask
over all cells (walls, landmarks, the closed gate and occupied unknown
cells). The batch face stores the mask as little-endian uint64 words.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from pardespot import rng as _rng
from pardespot.model import (
    BatchStep,
    BeliefDegeneracyError,
    Model,
    ModelSpec,
    ParticleBelief,
    StepOutcome,
    register,
    systematic_resample,
)

STAY = 0
# moves 1..8, clockwise from north; observation bit k reads direction k+1
MOVES = ((0, 0), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
_DR = np.array([d[0] for d in MOVES], dtype=np.int64)
_DC = np.array([d[1] for d in MOVES], dtype=np.int64)

LANDMARKS_13 = ((3, 6), (9, 6))


class NavState(NamedTuple):
    pos: int
    occ: int
    gate: int


class NavLayout:
    """Fixed part of the map: wall, gates, landmarks, known-free cells."""

    def __init__(self, size: int, landmarks=None):
        if size < 3:
            raise ValueError("grid size must be >= 3")
        n = self.size = size
        self.wall_row = n // 2
        self.gates = (self.wall_row * n + n // 4, self.wall_row * n + (n - 1 - n // 4))
        self.goal = (n - 1) * n + n // 2
        if landmarks is None:
            landmarks = LANDMARKS_13 if n == 13 else ()
        known_free = set(range(n))  # top row
        known_free |= set(range((n - 1) * n, n * n))  # bottom row
        for g in self.gates:
            gr, gc = divmod(g, n)
            for r in (gr - 1, gr + 1):
                if 0 <= r < n and r != self.wall_row:
                    known_free.add(r * n + gc)
        walls = {self.wall_row * n + c for c in range(n)} - set(self.gates)
        marks = {r * n + c for r, c in landmarks}
        self.static_occ = 0
        for cell in walls | marks:
            self.static_occ |= 1 << cell
        known = known_free | walls | marks | set(self.gates)
        self.unknown_cells = tuple(sorted(set(range(n * n)) - known))
        self.starts = tuple(range(n))

    def gate_row_col(self, gate: int) -> tuple[int, int]:
        return divmod(self.gates[gate], self.size)


class NavigationModel(Model):
    name = "navigation"

    def __init__(self, size: int = 13, discount: float = 0.95, move_failure: float = 0.03,
                 obs_error: float = 0.03, unknown_prob: float = 0.1,
                 stay_reward: float = -0.2, move_reward: float = -0.1,
                 crash_reward: float = -1.0, goal_reward: float = 20.0,
                 max_depth: int = 90, landmarks=None):
        self.layout = NavLayout(size, landmarks)
        self.n = size
        self.words = (size * size + 63) // 64
        self.spec = ModelSpec(9, discount, max_depth)
        self.move_failure = move_failure
        self.obs_error = obs_error
        self.unknown_prob = unknown_prob
        self.stay_reward = stay_reward
        self.move_reward = move_reward
        self.crash_reward = crash_reward
        self.goal_reward = goal_reward
        # discount powers shared by both faces so heuristics agree bit for bit
        self._gpow = [discount ** k for k in range(4 * size + 2)]
        self._gpow_arr = np.array(self._gpow)
        n = size
        self._goal_rc = divmod(self.layout.goal, n)
        self._gate_rc = tuple(self.layout.gate_row_col(g) for g in (0, 1))
        self._gate_r = np.array([rc[0] for rc in self._gate_rc])
        self._gate_c = np.array([rc[1] for rc in self._gate_rc])
        # per-cell neighbour lookups for the batch face: columns follow MOVES
        cells = np.arange(n * n)
        nr = cells[:, None] // n + _DR[None, :]
        nc = cells[:, None] % n + _DC[None, :]
        self._nb_out = (nr < 0) | (nr >= n) | (nc < 0) | (nc >= n)
        flat = np.where(self._nb_out, 0, nr * n + nc)
        self._nb_cell = flat
        self._nb_word = flat >> 6
        self._nb_shift = (flat & 63).astype(np.uint64)
        big = np.iinfo(np.int64).max
        score = np.full((2, n * n, 9), big, dtype=np.int64)
        for gate in (0, 1):
            for cell in range(n * n):
                r = cell // n
                tr, tc = self._target(r, gate)
                for a in range(1, 9):
                    rr, cc = int(nr[cell, a]), int(nc[cell, a])
                    score[gate, cell, a] = 64 * max(abs(rr - tr), abs(cc - tc)) + (rr - tr) ** 2 + (cc - tc) ** 2
        self._policy_score = score
        unknown = np.array(self.layout.unknown_cells, dtype=np.int64)
        self._unknown = unknown
        self._unknown_index = np.full(n * n, -1, dtype=np.int64)
        self._unknown_index[unknown] = np.arange(len(unknown))
        static = np.zeros(n * n, dtype=bool)
        for cell in range(n * n):
            static[cell] = (self.layout.static_occ >> cell) & 1
        self._static_cells = static

    @property
    def state_space_size(self) -> int:
        return self.n * self.n * 2 ** len(self.layout.unknown_cells)

    # -- helpers -------------------------------------------------------------

    def _occupied(self, occ: int, r: int, c: int) -> bool:
        n = self.n
        if not (0 <= r < n and 0 <= c < n):
            return True
        return (occ >> (r * n + c)) & 1 == 1

    def _readings(self, pos: int, occ: int, seed: int, depth: int) -> int:
        r, c = divmod(pos, self.n)
        bits = 0
        for k in range(8):
            dr, dc = MOVES[k + 1]
            bit = self._occupied(occ, r + dr, c + dc)
            if _rng.uniform(seed, depth, k + 1) < self.obs_error:
                bit = not bit
            if bit:
                bits |= 1 << k
        return bits

    def _target(self, r: int, gate: int) -> tuple[int, int]:
        return self._gate_rc[gate] if r < self.layout.wall_row else self._goal_rc

    def distance_to_goal(self, state: NavState) -> int:
        """Move count to the goal through the open gate, ignoring other obstacles."""
        r, c = divmod(state.pos, self.n)
        gr, gc = self._goal_rc
        if r < self.layout.wall_row:
            tr, tc = self._gate_rc[state.gate]
            return max(abs(r - tr), abs(c - tc)) + max(abs(tr - gr), abs(tc - gc))
        return max(abs(r - gr), abs(c - gc))

    # -- scalar face ---------------------------------------------------------

    def _step(self, state, action, seed, depth):
        pos, occ, gate = state
        n = self.n
        if pos == self.layout.goal:
            return StepOutcome(state, (self._readings(pos, occ, seed, depth),), 0.0, True)
        terminal = False
        if action == STAY:
            reward = self.stay_reward
        elif _rng.uniform(seed, depth, 0) < self.move_failure:
            reward = self.move_reward
        else:
            r, c = divmod(pos, n)
            dr, dc = MOVES[action]
            tr, tc = r + dr, c + dc
            if self._occupied(occ, tr, tc):
                reward = self.crash_reward
            else:
                pos = tr * n + tc
                if pos == self.layout.goal:
                    reward, terminal = self.goal_reward, True
                else:
                    reward = self.move_reward
        nxt = NavState(pos, occ, gate)
        return StepOutcome(nxt, (self._readings(pos, occ, seed, depth),), reward, terminal)

    def rollout_step(self, state, action, seed, depth):
        # observations are never read during roll-outs; skip the sensor draws
        pos, occ, gate = state
        if pos == self.layout.goal:
            return state, 0.0, True
        if action == STAY:
            return state, self.stay_reward, False
        if _rng.uniform(seed, depth, 0) < self.move_failure:
            return state, self.move_reward, False
        r, c = divmod(pos, self.n)
        dr, dc = MOVES[action]
        if self._occupied(occ, r + dr, c + dc):
            return state, self.crash_reward, False
        pos = (r + dr) * self.n + c + dc
        if pos == self.layout.goal:
            return NavState(pos, occ, gate), self.goal_reward, True
        return NavState(pos, occ, gate), self.move_reward, False

    def is_terminal(self, state):
        return state.pos == self.layout.goal

    def success(self, state):
        return state.pos == self.layout.goal

    def upper_bound_heuristic(self, state):
        d = self.distance_to_goal(state)
        return self.goal_reward * self._gpow[max(d - 1, 0)]

    def lower_bound_heuristic(self, state):
        if state.pos == self.layout.goal:
            return 0.0
        return self.stay_reward / (1.0 - self.spec.discount)

    def default_policy_action(self, state, depth):
        """Greedy move toward the open gate, then the goal, avoiding occupied cells."""
        pos, occ, gate = state
        r, c = divmod(pos, self.n)
        tr, tc = self._target(r, gate)
        best, best_score = STAY, None
        for a in range(1, 9):
            dr, dc = MOVES[a]
            nr, nc = r + dr, c + dc
            if self._occupied(occ, nr, nc):
                continue
            score = 64 * max(abs(nr - tr), abs(nc - tc)) + (nr - tr) ** 2 + (nc - tc) ** 2
            if best_score is None or score < best_score:
                best, best_score = a, score
        return best

    def observation_likelihood(self, next_state, action, observation):
        (bits,) = observation
        if not 0 <= bits < 256:
            return 0.0
        r, c = divmod(next_state.pos, self.n)
        p = 1.0
        for k in range(8):
            dr, dc = MOVES[k + 1]
            truth = self._occupied(next_state.occ, r + dr, c + dc)
            p *= (1.0 - self.obs_error) if truth == bool((bits >> k) & 1) else self.obs_error
        return p

    def sample_initial_state(self, rng):
        lay = self.layout
        occ = lay.static_occ
        hits = rng.random(len(lay.unknown_cells)) < self.unknown_prob
        for cell, hit in zip(lay.unknown_cells, hits.tolist()):
            if hit:
                occ |= 1 << cell
        gate = int(rng.integers(2))
        occ |= 1 << lay.gates[1 - gate]  # the other gate is closed
        pos = lay.starts[int(rng.integers(len(lay.starts)))]
        return NavState(pos, occ, gate)

    def initial_belief(self, n_particles, rng):
        b = super().initial_belief(n_particles, rng)
        b.aux["occ_prob"] = np.full(len(self._unknown), self.unknown_prob)
        return b

    def belief_update(self, belief, action, observation, rng):
        """Position/gate particle filter with per-cell occupancy marginals.

        A particle set cannot hold the true map of an exponentially large map
        space, so unknown cells are tracked as independent occupancy
        probabilities, updated from each reading and mixed over the
        particles' positions. After resampling positions and gates, every
        particle redraws its unknown cells from the updated marginals (its
        own cell is kept free).
        """
        probs = np.asarray(belief.aux.get("occ_prob", np.full(len(self._unknown), self.unknown_prob)))
        n = len(belief)
        seeds = rng.integers(0, 1 << 63, size=n, dtype=np.int64).astype(np.uint64)
        nxt, _, _ = self._move_batch(self.pack(belief.states), np.full(n, action, dtype=np.int64), seeds, 1)
        lik = self.likelihood_batch(nxt, action, tuple(observation))
        w = belief.weights * lik
        total = float(w.sum())
        if not total > 0.0:
            raise BeliefDegeneracyError(f"observation {tuple(observation)} has zero likelihood under all particles")
        w = w / total
        (bits,) = observation
        pos = nxt["pos"]
        seen = ((bits >> np.arange(8)) & 1).astype(bool)
        j = self._unknown_index[self._nb_cell[pos, 1:]]
        valid = ~self._nb_out[pos, 1:] & (j >= 0)
        pc = probs[np.where(valid, j, 0)]
        l_occ = np.where(seen, 1.0 - self.obs_error, self.obs_error)
        post = pc * l_occ / (pc * l_occ + (1.0 - pc) * (1.0 - l_occ))
        delta = (post - pc) * w[:, None]
        probs = probs + np.bincount(j[valid], weights=delta[valid], minlength=len(probs))
        probs = np.clip(probs, 1e-9, 1.0 - 1e-9)
        idx = systematic_resample(w, n, rng)
        pos, gate = pos[idx], nxt["gate"][idx]
        cells = np.zeros((n, self.n * self.n), dtype=bool)
        cells[:, self._static_cells] = True
        cells[:, self._unknown] = rng.random((n, len(self._unknown))) < probs
        cells[np.arange(n), np.asarray(self.layout.gates)[1 - gate]] = True
        cells[np.arange(n), pos] = False
        padded = np.zeros((n, 64 * self.words), dtype=bool)
        padded[:, : self.n * self.n] = cells
        occ = np.packbits(padded.reshape(n, self.words, 64), axis=2, bitorder="little")
        occ = occ.view("<u8").reshape(n, self.words).astype(np.uint64)
        states = self.unpack({"pos": pos, "occ": occ, "gate": gate})
        return ParticleBelief(states, np.full(n, 1.0 / n), {"occ_prob": probs})

    # -- batch face ----------------------------------------------------------

    def pack(self, states):
        w = self.words
        occ = np.array(
            [[(s.occ >> (64 * k)) & _rng.MASK64 for k in range(w)] for s in states],
            dtype=np.uint64,
        ).reshape(len(states), w)
        return {
            "pos": np.array([s.pos for s in states], dtype=np.int64),
            "occ": occ,
            "gate": np.array([s.gate for s in states], dtype=np.int64),
        }

    def unpack(self, batch):
        out = []
        for pos, words, gate in zip(batch["pos"].tolist(), batch["occ"].tolist(), batch["gate"].tolist()):
            occ = 0
            for k, v in enumerate(words):
                occ |= v << (64 * k)
            out.append(NavState(pos, occ, gate))
        return out

    def _neighbours_batch(self, pos, occ):
        """(n, 9) occupancy of the cell itself and its eight neighbours."""
        words = np.take_along_axis(occ, self._nb_word[pos], axis=1)
        bit = (words >> self._nb_shift[pos]) & np.uint64(1)
        return self._nb_out[pos] | (bit == 1)

    def _readings_batch(self, pos, occ, seeds, depth):
        truth = self._neighbours_batch(pos, occ)[:, 1:]
        bits = np.zeros(len(pos), dtype=np.int64)
        for k in range(8):
            bit = truth[:, k] ^ (_rng.uniform_array(seeds, depth, k + 1) < self.obs_error)
            bits |= bit.astype(np.int64) << k
        return bits

    def _move_batch(self, batch, actions, seeds, depth):
        pos, occ, gate = batch["pos"], batch["occ"], batch["gate"]
        a = np.broadcast_to(np.asarray(actions, dtype=np.int64), pos.shape)
        at_goal = pos == self.layout.goal
        moving = (a != STAY) & ~at_goal
        fail = moving & (_rng.uniform_array(seeds, depth, 0) < self.move_failure)
        rows = np.arange(len(pos))
        target = self._nb_cell[pos, a]
        blocked = self._neighbours_batch(pos, occ)[rows, a]
        go = moving & ~fail & ~blocked
        crash = moving & ~fail & blocked
        new_pos = np.where(go, target, pos)
        reached = go & (new_pos == self.layout.goal)
        reward = np.where(reached, self.goal_reward, self.move_reward)
        reward = np.where(crash, self.crash_reward, reward)
        reward = np.where(a == STAY, self.stay_reward, reward)
        reward = np.where(at_goal, 0.0, reward)
        return {"pos": new_pos, "occ": occ, "gate": gate}, reward, at_goal | reached

    def step_batch(self, batch, actions, seeds, depth):
        nxt, reward, terminal = self._move_batch(batch, actions, seeds, depth)
        obs = self._readings_batch(nxt["pos"], nxt["occ"], seeds, depth)
        return BatchStep(nxt, obs.reshape(-1, 1), reward, terminal)

    def rollout_step_batch(self, batch, actions, seeds, depth):
        return self._move_batch(batch, actions, seeds, depth)

    def terminal_batch(self, batch):
        return batch["pos"] == self.layout.goal

    def _distance_batch(self, batch):
        r, c = np.divmod(batch["pos"], self.n)
        gr, gc = self._goal_rc
        tr, tc = self._gate_r[batch["gate"]], self._gate_c[batch["gate"]]
        above = np.maximum(abs(r - tr), abs(c - tc)) + np.maximum(abs(tr - gr), abs(tc - gc))
        below = np.maximum(abs(r - gr), abs(c - gc))
        return np.where(r < self.layout.wall_row, above, below)

    def upper_bound_batch(self, batch):
        d = self._distance_batch(batch)
        return self.goal_reward * self._gpow_arr[np.maximum(d - 1, 0)]

    def lower_bound_batch(self, batch):
        tail = self.stay_reward / (1.0 - self.spec.discount)
        return np.where(batch["pos"] == self.layout.goal, 0.0, tail)

    def default_policy_batch(self, batch, depth):
        pos, occ, gate = batch["pos"], batch["occ"], batch["gate"]
        big = np.iinfo(np.int64).max
        scores = np.where(self._neighbours_batch(pos, occ), big, self._policy_score[gate, pos])
        best = np.argmin(scores[:, 1:], axis=1) + 1
        return np.where(scores[np.arange(len(pos)), best] == big, STAY, best)

    def likelihood_batch(self, batch, action, observation):
        (bits,) = observation
        pos, occ = batch["pos"], batch["occ"]
        if not 0 <= bits < 256:
            return np.zeros(len(pos))
        truth = self._neighbours_batch(pos, occ)[:, 1:]
        p = np.ones(len(pos))
        for k in range(8):
            match = truth[:, k] == bool((bits >> k) & 1)
            p = p * np.where(match, 1.0 - self.obs_error, self.obs_error)
        return p

    # -- serialisation ----------------------------------------------------------

    def state_to_json(self, state):
        return {"pos": state.pos, "occ": format(state.occ, "x"), "gate": state.gate}

    def state_from_json(self, data):
        return NavState(int(data["pos"]), int(data["occ"], 16), int(data["gate"]))

    def render(self, state) -> str:
        rows = []
        for r in range(self.n):
            line = []
            for c in range(self.n):
                cell = r * self.n + c
                if cell == state.pos:
                    line.append("R")
                elif cell == self.layout.goal:
                    line.append("G")
                elif (state.occ >> cell) & 1:
                    line.append("#")
                else:
                    line.append(".")
            rows.append("".join(line))
        return "\n".join(rows)


@register("navigation")
def navigation_model(**params) -> NavigationModel:
    return NavigationModel(**params)
