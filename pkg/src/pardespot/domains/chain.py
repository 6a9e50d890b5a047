"""Small ring-shaped chain with exactly enumerable dynamics.

Used for belief-filter checks: the full transition and observation tables
are tiny, so the exact posterior is cheap to compute.
"""
from __future__ import annotations

import numpy as np

from pardespot import rng as _rng
from pardespot.model import BatchStep, Model, ModelSpec, StepOutcome, register

STAY, FORWARD, BACKWARD = 0, 1, 2


class ChainModel(Model):
    name = "chain"

    def __init__(self, n_states: int = 8, move_success: float = 0.8,
                 sensor_accuracy: float = 0.7, discount: float = 0.95,
                 max_depth: int = 20):
        if n_states < 2:
            raise ValueError("n_states must be >= 2")
        self.spec = ModelSpec(3, discount, max_depth)
        self.n = n_states
        self.move_success = move_success
        self.sensor_accuracy = sensor_accuracy

    def _move(self, s, a, u):
        if a == STAY or u >= self.move_success:
            return s
        return (s + 1) % self.n if a == FORWARD else (s - 1) % self.n

    def _sense(self, s, u_ok, u_which):
        if u_ok < self.sensor_accuracy:
            return s
        k = int(u_which * (self.n - 1))
        return (s + 1 + k) % self.n

    def _step(self, state, action, seed, depth):
        nxt = self._move(state, action, _rng.uniform(seed, depth, 0))
        z = self._sense(nxt, _rng.uniform(seed, depth, 1), _rng.uniform(seed, depth, 2))
        return StepOutcome(nxt, (z,), 1.0 if nxt == 0 else 0.0, False)

    def is_terminal(self, state):
        return False

    def upper_bound_heuristic(self, state):
        return 1.0 / (1.0 - self.spec.discount)

    def lower_bound_heuristic(self, state):
        return 0.0

    def default_policy_action(self, state, depth):
        return STAY

    def observation_likelihood(self, next_state, action, observation):
        (z,) = observation
        if not 0 <= z < self.n:
            return 0.0
        if z == next_state:
            return self.sensor_accuracy
        return (1.0 - self.sensor_accuracy) / (self.n - 1)

    def sample_initial_state(self, rng):
        return int(rng.integers(self.n))

    def pack(self, states):
        return {"s": np.asarray(states, dtype=np.int64)}

    def unpack(self, batch):
        return batch["s"].tolist()

    def step_batch(self, batch, actions, seeds, depth):
        s = batch["s"]
        a = np.broadcast_to(np.asarray(actions, dtype=np.int64), s.shape)
        moved = (a != STAY) & (_rng.uniform_array(seeds, depth, 0) < self.move_success)
        delta = np.where(a == FORWARD, 1, -1)
        nxt = np.where(moved, (s + delta) % self.n, s)
        ok = _rng.uniform_array(seeds, depth, 1) < self.sensor_accuracy
        k = (_rng.uniform_array(seeds, depth, 2) * (self.n - 1)).astype(np.int64)
        z = np.where(ok, nxt, (nxt + 1 + k) % self.n)
        return BatchStep({"s": nxt}, z.reshape(-1, 1), np.where(nxt == 0, 1.0, 0.0), np.zeros(len(s), bool))

    def terminal_batch(self, batch):
        return np.zeros(len(batch["s"]), dtype=bool)

    def upper_bound_batch(self, batch):
        return np.full(len(batch["s"]), 1.0 / (1.0 - self.spec.discount))

    def lower_bound_batch(self, batch):
        return np.zeros(len(batch["s"]))

    def default_policy_batch(self, batch, depth):
        return np.zeros(len(batch["s"]), dtype=np.int64)

    def likelihood_batch(self, batch, action, observation):
        (z,) = observation
        s = batch["s"]
        if not 0 <= z < self.n:
            return np.zeros(len(s))
        return np.where(s == z, self.sensor_accuracy, (1.0 - self.sensor_accuracy) / (self.n - 1))


@register("chain")
def chain_model(**params) -> ChainModel:
    return ChainModel(**params)
