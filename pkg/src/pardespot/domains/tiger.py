"""Classic two-door tiger task, small enough to solve exactly."""
from __future__ import annotations

import numpy as np

from pardespot import rng as _rng
from pardespot.model import Batch, BatchStep, Model, ModelSpec, StepOutcome, register

LEFT, RIGHT, DONE = 0, 1, 2
LISTEN, OPEN_LEFT, OPEN_RIGHT = 0, 1, 2
HEAR_LEFT, HEAR_RIGHT, NO_OBS = 0, 1, 2


class TigerModel(Model):
    name = "tiger"

    def __init__(self, discount: float = 0.95, accuracy: float = 0.85,
                 listen_cost: float = -1.0, treasure: float = 10.0,
                 penalty: float = -100.0, max_depth: int = 20):
        self.spec = ModelSpec(3, discount, max_depth)
        self.accuracy = accuracy
        self.listen_cost = listen_cost
        self.treasure = treasure
        self.penalty = penalty

    def _step(self, state, action, seed, depth):
        if state == DONE:
            return StepOutcome(DONE, (NO_OBS,), 0.0, True)
        if action == LISTEN:
            correct = _rng.uniform(seed, depth, 0) < self.accuracy
            obs = state if correct else 1 - state
            return StepOutcome(state, (obs,), self.listen_cost, False)
        eaten = (action == OPEN_LEFT) == (state == LEFT)
        return StepOutcome(DONE, (NO_OBS,), self.penalty if eaten else self.treasure, True)

    def is_terminal(self, state):
        return state == DONE

    def upper_bound_heuristic(self, state):
        return 0.0 if state == DONE else self.treasure

    def lower_bound_heuristic(self, state):
        return 0.0 if state == DONE else self.listen_cost / (1.0 - self.spec.discount)

    def default_policy_action(self, state, depth):
        return LISTEN

    def observation_likelihood(self, next_state, action, observation):
        (z,) = observation
        if next_state == DONE or action != LISTEN:
            return 1.0 if z == NO_OBS else 0.0
        if z == NO_OBS:
            return 0.0
        return self.accuracy if z == next_state else 1.0 - self.accuracy

    def sample_initial_state(self, rng):
        return int(rng.integers(2))

    def pack(self, states):
        return {"s": np.asarray(states, dtype=np.int64)}

    def unpack(self, batch):
        return batch["s"].tolist()

    def step_batch(self, batch, actions, seeds, depth):
        s = batch["s"]
        a = np.broadcast_to(np.asarray(actions, dtype=np.int64), s.shape)
        done = s == DONE
        listen = (a == LISTEN) & ~done
        opening = (a != LISTEN) & ~done
        u = _rng.uniform_array(seeds, depth, 0)
        heard = np.where(u < self.accuracy, s, 1 - s)
        obs = np.where(listen, heard, NO_OBS)
        eaten = (a == OPEN_LEFT) == (s == LEFT)
        reward = np.where(opening, np.where(eaten, self.penalty, self.treasure), 0.0)
        reward = np.where(listen, self.listen_cost, reward)
        nxt = np.where(opening | done, DONE, s)
        return BatchStep({"s": nxt}, obs.reshape(-1, 1), reward.astype(np.float64), nxt == DONE)

    def terminal_batch(self, batch):
        return batch["s"] == DONE

    def upper_bound_batch(self, batch):
        return np.where(batch["s"] == DONE, 0.0, self.treasure)

    def lower_bound_batch(self, batch):
        tail = self.listen_cost / (1.0 - self.spec.discount)
        return np.where(batch["s"] == DONE, 0.0, tail)

    def default_policy_batch(self, batch, depth):
        return np.zeros(len(batch["s"]), dtype=np.int64)

    def likelihood_batch(self, batch, action, observation):
        (z,) = observation
        s = batch["s"]
        if action != LISTEN:
            return np.full(len(s), 1.0 if z == NO_OBS else 0.0)
        if z == NO_OBS:
            return np.where(s == DONE, 1.0, 0.0)
        return np.where(s == DONE, 0.0, np.where(s == z, self.accuracy, 1.0 - self.accuracy))


@register("tiger")
def tiger_model(**params) -> TigerModel:
    return TigerModel(**params)
