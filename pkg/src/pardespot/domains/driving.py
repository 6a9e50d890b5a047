"""Speed control for a vehicle driving along a straight path through a crowd.

The vehicle moves along ``y = 0`` from ``x = 0`` toward ``x = path_length``
and chooses Accelerate, Decelerate or Maintain each step. Pedestrians walk
at a fixed speed toward a hidden goal with Gaussian heading noise. The step
factors into one vehicle element followed by one element per pedestrian;
collision and goal checks happen when the elements are composed.

Heading noise uses a fixed table of Gaussian quantiles and their
cosines/sines so that scalar and vectorised code perform the same IEEE
operations.

Reward constants (config defaults, not taken from any measured setup):
goal +100, per-step time cost -1, Decelerate -0.5,
collision ``-500 * (v**2 + 0.1)``.
"""
from __future__ import annotations

import math
from statistics import NormalDist
from typing import NamedTuple

import numpy as np

from pardespot import rng as _rng
from pardespot.model import BatchStep, Model, ModelSpec, ParticleBelief, StepOutcome, register

ACCELERATE, DECELERATE, MAINTAIN = 0, 1, 2
RUNNING, REACHED, COLLIDED = 0, 1, 2
NOISE_BINS = 64

DEFAULT_GOALS = ((5.0, -8.0), (5.0, 8.0), (15.0, -8.0), (15.0, 8.0), (25.0, -8.0), (25.0, 8.0))


class DriveState(NamedTuple):
    x: float
    v: float
    peds: tuple  # ((px, py, goal_index), ...)
    status: int


class DrivingModel(Model):
    name = "driving"

    def __init__(self, num_pedestrians: int = 6, discount: float = 0.95, dt: float = 0.25,
                 path_length: float = 30.0, v_max: float = 2.0, dv: float = 0.25,
                 ped_speed: float = 1.0, heading_sigma: float = 0.3, control_failure: float = 0.01,
                 collision_radius: float = 1.0, goal_reward: float = 100.0,
                 collision_penalty: float = 500.0, time_cost: float = -1.0,
                 decel_cost: float = -0.5, pos_bin: float = 0.5, speed_bin: float = 0.03,
                 max_depth: int = 60, goals=DEFAULT_GOALS):
        if num_pedestrians < 1:
            raise ValueError("num_pedestrians must be >= 1")
        self.P = num_pedestrians
        self.spec = ModelSpec(3, discount, max_depth, factored_element_count=1 + num_pedestrians)
        self.dt, self.path_length, self.v_max, self.dv = dt, path_length, v_max, dv
        self.ped_step = ped_speed * dt
        self.control_failure = control_failure
        self.radius_sq = collision_radius * collision_radius
        self.goal_reward, self.collision_penalty = goal_reward, collision_penalty
        self.time_cost, self.decel_cost = time_cost, decel_cost
        self.pos_bin, self.speed_bin = pos_bin, speed_bin
        self.goals = tuple((float(gx), float(gy)) for gx, gy in goals)
        self._gx = np.array([g[0] for g in self.goals])
        self._gy = np.array([g[1] for g in self.goals])
        nd = NormalDist(0.0, heading_sigma)
        angles = [nd.inv_cdf((j + 0.5) / NOISE_BINS) for j in range(NOISE_BINS)]
        self._cos = [math.cos(t) for t in angles]
        self._sin = [math.sin(t) for t in angles]
        self._cos_arr, self._sin_arr = np.array(self._cos), np.array(self._sin)
        self.heading_sigma = heading_sigma
        max_steps = int(math.ceil(path_length / (v_max * dt))) + 2
        self._gpow = [discount ** k for k in range(max_steps + 1)]
        self._gpow_arr = np.array(self._gpow)

    # -- shared element kernels ------------------------------------------------

    def _vehicle(self, x, v, action, u):
        if action == ACCELERATE and u >= self.control_failure:
            v = min(v + self.dv, self.v_max)
        elif action == DECELERATE and u >= self.control_failure:
            v = max(v - self.dv, 0.0)
        reward = self.time_cost + (self.decel_cost if action == DECELERATE else 0.0)
        return x + v * self.dt, v, reward

    def _ped(self, px, py, goal, u):
        gx, gy = self.goals[goal]
        dx, dy = gx - px, gy - py
        d = math.sqrt(dx * dx + dy * dy)
        if d <= self.ped_step:
            return gx, gy
        ux, uy = dx / d, dy / d
        j = int(u * NOISE_BINS)
        c, s = self._cos[j], self._sin[j]
        return px + self.ped_step * (c * ux - s * uy), py + self.ped_step * (s * ux + c * uy)

    def _observe(self, x, v, peds) -> tuple:
        key = [math.floor(x / self.pos_bin), math.floor(v / self.speed_bin)]
        for px, py, _ in peds:
            key.append(math.floor(px / self.pos_bin))
            key.append(math.floor(py / self.pos_bin))
        return tuple(key)

    def _finish(self, state, x, v, r, peds):
        collided = False
        for px, py, _ in peds:
            ddx = px - x
            if ddx * ddx + py * py < self.radius_sq:
                collided = True
                break
        status = RUNNING
        if collided:
            r = r + -self.collision_penalty * (v * v + 0.1)
            status = COLLIDED
        elif x >= self.path_length:
            r = r + self.goal_reward
            status = REACHED
        nxt = DriveState(x, v, peds, status)
        return StepOutcome(nxt, self._observe(x, v, peds), r, status != RUNNING)

    # -- scalar face ---------------------------------------------------------

    def _step(self, state, action, seed, depth):
        if state.status != RUNNING:
            return StepOutcome(state, self._observe(state.x, state.v, state.peds), 0.0, True)
        x, v, r = self._vehicle(state.x, state.v, action, _rng.uniform(seed, depth, 0))
        peds = []
        for i, (px, py, g) in enumerate(state.peds):
            nx, ny = self._ped(px, py, g, _rng.uniform(seed, depth, i + 1))
            peds.append((nx, ny, g))
        return self._finish(state, x, v, r, tuple(peds))

    def step_factored(self, state, action, scenario, depth, element_index):
        """Element 0 moves the vehicle, element ``i >= 1`` pedestrian ``i - 1``."""
        self.check_action(action)
        if not 0 <= element_index < self.spec.factored_element_count:
            raise ValueError(f"element index {element_index} out of range")
        seed = scenario.stream_seed if hasattr(scenario, "stream_seed") else int(scenario)
        if element_index == 0:
            if state.status != RUNNING:
                return state.x, state.v, 0.0
            return self._vehicle(state.x, state.v, action, _rng.uniform(seed, depth, 0))
        px, py, g = state.peds[element_index - 1]
        if state.status != RUNNING:
            return px, py, g
        nx, ny = self._ped(px, py, g, _rng.uniform(seed, depth, element_index))
        return nx, ny, g

    def compose_factored(self, state, action, scenario, depth, partials):
        if len(partials) != self.spec.factored_element_count:
            raise ValueError("one partial outcome per element required")
        x, v, r = partials[0]
        peds = tuple(partials[1:])
        if state.status != RUNNING:
            return StepOutcome(state, self._observe(state.x, state.v, state.peds), 0.0, True)
        return self._finish(state, x, v, r, peds)

    def is_terminal(self, state):
        return state.status != RUNNING

    def success(self, state):
        return None

    def _steps_to_goal(self, x):
        return max(int(math.ceil((self.path_length - x) / (self.v_max * self.dt))), 1)

    def upper_bound_heuristic(self, state):
        if state.status != RUNNING:
            return 0.0
        k = min(self._steps_to_goal(state.x), len(self._gpow))
        return self.goal_reward * self._gpow[k - 1]

    def lower_bound_heuristic(self, state):
        if state.status != RUNNING:
            return 0.0
        return self.time_cost / (1.0 - self.spec.discount)

    def _danger(self, x, px, py):
        ahead = px - x
        return 0.0 < ahead < 4.0 and -1.5 < py < 1.5

    def default_policy_action(self, state, depth):
        """Brake for a pedestrian close ahead of the vehicle, otherwise speed up."""
        for px, py, _ in state.peds:
            if self._danger(state.x, px, py):
                return DECELERATE
        return ACCELERATE if state.v < self.v_max else MAINTAIN

    def observation_likelihood(self, next_state, action, observation):
        return 1.0 if self._observe(next_state.x, next_state.v, next_state.peds) == tuple(observation) else 0.0

    def sample_initial_state(self, rng):
        peds = []
        for _ in range(self.P):
            px = float(rng.uniform(3.0, self.path_length))
            py = float(rng.uniform(-5.0, 5.0))
            peds.append((px, py, int(rng.integers(len(self.goals)))))
        return DriveState(0.0, 0.0, tuple(peds), RUNNING)

    # -- structured belief ----------------------------------------------------

    def initial_belief_for(self, world_state, n_particles, rng):
        """Observable components exact, pedestrian goals uniform."""
        goals = rng.integers(len(self.goals), size=(n_particles, self.P))
        states = [
            world_state._replace(peds=tuple((px, py, int(g)) for (px, py, _), g in zip(world_state.peds, row)))
            for row in goals.tolist()
        ]
        return ParticleBelief(states, np.full(n_particles, 1.0 / n_particles))

    def belief_update(self, belief, action, observation, rng):
        """Snap observable components to the observation and filter goals.

        Each pedestrian's goal marginal is reweighted by how well the heading
        toward each goal explains the observed displacement; particles then
        draw goals independently from the updated marginals.
        """
        obs = tuple(observation)
        prev = belief.states[0]
        G = len(self.goals)
        x = (obs[0] + 0.5) * self.pos_bin
        v_raw = (obs[1] + 0.5) * self.speed_bin
        v = min(round(v_raw / self.dv) * self.dv, self.v_max)
        n = len(belief)
        goal_idx = np.array([[p[2] for p in s.peds] for s in belief.states])
        w = belief.weights / belief.weights.sum()
        new_peds_pos = []
        marginals = np.zeros((self.P, G))
        for i in range(self.P):
            ox = (obs[2 + 2 * i] + 0.5) * self.pos_bin
            oy = (obs[3 + 2 * i] + 0.5) * self.pos_bin
            px, py, _ = prev.peds[i]
            prior = np.bincount(goal_idx[:, i], weights=w, minlength=G)
            mx, my = ox - px, oy - py
            moved = math.hypot(mx, my)
            lik = np.ones(G)
            if moved > 1e-9:
                heading = math.atan2(my, mx)
                for g in range(G):
                    to_goal = math.atan2(self._gy[g] - py, self._gx[g] - px)
                    err = math.remainder(heading - to_goal, math.tau)
                    lik[g] = math.exp(-0.5 * (err / max(self.heading_sigma, 0.5)) ** 2)
            post = prior * lik + 1e-3 / G
            marginals[i] = post / post.sum()
            new_peds_pos.append((ox, oy))
        draws = np.stack(
            [rng.choice(G, size=n, p=marginals[i]) for i in range(self.P)], axis=1
        ) if n else np.zeros((0, self.P), dtype=np.int64)
        status = RUNNING
        states = [
            DriveState(x, v, tuple((ox, oy, int(g)) for (ox, oy), g in zip(new_peds_pos, row)), status)
            for row in draws.tolist()
        ]
        return ParticleBelief(states, np.full(n, 1.0 / n))

    # -- batch face ----------------------------------------------------------

    def pack(self, states):
        P = self.P
        n = len(states)
        px = np.empty((n, P))
        py = np.empty((n, P))
        goal = np.empty((n, P), dtype=np.int64)
        for j, s in enumerate(states):
            for i, (a, b, g) in enumerate(s.peds):
                px[j, i], py[j, i], goal[j, i] = a, b, g
        return {
            "x": np.array([s.x for s in states], dtype=np.float64),
            "v": np.array([s.v for s in states], dtype=np.float64),
            "px": px, "py": py, "goal": goal,
            "status": np.array([s.status for s in states], dtype=np.int64),
        }

    def unpack(self, batch):
        out = []
        for x, v, pxs, pys, gs, st in zip(batch["x"].tolist(), batch["v"].tolist(), batch["px"].tolist(),
                                         batch["py"].tolist(), batch["goal"].tolist(), batch["status"].tolist()):
            out.append(DriveState(x, v, tuple(zip(pxs, pys, gs)), st))
        return out

    def _vehicle_batch(self, x, v, a, u):
        ok = u >= self.control_failure
        v = np.where((a == ACCELERATE) & ok, np.minimum(v + self.dv, self.v_max), v)
        v = np.where((a == DECELERATE) & ok, np.maximum(v - self.dv, 0.0), v)
        reward = self.time_cost + np.where(a == DECELERATE, self.decel_cost, 0.0)
        return x + v * self.dt, v, reward

    def _ped_batch(self, px, py, goal, u):
        gx, gy = self._gx[goal], self._gy[goal]
        dx, dy = gx - px, gy - py
        d = np.sqrt(dx * dx + dy * dy)
        arrived = d <= self.ped_step
        safe = np.where(arrived, 1.0, d)
        ux, uy = dx / safe, dy / safe
        j = (u * NOISE_BINS).astype(np.int64)
        c, s = self._cos_arr[j], self._sin_arr[j]
        nx = px + self.ped_step * (c * ux - s * uy)
        ny = py + self.ped_step * (s * ux + c * uy)
        return np.where(arrived, gx, nx), np.where(arrived, gy, ny)

    def _observe_batch(self, x, v, px, py):
        cols = [np.floor(x / self.pos_bin)[:, None], np.floor(v / self.speed_bin)[:, None]]
        inter = np.empty((len(x), 2 * self.P))
        inter[:, 0::2] = np.floor(px / self.pos_bin)
        inter[:, 1::2] = np.floor(py / self.pos_bin)
        return np.concatenate(cols + [inter], axis=1).astype(np.int64)

    def step_batch(self, batch, actions, seeds, depth):
        x0, v0 = batch["x"], batch["v"]
        px0, py0, goal, st = batch["px"], batch["py"], batch["goal"], batch["status"]
        a = np.broadcast_to(np.asarray(actions, dtype=np.int64), x0.shape)
        running = st == RUNNING
        x, v, r = self._vehicle_batch(x0, v0, a, _rng.uniform_array(seeds, depth, 0))
        u = np.stack([_rng.uniform_array(seeds, depth, i + 1) for i in range(self.P)], axis=1)
        px, py = self._ped_batch(px0, py0, goal, u)
        ddx = px - x[:, None]
        collided = np.any(ddx * ddx + py * py < self.radius_sq, axis=1)
        reached = ~collided & (x >= self.path_length)
        r = np.where(collided, r + -self.collision_penalty * (v * v + 0.1), r)
        r = np.where(reached, r + self.goal_reward, r)
        status = np.where(collided, COLLIDED, np.where(reached, REACHED, RUNNING))
        keep = ~running
        x = np.where(keep, x0, x)
        v = np.where(keep, v0, v)
        px = np.where(keep[:, None], px0, px)
        py = np.where(keep[:, None], py0, py)
        r = np.where(keep, 0.0, r)
        status = np.where(keep, st, status)
        nxt = {"x": x, "v": v, "px": px, "py": py, "goal": goal, "status": status}
        return BatchStep(nxt, self._observe_batch(x, v, px, py), r, status != RUNNING)

    def terminal_batch(self, batch):
        return batch["status"] != RUNNING

    def upper_bound_batch(self, batch):
        k = np.ceil((self.path_length - batch["x"]) / (self.v_max * self.dt)).astype(np.int64)
        k = np.minimum(np.maximum(k, 1), len(self._gpow))
        return np.where(batch["status"] != RUNNING, 0.0, self.goal_reward * self._gpow_arr[k - 1])

    def lower_bound_batch(self, batch):
        tail = self.time_cost / (1.0 - self.spec.discount)
        return np.where(batch["status"] != RUNNING, 0.0, tail)

    def default_policy_batch(self, batch, depth):
        ahead = batch["px"] - batch["x"][:, None]
        py = batch["py"]
        danger = np.any((ahead > 0.0) & (ahead < 4.0) & (py > -1.5) & (py < 1.5), axis=1)
        return np.where(danger, DECELERATE, np.where(batch["v"] < self.v_max, ACCELERATE, MAINTAIN))

    def likelihood_batch(self, batch, action, observation):
        obs = np.asarray(observation, dtype=np.int64)
        rows = self._observe_batch(batch["x"], batch["v"], batch["px"], batch["py"])
        return np.all(rows == obs, axis=1).astype(np.float64)

    def state_to_json(self, state):
        return {"x": state.x, "v": state.v, "peds": [list(p) for p in state.peds], "status": state.status}

    def state_from_json(self, data):
        peds = tuple((float(p[0]), float(p[1]), int(p[2])) for p in data["peds"])
        return DriveState(float(data["x"]), float(data["v"]), peds, int(data["status"]))


@register("driving")
def driving_model(**params) -> DrivingModel:
    return DrivingModel(**params)
