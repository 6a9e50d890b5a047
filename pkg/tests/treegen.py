"""Random synthetic belief trees for backup tests."""
from __future__ import annotations

import numpy as np

from pardespot.tree import ActionBranch, BeliefNode


def random_spec(gen, n, depth, max_depth=4, max_actions=3, max_obs=3):
    """Nested dict tree; see ``oracles.tree_value`` for the layout."""
    l0 = float(gen.uniform(-10, 0))
    u0 = l0 + float(gen.uniform(0, 20))
    spec = {"n": n, "u0": u0, "l0": l0, "actions": None}
    if depth >= max_depth or (depth > 0 and gen.random() < 0.3):
        return spec
    spec["actions"] = []
    for _ in range(int(gen.integers(1, max_actions + 1))):
        k = int(min(n, gen.integers(1, max_obs + 1)))
        cuts = np.sort(gen.choice(np.arange(1, n), size=k - 1, replace=False)) if k > 1 else []
        sizes = np.diff(np.concatenate([[0], cuts, [n]])).astype(int).tolist()
        kids = [random_spec(gen, s, depth + 1, max_depth, max_actions, max_obs) for s in sizes]
        spec["actions"].append({"r": float(gen.uniform(-2, 2)), "kids": kids})
    return spec


def build(spec, depth=0, parent=None, counter=None, start=0):
    """BeliefNodes for ``spec``, all unexpanded; returns (node, pending) where
    ``pending`` maps node id -> list of ActionBranch to attach on expansion."""
    counter = counter if counter is not None else [0]
    ids = np.arange(start, start + spec["n"], dtype=np.int64)
    node = BeliefNode(counter[0], ids, depth, spec["u0"], spec["l0"], parent=parent)
    counter[0] += 1
    pending = {}
    if spec["actions"] is not None:
        branches = {}
        for a, act in enumerate(spec["actions"]):
            br = ActionBranch(a, act["r"])
            offset = start
            for z, kid in enumerate(act["kids"]):
                child, sub = build(kid, depth + 1, node, counter, offset)
                offset += kid["n"]
                br.children[(z,)] = child
                pending.update(sub)
            branches[a] = br
        pending[node.id] = (node, branches)
    return node, pending


def path_to(node):
    path = []
    while node is not None:
        path.append(node)
        node = node.parent
    return path[::-1]
