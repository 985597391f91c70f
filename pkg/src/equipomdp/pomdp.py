"""Explicit finite POMDPs, symmetry bindings, and exact verification oracles.

Histories are flat tuples ``(o0, a0, o1, ..., ot)`` of integer ids. The
history-level view of a POMDP supplies exact beliefs, expected rewards, and
observation probabilities; a finite-horizon sweep over the reachable history
tree yields optimal action values against which the symmetry claims (belief
invariance, value invariance, policy equivariance) are checked exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .groups import Group


class PomdpError(ValueError):
    pass


class ImpossibleObservationError(PomdpError):
    pass


class NodeBudgetError(PomdpError):
    pass


@dataclass
class Pomdp:
    """Finite POMDP tables.

    ``trans[s, a, s']`` and ``obs[a, s', o]`` are row-stochastic; ``obs0`` is
    the emission table for the very first observation, before any action.
    """

    start: np.ndarray      # (S,)
    trans: np.ndarray      # (S, A, S)
    reward: np.ndarray     # (S, A)
    obs: np.ndarray        # (A, S, O)
    obs0: np.ndarray       # (S, O)
    discount: float = 0.99

    @property
    def n_states(self) -> int:
        return self.trans.shape[0]

    @property
    def n_actions(self) -> int:
        return self.trans.shape[1]

    @property
    def n_obs(self) -> int:
        return self.obs.shape[2]

    def validate(self, atol: float = 1e-12) -> None:
        s, a, o = self.n_states, self.n_actions, self.n_obs
        if self.trans.shape != (s, a, s) or self.reward.shape != (s, a):
            raise PomdpError("transition/reward table shapes disagree")
        if self.obs.shape != (a, s, o) or self.obs0.shape != (s, o):
            raise PomdpError("observation table shapes disagree")
        if self.start.shape != (s,):
            raise PomdpError("start distribution shape disagrees")
        if not 0.0 <= self.discount < 1.0:
            raise PomdpError(f"discount must be in [0, 1), got {self.discount}")
        for name, table in (("start", self.start[None]),
                            ("trans", self.trans.reshape(-1, s)),
                            ("obs", self.obs.reshape(-1, o)),
                            ("obs0", self.obs0)):
            if np.any(table < -atol):
                raise PomdpError(f"{name} has negative entries")
            if np.max(np.abs(table.sum(axis=-1) - 1.0)) > atol:
                raise PomdpError(f"{name} rows do not sum to 1")


@dataclass
class GroupActionBinding:
    """Per-element permutations of states, actions, and observations."""

    group: Group
    state_maps: np.ndarray   # (|G|, S) int
    action_maps: np.ndarray  # (|G|, A) int
    obs_maps: np.ndarray     # (|G|, O) int

    def validate(self) -> None:
        for name, maps in (("state", self.state_maps), ("action", self.action_maps),
                           ("obs", self.obs_maps)):
            if maps.shape[0] != self.group.order:
                raise PomdpError(f"{name} maps must have one row per group element")
            n = maps.shape[1]
            if not np.array_equal(maps[0], np.arange(n)):
                raise PomdpError(f"{name} map for the identity is not the identity")
            for g in self.group.elements:
                if not np.array_equal(np.sort(maps[g]), np.arange(n)):
                    raise PomdpError(f"{name} map for element {g} is not a bijection")
                for h in self.group.elements:
                    gh = self.group.compose(g, h)
                    if not np.array_equal(maps[gh], maps[g][maps[h]]):
                        raise PomdpError(
                            f"{name} maps break composition at ({g}, {h})")


def identity_binding(group: Group, n_states: int, n_actions: int, n_obs: int) -> GroupActionBinding:
    def rows(n):
        return np.tile(np.arange(n), (group.order, 1))

    return GroupActionBinding(group, rows(n_states), rows(n_actions), rows(n_obs))


def act_on_history(binding: GroupActionBinding, g: int, h: tuple) -> tuple:
    """Map every observation and action in the history by the binding."""
    g = binding.group.check_element(g)
    om, am = binding.obs_maps[g], binding.action_maps[g]
    return tuple(int(om[x]) if i % 2 == 0 else int(am[x]) for i, x in enumerate(h))


def format_history(h: tuple) -> str:
    bits = [f"o{x}" if i % 2 == 0 else f"a{x}" for i, x in enumerate(h)]
    return " ".join(bits)


# ---------------------------------------------------------------------------
# Invariance of the model tables.
# ---------------------------------------------------------------------------

@dataclass
class InvarianceReport:
    passed: bool
    max_dev: float
    violations: dict[str, list]

    def lines(self) -> list[str]:
        out = [f"RESULT invariance passed={self.passed} max_dev={self.max_dev:.3e}"]
        for cond, items in self.violations.items():
            for key, a, b in items:
                out.append(f"violation {cond} at {key}: mapped={a:.12g} original={b:.12g}")
        return out


def check_invariance(pomdp: Pomdp, binding: GroupActionBinding, atol: float = 1e-12,
                     max_listed: int = 50) -> InvarianceReport:
    """Exhaustively compare every table entry against its group image."""
    binding.validate()
    violations: dict[str, list] = {"trans": [], "reward": [], "obs": [], "start": [], "obs0": []}
    max_dev = 0.0

    def scan(cond, mapped, original, g):
        nonlocal max_dev
        diff = np.abs(mapped - original)
        max_dev = max(max_dev, float(diff.max()))
        if float(diff.max()) > atol:
            for key in np.argwhere(diff > atol)[:max_listed]:
                idx = tuple(int(i) for i in key)
                violations[cond].append(((g, *idx), float(mapped[idx]), float(original[idx])))

    for g in binding.group.elements:
        if g == 0:
            continue
        sm, am, om = binding.state_maps[g], binding.action_maps[g], binding.obs_maps[g]
        scan("trans", pomdp.trans[np.ix_(sm, am, sm)], pomdp.trans, g)
        scan("reward", pomdp.reward[np.ix_(sm, am)], pomdp.reward, g)
        scan("obs", pomdp.obs[np.ix_(am, sm, om)], pomdp.obs, g)
        scan("start", pomdp.start[sm], pomdp.start, g)
        scan("obs0", pomdp.obs0[np.ix_(sm, om)], pomdp.obs0, g)

    passed = all(not v for v in violations.values())
    return InvarianceReport(passed, max_dev, violations)


# ---------------------------------------------------------------------------
# Beliefs and the history-level MDP view.
# ---------------------------------------------------------------------------

def initial_belief(pomdp: Pomdp, o0: int) -> np.ndarray:
    raw = pomdp.start * pomdp.obs0[:, o0]
    total = raw.sum()
    if total <= 0.0:
        raise ImpossibleObservationError(f"first observation {o0} has probability 0")
    return raw / total


def belief_update(pomdp: Pomdp, belief: np.ndarray, a: int, o: int) -> np.ndarray:
    """Posterior over next states after taking ``a`` and observing ``o``."""
    pushed = belief @ pomdp.trans[:, a, :]
    raw = pushed * pomdp.obs[a, :, o]
    total = raw.sum()
    if total <= 0.0:
        raise ImpossibleObservationError(
            f"observation {o} after action {a} has probability 0")
    return raw / total


class HistoryMdp:
    """Fully observable view over histories: expected reward per history and
    transition probabilities that are nonzero only onto one-step extensions."""

    def __init__(self, pomdp: Pomdp):
        self.pomdp = pomdp
        self._beliefs: dict[tuple, np.ndarray] = {}

    def belief(self, h: tuple) -> np.ndarray:
        cached = self._beliefs.get(h)
        if cached is not None:
            return cached
        if len(h) == 1:
            b = initial_belief(self.pomdp, h[0])
        else:
            b = belief_update(self.pomdp, self.belief(h[:-2]), h[-2], h[-1])
        self._beliefs[h] = b
        return b

    def expected_reward(self, h: tuple, a: int) -> float:
        return float(self.belief(h) @ self.pomdp.reward[:, a])

    def obs_probs(self, h: tuple, a: int) -> np.ndarray:
        pushed = self.belief(h) @ self.pomdp.trans[:, a, :]
        return pushed @ self.pomdp.obs[a]

    def transition(self, h: tuple, a: int, h2: tuple) -> float:
        if len(h2) != len(h) + 2 or h2[: len(h)] != h or h2[-2] != a:
            return 0.0
        return float(self.obs_probs(h, a)[h2[-1]])


# ---------------------------------------------------------------------------
# Exact finite-horizon solving over the reachable history tree.
# ---------------------------------------------------------------------------

@dataclass
class QSolution:
    pomdp: Pomdp
    horizon: int
    q: dict[tuple, np.ndarray]
    beliefs: dict[tuple, np.ndarray]
    values: dict[tuple, float]
    root_probs: dict[tuple, float]
    node_count: int

    def value(self, h: tuple) -> float:
        return self.values[h]

    def greedy_set(self, h: tuple, tol: float = 1e-9) -> tuple[int, ...]:
        row = self.q[h]
        return tuple(int(a) for a in np.flatnonzero(row >= row.max() - tol))

    def greedy_action(self, h: tuple) -> int:
        return int(np.argmax(self.q[h]))


def exact_q(pomdp: Pomdp, horizon: int, node_budget: int = 2_000_000,
            obs_tol: float = 1e-15) -> QSolution:
    """Optimal action values for every reachable history shorter than the horizon.

    Values at the horizon are zero; each earlier level is the expected
    immediate reward plus the discounted, observation-weighted optimum of its
    extension histories.
    """
    s_count = pomdp.n_states
    roots: list[tuple] = []
    root_probs: dict[tuple, float] = {}
    beliefs: dict[tuple, np.ndarray] = {}
    p0 = pomdp.start @ pomdp.obs0
    for o in np.flatnonzero(p0 > obs_tol):
        h = (int(o),)
        roots.append(h)
        root_probs[h] = float(p0[o])
        beliefs[h] = initial_belief(pomdp, int(o))

    levels: list[list[tuple]] = [roots]
    children: dict[tuple, list] = {}
    node_count = len(roots)
    for depth in range(horizon):
        level = levels[-1]
        nxt: list[tuple] = []
        for h in level:
            b = beliefs[h]
            pushed = np.einsum("s,sat->at", b, pomdp.trans)
            obs_p = np.einsum("at,ato->ao", pushed, pomdp.obs)
            per_action = []
            for a in range(pomdp.n_actions):
                ids = np.flatnonzero(obs_p[a] > obs_tol)
                probs = obs_p[a, ids]
                per_action.append((ids, probs))
                for o, p in zip(ids, probs):
                    h2 = h + (a, int(o))
                    beliefs[h2] = pushed[a] * pomdp.obs[a, :, o] / p
                    nxt.append(h2)
            children[h] = per_action
            node_count += sum(len(ids) for ids, _ in per_action)
            if node_count > node_budget:
                raise NodeBudgetError(
                    f"history tree exceeded the node budget ({node_budget}) "
                    f"at depth {depth + 1} with {node_count} nodes")
        levels.append(nxt)

    q: dict[tuple, np.ndarray] = {}
    values: dict[tuple, float] = {h: 0.0 for h in levels[horizon]}
    for depth in range(horizon - 1, -1, -1):
        for h in levels[depth]:
            b = beliefs[h]
            row = b @ pomdp.reward
            for a, (ids, probs) in enumerate(children[h]):
                row[a] += pomdp.discount * sum(
                    p * values[h + (a, int(o))] for o, p in zip(ids, probs))
            q[h] = row
            values[h] = float(row.max())
    # histories at the horizon keep value 0 and no action row
    return QSolution(pomdp, horizon, q, beliefs, values, root_probs, node_count)


# ---------------------------------------------------------------------------
# Symmetry verification on beliefs and optimal values.
# ---------------------------------------------------------------------------

@dataclass
class SymmetryCheckReport:
    name: str
    passed: bool
    max_dev: float
    tolerance: float
    checked: int
    missing: list = field(default_factory=list)
    witness: tuple | None = None
    policy_consistent: bool | None = None
    policy_witness: tuple | None = None

    def lines(self) -> list[str]:
        out = [f"RESULT {self.name} passed={self.passed} max_dev={self.max_dev:.3e} "
               f"tolerance={self.tolerance:.1e} checked={self.checked}"]
        if self.witness is not None:
            g, h, detail = self.witness
            out.append(f"worst case: element g={g} history [{format_history(h)}] {detail}")
        for g, h in self.missing[:20]:
            out.append(f"missing transformed history for g={g}: [{format_history(h)}]")
        if self.policy_consistent is not None:
            out.append(f"greedy policy equivariant: {self.policy_consistent}")
            if self.policy_witness is not None:
                g, h, orig, got = self.policy_witness
                out.append(
                    f"policy mismatch at g={g} history [{format_history(h)}]: "
                    f"mapped argmax {orig} vs argmax {got}")
        return out


def verify_belief_invariance(pomdp: Pomdp, binding: GroupActionBinding, depth: int,
                             tolerance: float = 1e-12,
                             node_budget: int = 2_000_000) -> SymmetryCheckReport:
    """Check Pr(gs | gh) = Pr(s | h) for every reachable history up to ``depth``."""
    binding.validate()
    sol = exact_q(pomdp, depth, node_budget=node_budget)
    max_dev, witness, missing, checked = 0.0, None, [], 0
    for h, b in sol.beliefs.items():
        for g in binding.group.elements:
            if g == 0:
                continue
            gh = act_on_history(binding, g, h)
            checked += 1
            gb = sol.beliefs.get(gh)
            if gb is None:
                missing.append((g, h))
                continue
            dev = float(np.max(np.abs(gb[binding.state_maps[g]] - b)))
            if dev > max_dev:
                max_dev, witness = dev, (g, h, f"belief deviation {dev:.3e}")
    passed = max_dev < tolerance and not missing
    return SymmetryCheckReport("belief-invariance", passed, max_dev, tolerance,
                               checked, missing, witness)


def verify_value_invariance(pomdp: Pomdp, binding: GroupActionBinding, horizon: int,
                            tolerance: float = 1e-9, policy_tol: float = 1e-9,
                            node_budget: int = 2_000_000) -> SymmetryCheckReport:
    """Check optimal values satisfy Q(gh, ga) = Q(h, a) and V(gh) = V(h) over the
    whole reachable tree, and that greedy argmax sets correspond under the group."""
    binding.validate()
    sol = exact_q(pomdp, horizon, node_budget=node_budget)
    max_dev, witness, missing, checked = 0.0, None, [], 0
    policy_ok, policy_witness = True, None
    for h, row in sol.q.items():
        for g in binding.group.elements:
            if g == 0:
                continue
            gh = act_on_history(binding, g, h)
            checked += 1
            grow = sol.q.get(gh)
            if grow is None:
                missing.append((g, h))
                continue
            qdev = float(np.max(np.abs(grow[binding.action_maps[g]] - row)))
            vdev = abs(sol.values[gh] - sol.values[h])
            dev = max(qdev, vdev)
            if dev > max_dev:
                max_dev, witness = dev, (
                    g, h, f"Q deviation {qdev:.3e}, V deviation {vdev:.3e}")
            mapped = {int(binding.action_maps[g][a]) for a in sol.greedy_set(h, policy_tol)}
            direct = set(sol.greedy_set(gh, policy_tol))
            if mapped != direct and policy_ok:
                policy_ok, policy_witness = False, (g, h, sorted(mapped), sorted(direct))
    passed = max_dev < tolerance and policy_ok and not missing
    return SymmetryCheckReport("value-invariance", passed, max_dev, tolerance, checked,
                               missing, witness, policy_ok, policy_witness)


# ---------------------------------------------------------------------------
# Random symmetric instances (for property tests).
# ---------------------------------------------------------------------------

def random_pomdp(rng: np.random.Generator, n_states: int, n_actions: int, n_obs: int,
                 discount: float = 0.95) -> Pomdp:
    def stochastic(shape):
        raw = rng.random(shape) + 1e-3
        return raw / raw.sum(axis=-1, keepdims=True)

    return Pomdp(
        start=stochastic((n_states,)),
        trans=stochastic((n_states, n_actions, n_states)),
        reward=rng.normal(size=(n_states, n_actions)),
        obs=stochastic((n_actions, n_states, n_obs)),
        obs0=stochastic((n_states, n_obs)),
        discount=discount,
    )


def random_binding(group: Group, rng: np.random.Generator, n_states: int,
                   n_actions: int, n_obs: int) -> GroupActionBinding:
    """Random permutations whose order divides the group order, powered per element."""

    def maps_for(n):
        order = group.order
        perm = np.arange(n)
        shuffled = rng.permutation(n)
        for at in range(0, n - order + 1, order):
            cycle = shuffled[at : at + order]
            perm[cycle] = np.roll(cycle, -1)
        maps = np.zeros((order, n), dtype=np.int64)
        maps[0] = np.arange(n)
        for g in range(1, order):
            maps[g] = perm[maps[g - 1]]
        return maps

    return GroupActionBinding(group, maps_for(n_states), maps_for(n_actions), maps_for(n_obs))


def group_average(pomdp: Pomdp, binding: GroupActionBinding) -> Pomdp:
    """Average every table over the group orbit; the result is exactly invariant."""
    binding.validate()
    n = binding.group.order
    trans = np.zeros_like(pomdp.trans)
    reward = np.zeros_like(pomdp.reward)
    obs = np.zeros_like(pomdp.obs)
    obs0 = np.zeros_like(pomdp.obs0)
    start = np.zeros_like(pomdp.start)
    for g in binding.group.elements:
        sm, am, om = binding.state_maps[g], binding.action_maps[g], binding.obs_maps[g]
        trans += pomdp.trans[np.ix_(sm, am, sm)]
        reward += pomdp.reward[np.ix_(sm, am)]
        obs += pomdp.obs[np.ix_(am, sm, om)]
        obs0 += pomdp.obs0[np.ix_(sm, om)]
        start += pomdp.start[sm]
    out = Pomdp(start / n, trans / n, reward / n, obs / n, obs0 / n, pomdp.discount)
    out.validate(atol=1e-9)
    return out


# ---------------------------------------------------------------------------
# Plain-text table files.
# ---------------------------------------------------------------------------

TABLE_MAGIC = "pomdp-tables 1"


def save_tables(path, pomdp: Pomdp) -> None:
    """One line per nonzero table entry, preceded by sizes and discount."""
    with open(path, "w") as f:
        f.write(TABLE_MAGIC + "\n")
        f.write(f"sizes {pomdp.n_states} {pomdp.n_actions} {pomdp.n_obs}\n")
        f.write(f"discount %.17g\n" % pomdp.discount)
        for s in range(pomdp.n_states):
            if pomdp.start[s]:
                f.write("b0 %d %.17g\n" % (s, pomdp.start[s]))
        for (s, o), v in np.ndenumerate(pomdp.obs0):
            if v:
                f.write("O0 %d %d %.17g\n" % (s, o, v))
        for (s, a, s2), v in np.ndenumerate(pomdp.trans):
            if v:
                f.write("T %d %d %d %.17g\n" % (s, a, s2, v))
        for (s, a), v in np.ndenumerate(pomdp.reward):
            if v:
                f.write("R %d %d %.17g\n" % (s, a, v))
        for (a, s2, o), v in np.ndenumerate(pomdp.obs):
            if v:
                f.write("O %d %d %d %.17g\n" % (a, s2, o, v))


def load_tables(path) -> Pomdp:
    with open(path) as f:
        if f.readline().rstrip("\n") != TABLE_MAGIC:
            raise PomdpError("not a pomdp table file")
        _, s, a, o = f.readline().split()
        s, a, o = int(s), int(a), int(o)
        discount = float(f.readline().split()[1])
        pomdp = Pomdp(
            start=np.zeros(s), trans=np.zeros((s, a, s)), reward=np.zeros((s, a)),
            obs=np.zeros((a, s, o)), obs0=np.zeros((s, o)), discount=discount)
        for line in f:
            fields = line.split()
            tag, idx, v = fields[0], [int(x) for x in fields[1:-1]], float(fields[-1])
            if tag == "b0":
                pomdp.start[idx[0]] = v
            elif tag == "O0":
                pomdp.obs0[tuple(idx)] = v
            elif tag == "T":
                pomdp.trans[tuple(idx)] = v
            elif tag == "R":
                pomdp.reward[tuple(idx)] = v
            elif tag == "O":
                pomdp.obs[tuple(idx)] = v
            else:
                raise PomdpError(f"unknown table line tag {tag!r}")
    pomdp.validate(atol=1e-9)
    return pomdp
