"""Finite MDPs, tabular policies, trajectory sampling and enumeration.

States are integer indices. Gridworld cells map to indices row-major,
``index = y * width + x``, with ``y = 0`` the bottom row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ACTIONS = ("up", "right", "down", "left")
_MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))

DEFAULT_NODE_BUDGET = 1_000_000
SCHEMA_VERSION = 1


class EnumerationBudgetExceeded(RuntimeError):
    """Raised when trajectory enumeration visits more nodes than allowed."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with state-only rewards and absorbing terminal states.

    ``transition[s, a, s2]`` is the probability of moving to ``s2``.
    """

    transition: np.ndarray
    initial_dist: np.ndarray
    gt_reward: np.ndarray
    terminals: frozenset
    horizon: int
    features: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=float)
        p0 = np.asarray(self.initial_dist, dtype=float)
        r = np.asarray(self.gt_reward, dtype=float)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "initial_dist", p0)
        object.__setattr__(self, "gt_reward", r)
        object.__setattr__(self, "terminals", frozenset(int(s) for s in self.terminals))
        if self.features is not None:
            object.__setattr__(self, "features", np.asarray(self.features, dtype=float))

        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {t.shape}")
        n = t.shape[0]
        if p0.shape != (n,) or r.shape != (n,):
            raise ValueError("initial_dist and gt_reward must have one entry per state")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if np.any(t < 0) or np.max(np.abs(t.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        if np.any(p0 < 0) or abs(p0.sum() - 1.0) > 1e-12:
            raise ValueError("initial_dist must be a probability vector")
        for s in self.terminals:
            if not 0 <= s < n:
                raise ValueError(f"terminal state {s} out of range")
            if np.any(t[s, :, s] != 1.0):
                raise ValueError(f"terminal state {s} must be absorbing")
        if self.features is not None and self.features.shape[0] != n:
            raise ValueError("features must have one row per state")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def is_terminal(self, s: int) -> bool:
        return s in self.terminals

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "gt_reward": self.gt_reward.tolist(),
            "terminals": sorted(self.terminals),
            "horizon": self.horizon,
            "features": None if self.features is None else self.features.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        feats = d.get("features")
        return cls(
            transition=np.array(d["transition"], dtype=float),
            initial_dist=np.array(d["initial_dist"], dtype=float),
            gt_reward=np.array(d["gt_reward"], dtype=float),
            terminals=frozenset(d["terminals"]),
            horizon=int(d["horizon"]),
            features=None if feats is None else np.array(feats, dtype=float),
        )


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError("policy probs must be a (states, actions) matrix")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must be probability vectors")

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "TabularPolicy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), np.asarray(actions)] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    def epsilon_greedy(self, eps: float) -> "TabularPolicy":
        """Mix with the uniform policy: random action with probability ``eps``."""
        n_actions = self.probs.shape[1]
        probs = (1.0 - eps) * self.probs + eps / n_actions
        # renormalise so rows sum to one within 1e-12 after mixing
        return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class Trajectory:
    """A cut-off trajectory: no terminal state before the last position."""

    states: tuple
    actions: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        if self.actions is not None:
            object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
            if len(self.actions) != len(self.states) - 1:
                raise ValueError("a trajectory of length l carries l - 1 actions")
        if not self.states:
            raise ValueError("trajectory must contain at least one state")

    def __len__(self) -> int:
        return len(self.states)

    def suffix(self, start: int) -> "Trajectory":
        acts = None if self.actions is None else self.actions[start:]
        return Trajectory(self.states[start:], acts)

    def to_json(self) -> str:
        return json.dumps({"states": list(self.states), "actions": list(self.actions or [])})

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        d = json.loads(line)
        states = d["states"]
        actions = d.get("actions") or None
        if actions is not None and len(actions) != len(states) - 1:
            actions = None
        return cls(tuple(states), None if actions is None else tuple(actions))


def check_cutoff(traj: Trajectory, mdp: TabularMdp) -> bool:
    """True if ``traj`` is a valid image of the cut-off map for ``mdp``."""
    if not 1 <= len(traj) <= mdp.horizon + 1:
        return False
    return not any(mdp.is_terminal(s) for s in traj.states[:-1])


def write_jsonl(trajs: Iterable[Trajectory], path) -> None:
    with open(path, "w") as fh:
        for t in trajs:
            fh.write(t.to_json() + "\n")


def read_jsonl(path) -> list[Trajectory]:
    with open(path) as fh:
        return [Trajectory.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Gridworlds


@dataclass(frozen=True)
class GridworldSpec:
    width: int
    height: int
    goal_cells: dict = field(default_factory=dict)
    fail_cells: dict = field(default_factory=dict)
    step_reward: float = 0.0
    slip_prob: float = 0.0
    start_cells: tuple = ((0, 0),)
    horizon: int = 50
    walls: tuple = ()

    def __post_init__(self):
        # cells may arrive as lists (json); normalise to hashable tuples
        norm = lambda cells: {tuple(int(v) for v in c): float(r) for c, r in dict(cells).items()}
        object.__setattr__(self, "goal_cells", norm(self.goal_cells))
        object.__setattr__(self, "fail_cells", norm(self.fail_cells))
        object.__setattr__(self, "start_cells", tuple(tuple(int(v) for v in c) for c in self.start_cells))
        object.__setattr__(self, "walls", tuple(tuple(int(v) for v in c) for c in self.walls))

    def index(self, cell) -> int:
        x, y = cell
        return y * self.width + x

    def cell(self, index: int) -> tuple:
        return index % self.width, index // self.width

    @property
    def n_states(self) -> int:
        return self.width * self.height

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "width": self.width,
            "height": self.height,
            "goal_cells": [[list(c), r] for c, r in self.goal_cells.items()],
            "fail_cells": [[list(c), r] for c, r in self.fail_cells.items()],
            "step_reward": self.step_reward,
            "slip_prob": self.slip_prob,
            "start_cells": [list(c) for c in self.start_cells],
            "horizon": self.horizon,
            "walls": [list(c) for c in self.walls],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridworldSpec":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            goal_cells={tuple(c): r for c, r in d.get("goal_cells", [])},
            fail_cells={tuple(c): r for c, r in d.get("fail_cells", [])},
            step_reward=float(d.get("step_reward", 0.0)),
            slip_prob=float(d.get("slip_prob", 0.0)),
            start_cells=tuple(tuple(c) for c in d["start_cells"]),
            horizon=int(d.get("horizon", 50)),
            walls=tuple(tuple(c) for c in d.get("walls", [])),
        )


def grid_features(spec: GridworldSpec) -> np.ndarray:
    """Normalised (x, y) plus goal and fail indicator columns."""
    feats = np.zeros((spec.n_states, 4))
    for s in range(spec.n_states):
        x, y = spec.cell(s)
        feats[s, 0] = x / max(spec.width - 1, 1)
        feats[s, 1] = y / max(spec.height - 1, 1)
        feats[s, 2] = float((x, y) in spec.goal_cells)
        feats[s, 3] = float((x, y) in spec.fail_cells)
    return feats


def build_gridworld(spec: GridworldSpec) -> TabularMdp:
    """Four-neighbour gridworld; with ``slip_prob`` a uniformly random action is taken."""
    if spec.width < 1 or spec.height < 1:
        raise ValueError("grid dimensions must be positive")
    if not 0.0 <= spec.slip_prob <= 1.0:
        raise ValueError("slip_prob must lie in [0, 1]")
    if not spec.start_cells:
        raise ValueError("at least one start cell is required")
    overlap = set(spec.goal_cells) & set(spec.fail_cells)
    if overlap:
        raise ValueError(f"cells {sorted(overlap)} are both goal and fail")
    inside = lambda c: 0 <= c[0] < spec.width and 0 <= c[1] < spec.height
    all_cells = [*spec.goal_cells, *spec.fail_cells, *spec.start_cells, *spec.walls]
    for c in all_cells:
        if not inside(c):
            raise ValueError(f"cell {c} outside {spec.width}x{spec.height} grid")
    walls = set(spec.walls)
    if walls & (set(spec.start_cells) | set(spec.goal_cells) | set(spec.fail_cells)):
        raise ValueError("walls may not coincide with start, goal or fail cells")

    n, n_a = spec.n_states, len(_MOVES)
    terminals = {spec.index(c) for c in (*spec.goal_cells, *spec.fail_cells)}

    def target(s, a):
        x, y = spec.cell(s)
        dx, dy = _MOVES[a]
        c = (x + dx, y + dy)
        return spec.index(c) if inside(c) and c not in walls else s

    trans = np.zeros((n, n_a, n))
    for s in range(n):
        if s in terminals:
            trans[s, :, s] = 1.0
            continue
        for a in range(n_a):
            trans[s, a, target(s, a)] += 1.0 - spec.slip_prob
            for b in range(n_a):
                trans[s, a, target(s, b)] += spec.slip_prob / n_a

    reward = np.full(n, float(spec.step_reward))
    for c, r in {**spec.goal_cells, **spec.fail_cells}.items():
        reward[spec.index(c)] = r
    p0 = np.zeros(n)
    for c in spec.start_cells:
        p0[spec.index(c)] += 1.0 / len(spec.start_cells)

    return TabularMdp(trans, p0, reward, frozenset(terminals), spec.horizon, grid_features(spec))


def figure1_corridor(length: int = 10, start: int | None = None, horizon: int = 30,
                     slip_prob: float = 0.0, step_reward: float = 0.0) -> GridworldSpec:
    """1-D corridor: fail cell at the left end (-10), goal at the right end (+10)."""
    if start is None:
        start = (length - 1) // 2
    return GridworldSpec(
        width=length, height=1,
        goal_cells={(length - 1, 0): 10.0},
        fail_cells={(0, 0): -10.0},
        step_reward=step_reward, slip_prob=slip_prob,
        start_cells=((start, 0),), horizon=horizon,
    )


def two_corridor(vertical: int = 2, horizontal: int = 8) -> GridworldSpec:
    """L-shaped world: from the start corner one arm goes up, one goes right.

    Both arm ends are terminal; cells off the two arms are walls.
    """
    width, height = horizontal, vertical
    arms = {(x, 0) for x in range(width)} | {(0, y) for y in range(height)}
    walls = tuple((x, y) for y in range(height) for x in range(width) if (x, y) not in arms)
    return GridworldSpec(
        width=width, height=height,
        goal_cells={(width - 1, 0): 10.0},
        fail_cells={(0, height - 1): -10.0},
        start_cells=((0, 0),), horizon=width + height,
        walls=walls,
    )


def two_corridor_policy(spec: GridworldSpec, p_up: float = 0.8) -> TabularPolicy:
    """Moves up from the start with ``p_up``, otherwise right; right everywhere else."""
    up, right = ACTIONS.index("up"), ACTIONS.index("right")
    probs = np.zeros((spec.n_states, len(ACTIONS)))
    probs[:, right] = 1.0
    s0 = spec.index(spec.start_cells[0])
    probs[s0] = 0.0
    probs[s0, up] = p_up
    probs[s0, right] = 1.0 - p_up
    return TabularPolicy(probs)


def benchmark_grid(size: int = 10, slip_prob: float = 0.0, horizon: int = 40,
                   random_start: bool = True, fails=None) -> GridworldSpec:
    """The 10x10 evaluation world: goal in the top-right corner, pits in the
    other three corners and the centre.

    Episodes start in a uniformly random non-terminal cell unless
    ``random_start`` is false, in which case they start bottom-left (which
    then must not be a pit).
    """
    if fails is None:
        mid = size // 2
        fails = ((0, 0), (size - 1, 0), (0, size - 1), (mid, mid))
    goal = (size - 1, size - 1)
    fails = {tuple(c): -10.0 for c in fails if tuple(c) != goal}
    if random_start:
        starts = tuple((x, y) for y in range(size) for x in range(size)
                       if (x, y) != goal and (x, y) not in fails)
    else:
        starts = ((0, 0),)
    return GridworldSpec(
        width=size, height=size,
        goal_cells={goal: 10.0},
        fail_cells=fails,
        step_reward=0.0, slip_prob=slip_prob,
        start_cells=starts, horizon=horizon,
    )


ENVIRONMENTS = {
    "figure1": lambda: figure1_corridor(),
    "grid10": lambda: benchmark_grid(),
    "two-corridor": lambda: two_corridor(),
}


# ---------------------------------------------------------------------------
# Rollouts


def _check_dims(mdp: TabularMdp, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})"
        )


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(idx, len(p) - 1)


def sample_trajectory(mdp: TabularMdp, policy: TabularPolicy, seed) -> Trajectory:
    """Roll out ``policy`` from P0 and apply the cut-off map."""
    _check_dims(mdp, policy)
    rng = _as_rng(seed)
    s = _draw(rng, mdp.initial_dist)
    states, actions = [s], []
    for _ in range(mdp.horizon):
        if mdp.is_terminal(s):
            break
        a = _draw(rng, policy.probs[s])
        s = _draw(rng, mdp.transition[s, a])
        states.append(s)
        actions.append(a)
    return Trajectory(tuple(states), tuple(actions))


def sample_trajectories(mdp: TabularMdp, policy: TabularPolicy, n: int, seed) -> list[Trajectory]:
    rng = _as_rng(seed)
    return [sample_trajectory(mdp, policy, rng) for _ in range(n)]


def enumerate_trajectories(mdp: TabularMdp, policy: TabularPolicy, prob_floor: float = 0.0,
                           node_budget: int = DEFAULT_NODE_BUDGET) -> list[tuple[Trajectory, float]]:
    """All cut-off trajectories with their probabilities, by depth-first search.

    Branches whose probability drops below ``prob_floor`` are pruned.
    Different action sequences producing the same state sequence are summed.
    """
    _check_dims(mdp, policy)
    # state-to-state kernel under the policy: K[s, s2] = sum_a pi(a|s) T(s, a, s2)
    kernel = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    out: list[tuple[Trajectory, float]] = []
    nodes = 0
    stack = [((int(s),), float(p)) for s, p in reversed(list(enumerate(mdp.initial_dist))) if p > 0]
    while stack:
        states, prob = stack.pop()
        nodes += 1
        if nodes > node_budget:
            raise EnumerationBudgetExceeded(f"enumeration exceeded {node_budget} nodes")
        if prob < prob_floor:
            continue
        s = states[-1]
        if mdp.is_terminal(s) or len(states) == mdp.horizon + 1:
            out.append((Trajectory(states), prob))
            continue
        nxt = np.nonzero(kernel[s])[0]
        for s2 in nxt[::-1]:
            stack.append((states + (int(s2),), prob * float(kernel[s, s2])))
    return out


# ---------------------------------------------------------------------------
# Planning


def bellman_backup(mdp: TabularMdp, reward: np.ndarray, values: np.ndarray, gamma: float):
    """One optimality backup. Terminal states keep their own reward (collected once)."""
    q = mdp.transition @ values  # (S, A)
    backed = reward + gamma * q.max(axis=1)
    term = np.fromiter(mdp.terminals, dtype=int, count=len(mdp.terminals))
    backed[term] = reward[term]
    return backed, q


def greedy_actions(q: np.ndarray, tie_tol: float = 1e-12) -> np.ndarray:
    """Argmax per row; near-ties resolve to the lowest action index."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tie_tol, axis=1)


def value_iteration(mdp: TabularMdp, reward, gamma: float, tol: float = 1e-10,
                    max_iters: int = 100_000) -> tuple[TabularPolicy, np.ndarray]:
    """Optimal values for state rewards ``reward`` and the greedy deterministic policy.

    The policy picks ``argmax_a E[V(s')]``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("value iteration needs 0 <= gamma < 1")
    reward = np.asarray(reward, dtype=float)
    values = reward.copy()
    residual = np.inf
    for _ in range(max_iters):
        new, _ = bellman_backup(mdp, reward, values, gamma)
        residual = float(np.max(np.abs(new - values)))
        values = new
        if residual < tol:
            break
    final, q = bellman_backup(mdp, reward, values, gamma)
    residual = float(np.max(np.abs(final - values)))
    if residual >= 1e-9:
        raise ConvergenceError("value iteration did not converge", residual)
    acts = greedy_actions(q)
    return TabularPolicy.deterministic(acts, mdp.n_actions), values


def policy_values(mdp: TabularMdp, policy: TabularPolicy, reward, gamma: float) -> np.ndarray:
    """Exact discounted values of ``policy`` by a linear solve (gamma < 1)."""
    reward = np.asarray(reward, dtype=float)
    kernel = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    for s in mdp.terminals:
        kernel[s] = 0.0
    return np.linalg.solve(np.eye(mdp.n_states) - gamma * kernel, reward)
