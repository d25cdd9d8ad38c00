"""Return distributions over trajectory suffixes, exact and empirical.

The empirical estimate weights every suffix of every demonstration
equally, which realises the length-rescaled future measure: a trajectory
of length l contributes l suffixes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .mdp import DEFAULT_NODE_BUDGET, TabularMdp, TabularPolicy, Trajectory, enumerate_trajectories

MERGE_TOL = 1e-12

RewardLike = Union[np.ndarray, Sequence[float], Callable[[int], float]]


def _reward_vector(reward: RewardLike, n_states: int | None = None) -> np.ndarray | None:
    if hasattr(reward, "state_rewards"):
        return reward.state_rewards()
    if callable(reward):
        if n_states is None:
            return None
        return np.array([reward(s) for s in range(n_states)], dtype=float)
    return np.asarray(reward, dtype=float)


def merge_atoms(locations, weights, tol: float = MERGE_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Sort atoms (stable) and merge neighbours closer than ``tol``."""
    locations = np.asarray(locations, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(locations, kind="stable")
    locs, wts = locations[order], weights[order]
    out_l, out_w = [], []
    for x, w in zip(locs, wts):
        if out_l and x - out_l[-1] <= tol:
            out_w[-1] += w
        else:
            out_l.append(x)
            out_w.append(w)
    return np.array(out_l), np.array(out_w)


@dataclass(frozen=True, eq=False)
class OptimalityProfile:
    """Weighted atoms on the real line, sorted ascending."""

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if loc.shape != w.shape or loc.size == 0:
            raise ValueError("profile needs matching, nonempty locations and weights")
        if not np.all(np.isfinite(loc)):
            raise ValueError("profile locations must be finite")
        if np.any(w <= 0):
            raise ValueError("profile weights must be positive")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"profile weights sum to {w.sum()!r}, not 1")
        if np.any(np.diff(loc) < 0):
            raise ValueError("profile atoms must be sorted by location")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_atoms(cls, locations, weights=None, merge: bool = True) -> "OptimalityProfile":
        locations = np.asarray(locations, dtype=float)
        if weights is None:
            weights = np.full(locations.size, 1.0 / locations.size)
        weights = np.asarray(weights, dtype=float)
        keep = weights > 0
        locations, weights = locations[keep], weights[keep] / weights[keep].sum()
        if merge:
            locations, weights = merge_atoms(locations, weights)
        else:
            order = np.argsort(locations, kind="stable")
            locations, weights = locations[order], weights[order]
        return cls(locations, weights)

    @classmethod
    def from_samples(cls, values, n_bins: int = 0) -> "OptimalityProfile":
        """Uniform atoms at ``values`` (``n_bins=0``) or an equal-width histogram."""
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            raise ValueError("cannot build a profile from no samples")
        if n_bins == 0:
            return cls.from_atoms(values)
        centers, counts = histogram_atoms(values, n_bins)
        return cls(centers, counts / counts.sum())

    def __len__(self) -> int:
        return self.locations.size

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.locations.tolist(), self.weights.tolist()))

    @property
    def spread(self) -> float:
        return float(self.locations[-1] - self.locations[0])

    def mean(self) -> float:
        return float(self.weights @ self.locations)

    def std(self) -> float:
        m = self.mean()
        return float(np.sqrt(self.weights @ (self.locations - m) ** 2))

    def affine(self, scale: float, shift: float) -> "OptimalityProfile":
        """Profile of ``scale * X + shift``; ``scale`` must be positive."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        return OptimalityProfile(self.locations * scale + shift, self.weights)

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, "atoms": [[l, w] for l, w in self.atoms]})

    @classmethod
    def from_json(cls, text: str) -> "OptimalityProfile":
        atoms = json.loads(text)["atoms"]
        return cls.from_atoms([a[0] for a in atoms], [a[1] for a in atoms])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "OptimalityProfile":
        with open(path) as fh:
            return cls.from_json(fh.read())

    @classmethod
    def from_csv(cls, path) -> "OptimalityProfile":
        """Read ``location,weight`` rows; a header row is optional. Weights are renormalised."""
        locs, wts = [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    locs.append(float(row[0]))
                    wts.append(float(row[1]))
                except ValueError:
                    if locs:
                        raise
        return cls.from_atoms(locs, wts)


def histogram_atoms(values, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Bin centres and counts of an equal-width histogram on [min, max].

    Empty bins are dropped; a degenerate range gives a single atom.
    """
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= MERGE_TOL:
        return np.array([lo]), np.array([float(values.size)])
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    keep = counts > 0
    return centers[keep], counts[keep].astype(float)


def bin_index(values, locations_lo: float, locations_hi: float, n_bins: int) -> np.ndarray:
    """Histogram bin of each value, consistent with :func:`histogram_atoms`."""
    values = np.asarray(values, dtype=float)
    if locations_hi - locations_lo <= MERGE_TOL:
        return np.zeros(values.size, dtype=int)
    edges = np.linspace(locations_lo, locations_hi, n_bins + 1)
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, n_bins - 1)


# ---------------------------------------------------------------------------
# Augmented dataset


@dataclass(frozen=True)
class AugmentedDataset:
    """All suffixes of all demonstrations, as ``(source, start_step, suffix)``."""

    entries: tuple

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def suffixes(self) -> list[Trajectory]:
        return [e[2] for e in self.entries]

    def full_trajectory_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e[1] == 0]


def augment(dataset: Sequence[Trajectory]) -> AugmentedDataset:
    if len(dataset) == 0:
        raise ValueError("cannot augment an empty dataset")
    entries = []
    for i, traj in enumerate(dataset):
        for j in range(len(traj)):
            entries.append((i, j, traj.suffix(j)))
    return AugmentedDataset(tuple(entries))


# ---------------------------------------------------------------------------
# Returns


def traj_return(reward: RewardLike, traj: Trajectory, gamma: float) -> float:
    """Sum of ``gamma**t * R(s_t)`` over the trajectory."""
    vec = _reward_vector(reward)
    total, disc = 0.0, 1.0
    for s in traj.states:
        total += disc * (vec[s] if vec is not None else reward(s))
        disc *= gamma
        if disc == 0.0:
            break
    return float(total)


def discount_matrix(trajs: Sequence[Trajectory], gamma: float, n_states: int) -> np.ndarray:
    """Row i holds ``sum_t gamma**t e_{s_t}`` for trajectory i.

    Returns for a state-reward vector ``r`` are ``discount_matrix(...) @ r``,
    and by linearity the same matrix carries return gradients.
    """
    mat = np.zeros((len(trajs), n_states))
    for i, traj in enumerate(trajs):
        disc = 1.0
        for s in traj.states:
            mat[i, s] += disc
            disc *= gamma
            if disc == 0.0:
                break
    return mat


def returns(reward: RewardLike, trajs: Sequence[Trajectory], gamma: float) -> np.ndarray:
    return np.array([traj_return(reward, t, gamma) for t in trajs])


def empirical_return_distribution(reward: RewardLike, aug: AugmentedDataset | Sequence[Trajectory],
                                  gamma: float, n_bins: int = 0) -> OptimalityProfile:
    suffixes = aug.suffixes if isinstance(aug, AugmentedDataset) else list(aug)
    if not suffixes:
        raise ValueError("empty augmented dataset")
    return OptimalityProfile.from_samples(returns(reward, suffixes, gamma), n_bins)


# ---------------------------------------------------------------------------
# Exact measures


@dataclass(frozen=True)
class MarkedTrajectoryDist:
    """Distribution over trajectories with a marked time step."""

    entries: tuple  # ((Trajectory, step), probability)

    def __post_init__(self):
        total = sum(p for _, p in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"marked distribution sums to {total}")
        for (traj, t), _ in self.entries:
            if not 0 <= t <= len(traj) - 1:
                raise ValueError("marked step outside the trajectory")

    def state_occupancy(self) -> dict[int, float]:
        """Push-forward through ``(s, t) -> s_t``."""
        occ: dict[int, float] = {}
        for (traj, t), p in self.entries:
            s = traj.states[t]
            occ[s] = occ.get(s, 0.0) + p
        return occ

    def future_measure(self) -> dict[Trajectory, float]:
        """Push-forward through ``(s, t) -> s[t:]``."""
        fut: dict[Trajectory, float] = {}
        for (traj, t), p in self.entries:
            suf = Trajectory(traj.states[t:])
            fut[suf] = fut.get(suf, 0.0) + p
        return fut


def _length_normaliser(trajs_with_probs) -> float:
    return sum(len(t) * p for t, p in trajs_with_probs)


def rescaled_traj_distribution(trajs_with_probs) -> list[tuple[Trajectory, float]]:
    """Reweight trajectory probabilities in proportion to trajectory length."""
    z = _length_normaliser(trajs_with_probs)
    return [(t, len(t) * p / z) for t, p in trajs_with_probs]


def marked_trajectory_dist(trajs_with_probs) -> MarkedTrajectoryDist:
    z = _length_normaliser(trajs_with_probs)
    entries = []
    for traj, p in trajs_with_probs:
        for t in range(len(traj)):
            entries.append(((traj, t), p / z))
    return MarkedTrajectoryDist(tuple(entries))


def pushforward(mapping: dict, fn) -> OptimalityProfile:
    locs = [fn(k) for k in mapping]
    return OptimalityProfile.from_atoms(locs, list(mapping.values()))


def exact_return_distribution(mdp: TabularMdp, policy: TabularPolicy, reward: RewardLike,
                              gamma: float, node_budget: int = DEFAULT_NODE_BUDGET) -> OptimalityProfile:
    """Push the future measure of ``(mdp, policy)`` through the discounted return."""
    vec = _reward_vector(reward, mdp.n_states)
    marked = marked_trajectory_dist(enumerate_trajectories(mdp, policy, node_budget=node_budget))
    return pushforward(marked.future_measure(), lambda suf: traj_return(vec, suf, gamma))


def exact_reward_distribution(mdp: TabularMdp, policy: TabularPolicy, reward: RewardLike,
                              node_budget: int = DEFAULT_NODE_BUDGET) -> OptimalityProfile:
    """Push the state occupancy measure through the reward."""
    vec = _reward_vector(reward, mdp.n_states)
    marked = marked_trajectory_dist(enumerate_trajectories(mdp, policy, node_budget=node_budget))
    return pushforward(marked.state_occupancy(), lambda s: float(vec[s]))


def total_variation(p: OptimalityProfile, q: OptimalityProfile, tol: float = MERGE_TOL) -> float:
    """Total variation between two atomic profiles (atoms within ``tol`` coincide)."""
    locs = np.concatenate([p.locations, q.locations])
    w = np.concatenate([p.weights, -q.weights])
    _, diff = merge_atoms(locs, w, tol)
    return 0.5 * float(np.abs(diff).sum())
