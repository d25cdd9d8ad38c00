"""Parametric state rewards and the training losses.

Rewards are evaluated on a finite feature table, one row per state, so a
model's whole reward vector comes from a single forward pass. Returns are
linear in that vector (see :func:`profile_irl.distributions.discount_matrix`),
which lets every loss gradient be pulled back to a per-state weight vector
and pushed through one backward pass of the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .distributions import OptimalityProfile, discount_matrix
from .mdp import Trajectory
from .ot import DEFAULT_P, ot_loss_from_returns

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class Standardizer:
    """Affine map ``(y - shift) / scale`` applied to targets; never inverted."""

    shift: float = 0.0
    scale: float = 1.0

    @classmethod
    def from_profile(cls, profile: OptimalityProfile) -> "Standardizer":
        std = profile.std()
        return cls(profile.mean(), std if std > 0 else 1.0)

    def __call__(self, y):
        return (np.asarray(y, dtype=float) - self.shift) / self.scale

    def profile(self, profile: OptimalityProfile) -> OptimalityProfile:
        return profile.affine(1.0 / self.scale, -self.shift / self.scale)


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Tabular or one-hidden-layer ReLU reward over a state feature table.

    MLP parameters are laid out flat as ``W1 (h x d), b1 (h), w2 (h), b2``.
    """

    kind: str
    features: np.ndarray
    params: np.ndarray
    hidden: int = 16
    standardizer: Standardizer = field(default_factory=Standardizer)

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float).copy())
        if self.kind not in ("tabular", "mlp"):
            raise ValueError(f"unknown reward model kind {self.kind!r}")
        if self.params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.size}")

    @property
    def n_states(self) -> int:
        return self.features.shape[0]

    @property
    def n_params(self) -> int:
        if self.kind == "tabular":
            return self.n_states
        d, h = self.features.shape[1], self.hidden
        return h * d + 2 * h + 1

    @classmethod
    def tabular(cls, n_states: int, values=None) -> "RewardModel":
        params = np.zeros(n_states) if values is None else np.asarray(values, dtype=float)
        return cls("tabular", np.eye(n_states), params)

    @classmethod
    def mlp(cls, features, hidden: int = 16, seed=0) -> "RewardModel":
        """Uniform init in +-sqrt(1/fan_in) for each layer."""
        features = np.asarray(features, dtype=float)
        d = features.shape[1]
        rng = np.random.default_rng(seed)
        b1 = np.sqrt(1.0 / d)
        b2 = np.sqrt(1.0 / hidden)
        params = np.concatenate([
            rng.uniform(-b1, b1, hidden * d),
            rng.uniform(-b1, b1, hidden),
            rng.uniform(-b2, b2, hidden),
            rng.uniform(-b2, b2, 1),
        ])
        return cls("mlp", features, params, hidden)

    def with_params(self, params) -> "RewardModel":
        return replace(self, params=np.asarray(params, dtype=float))

    def _unpack(self, params=None):
        theta = self.params if params is None else params
        d, h = self.features.shape[1], self.hidden
        w1 = theta[: h * d].reshape(h, d)
        b1 = theta[h * d: h * d + h]
        w2 = theta[h * d + h: h * d + 2 * h]
        b2 = theta[-1]
        return w1, b1, w2, b2

    def state_rewards(self) -> np.ndarray:
        if self.kind == "tabular":
            return self.params.copy()
        w1, b1, w2, b2 = self._unpack()
        z = self.features @ w1.T + b1
        return np.maximum(z, 0.0) @ w2 + b2

    def forward(self, state: int) -> float:
        if self.kind == "tabular":
            return float(self.params[state])
        w1, b1, w2, b2 = self._unpack()
        z = w1 @ self.features[state] + b1
        return float(np.maximum(z, 0.0) @ w2 + b2)

    def backward(self, state_weights) -> np.ndarray:
        """Gradient of ``sum_s state_weights[s] * R(s)`` with respect to the parameters."""
        u = np.asarray(state_weights, dtype=float)
        if self.kind == "tabular":
            return u.copy()
        w1, b1, w2, _ = self._unpack()
        z = self.features @ w1.T + b1
        a = np.maximum(z, 0.0)
        g_w2 = a.T @ u
        g_b2 = u.sum()
        dz = (u[:, None] * w2[None, :]) * (z > 0)
        g_w1 = dz.T @ self.features
        g_b1 = dz.sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])

    def to_dict(self) -> dict:
        return {
            "schema_version": CHECKPOINT_SCHEMA,
            "kind": self.kind,
            "hidden": self.hidden,
            "input_dim": int(self.features.shape[1]),
            "features": self.features.tolist(),
            "params": self.params.tolist(),
            "standardizer": {"shift": self.standardizer.shift, "scale": self.standardizer.scale},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardModel":
        if d.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported reward schema {d.get('schema_version')!r}")
        st = d.get("standardizer", {})
        return cls(
            kind=d["kind"],
            features=np.array(d["features"], dtype=float),
            params=np.array(d["params"], dtype=float),
            hidden=int(d.get("hidden", 16)),
            standardizer=Standardizer(float(st.get("shift", 0.0)), float(st.get("scale", 1.0))),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "RewardModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SupervisionSets:
    """Ordered pairs ``(j, j2)`` meaning return(j) <= return(j2), and fixed labels."""

    pairs: tuple = ()
    fixed: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(a), int(b)) for a, b in self.pairs))
        object.__setattr__(self, "fixed", tuple((int(i), float(y)) for i, y in self.fixed))
        for a, b in self.pairs:
            if a == b:
                raise ValueError(f"pair ({a}, {b}) compares an entry with itself")

    def validate(self, n: int) -> None:
        idx = [i for pr in self.pairs for i in pr] + [i for i, _ in self.fixed]
        bad = [i for i in idx if not 0 <= i < n]
        if bad:
            raise ValueError(f"supervision indices {bad[:5]} outside dataset of size {n}")

    def to_dict(self) -> dict:
        return {"schema_version": 1, "pairs": [list(p) for p in self.pairs],
                "fixed": [list(f) for f in self.fixed]}

    @classmethod
    def from_dict(cls, d: dict) -> "SupervisionSets":
        return cls(tuple(tuple(p) for p in d.get("pairs", [])),
                   tuple(tuple(f) for f in d.get("fixed", [])))


@dataclass(frozen=True)
class LossWeights:
    c_ot: float = 1.0
    c_pw: float = 1.0
    c_fix: float = 1.0

    def __post_init__(self):
        if min(self.c_ot, self.c_pw, self.c_fix) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.c_ot == self.c_pw == self.c_fix == 0:
            raise ValueError("at least one loss weight must be positive")


# ---------------------------------------------------------------------------
# Losses on returns. Each returns (value, d value / d returns).


def pw_loss_from_returns(y, pairs) -> tuple[float, np.ndarray]:
    """Bradley-Terry loss ``sum softplus(y_lo - y_hi)`` over ordered pairs."""
    y = np.asarray(y, dtype=float)
    grad = np.zeros_like(y)
    if not pairs:
        return 0.0, grad
    lo = np.array([a for a, _ in pairs])
    hi = np.array([b for _, b in pairs])
    delta = y[lo] - y[hi]
    loss = float(np.sum(np.logaddexp(0.0, delta)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * delta))
    np.add.at(grad, lo, sig)
    np.add.at(grad, hi, -sig)
    return loss, grad


def fix_loss_from_returns(y, fixed) -> tuple[float, np.ndarray]:
    """Euclidean norm of the residuals at the labelled entries."""
    y = np.asarray(y, dtype=float)
    grad = np.zeros_like(y)
    if not fixed:
        return 0.0, grad
    idx = np.array([i for i, _ in fixed])
    labels = np.array([v for _, v in fixed])
    resid = y[idx] - labels
    norm = float(np.sqrt(np.sum(resid ** 2)))
    if norm > 0:
        np.add.at(grad, idx, resid / norm)
    return norm, grad


# ---------------------------------------------------------------------------
# Public losses on trajectories


def _returns(model: RewardModel, trajs: Sequence[Trajectory], gamma: float) -> tuple[np.ndarray, np.ndarray]:
    mat = discount_matrix(trajs, gamma, model.n_states)
    return mat @ model.state_rewards(), mat


def forward(model: RewardModel, state: int) -> float:
    return model.forward(state)


def pw_loss(model: RewardModel, dataset: Sequence[Trajectory], pairs, gamma: float) -> float:
    y, _ = _returns(model, dataset, gamma)
    return pw_loss_from_returns(y, list(pairs))[0]


def fix_loss(model: RewardModel, dataset: Sequence[Trajectory], fixed, gamma: float) -> float:
    y, _ = _returns(model, dataset, gamma)
    return fix_loss_from_returns(y, list(fixed))[0]


@dataclass
class LossTerms:
    l_ot: float
    l_pw: float
    l_fix: float
    total: float
    grad: np.ndarray
    targets: np.ndarray | None = None


def loss_terms(model: RewardModel, rewards: np.ndarray, batch_mat: np.ndarray, sup_mat: np.ndarray,
               target: OptimalityProfile, supervision: SupervisionSets, weights: LossWeights,
               p: float = DEFAULT_P, lam: float = 0.0, n_bins: int = 0, seed=None,
               frozen_targets: np.ndarray | None = None) -> LossTerms:
    """All three losses and the gradient of their weighted sum.

    ``batch_mat`` and ``sup_mat`` are discount matrices for the minibatch and
    for the indexed dataset that the supervision sets refer to. With
    ``frozen_targets`` the OT targets are reused instead of resampled.
    """
    state_grad = np.zeros(model.n_states)
    l_ot = l_pw = l_fix = 0.0
    targets = None
    if weights.c_ot > 0:
        y = batch_mat @ rewards
        if frozen_targets is None:
            l_ot, targets, dy = ot_loss_from_returns(y, target, p, lam, n_bins, seed)
        else:
            targets = np.asarray(frozen_targets, dtype=float)
            l_ot, dy = _ot_value(y, targets, p)
        state_grad += weights.c_ot * (dy @ batch_mat)
    if (weights.c_pw > 0 and supervision.pairs) or (weights.c_fix > 0 and supervision.fixed):
        y_sup = sup_mat @ rewards
        if weights.c_pw > 0 and supervision.pairs:
            l_pw, dy = pw_loss_from_returns(y_sup, supervision.pairs)
            state_grad += weights.c_pw * (dy @ sup_mat)
        if weights.c_fix > 0 and supervision.fixed:
            l_fix, dy = fix_loss_from_returns(y_sup, supervision.fixed)
            state_grad += weights.c_fix * (dy @ sup_mat)
    total = weights.c_ot * l_ot + weights.c_pw * l_pw + weights.c_fix * l_fix
    return LossTerms(l_ot, l_pw, l_fix, total, model.backward(state_grad), targets)


def _ot_value(y, targets, p) -> tuple[float, np.ndarray]:
    diff = y - targets
    absd = np.abs(diff)
    total = float(np.sum(absd ** p))
    if total == 0:
        return 0.0, np.zeros_like(y)
    return total ** (1.0 / p), total ** (1.0 / p - 1.0) * absd ** (p - 1.0) * np.sign(diff)


def total_loss_and_grad(model: RewardModel, batch: Sequence[Trajectory], target: OptimalityProfile,
                        supervision: SupervisionSets, weights: LossWeights, gamma: float,
                        p: float = DEFAULT_P, lam: float = 0.0, seed=None,
                        dataset: Sequence[Trajectory] | None = None,
                        n_bins: int = 0) -> tuple[float, np.ndarray]:
    """Weighted total loss and its gradient with the OT targets held constant.

    Supervision indices refer to ``dataset`` (the augmented dataset); it
    defaults to ``batch``.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    dataset = batch if dataset is None else list(dataset)
    supervision.validate(len(dataset))
    batch_mat = discount_matrix(batch, gamma, model.n_states)
    sup_mat = discount_matrix(dataset, gamma, model.n_states)
    terms = loss_terms(model, model.state_rewards(), batch_mat, sup_mat, target, supervision,
                       weights, p, lam, n_bins, seed)
    return terms.total, terms.grad
