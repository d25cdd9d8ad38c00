"""Minibatch training of a reward model against an optimality profile."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .distributions import OptimalityProfile, augment, discount_matrix
from .mdp import Trajectory
from .ot import SinkhornConvergenceError
from .reward import LossWeights, RewardModel, Standardizer, SupervisionSets, loss_terms

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
LOG_COLUMNS = ("epoch", "l_ot", "l_pw", "l_fix", "l_tot", "lr", "lambda", "grad_norm")


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, reason: str):
        super().__init__(f"training aborted at epoch {epoch}: {reason}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``lambda_*`` values are fractions of the (standardised) target spread.
    Once the scheduled fraction falls below ``lambda_exact_below`` the exact
    monotone plan replaces Sinkhorn.
    """

    gamma: float = 0.9
    p: float = 2.0
    lambda_init: float = 0.1
    lambda_decay: float = 0.99
    lambda_floor: float = 0.0
    lambda_exact_below: float = 1e-3
    lr_init: float = 1e-2
    lr_decay: float = 0.995
    lr_floor: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rms_decay: float = 0.9
    batch_size: int = 64
    n_epochs: int = 1000
    c_ot: float = 1.0
    c_pw: float = 0.2
    c_fix: float = 1.0
    n_bins: int = 0
    seed: int = 0
    grad_clip: float = 10.0
    standardize: bool = True
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_epochs < 0:
            raise ValueError("n_epochs must be >= 0")
        if self.optimizer not in ("sgd", "rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.gamma <= 1.0 or self.p < 1:
            raise ValueError("need gamma in [0, 1] and p >= 1")
        if self.lr_init <= 0 or self.lr_floor < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("learning-rate schedule must be positive and non-increasing")
        if self.lambda_init < 0 or self.lambda_floor < 0 or not 0 < self.lambda_decay <= 1:
            raise ValueError("lambda schedule must be nonnegative and non-increasing")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.c_ot, self.c_pw, self.c_fix)

    def lr_at(self, epoch: int) -> float:
        return max(self.lr_init * self.lr_decay ** epoch, self.lr_floor)

    def lambda_at(self, epoch: int) -> float:
        """Scheduled regulariser as a fraction of the target spread (0 means exact)."""
        rel = max(self.lambda_init * self.lambda_decay ** epoch, self.lambda_floor)
        return 0.0 if rel < self.lambda_exact_below else rel

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r["epoch"], *(repr(float(r[c])) for c in LOG_COLUMNS[1:])])

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(epoch=int(row["epoch"]), **{c: float(row[c]) for c in LOG_COLUMNS[1:]})
        return out


# ---------------------------------------------------------------------------
# Optimisers. State is a plain dict of lists so it serialises exactly.


def _init_opt_state(n: int) -> dict:
    return {"t": 0, "m": [0.0] * n, "v": [0.0] * n}


def _opt_step(config: TrainConfig, theta: np.ndarray, grad: np.ndarray, lr: float,
              state: dict) -> tuple[np.ndarray, dict]:
    m = np.array(state["m"], dtype=float)
    v = np.array(state["v"], dtype=float)
    t = state["t"] + 1
    if config.optimizer == "sgd":
        step = lr * grad
    elif config.optimizer == "rmsprop":
        v = config.rms_decay * v + (1 - config.rms_decay) * grad ** 2
        step = lr * grad / (np.sqrt(v) + config.adam_eps)
    else:
        m = config.beta1 * m + (1 - config.beta1) * grad
        v = config.beta2 * v + (1 - config.beta2) * grad ** 2
        m_hat = m / (1 - config.beta1 ** t)
        v_hat = v / (1 - config.beta2 ** t)
        step = lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return theta - step, {"t": t, "m": m.tolist(), "v": v.tolist()}


# ---------------------------------------------------------------------------


@dataclass
class _Problem:
    """Precomputed, standardised inputs of one training run."""

    dataset_mat: np.ndarray
    sup_mat: np.ndarray
    supervision: SupervisionSets
    target: OptimalityProfile
    standardizer: Standardizer


def _prepare(dataset: Sequence[Trajectory], target: OptimalityProfile,
             supervision: SupervisionSets, model: RewardModel, config: TrainConfig) -> _Problem:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    aug = augment(dataset)
    supervision.validate(len(aug))
    std = Standardizer.from_profile(target) if config.standardize else Standardizer()
    mat = discount_matrix(aug.suffixes, config.gamma, model.n_states)

    # supervision only touches a few rows; keep those and remap the indices
    used = sorted({i for pr in supervision.pairs for i in pr} | {i for i, _ in supervision.fixed})
    remap = {old: new for new, old in enumerate(used)}
    sup = SupervisionSets(
        tuple((remap[a], remap[b]) for a, b in supervision.pairs),
        tuple((remap[i], float(std(y))) for i, y in supervision.fixed),
    )
    sup_mat = mat[used] if used else np.zeros((0, model.n_states))
    return _Problem(mat, sup_mat, sup, std.profile(target), std)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _run(problem: _Problem, model: RewardModel, config: TrainConfig, start_epoch: int,
         opt_state: dict, run_log: RunLog, run_dir: Path | None) -> tuple[RewardModel, RunLog, dict]:
    theta = model.params.copy()
    n_rows = problem.dataset_mat.shape[0]
    spread = problem.target.spread
    weights = config.weights
    for epoch in range(start_epoch, config.n_epochs):
        rng = _epoch_rng(config.seed, epoch)
        b = min(config.batch_size, n_rows)
        idx = rng.choice(n_rows, size=b, replace=False)
        lr = config.lr_at(epoch)
        lam = config.lambda_at(epoch) * spread ** config.p
        current = model.with_params(theta)
        rewards = current.state_rewards()
        if not np.all(np.isfinite(rewards)):
            raise TrainingAborted(epoch, "non-finite rewards")
        try:
            terms = loss_terms(current, rewards, problem.dataset_mat[idx],
                               problem.sup_mat, problem.target, problem.supervision, weights,
                               config.p, lam, config.n_bins, rng)
        except SinkhornConvergenceError as exc:
            raise TrainingAborted(epoch, str(exc)) from exc
        if not math.isfinite(terms.total) or not np.all(np.isfinite(terms.grad)):
            raise TrainingAborted(epoch, f"non-finite loss (l_ot={terms.l_ot}, "
                                         f"l_pw={terms.l_pw}, l_fix={terms.l_fix})")
        grad = terms.grad
        gnorm = float(np.linalg.norm(grad))
        if config.grad_clip > 0 and gnorm > config.grad_clip:
            grad = grad * (config.grad_clip / gnorm)
        theta, opt_state = _opt_step(config, theta, grad, lr, opt_state)
        run_log.append(epoch=epoch, l_ot=terms.l_ot, l_pw=terms.l_pw, l_fix=terms.l_fix,
                       l_tot=terms.total, lr=lr, **{"lambda": lam}, grad_norm=gnorm)
        done = epoch + 1
        if run_dir is not None and config.checkpoint_every > 0 and done % config.checkpoint_every == 0:
            ckpt = make_checkpoint(model.with_params(theta), opt_state, done, run_log, config)
            save_checkpoint(ckpt, Path(run_dir) / "checkpoints" / f"ckpt_{done:06d}.json")
    return model.with_params(theta), run_log, opt_state


def fit(dataset: Sequence[Trajectory], target: OptimalityProfile, supervision: SupervisionSets,
        model: RewardModel, config: TrainConfig, run_dir=None) -> tuple[RewardModel, RunLog]:
    """Fit ``model`` so the suffix return distribution matches ``target``.

    Each epoch draws one minibatch from the augmented dataset (without
    replacement), evaluates the weighted losses, and takes one optimiser step.
    Supervision indices refer to the augmented dataset. Target locations and
    fixed labels are standardised first; the transform is stored on the model.
    """
    problem = _prepare(dataset, target, supervision, model, config)
    model = replace(model, standardizer=problem.standardizer)
    model, run_log, _ = fit_with_state(problem, model, config, run_dir)
    return model, run_log


def fit_with_state(problem: _Problem, model: RewardModel, config: TrainConfig, run_dir=None,
                   start_epoch: int = 0, opt_state: dict | None = None,
                   run_log: RunLog | None = None):
    opt_state = opt_state or _init_opt_state(model.n_params)
    run_log = run_log if run_log is not None else RunLog()
    return _run(problem, model, config, start_epoch, opt_state, run_log,
                None if run_dir is None else Path(run_dir))


def make_checkpoint(model: RewardModel, opt_state: dict, epoch: int, run_log: RunLog,
                    config: TrainConfig) -> dict:
    return {
        "schema_version": CHECKPOINT_SCHEMA,
        "epoch": epoch,
        "model": model.to_dict(),
        "optimizer": opt_state,
        "config": config.to_dict(),
        "log": run_log.records,
    }


def save_checkpoint(ckpt: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(ckpt, fh)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        ckpt = json.load(fh)
    if ckpt.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {ckpt.get('schema_version')!r}")
    for key in ("epoch", "model", "optimizer", "log"):
        if key not in ckpt:
            raise ValueError(f"checkpoint missing {key!r}")
    return ckpt


def fit_checkpointed(dataset, target, supervision, model, config, run_dir=None):
    """Like :func:`fit` but also returns the final checkpoint dict."""
    problem = _prepare(dataset, target, supervision, model, config)
    model = replace(model, standardizer=problem.standardizer)
    model, run_log, opt_state = fit_with_state(problem, model, config, run_dir)
    return model, run_log, make_checkpoint(model, opt_state, config.n_epochs, run_log, config)


def resume(checkpoint: dict, config: TrainConfig, dataset: Sequence[Trajectory],
           target: OptimalityProfile, supervision: SupervisionSets,
           run_dir=None) -> tuple[RewardModel, RunLog]:
    """Continue training from a checkpoint up to ``config.n_epochs`` total epochs."""
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    model = RewardModel.from_dict(checkpoint["model"])
    problem = _prepare(dataset, target, supervision, model, config)
    run_log = RunLog([dict(r) for r in checkpoint["log"]])
    opt_state = checkpoint["optimizer"]
    if len(opt_state["m"]) != model.n_params:
        raise ValueError("optimizer state does not match the model")
    model, run_log, _ = fit_with_state(problem, model, config, run_dir, int(checkpoint["epoch"]),
                                       opt_state, run_log)
    return model, run_log
