"""Evaluation protocols: return correlation, policy re-optimisation, sweeps."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .distributions import AugmentedDataset, OptimalityProfile, augment, returns, traj_return
from .mdp import TabularMdp, TabularPolicy, Trajectory, sample_trajectory, value_iteration
from .reward import RewardModel, SupervisionSets
from .trainer import TrainConfig, fit

REPORT_SCHEMA = 1
DEFAULT_EPSILONS = (0.0, 0.1, 0.3, 0.5, 1.0)
GAMMA_POLICY = 0.99
DEFAULT_SIGMAS = (0.1, 0.5, 1.0)
DEFAULT_GAMMAS = (0.0, 0.5, 0.7, 0.9)
SWEEP_COLUMNS = ("sweep", "setting", "condition", "n_seeds", "pearson_mean", "pearson_std",
                 "n_defined", "reopt_mean", "reopt_std", "per_seed")


def pearson(x, y, weights=None) -> float | None:
    """(Weighted) Pearson correlation; ``None`` when either side has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if x.size < 2 or w.sum() <= 0:
        return None
    w = w / w.sum()
    dx = x - w @ x
    dy = y - w @ y
    vx, vy = w @ (dx * dx), w @ (dy * dy)
    # relative threshold so that round-off on constant inputs is not read as signal
    if vx <= 1e-24 * max(1.0, w @ (x * x)) or vy <= 1e-24 * max(1.0, w @ (y * y)):
        return None
    r = float((w @ (dx * dy)) / math.sqrt(vx * vy))
    return max(-1.0, min(1.0, r))


@dataclass
class EvalReport:
    pearson_returns: float | None = None
    pearson_states: float | None = None
    gt_return_of_reoptimized_policy: float | None = None
    gt_return_of_best_demo: float | None = None
    gamma: float | None = None
    table: list = field(default_factory=list)

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = asdict(self)
        for k, v in asdict(other).items():
            if v is not None and v != []:
                out[k] = v
        return EvalReport(**out)

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version", REPORT_SCHEMA) != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        d = {k: v for k, v in d.items() if k != "schema_version"}
        d["table"] = [tuple(row) for row in d.get("table", [])]
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def table_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory", "gt_return", "learned_return"])
            for i, (g, l) in enumerate(self.table):
                w.writerow([i, repr(g), repr(l)])


def _state_rewards(model) -> np.ndarray:
    if hasattr(model, "state_rewards"):
        return model.state_rewards()
    return np.asarray(model, dtype=float)


def correlate(model, dataset: Sequence[Trajectory], gt_reward, gamma: float) -> EvalReport:
    """Pearson correlation of learned vs ground-truth returns over ``dataset``.

    For tabular models the per-state reward correlation, weighted by the
    state occupancy of ``dataset``, is reported too.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    learned = _state_rewards(model)
    gt = np.asarray(gt_reward, dtype=float)
    y_gt = returns(gt, dataset, gamma)
    y_model = returns(learned, dataset, gamma)
    report = EvalReport(pearson_returns=pearson(y_gt, y_model), gamma=gamma,
                        table=[(float(a), float(b)) for a, b in zip(y_gt, y_model)])
    if getattr(model, "kind", "tabular") == "tabular":
        occ = np.zeros(gt.size)
        for traj in dataset:
            np.add.at(occ, list(traj.states), 1.0)
        report.pearson_states = pearson(gt, learned, occ)
    return report


def reoptimize_and_score(mdp: TabularMdp, model, gamma_policy: float = GAMMA_POLICY,
                         n_episodes: int = 100, seed=0) -> tuple[TabularPolicy, float]:
    """Value iteration on the learned reward, then mean undiscounted GT return of rollouts."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    policy, _ = value_iteration(mdp, _state_rewards(model), gamma_policy)
    rng = np.random.default_rng(seed)
    total = sum(traj_return(mdp.gt_reward, sample_trajectory(mdp, policy, rng), 1.0)
                for _ in range(n_episodes))
    return policy, total / n_episodes


def best_demo_return(dataset: Sequence[Trajectory], gt_reward) -> float:
    return max(traj_return(gt_reward, t, 1.0) for t in dataset)


# ---------------------------------------------------------------------------
# Data generation


def optimal_policy(mdp: TabularMdp, gamma: float = GAMMA_POLICY) -> TabularPolicy:
    return value_iteration(mdp, mdp.gt_reward, gamma)[0]


def policy_pool(mdp: TabularMdp, epsilons=DEFAULT_EPSILONS) -> list[TabularPolicy]:
    """Epsilon-greedy perturbations of the GT-optimal policy."""
    opt = optimal_policy(mdp)
    return [opt.epsilon_greedy(e) for e in epsilons]


def sample_pool(mdp: TabularMdp, n: int, seed, epsilons=DEFAULT_EPSILONS) -> list[Trajectory]:
    """``n`` trajectories, cycling through the policy pool in order."""
    if n < 1:
        raise ValueError("empty dataset: n must be positive")
    pool = policy_pool(mdp, epsilons)
    rng = np.random.default_rng(seed)
    return [sample_trajectory(mdp, pool[i % len(pool)], rng) for i in range(n)]


def suffix_returns(aug: AugmentedDataset, gt_reward, gamma: float) -> np.ndarray:
    return returns(np.asarray(gt_reward, dtype=float), aug.suffixes, gamma)


def gt_profile(aug: AugmentedDataset, gt_reward, gamma: float, n_bins: int = 30,
               sigma: float = 0.0, seed=0) -> OptimalityProfile:
    """Histogram of suffix returns; ``sigma > 0`` multiplies each by a N(1, sigma) draw first."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    y = suffix_returns(aug, gt_reward, gamma)
    if sigma > 0:
        y = y * np.random.default_rng(seed).normal(1.0, sigma, size=y.size)
    return OptimalityProfile.from_samples(y, n_bins)


def sample_supervision(aug: AugmentedDataset, gt_reward, gamma: float, n_pairs: int,
                       n_fixed: int, seed, max_tries: int = 100_000) -> SupervisionSets:
    """Random ordered pairs over the augmented dataset plus extreme-return fixed labels.

    Pairs with equal GT return carry no preference and are redrawn. Fixed
    points are the lowest ``n_fixed // 2`` and highest remaining full
    demonstrations by GT return, labelled with that return.
    """
    y = suffix_returns(aug, gt_reward, gamma)
    rng = np.random.default_rng(seed)
    pairs = []
    tries = 0
    while len(pairs) < n_pairs:
        tries += 1
        if tries > max_tries or len(aug) < 2:
            raise ValueError("not enough distinct returns to draw the requested pairs")
        i, j = (int(v) for v in rng.choice(len(aug), 2, replace=False))
        if y[i] == y[j]:
            continue
        pairs.append((i, j) if y[i] < y[j] else (j, i))
    full = sorted(aug.full_trajectory_indices(), key=lambda k: (y[k], k))
    if n_fixed > len(full):
        raise ValueError("more fixed points requested than demonstrations")
    lo = n_fixed // 2
    chosen = full[:lo] + (full[len(full) - (n_fixed - lo):] if n_fixed - lo else [])
    return SupervisionSets(tuple(pairs), tuple((k, float(y[k])) for k in chosen))


# ---------------------------------------------------------------------------
# Sweeps


@dataclass(frozen=True)
class Setting:
    """Environment and data shared by all cells of a sweep."""

    mdp: TabularMdp
    dataset: tuple
    held_out: tuple
    eval_gamma: float = 0.9
    hidden: int = 16
    n_episodes: int = 100

    @classmethod
    def generate(cls, mdp: TabularMdp, n_demos: int = 100, n_held_out: int = 200, seed: int = 0,
                 **kw) -> "Setting":
        demos = sample_pool(mdp, n_demos, np.random.default_rng([seed, 0]))
        held = sample_pool(mdp, n_held_out, np.random.default_rng([seed, 1]))
        return cls(mdp, tuple(demos), tuple(held), **kw)


@dataclass
class CellResult:
    seed: int
    pearson: float | None
    reopt_return: float
    best_demo_return: float
    model: RewardModel | None = None


def run_cell(setting: Setting, target: OptimalityProfile, supervision: SupervisionSets,
             config: TrainConfig, seed: int, keep_model: bool = False) -> CellResult:
    """Train one model and score it on the held-out set."""
    if setting.mdp.features is None:
        model = RewardModel.tabular(setting.mdp.n_states)
    else:
        model = RewardModel.mlp(setting.mdp.features, setting.hidden, seed=seed)
    cfg = replace(config, seed=seed)
    trained, _ = fit(list(setting.dataset), target, supervision, model, cfg)
    rep = correlate(trained, list(setting.held_out), setting.mdp.gt_reward, setting.eval_gamma)
    _, score = reoptimize_and_score(setting.mdp, trained, GAMMA_POLICY, setting.n_episodes, seed)
    return CellResult(seed, rep.pearson_returns, score,
                      best_demo_return(setting.dataset, setting.mdp.gt_reward),
                      trained if keep_model else None)


def recovery_trial(mdp: TabularMdp, seed: int, config: TrainConfig = TrainConfig(),
                   n_demos: int = 100, n_held_out: int = 200, n_bins: int = 30,
                   n_pairs: int = 20, n_fixed: int = 4, keep_model: bool = False) -> CellResult:
    """Full pipeline for one seed: fresh demos, GT profile, supervision, fit, score."""
    setting = Setting.generate(mdp, n_demos, n_held_out, seed, eval_gamma=config.gamma)
    aug = augment(setting.dataset)
    target = gt_profile(aug, mdp.gt_reward, config.gamma, n_bins)
    sup = _supervision_for(aug, mdp.gt_reward, config.gamma, n_pairs, n_fixed, seed)
    return run_cell(setting, target, sup, config, seed, keep_model)


def _cell_job(args) -> CellResult:
    return run_cell(*args)


def _run_cells(jobs: list, n_jobs: int = 1) -> list[CellResult]:
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        # map preserves submission order, so output order is deterministic
        return list(ex.map(_cell_job, jobs))


def _summarise(sweep: str, setting_value, condition: str, cells: list[CellResult]) -> dict:
    corr = [c.pearson for c in cells if c.pearson is not None]
    reopt = [c.reopt_return for c in cells]
    return {
        "sweep": sweep,
        "setting": setting_value,
        "condition": condition,
        "n_seeds": len(cells),
        "pearson_mean": float(np.mean(corr)) if corr else None,
        "pearson_std": float(np.std(corr)) if corr else None,
        "n_defined": len(corr),
        "reopt_mean": float(np.mean(reopt)),
        "reopt_std": float(np.std(reopt)),
        "per_seed": [c.pearson for c in cells],
    }


def _seeds(config: TrainConfig, n_seeds: int) -> list[int]:
    if n_seeds < 1:
        raise ValueError("n_seeds must be positive")
    return [config.seed + k for k in range(n_seeds)]


def _supervision_for(aug, gt_reward, gamma, n_pairs, n_fixed, seed) -> SupervisionSets:
    return sample_supervision(aug, gt_reward, gamma, n_pairs, n_fixed,
                              np.random.default_rng([seed, 2]))


def ablate_ot(setting: Setting, target: OptimalityProfile, pairs_budgets: Sequence[int],
              fixed_budget: int, config: TrainConfig, n_seeds: int = 10,
              n_jobs: int = 1) -> list[dict]:
    """With-OT vs without-OT correlation for each pair budget."""
    aug = augment(setting.dataset)
    gt = setting.mdp.gt_reward
    for budget in pairs_budgets:
        if budget > len(aug) * (len(aug) - 1) // 2:
            raise ValueError(f"pair budget {budget} exceeds the available pairs")
    ot_weight = config.c_ot if config.c_ot > 0 else 1.0
    conditions = (("with_ot", ot_weight), ("without_ot", 0.0))
    jobs, keys = [], []
    for budget in pairs_budgets:
        for name, c_ot in conditions:
            cfg = replace(config, c_ot=c_ot)  # raises on an all-zero weighting
            if c_ot == 0 and (budget == 0 or cfg.c_pw == 0) and (fixed_budget == 0 or cfg.c_fix == 0):
                raise ValueError("without-OT condition has no active loss term")
            for seed in _seeds(config, n_seeds):
                sup = _supervision_for(aug, gt, config.gamma, budget, fixed_budget, seed)
                jobs.append((setting, target, sup, cfg, seed))
                keys.append((budget, name))
    results = _run_cells(jobs, n_jobs)
    rows = []
    for budget in pairs_budgets:
        for name, _ in conditions:
            cells = [r for r, k in zip(results, keys) if k == (budget, name)]
            rows.append(_summarise("ablate_ot", budget, name, cells))
    return rows


def noise_sweep(setting: Setting, sigmas: Sequence[float] = DEFAULT_SIGMAS,
                config: TrainConfig = TrainConfig(), n_seeds: int = 10, n_bins: int = 30,
                n_pairs: int = 20, n_fixed: int = 4, n_jobs: int = 1) -> list[dict]:
    """Correlation when the target profile is built from noise-multiplied returns.

    Noise is drawn independently for every suffix; supervision stays clean.
    """
    if any(s < 0 for s in sigmas):
        raise ValueError("sigmas must be nonnegative")
    aug = augment(setting.dataset)
    gt = setting.mdp.gt_reward
    jobs, keys = [], []
    for sigma in sigmas:
        for seed in _seeds(config, n_seeds):
            target = gt_profile(aug, gt, config.gamma, n_bins, sigma, np.random.default_rng([seed, 3]))
            sup = _supervision_for(aug, gt, config.gamma, n_pairs, n_fixed, seed)
            jobs.append((setting, target, sup, config, seed))
            keys.append(sigma)
    results = _run_cells(jobs, n_jobs)
    return [_summarise("noise", s, "with_ot", [r for r, k in zip(results, keys) if k == s])
            for s in sigmas]


def gamma_sweep(setting: Setting, gammas: Sequence[float] = DEFAULT_GAMMAS,
                config: TrainConfig = TrainConfig(), n_seeds: int = 10, n_bins: int = 30,
                n_pairs: int = 20, n_fixed: int = 4, n_jobs: int = 1) -> list[dict]:
    """Correlation (at the setting's evaluation discount) of models trained at each gamma."""
    if any(not 0.0 <= g <= 1.0 for g in gammas):
        raise ValueError("gammas must lie in [0, 1]")
    aug = augment(setting.dataset)
    gt = setting.mdp.gt_reward
    jobs, keys = [], []
    for gamma in gammas:
        cfg = replace(config, gamma=gamma)
        target = gt_profile(aug, gt, gamma, n_bins)
        for seed in _seeds(config, n_seeds):
            sup = _supervision_for(aug, gt, gamma, n_pairs, n_fixed, seed)
            jobs.append((setting, target, sup, cfg, seed))
            keys.append(gamma)
    results = _run_cells(jobs, n_jobs)
    return [_summarise("gamma", g, "with_ot", [r for r, k in zip(results, keys) if k == g])
            for g in gammas]


def write_table(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            vals = []
            for col in SWEEP_COLUMNS:
                v = row[col]
                if col == "per_seed":
                    v = ";".join("nan" if x is None else repr(x) for x in v)
                elif v is None:
                    v = ""
                vals.append(v)
            w.writerow(vals)


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
