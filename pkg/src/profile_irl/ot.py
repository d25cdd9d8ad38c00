"""One-dimensional optimal transport between atomic distributions."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .distributions import MERGE_TOL, OptimalityProfile, histogram_atoms, bin_index

DEFAULT_P = 2.0


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, residual: float, iters: int):
        super().__init__(f"Sinkhorn did not converge in {iters} iterations (residual={residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class TransportPlan:
    source_locations: np.ndarray
    source_weights: np.ndarray
    target_locations: np.ndarray
    target_weights: np.ndarray
    matrix: np.ndarray

    def marginal_violation(self) -> float:
        rows = np.abs(self.matrix.sum(axis=1) - self.source_weights).max()
        cols = np.abs(self.matrix.sum(axis=0) - self.target_weights).max()
        return float(max(rows, cols))

    def cost(self, p: float) -> float:
        c = np.abs(self.source_locations[:, None] - self.target_locations[None, :]) ** p
        return float(np.sum(self.matrix * c)) ** (1.0 / p)

    def to_csv(self, path) -> None:
        """Dense matrix; the header row holds target locations, column 0 source locations."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source\\target", *map(repr, self.target_locations.tolist())])
            w.writerow(["weight", *map(repr, self.target_weights.tolist())])
            for x, a, row in zip(self.source_locations, self.source_weights, self.matrix):
                w.writerow([f"{x!r}:{a!r}", *map(repr, row.tolist())])


def cost_matrix(x, y, p: float) -> np.ndarray:
    return np.abs(np.asarray(x)[:, None] - np.asarray(y)[None, :]) ** p


def exact_plan(source: OptimalityProfile, target: OptimalityProfile,
               p: float = DEFAULT_P) -> tuple[float, TransportPlan]:
    """North-west corner coupling of the sorted atoms (optimal for convex costs in 1-D)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    a, b = source.weights, target.weights
    n, m = a.size, b.size
    g = np.zeros((n, m))
    i = j = 0
    ra, rb = a[0], b[0]
    while True:
        mass = min(ra, rb)
        g[i, j] += mass
        ra -= mass
        rb -= mass
        if i == n - 1 and j == m - 1:
            break
        if j == m - 1 or (i < n - 1 and ra <= rb):
            i += 1
            ra = a[i]
        else:
            j += 1
            rb = b[j]
    plan = TransportPlan(source.locations, a, target.locations, b, g)
    return plan.cost(p), plan


def wasserstein(source: OptimalityProfile, target: OptimalityProfile, p: float = 1.0) -> float:
    return exact_plan(source, target, p)[0]


def _round_to_marginals(f: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a nonnegative matrix onto the coupling polytope (Altschuler et al. rounding)."""
    rows = f.sum(axis=1)
    f = f * np.minimum(a / np.where(rows > 0, rows, 1.0), 1.0)[:, None]
    cols = f.sum(axis=0)
    f = f * np.minimum(b / np.where(cols > 0, cols, 1.0), 1.0)[None, :]
    err_a = a - f.sum(axis=1)
    err_b = b - f.sum(axis=0)
    total = err_b.sum()
    if total > 0:
        f = f + np.outer(err_a, err_b) / total
    return np.maximum(f, 0.0)


def _lse_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def _sinkhorn_sweep(f, g, c, eps, log_a, log_b):
    f = eps * (log_a - _lse_rows((g[None, :] - c) / eps))
    g = eps * (log_b - _lse_rows((f[:, None] - c).T / eps))
    return f, g


def _dual_value(f, g, c, eps, a, b) -> float:
    expo = (f[:, None] + g[None, :] - c) / eps
    if expo.max() > 700:
        return -np.inf
    return float(f @ a + g @ b - eps * np.exp(expo).sum())


def _newton_step(f, g, c, eps, a, b):
    """Damped Newton ascent on the entropic dual with the last potential pinned."""
    n, m = a.size, b.size
    plan = np.exp((f[:, None] + g[None, :] - c) / eps)
    r, col = plan.sum(axis=1), plan.sum(axis=0)
    grad = np.concatenate([a - r, (b - col)[:-1]])
    hess = np.zeros((n + m - 1, n + m - 1))
    hess[np.arange(n), np.arange(n)] = r
    hess[:n, n:] = plan[:, :-1]
    hess[n:, :n] = plan[:, :-1].T
    hess[np.arange(n, n + m - 1), np.arange(n, n + m - 1)] = col[:-1]
    # when the plan splits into blocks joined by underflowing entries the
    # Hessian is singular to working precision; a small diagonal shift keeps
    # the step an ascent direction along the block-shift modes
    hess[np.diag_indices_from(hess)] += 1e-10 * float(hess.diagonal().max())
    step = eps * np.linalg.solve(hess, grad)
    # tiny plan entries give enormous Newton steps; cap each potential's move
    # at a fixed multiple of eps so the line search starts from a usable point
    longest = float(np.abs(step).max(initial=0.0))
    if longest > 20.0 * eps:
        step *= 20.0 * eps / longest
    base = _dual_value(f, g, c, eps, a, b)
    slope = float(grad @ step) / eps
    res = float(np.abs(grad).max(initial=0.0))
    res = max(res, abs(float(b[-1] - col[-1])))
    # near the optimum the dual value is flat to round-off; a step that keeps
    # it within round-off and shrinks the marginal residual is accepted too
    noise = 1e-13 * (abs(base) + float(np.abs(f) @ a + np.abs(g) @ b))
    t = 1.0
    for _ in range(40):
        f_new = f + t * step[:n]
        g_new = g.copy()
        g_new[:-1] += t * step[n:]
        value = _dual_value(f_new, g_new, c, eps, a, b)
        if value >= base + 1e-4 * t * slope * eps:
            return f_new, g_new
        if value >= base - noise and _residual(f_new, g_new, c, eps, a, b) < res:
            return f_new, g_new
        t *= 0.5
    return None


def _residual(f, g, c, eps, a, b) -> float:
    plan = np.exp((f[:, None] + g[None, :] - c) / eps)
    return float(max(np.abs(plan.sum(axis=1) - a).max(), np.abs(plan.sum(axis=0) - b).max()))


def sinkhorn_plan(source: OptimalityProfile, target: OptimalityProfile, p: float = DEFAULT_P,
                  lam: float = 1e-2, max_iters: int = 10_000, tol: float = 1e-6,
                  scaling: float = 0.1, sweeps_per_stage: int = 3) -> tuple[float, TransportPlan]:
    """Entropy-regularised plan for cost ``|x - y|**p`` and regulariser ``lam``.

    Log-domain Sinkhorn sweeps with epsilon-scaling from the cost scale down
    to ``lam``; a stage that has not converged after ``sweeps_per_stage``
    sweeps is finished with damped Newton steps on the same dual. The
    result is rounded onto the exact marginals and the reported cost is the
    unregularised ``(sum G |x - y|**p) ** (1/p)`` of that plan.
    """
    if lam <= 0:
        raise ValueError("lam must be positive; use exact_plan for lam = 0")
    a, b = source.weights, target.weights
    c = cost_matrix(source.locations, target.locations, p)
    if not np.all(np.isfinite(c)):
        raise SinkhornConvergenceError(np.inf, 0)
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)

    eps = max(float(c.max()), lam)
    iters = 0
    residual = np.inf
    while True:
        final = eps <= lam
        stage_tol = tol if final else max(tol, 1e-4)
        stage_iters = 0
        while iters < max_iters:
            iters += 1
            if stage_iters < sweeps_per_stage:
                f, g = _sinkhorn_sweep(f, g, c, eps, log_a, log_b)
            else:
                stepped = _newton_step(f, g, c, eps, a, b)
                # a failed line search (round-off at small eps) falls back to a sweep
                f, g = stepped if stepped is not None else _sinkhorn_sweep(f, g, c, eps, log_a, log_b)
            stage_iters += 1
            residual = _residual(f, g, c, eps, a, b)
            if residual <= stage_tol or not np.isfinite(residual):
                break
        if not residual <= stage_tol:
            raise SinkhornConvergenceError(residual, iters)
        if final:
            break
        eps = max(eps * scaling, lam)

    g_mat = np.exp((f[:, None] + g[None, :] - c) / eps)
    g_mat = _round_to_marginals(g_mat, a, b)
    plan = TransportPlan(source.locations, a, target.locations, b, g_mat)
    return plan.cost(p), plan


def sample_targets(plan: TransportPlan, source_indices, seed) -> list[float]:
    """For each source atom index, draw a target location from its plan row."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = np.asarray(source_indices, dtype=int)
    rows = plan.matrix[idx]
    mass = rows.sum(axis=1)
    if np.any(mass <= 0):
        bad = idx[np.argmax(mass <= 0)]
        raise ValueError(f"source atom {bad} has no mass in the plan")
    cdf = np.cumsum(rows, axis=1) / mass[:, None]
    u = rng.random(idx.size)
    picks = (cdf <= u[:, None]).sum(axis=1)
    picks = np.minimum(picks, plan.target_locations.size - 1)
    return plan.target_locations[picks].tolist()


def group_values(values, tol: float = MERGE_TOL) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Merged atoms of ``values`` with uniform weights, plus each value's atom index."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    inverse = np.empty(values.size, dtype=int)
    locs, counts = [], []
    for k in order:
        x = values[k]
        if locs and x - locs[-1] <= tol:
            counts[-1] += 1
        else:
            locs.append(x)
            counts.append(1)
        inverse[k] = len(locs) - 1
    counts = np.array(counts, dtype=float)
    return np.array(locs), counts / values.size, inverse


def batch_profile(values, n_bins: int = 0) -> tuple[OptimalityProfile, np.ndarray]:
    """Profile of a batch of returns and the atom each return falls in."""
    values = np.asarray(values, dtype=float)
    if n_bins == 0:
        locs, wts, inverse = group_values(values)
        return OptimalityProfile(locs, wts), inverse
    centers, counts = histogram_atoms(values, n_bins)
    lo, hi = float(values.min()), float(values.max())
    bins = bin_index(values, lo, hi, n_bins)
    if hi - lo <= MERGE_TOL:
        kept = np.zeros(1, dtype=int)
    else:
        full = np.histogram(values, bins=np.linspace(lo, hi, n_bins + 1))[0]
        kept = np.cumsum(full > 0) - 1
    return OptimalityProfile(centers, counts / counts.sum()), kept[bins]


def ot_loss_from_returns(y, target: OptimalityProfile, p: float = DEFAULT_P, lam: float = 0.0,
                         n_bins: int = 0, seed=None, max_iters: int = 10_000,
                         tol: float = 1e-6) -> tuple[float, np.ndarray, np.ndarray]:
    """Minibatch OT loss for returns ``y``.

    Returns ``(loss, targets, dloss_dy)`` with targets held constant in the
    derivative. Targets are drawn atom by atom in ascending atom order so
    the loss depends on the returns only through their multiset.
    """
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty batch")
    prof, atom_of = batch_profile(y, n_bins)
    if lam > 0:
        _, plan = sinkhorn_plan(prof, target, p, lam, max_iters=max_iters, tol=tol)
    else:
        _, plan = exact_plan(prof, target, p)
    order = np.argsort(atom_of, kind="stable")
    targets = np.empty(y.size)
    targets[order] = sample_targets(plan, atom_of[order], seed)

    diff = y - targets
    absd = np.abs(diff)
    # sum per atom in atom order; equal-return elements contribute identical terms
    terms = absd[order] ** p
    total = float(np.sum(terms))
    loss = total ** (1.0 / p)
    if total > 0:
        grad = total ** (1.0 / p - 1.0) * absd ** (p - 1.0) * np.sign(diff)
    else:
        grad = np.zeros_like(y)
    return loss, targets, grad


def ot_loss(reward, batch, target: OptimalityProfile, gamma: float, p: float = DEFAULT_P,
            lam: float = 0.0, n_bins: int = 0, seed=None) -> tuple[float, list[float]]:
    """Minibatch estimate of the OT loss for a batch of trajectory suffixes.

    ``lam = 0`` uses the exact monotone plan.
    """
    from .distributions import returns

    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    y = returns(reward, batch, gamma)
    loss, targets, _ = ot_loss_from_returns(y, target, p, lam, n_bins, seed)
    return loss, targets.tolist()
