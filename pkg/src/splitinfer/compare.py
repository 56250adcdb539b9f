"""Model-vs-baseline comparison: per-split performance gaps, their joint
covariance across splits, the multivariate one-sided test with Monte-Carlo
critical values, and the pre-tested confidence interval.

The covariance of the sqrt(n)-scaled gap vector is assembled from the four
row-intersection blocks between any two splits (train/train, train/eval,
eval/train, eval/eval), each centered at its own block mean. For average-type
moments the per-row values are the f evaluations themselves; general scalar
moments go through the asymptotically linear (influence) representation
-J^{-1} psi per row. Intersections with fewer than two rows contribute zero
and are counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ZeroDiagonal
from .inference import (
    DeltaSpec,
    identity_reduction,
    jacobian_hat,
    meat_hat,
    norm_ppf,
    sandwich,
    variance_inflation,
)
from .learners import Model, train_all
from .moments import AverageMoment, MomentFunction
from .rng import derived_seed, substream
from .splits import SplitPlan
from .zestim import per_split_estimates, solve, solve_fullsample, _splits_of


@dataclass
class DeltaVector:
    """Per-split gaps h(theta_s) - h(theta_b) plus the baseline estimate."""

    deltas: np.ndarray
    theta_b: np.ndarray
    h_split: np.ndarray
    h_baseline: float


@dataclass
class SigmaHat:
    matrix: np.ndarray
    psd_projected: bool
    degenerate_blocks: int

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.matrix)


@dataclass
class OneSidedTest:
    statistic: float
    critical_value: float
    reject: bool
    alpha: float
    slack: float
    mc_draws: int
    seed: int


@dataclass
class ComparisonResult:
    delta: DeltaVector
    sigma: SigmaHat
    test: OneSidedTest
    point: float
    sigma_delta: float
    ci_normal: tuple[float, float]
    ci_extended: tuple[float, float]
    ci_final: tuple[float, float]
    alpha: float
    n: int
    flags: dict = field(default_factory=dict)

    def to_jsonable(self, emit_sigma: bool = False) -> dict:
        out = {
            "deltas": self.delta.deltas.tolist(),
            "theta_baseline": self.delta.theta_b.tolist(),
            "point": self.point,
            "sigma_delta": self.sigma_delta,
            "T": self.test.statistic,
            "critical_value": self.test.critical_value,
            "reject": self.test.reject,
            "slack": self.test.slack,
            "mc_draws": self.test.mc_draws,
            "seed": self.test.seed,
            "ci_normal": list(self.ci_normal),
            "ci_extended": list(self.ci_extended),
            "ci_final": list(self.ci_final),
            "alpha": self.alpha,
            "n": self.n,
            "flags": dict(self.flags),
        }
        if emit_sigma:
            out["sigma"] = self.sigma.matrix.tolist()
        return out


# ---------------------------------------------------------------------------
# per-row value construction


def _influence_rows(mf, model, d, rows, theta, grad) -> np.ndarray:
    """Scalar influence contribution grad . (-J^{-1} psi_i) per row."""
    if isinstance(mf, AverageMoment):
        return mf.f_values(model, d, rows)
    jac = mf.jacobian_estimate(theta, model, d, rows)
    psi = mf.psi(theta, model, d, rows)
    return -(psi @ np.linalg.solve(jac, grad))


def split_values(mf: MomentFunction, models, plan: SplitPlan, d: Dataset,
                 per_split_thetas, h: DeltaSpec):
    """Per-split influence values on each split's own evaluation rows."""
    out = []
    for s in _splits_of(plan, models):
        theta = per_split_thetas[(s.m, s.k)]
        out.append(_influence_rows(mf, s.model, d, s.rows, theta, h.gradient(theta)))
    return out


def baseline_values(mf: MomentFunction, baseline: Model, d: Dataset, theta_b,
                    h: DeltaSpec) -> np.ndarray:
    return _influence_rows(mf, baseline, d, np.arange(d.n), theta_b, h.gradient(theta_b))


# ---------------------------------------------------------------------------
# covariance assembly


def _cross_blocks(mask1, vals1, mask2, vals2):
    """Blockwise centered cross sums over pairwise row intersections.

    Returns (centered_sums, counts), both (S, S). Entry (j, l) is
    sum_{i in I} (a_i - mean_I a)(b_i - mean_I b) with I the intersection of
    mask1 row j and mask2 row l; entries with |I| < 2 are zero.
    """
    a = mask1 * vals1
    b = mask2 * vals2
    s_ab = a @ b.T
    s_a = a @ mask2.T
    s_b = mask1 @ b.T
    cnt = mask1 @ mask2.T
    ok = cnt >= 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        centered = np.where(ok, s_ab - s_a * s_b / np.where(ok, cnt, 1.0), 0.0)
    return centered, cnt


def sigma_from_values(eval_sets, n: int, vals_split, vals_base) -> SigmaHat:
    """Covariance of sqrt(n) * (per-split mean - full-sample baseline mean).

    ``vals_split[j]`` holds the j-th split's values on its own evaluation rows
    (in row order); ``vals_base`` holds the baseline values for all n rows.
    """
    n_splits = len(eval_sets)
    emask = np.zeros((n_splits, n))
    tilde = np.zeros((n_splits, n))
    for j, rows in enumerate(eval_sets):
        emask[j, rows] = 1.0
        tilde[j, rows] = vals_base[rows] - (n / rows.size) * np.asarray(vals_split[j])
    cmask = 1.0 - emask
    base = np.broadcast_to(vals_base, (n_splits, n))

    t1, c1 = _cross_blocks(cmask, base, cmask, base)
    t2, c2 = _cross_blocks(cmask, base, emask, tilde)
    t4, c4 = _cross_blocks(emask, tilde, emask, tilde)
    total = (t1 + t2 + t2.T + t4) / n

    degenerate = int(((c1 < 2) & (c1 > 0)).sum() + ((c2 < 2) & (c2 > 0)).sum()
                     + ((c4 < 2) & (c4 > 0)).sum())

    total = 0.5 * (total + total.T)
    eigval, eigvec = np.linalg.eigh(total)
    projected = bool(eigval.min() < -1e-14 * max(eigval.max(), 1.0))
    if projected:
        clipped = np.maximum(eigval, 0.0)
        total = (eigvec * clipped) @ eigvec.T
        total = 0.5 * (total + total.T)
    return SigmaHat(matrix=total, psd_projected=projected, degenerate_blocks=degenerate)


def delta_vector(mf: MomentFunction, models, plan: SplitPlan, d: Dataset,
                 baseline: Model, h: DeltaSpec | None = None, tol=1e-10) -> "DeltaVector":
    """Per-split estimates minus the whole-sample baseline estimate."""
    if h is None:
        h = identity_reduction()
    per_split = per_split_estimates(mf, models, plan, d, tol=tol)
    theta_b = solve_fullsample(mf, baseline, d, tol=tol)
    h_split = np.array(
        [h.h(per_split[(s.m, s.k)]) for s in _splits_of(plan, models)]
    )
    h_b = float(h.h(theta_b))
    return DeltaVector(deltas=h_split - h_b, theta_b=theta_b, h_split=h_split, h_baseline=h_b)


def sigma_hat(mf: MomentFunction, models, plan: SplitPlan, d: Dataset,
              baseline: Model, h: DeltaSpec | None = None, tol=1e-10) -> SigmaHat:
    """Block estimate of the covariance of the sqrt(n)-scaled gap vector."""
    if h is None:
        h = identity_reduction()
    per_split = per_split_estimates(mf, models, plan, d, tol=tol)
    theta_b = solve_fullsample(mf, baseline, d, tol=tol)
    vals_split = split_values(mf, models, plan, d, per_split, h)
    vals_base = baseline_values(mf, baseline, d, theta_b, h)
    return sigma_from_values(plan.eval_sets(), plan.n, vals_split, vals_base)


# ---------------------------------------------------------------------------
# test and confidence interval


def mc_critical_value(sigma: SigmaHat, alpha: float, mc_draws: int, seed: int,
                      sigmas: np.ndarray) -> float:
    """(1-alpha) quantile of T(Z) over Z ~ N(0, Sigma), seeded."""
    s = sigma.matrix.shape[0]
    jitter = 1e-12 * (np.trace(sigma.matrix) / s if s else 1.0)
    chol = np.linalg.cholesky(sigma.matrix + max(jitter, 1e-300) * np.eye(s))
    rng = substream(seed, 0)
    stats = np.empty(mc_draws)
    chunk = max(1, min(mc_draws, 200_000 // max(s, 1)))
    done = 0
    while done < mc_draws:
        take = min(chunk, mc_draws - done)
        z = rng.standard_normal((take, s)) @ chol.T
        stats[done:done + take] = (np.minimum(z / sigmas, 0.0) ** 2).sum(axis=1)
        done += take
    stats.sort()
    idx = int(np.ceil((1.0 - alpha) * mc_draws)) - 1
    return float(stats[min(max(idx, 0), mc_draws - 1)])


def one_sided_test(delta: np.ndarray, sigma: SigmaHat, n: int, alpha: float = 0.05,
                   mc_draws: int = 100_000, seed: int = 0, slack: float = 0.0) -> OneSidedTest:
    """T = sum_s min(sqrt(n) (delta_s + slack) / sigma_s, 0)^2 against MC quantiles.

    slack = 0 reproduces the exact test; a positive slack makes rejection
    require larger per-split improvements (the conservative CI' variant).
    """
    diag = sigma.diagonal
    if np.any(diag <= 0.0):
        raise ZeroDiagonal("a per-split variance is zero; studentization undefined")
    sigmas = np.sqrt(diag)
    scaled = np.sqrt(n) * (np.asarray(delta, dtype=np.float64) + slack) / sigmas
    statistic = float((np.minimum(scaled, 0.0) ** 2).sum())
    crit = mc_critical_value(sigma, alpha, mc_draws, seed, sigmas)
    return OneSidedTest(
        statistic=statistic,
        critical_value=crit,
        reject=bool(statistic > crit),
        alpha=alpha,
        slack=slack,
        mc_draws=mc_draws,
        seed=seed,
    )


def extended_interval(ci: tuple[float, float]) -> tuple[float, float]:
    """Convex hull of the interval and {0}."""
    return (min(ci[0], 0.0), max(ci[1], 0.0))


def comparison_ci(point: float, sigma_delta: float, n: int, rejected: bool,
                  alpha: float = 0.05):
    """Normal, extended, and pre-test-selected intervals for the mean gap."""
    z = float(norm_ppf(1.0 - alpha / 2.0))
    half = z * sigma_delta / np.sqrt(n)
    ci_normal = (point - half, point + half)
    ci_ext = extended_interval(ci_normal)
    ci_final = ci_normal if rejected else ci_ext
    return ci_normal, ci_ext, ci_final


def sigma_delta_hat(mf: MomentFunction, models, plan: SplitPlan, d: Dataset,
                    baseline: Model, theta_pooled, theta_b,
                    h: DeltaSpec | None = None):
    """Standard error for the pooled gap: sigma_eta^2 + sigma_b^2 - 2 cov.

    Returns (sigma_delta, clamped_flag); a tiny negative variance from the
    covariance subtraction is clamped to zero and flagged.
    """
    if h is None:
        h = identity_reduction()
    jac = jacobian_hat(mf, models, plan, d, theta_pooled)
    meat = meat_hat(mf, models, plan, d, theta_pooled)
    vmk = variance_inflation(plan.M, plan.K, plan.b, plan.n)
    v = sandwich(jac, meat, vmk)
    grad = h.gradient(theta_pooled)
    var_eta = float(grad @ v @ grad)

    base_vals = baseline_values(mf, baseline, d, theta_b, h)
    var_b = float(np.var(base_vals))

    splits = _splits_of(plan, models)
    cov_acc = 0.0
    grad_p = h.gradient(theta_pooled)
    for s in splits:
        a_s = _influence_rows(mf, s.model, d, s.rows, theta_pooled, grad_p)
        a_b = base_vals[s.rows]
        cov_acc += float(np.mean((a_s - a_s.mean()) * (a_b - a_b.mean())))
    cov = cov_acc / len(splits)

    var_delta = var_eta + var_b - 2.0 * cov
    clamped = var_delta < 0.0
    return float(np.sqrt(max(var_delta, 0.0))), bool(clamped)


def compare_models(mf: MomentFunction, models, plan: SplitPlan, d: Dataset,
                   baseline: Model, h: DeltaSpec | None = None, alpha: float = 0.05,
                   mc_draws: int = 100_000, seed: int = 0, slack: float = 0.0,
                   tol: float = 1e-10) -> ComparisonResult:
    """Full comparison pipeline: gaps, covariance, test, pre-tested CI."""
    if h is None:
        h = identity_reduction()
    delta = delta_vector(mf, models, plan, d, baseline, h, tol)
    sigma = sigma_hat(mf, models, plan, d, baseline, h, tol)
    test = one_sided_test(delta.deltas, sigma, plan.n, alpha, mc_draws, seed, slack)

    pooled = solve(2, mf, models, plan, d, tol=tol)
    point = float(h.h(pooled.theta_hat)) - delta.h_baseline
    sd, clamped = sigma_delta_hat(mf, models, plan, d, baseline,
                                  pooled.theta_hat, delta.theta_b, h)
    ci_normal, ci_ext, ci_final = comparison_ci(point, sd, plan.n, test.reject, alpha)
    flags = {}
    if clamped:
        flags["sigma_delta_clamped"] = True
    if sigma.psd_projected:
        flags["sigma_psd_projected"] = True
    if sigma.degenerate_blocks:
        flags["degenerate_intersections"] = sigma.degenerate_blocks
    return ComparisonResult(
        delta=delta, sigma=sigma, test=test, point=point, sigma_delta=sd,
        ci_normal=ci_normal, ci_extended=ci_ext, ci_final=ci_final,
        alpha=alpha, n=plan.n, flags=flags,
    )


# ---------------------------------------------------------------------------
# two split-sample models


@dataclass
class TwoLearnerComparison:
    delta_ab: DeltaVector
    delta_ba: DeltaVector
    test_ab: OneSidedTest
    test_ba: OneSidedTest
    theta_a: np.ndarray
    theta_b: np.ndarray


def _pooled_row_values(mf, models, plan, d, theta_pooled, h) -> np.ndarray:
    """Row-level influence values for a pooled split-sample estimator.

    Each row is averaged over the models that evaluate it out-of-fold; rows
    that no split evaluates (possible when K = 1) fall back to the average
    over all models.
    """
    grad = h.gradient(theta_pooled)
    acc = np.zeros(d.n)
    cnt = np.zeros(d.n)
    splits = _splits_of(plan, models)
    for s in splits:
        acc[s.rows] += _influence_rows(mf, s.model, d, s.rows, theta_pooled, grad)
        cnt[s.rows] += 1.0
    uncovered = np.flatnonzero(cnt == 0)
    if uncovered.size:
        for s in splits:
            acc[uncovered] += _influence_rows(mf, s.model, d, uncovered, theta_pooled, grad)
        cnt[uncovered] = len(splits)
    return acc / cnt


def compare_two_learners(mf: MomentFunction, plan: SplitPlan, d: Dataset,
                         learner_a, learner_b, seed: int = 0,
                         h: DeltaSpec | None = None, alpha: float = 0.05,
                         mc_draws: int = 100_000, slack: float = 0.0,
                         tol: float = 1e-10) -> TwoLearnerComparison:
    """Directional comparisons of two learners trained on identical splits."""
    if h is None:
        h = identity_reduction()
    models_a = train_all(plan, d, learner_a, derived_seed(seed, 0))
    models_b = train_all(plan, d, learner_b, derived_seed(seed, 1))

    results = []
    for direction, (mods_split, mods_other) in enumerate(
        [(models_a, models_b), (models_b, models_a)]
    ):
        per_split = per_split_estimates(mf, mods_split, plan, d, tol=tol)
        pooled_other = solve(2, mf, mods_other, plan, d, tol=tol)
        h_split = np.array(
            [h.h(per_split[(s.m, s.k)]) for s in _splits_of(plan, mods_split)]
        )
        h_other = float(h.h(pooled_other.theta_hat))
        delta = DeltaVector(
            deltas=h_split - h_other,
            theta_b=pooled_other.theta_hat,
            h_split=h_split,
            h_baseline=h_other,
        )
        vals_split = split_values(mf, mods_split, plan, d, per_split, h)
        vals_base = _pooled_row_values(mf, mods_other, plan, d, pooled_other.theta_hat, h)
        sigma = sigma_from_values(plan.eval_sets(), plan.n, vals_split, vals_base)
        test = one_sided_test(delta.deltas, sigma, plan.n, alpha, mc_draws,
                              derived_seed(seed, 2 + direction), slack)
        results.append((delta, test))

    pooled_a = solve(2, mf, models_a, plan, d, tol=tol)
    pooled_b = solve(2, mf, models_b, plan, d, tol=tol)
    return TwoLearnerComparison(
        delta_ab=results[0][0], delta_ba=results[1][0],
        test_ab=results[0][1], test_ba=results[1][1],
        theta_a=pooled_a.theta_hat, theta_b=pooled_b.theta_hat,
    )
