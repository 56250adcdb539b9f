"""Ensemble GATES for randomized trials, with the detectable-heterogeneity
test and the twice-the-median / sequential-aggregation baselines.

Per repetition: K training folds produce out-of-fold predicted individual
treatment effects for each of the A learners; an L-fold calibration regression
combines them into one prediction per observation; observations are grouped by
per-training-fold quantiles of the combined prediction; and a single weighted
regression on the whole sample (weights 1/(p(x)(1-p(x)))) estimates the group
average treatment effects with heteroscedasticity-robust (HC0) standard
errors. Estimates and standard errors are averaged over the M repetitions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .compare import OneSidedTest, one_sided_test, sigma_from_values
from .data import Dataset
from .errors import EmptyGroup, IncompatibleRoles, ZeroDiagonal
from .inference import norm_cdf
from .learners import Learner, Model
from .rng import derived_seed
from .splits import generate_plan
from .zestim import DEFAULT_TOL  # noqa: F401  (re-exported convenience)

RIDGE_FALLBACK = 1e-8


@dataclass(frozen=True)
class GatesConfig:
    learners: tuple
    M: int = 20
    K: int = 3
    L: int = 2
    J: int = 3
    alpha: float = 0.05
    controls: tuple = ("const", "propensity")

    def __post_init__(self):
        if len(self.learners) < 1:
            raise IncompatibleRoles("need at least one learner")
        if self.J < 2 or self.K < 2 or self.L < 2:
            raise IncompatibleRoles("J, K and L must all be at least 2")


class CateLearner:
    """T-learner: fit a base learner separately on treated and control rows."""

    def __init__(self, base: Learner, name: str | None = None):
        self.base = base
        self.name = name or f"tlearner[{base.name}]"

    def train(self, d: Dataset, seed: int = 0) -> Model:
        t = d.t
        treated = np.flatnonzero(t == 1.0)
        control = np.flatnonzero(t == 0.0)
        if treated.size < 2 or control.size < 2:
            raise IncompatibleRoles("both treatment arms need at least 2 rows")
        m1 = self.base.train(d.subset(treated), derived_seed(seed, 1))
        m0 = self.base.train(d.subset(control), derived_seed(seed, 0))
        return _DifferenceModel(m1, m0)


class _DifferenceModel(Model):
    def __init__(self, m1, m0):
        self.m1 = m1
        self.m0 = m0

    def predict(self, x):
        return self.m1.predict(x) - self.m0.predict(x)


def wls_fit(design: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Weighted least squares via QR on the sqrt(w)-scaled design, HC0 cov.

    Returns (beta, cov_hc0, residuals, ridge_used). A rank-deficient design
    falls back to a small ridge and flags it.
    """
    sw = np.sqrt(w)
    xs = design * sw[:, None]
    ys = y * sw
    beta, _, rank, _ = np.linalg.lstsq(xs, ys, rcond=None)
    ridge_used = False
    if rank < design.shape[1]:
        gram = xs.T @ xs + RIDGE_FALLBACK * np.eye(design.shape[1])
        beta = np.linalg.solve(gram, xs.T @ ys)
        ridge_used = True
    resid = y - design @ beta
    gram = xs.T @ xs
    if ridge_used:
        gram = gram + RIDGE_FALLBACK * np.eye(design.shape[1])
    bread = np.linalg.inv(gram)
    score = design * (w * resid)[:, None]
    cov = bread @ (score.T @ score) @ bread
    return beta, cov, resid, ridge_used


def _controls_matrix(cfg: GatesConfig, d: Dataset, p: np.ndarray) -> np.ndarray:
    cols = []
    for name in cfg.controls:
        if name == "const":
            cols.append(np.ones(d.n))
        elif name == "propensity":
            if np.ptp(p) == 0.0 and "const" in cfg.controls:
                continue  # constant propensity duplicates the intercept
            cols.append(p)
        else:
            cols.append(d.column(name))
    if not cols:
        return np.empty((d.n, 0))
    return np.column_stack(cols)


@dataclass
class EnsembleFit:
    """Per-repetition ingredients of the ensemble GATES pipeline."""

    train_folds: list          # per m: list of K eval row arrays
    calib_folds: list          # per m: list of L row arrays
    tau_by_alg: list           # per m: (n, A) out-of-fold predictions
    betas: list                # per m: (L, A) calibration weights
    tau: list                  # per m: (n,) combined predictions
    propensity: np.ndarray
    ridge_fallback: bool


@dataclass
class GatesResult:
    gamma_hat: np.ndarray
    sigma_hat: np.ndarray
    delta_hat: float
    delta_se: float
    p_one_sided: float
    p_two_sided: float
    per_repetition: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {
            "gamma_hat": self.gamma_hat.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
            "delta_hat": self.delta_hat,
            "delta_se": self.delta_se,
            "p_one_sided": self.p_one_sided,
            "p_two_sided": self.p_two_sided,
            "per_repetition": self.per_repetition,
            "flags": dict(self.flags),
        }


@dataclass
class HetTestResult:
    msr_splits: np.ndarray
    msr_baseline: float
    test: OneSidedTest

    def to_jsonable(self) -> dict:
        return {
            "msr_splits": self.msr_splits.tolist(),
            "msr_baseline": self.msr_baseline,
            "T": self.test.statistic,
            "critical_value": self.test.critical_value,
            "reject": self.test.reject,
            "alpha": self.test.alpha,
        }


def ensemble_predict(cfg: GatesConfig, d: Dataset, seed: int = 0) -> EnsembleFit:
    """Out-of-fold ITE predictions per learner, calibrated into one per row."""
    if d.roles.treatment is None:
        raise IncompatibleRoles("GATES needs a binary treatment column")
    p = d.propensity_values()
    w = 1.0 / (p * (1.0 - p))
    controls = _controls_matrix(cfg, d, p)
    n_alg = len(cfg.learners)
    ridge_any = False

    train_folds, calib_folds, tau_by_alg, betas_all, tau_all = [], [], [], [], []
    for m in range(cfg.M):
        plan = generate_plan(d.n, M=1, K=cfg.K, seed=derived_seed(seed, m, 0))
        folds = list(plan.repetitions[0])
        tau_mat = np.empty((d.n, n_alg))
        for k, rows in enumerate(folds):
            mask = np.ones(d.n, dtype=bool)
            mask[rows] = False
            train_rows = np.flatnonzero(mask)
            train_d = d.subset(train_rows)
            for a, learner in enumerate(cfg.learners):
                model = learner.train(train_d, derived_seed(seed, m, 1, k, a))
                tau_mat[rows, a] = model.predict(d.x[rows])

        calib_plan = generate_plan(d.n, M=1, K=cfg.L, seed=derived_seed(seed, m, 2))
        cfolds = list(calib_plan.repetitions[0])
        beta_mat = np.empty((cfg.L, n_alg))
        tau_hat = np.empty(d.n)
        for ell, rows in enumerate(cfolds):
            mask = np.ones(d.n, dtype=bool)
            mask[rows] = False
            fit_rows = np.flatnonzero(mask)
            tau_bar = tau_mat[fit_rows].mean(axis=0)
            inter = (tau_mat[fit_rows] - tau_bar) * (d.t[fit_rows] - p[fit_rows])[:, None]
            design = np.column_stack([controls[fit_rows], inter])
            beta, _, _, ridge_used = wls_fit(design, d.y[fit_rows], w[fit_rows])
            ridge_any = ridge_any or ridge_used
            beta_mat[ell] = beta[controls.shape[1]:]
            tau_hat[rows] = tau_mat[rows] @ beta_mat[ell]
        train_folds.append(folds)
        calib_folds.append(cfolds)
        tau_by_alg.append(tau_mat)
        betas_all.append(beta_mat)
        tau_all.append(tau_hat)
    return EnsembleFit(train_folds, calib_folds, tau_by_alg, betas_all, tau_all,
                       propensity=p, ridge_fallback=ridge_any)


def _fold_groups(tau_values: np.ndarray, rows: np.ndarray, J: int):
    """Rank-balanced J groups within one fold; ties go to the lower group.

    Returns (group labels for ``rows``, cut points: max tau per group).
    """
    if rows.size < J:
        raise EmptyGroup(f"fold of size {rows.size} cannot hold {J} groups")
    order = np.argsort(tau_values[rows], kind="stable")
    labels = np.empty(rows.size, dtype=np.int64)
    bounds = np.linspace(0, rows.size, J + 1).round().astype(int)
    cuts = []
    for j in range(J):
        labels[order[bounds[j]:bounds[j + 1]]] = j
        cuts.append(float(tau_values[rows][order[bounds[j + 1] - 1]]))
    return labels, cuts


def gates_estimate(cfg: GatesConfig, d: Dataset, fit: EnsembleFit) -> GatesResult:
    """Whole-sample weighted GATES regression per repetition, then average."""
    p = fit.propensity
    w = 1.0 / (p * (1.0 - p))
    controls = _controls_matrix(cfg, d, p)
    n_ctrl = controls.shape[1]
    gammas = np.empty((cfg.M, cfg.J))
    sigmas = np.empty((cfg.M, cfg.J))
    deltas = np.empty(cfg.M)
    delta_ses = np.empty(cfg.M)
    records = []
    flags = {}
    if fit.ridge_fallback:
        flags["collinear_calibration_ridge"] = True

    for m in range(cfg.M):
        tau = fit.tau[m]
        group = np.empty(d.n, dtype=np.int64)
        cutpoints = []
        for rows in fit.train_folds[m]:
            if float(np.ptp(tau[rows])) < 1e-8:
                warnings.warn(
                    "near-flat predicted treatment effects within a fold; "
                    "group quantiles are ill-defined",
                    stacklevel=2,
                )
            labels, cuts = _fold_groups(tau, rows, cfg.J)
            group[rows] = labels
            cutpoints.append(cuts)
        inter = np.zeros((d.n, cfg.J))
        centered_t = d.t - p
        for j in range(cfg.J):
            inter[:, j] = centered_t * (group == j)
        design = np.column_stack([controls, inter])
        beta, cov, _, _ = wls_fit(design, d.y, w)
        gam = beta[n_ctrl:]
        cov_g = cov[n_ctrl:, n_ctrl:]
        gammas[m] = gam
        sigmas[m] = np.sqrt(np.maximum(np.diag(cov_g), 0.0))
        contrast = np.zeros(cfg.J)
        contrast[-1], contrast[0] = 1.0, -1.0
        deltas[m] = contrast @ gam
        delta_ses[m] = float(np.sqrt(max(contrast @ cov_g @ contrast, 0.0)))
        records.append(
            {
                "gamma": gam.tolist(),
                "sigma": sigmas[m].tolist(),
                "delta": float(deltas[m]),
                "delta_se": float(delta_ses[m]),
                "beta_weights": fit.betas[m].tolist(),
                "cut_points": cutpoints,
            }
        )

    delta_hat = float(deltas.mean())
    delta_se = float(delta_ses.mean())
    z = delta_hat / delta_se if delta_se > 0 else np.inf * np.sign(delta_hat or 1.0)
    return GatesResult(
        gamma_hat=gammas.mean(axis=0),
        sigma_hat=sigmas.mean(axis=0),
        delta_hat=delta_hat,
        delta_se=delta_se,
        p_one_sided=float(1.0 - norm_cdf(z)),
        p_two_sided=float(2.0 * norm_cdf(-abs(z))),
        per_repetition=records,
        flags=flags,
    )


def het_test(cfg: GatesConfig, d: Dataset, fit: EnsembleFit, alpha: float | None = None,
             mc_draws: int = 20_000, seed: int = 0) -> HetTestResult:
    """One-sided test comparing fold-level calibration fit against no-signal.

    Each split's mean squared residual from the fold-level calibration
    regression is compared with the controls-only baseline regression; a split
    beating the baseline by more than sampling noise indicates detectable
    heterogeneity.
    """
    alpha = cfg.alpha if alpha is None else alpha
    p = fit.propensity
    w = 1.0 / (p * (1.0 - p))
    controls = _controls_matrix(cfg, d, p)

    _, _, base_resid, _ = wls_fit(controls, d.y, w)
    base_sq = base_resid**2
    msr_base = float(base_sq.mean())

    eval_sets = []
    split_sq = []
    msr_splits = []
    for m in range(cfg.M):
        tau_mat = fit.tau_by_alg[m]
        for rows in fit.train_folds[m]:
            tau_bar = tau_mat[rows].mean(axis=0)
            inter = (tau_mat[rows] - tau_bar) * (d.t[rows] - p[rows])[:, None]
            design = np.column_stack([controls[rows], inter])
            _, _, resid, _ = wls_fit(design, d.y[rows], w[rows])
            sq = resid**2
            eval_sets.append(rows)
            split_sq.append(sq)
            msr_splits.append(float(sq.mean()))

    msr_splits = np.array(msr_splits)
    if float(base_sq.var()) == 0.0:
        raise ZeroDiagonal("outcome is deterministic given controls; MSR variance is zero")
    sigma = sigma_from_values(eval_sets, d.n, split_sq, base_sq)
    test = one_sided_test(msr_splits - msr_base, sigma, d.n, alpha, mc_draws, seed)
    return HetTestResult(msr_splits=msr_splits, msr_baseline=msr_base, test=test)


def run_gates(cfg: GatesConfig, d: Dataset, seed: int = 0, run_het: bool = False,
              mc_draws: int = 20_000):
    """Convenience pipeline: ensemble predictions, GATES, optional het test."""
    fit = ensemble_predict(cfg, d, seed)
    result = gates_estimate(cfg, d, fit)
    het = het_test(cfg, d, fit, mc_draws=mc_draws, seed=derived_seed(seed, 3)) if run_het else None
    return result, het, fit


# ---------------------------------------------------------------------------
# baseline aggregation schemes


def _fold_level_gates(cfg: GatesConfig, d: Dataset, rows: np.ndarray,
                      tau_values: np.ndarray, p, w, controls):
    """One-sided p-value for the top-minus-bottom gap within a single fold."""
    labels, _ = _fold_groups(tau_values, rows, cfg.J)
    inter = np.zeros((rows.size, cfg.J))
    centered_t = d.t[rows] - p[rows]
    for j in range(cfg.J):
        inter[:, j] = centered_t * (labels == j)
    design = np.column_stack([controls[rows], inter])
    beta, cov, _, _ = wls_fit(design, d.y[rows], w[rows])
    n_ctrl = controls.shape[1]
    contrast = np.zeros(design.shape[1])
    contrast[n_ctrl + cfg.J - 1], contrast[n_ctrl] = 1.0, -1.0
    delta = float(contrast @ beta)
    se = float(np.sqrt(max(contrast @ cov @ contrast, 1e-300)))
    return delta / se


def baselines(cfg: GatesConfig, d: Dataset, seed: int = 0) -> dict:
    """Twice-the-median and sequential-aggregation p-values.

    Both use the first configured learner only (they predate ensembling):
    TTM computes a fold-level p-value for every (m, k) split and reports twice
    the median; Seq trains on folds 1..k-1, evaluates the t-statistic on fold
    k, scales the average t by sqrt(K-1), and aggregates the per-repetition
    p-values by twice the median.
    """
    p = d.propensity_values()
    w = 1.0 / (p * (1.0 - p))
    controls = _controls_matrix(cfg, d, p)
    learner = cfg.learners[0]

    ttm_pvalues = []
    seq_pvalues = []
    for m in range(cfg.M):
        plan = generate_plan(d.n, M=1, K=cfg.K, seed=derived_seed(seed, m, 0))
        folds = list(plan.repetitions[0])

        # TTM: model trained on the complement, evaluated within the fold
        for k, rows in enumerate(folds):
            mask = np.ones(d.n, dtype=bool)
            mask[rows] = False
            model = learner.train(d.subset(np.flatnonzero(mask)), derived_seed(seed, m, 1, k))
            tau = np.zeros(d.n)
            tau[rows] = model.predict(d.x[rows])
            t_stat = _fold_level_gates(cfg, d, rows, tau, p, w, controls)
            ttm_pvalues.append(float(1.0 - norm_cdf(t_stat)))

        # Seq: ordered training on folds 1..k-1, evaluation on fold k
        t_stats = []
        for k in range(1, cfg.K):
            train_rows = np.sort(np.concatenate(folds[:k]))
            model = learner.train(d.subset(train_rows), derived_seed(seed, m, 2, k))
            rows = folds[k]
            tau = np.zeros(d.n)
            tau[rows] = model.predict(d.x[rows])
            t_stats.append(_fold_level_gates(cfg, d, rows, tau, p, w, controls))
        t_final = float(np.sqrt(cfg.K - 1) * np.mean(t_stats))
        seq_pvalues.append(float(1.0 - norm_cdf(t_final)))

    return {
        "ttm_pvalue": ttm_aggregate(ttm_pvalues),
        "seq_pvalue": ttm_aggregate(seq_pvalues),
    }


def ttm_aggregate(pvalues) -> float:
    """Twice the median, clamped to 1."""
    return float(min(1.0, 2.0 * np.median(np.asarray(pvalues, dtype=np.float64))))
