"""Monte-Carlo data generators and the seeded experiment grid runner.

The Gaussian-copula generator preserves the empirical margins and latent
normal rank correlation of a base dataset: ranks are mapped to uniforms,
Gaussianized, correlated draws are mapped back through each column's empirical
quantile function (type-1 inverse on the sorted base values). Three modes:
"asis" keeps the estimated correlation, "correlated" triples the outcome
row/column (repaired to the nearest positive definite matrix), "uncorrelated"
draws the outcome independently as Bernoulli.

The treatment-effect generator is a parameterized synthetic analog of a
zero-inflated count outcome: a logit decides zero donation, a truncated
Poisson draws positive amounts, and the treatment shifts both pieces. The
"shuffled" mode permutes treatment after outcomes are generated so effect
heterogeneity exists but is unrelated to covariates. Both potential outcomes
are kept in a ``_true_te`` oracle column.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy import stats

from .data import Dataset, Roles
from .errors import NotPositiveDefinite
from .inference import norm_cdf
from .learners import Model
from .moments import AverageMoment, MomentFunction
from .rng import substream
from .splits import SplitPlan


# ---------------------------------------------------------------------------
# copula machinery


def rank_uniforms(column: np.ndarray) -> np.ndarray:
    """rank / (n + 1), average ranks for ties."""
    return stats.rankdata(column, method="average") / (column.size + 1.0)


def latent_correlation(columns: list[np.ndarray]) -> np.ndarray:
    z = np.column_stack([stats.norm.ppf(rank_uniforms(c)) for c in columns])
    sigma = np.corrcoef(z.T)
    return np.atleast_2d(sigma)


def nearest_positive_definite(sigma: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    """Eigenvalue clip plus unit-diagonal rescale; PD inputs pass through."""
    sigma = 0.5 * (sigma + sigma.T)
    eigval, eigvec = np.linalg.eigh(sigma)
    if eigval.min() > eps and np.allclose(np.diag(sigma), 1.0):
        return sigma
    clipped = np.maximum(eigval, eps)
    repaired = (eigvec * clipped) @ eigvec.T
    scale = np.sqrt(np.diag(repaired))
    repaired = repaired / np.outer(scale, scale)
    repaired = 0.5 * (repaired + repaired.T)
    np.fill_diagonal(repaired, 1.0)
    if np.linalg.eigvalsh(repaired).min() <= 0:
        raise NotPositiveDefinite("correlation matrix could not be repaired")
    return repaired


def empirical_inverse(base_column: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Type-1 inverse of the empirical CDF on the sorted base values."""
    srt = np.sort(base_column)
    idx = np.ceil(u * srt.size).astype(np.int64) - 1
    return srt[np.clip(idx, 0, srt.size - 1)]


@dataclass(frozen=True)
class CopulaDGP:
    """Synthetic sampler that mimics a base dataset's margins and rank structure.

    ``sigma`` overrides the latent correlation estimated from the base
    (ordered as the base's columns).
    """

    base: Dataset
    mode: str = "asis"  # asis | correlated | uncorrelated
    outcome_p: float = 0.07
    correlation_boost: float = 3.0
    sigma: np.ndarray | None = None

    def sigma_star(self) -> np.ndarray:
        names = self.base.column_names
        if self.sigma is not None:
            sigma = np.asarray(self.sigma, dtype=np.float64)
        else:
            sigma = latent_correlation([self.base.column(c) for c in names])
        if self.mode == "correlated":
            out_idx = names.index(self.base.roles.outcome)
            boosted = sigma.copy()
            boosted[out_idx, :] *= self.correlation_boost
            boosted[:, out_idx] *= self.correlation_boost
            np.fill_diagonal(boosted, 1.0)
            sigma = nearest_positive_definite(boosted)
        else:
            sigma = nearest_positive_definite(sigma)
        return sigma


def copula_sample(dgp: CopulaDGP, n: int, seed: int = 0) -> Dataset:
    """Draw n rows: correlated normals -> uniforms -> per-column margins."""
    names = list(dgp.base.column_names)
    for name in names:
        if np.unique(dgp.base.column(name)).size < 2:
            raise NotPositiveDefinite(f"base column {name!r} is constant")
    rng = substream(seed, 0)
    sigma = dgp.sigma_star()
    out_name = dgp.base.roles.outcome

    if dgp.mode == "uncorrelated":
        cov_names = [c for c in names if c != out_name]
        idx = [names.index(c) for c in cov_names]
        sub = nearest_positive_definite(sigma[np.ix_(idx, idx)])
        z = rng.multivariate_normal(np.zeros(len(cov_names)), sub, size=n,
                                    method="cholesky")
        u = stats.norm.cdf(z)
        columns = {c: empirical_inverse(dgp.base.column(c), u[:, j])
                   for j, c in enumerate(cov_names)}
        columns[out_name] = (rng.random(n) < dgp.outcome_p).astype(np.float64)
    else:
        z = rng.multivariate_normal(np.zeros(len(names)), sigma, size=n,
                                    method="cholesky")
        u = stats.norm.cdf(z)
        columns = {c: empirical_inverse(dgp.base.column(c), u[:, j])
                   for j, c in enumerate(names)}
    return Dataset(columns, dgp.base.roles)


# ---------------------------------------------------------------------------
# bundled synthetic base (for users without data)

_BASE_SIGMA_SEED = 20240211


def synthetic_base(n: int = 400, seed: int = _BASE_SIGMA_SEED) -> Dataset:
    """8 mixed-margin covariates plus a binary outcome with a fixed dependence."""
    rng = substream(seed, 1)
    corr = np.full((8, 8), 0.25)
    np.fill_diagonal(corr, 1.0)
    z = rng.multivariate_normal(np.zeros(8), corr, size=n, method="cholesky")
    u = stats.norm.cdf(z)
    columns = {
        "x1": stats.norm.ppf(u[:, 0]),
        "x2": np.exp(stats.norm.ppf(u[:, 1]) * 0.5),
        "x3": np.floor(u[:, 2] * 6.0),
        "x4": (u[:, 3] > 0.7).astype(np.float64),
        "x5": -np.log1p(-u[:, 4]),
        "x6": u[:, 5],
        "x7": stats.norm.ppf(u[:, 6]) * 2.0 + 1.0,
        "x8": np.floor(u[:, 7] * 3.0),
    }
    score = 0.8 * columns["x1"] + 0.5 * columns["x4"] - 0.3 * columns["x6"] - 1.5
    prob = 1.0 / (1.0 + np.exp(-score))
    columns["y"] = (rng.random(n) < prob).astype(np.float64)
    return Dataset(columns, Roles("y", tuple(f"x{i}" for i in range(1, 9))))


# ---------------------------------------------------------------------------
# heterogeneous treatment effects


@dataclass(frozen=True)
class HteDGP:
    """Zero-inflated count outcome with a covariate-driven treatment effect.

    ``effect_scale`` multiplies the treatment coefficients in the
    zero-inflation logit and ``poisson_scale`` the count intensity used in the
    effect-probability computation (analog of the source design's 4 and 0.05).
    ``hte_mode`` "predictable" keeps the covariate link; "shuffled" permutes
    the treatment indicator after outcomes are drawn. Probabilities produced
    by the effect construction are clamped to [0, 1].
    """

    n_covariates: int = 6
    effect_scale: float = 4.0
    poisson_scale: float = 0.05
    hte_mode: str = "predictable"
    zero_coef: tuple = (0.9, -0.6, 0.4, 0.0, 0.0, -0.3)
    count_coef: tuple = (0.5, 0.4, -0.3, 0.2, 0.0, 0.0)
    zero_intercept: float = -0.3
    count_intercept: float = 0.6
    treat_zero_shift: float = -0.5
    treat_count_shift: float = 0.35


def hte_sample(dgp: HteDGP, n: int, seed: int = 0) -> Dataset:
    """Draw a randomized-trial dataset with oracle potential outcomes.

    The returned dataset has roles (outcome y, treatment t, covariates) plus
    oracle columns ``_true_te`` (realized Y(1) - Y(0)), ``_y0`` and ``_y1``,
    which simulations may read but estimators must not.
    """
    rng = substream(seed, 2)
    p = dgp.n_covariates
    corr = np.full((p, p), 0.2)
    np.fill_diagonal(corr, 1.0)
    x = rng.multivariate_normal(np.zeros(p), corr, size=n, method="cholesky")
    w0 = np.asarray(dgp.zero_coef[:p])
    w1 = np.asarray(dgp.count_coef[:p])
    g0 = x @ w0
    g1 = x @ w1

    # potential outcome under control: zero-inflated shifted Poisson
    p_zero0 = _sigmoid(dgp.zero_intercept + g0)
    mu0 = np.exp(np.clip(dgp.count_intercept + 0.5 * g1, -10.0, 5.0))
    is_zero = rng.random(n) < p_zero0
    y0 = np.where(is_zero, 0.0, 1.0 + rng.poisson(mu0))

    # treatment arm pieces, coefficients amplified by effect_scale
    p_zero1 = _sigmoid(dgp.zero_intercept + g0 + dgp.effect_scale * (dgp.treat_zero_shift + 0.2 * g1))
    mu1 = np.exp(np.clip(dgp.count_intercept + 0.5 * g1 + dgp.treat_count_shift + 0.3 * g1, -10.0, 5.0))

    q0 = (1.0 - p_zero0) * stats.poisson.sf(y0, mu0 * dgp.poisson_scale + 1e-12)
    q1 = (1.0 - p_zero1) * stats.poisson.sf(y0, mu1 * dgp.poisson_scale + 1e-12)
    p_no_effect = np.clip(q0 - q1, 0.0, 1.0)

    effect = rng.random(n) >= p_no_effect
    # truncated Poisson starting at y0: inverse cdf on u in [F(y0 - 1), 1)
    lower = stats.poisson.cdf(y0 - 1.0, mu1)
    u = lower + rng.random(n) * (1.0 - lower)
    y1_draw = stats.poisson.ppf(np.clip(u, 0.0, 1.0 - 1e-12), mu1)
    y1 = np.where(effect, np.maximum(y1_draw, y0), y0)

    t = (rng.random(n) < 0.5).astype(np.float64)
    if dgp.hte_mode == "shuffled":
        t = t[rng.permutation(n)]
    y = np.where(t == 1.0, y1, y0)

    columns = {f"x{i+1}": x[:, i] for i in range(p)}
    columns.update({"y": y, "t": t, "_true_te": y1 - y0, "_y0": y0, "_y1": y1})
    roles = Roles("y", tuple(f"x{i+1}" for i in range(p)), treatment="t", propensity=0.5)
    return Dataset(columns, roles)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -35.0, 35.0)))


def linear_cate_sample(n: int, seed: int = 0, base_effect: float = 1.0,
                       hte_coef: float = 1.0, noise: float = 1.0,
                       n_covariates: int = 3) -> Dataset:
    """Simple randomized trial with a linear CATE, for calibration checks."""
    rng = substream(seed, 3)
    x = rng.standard_normal((n, n_covariates))
    t = (rng.random(n) < 0.5).astype(np.float64)
    cate = base_effect + hte_coef * x[:, 0]
    y = x @ np.linspace(1.0, 0.5, n_covariates) + t * cate + noise * rng.standard_normal(n)
    columns = {f"x{i+1}": x[:, i] for i in range(n_covariates)}
    columns.update({"y": y, "t": t, "_true_te": cate})
    roles = Roles("y", tuple(f"x{i+1}" for i in range(n_covariates)),
                  treatment="t", propensity=0.5)
    return Dataset(columns, roles)


# ---------------------------------------------------------------------------
# fresh-draw oracle for the data-dependent estimand


def estimand_oracle(mf: MomentFunction, models, plan: SplitPlan, fresh: Dataset,
                    variant: int = 2) -> np.ndarray:
    """theta_{eta-hat} approximated on a large fresh sample.

    Solves the same aggregation as the estimator, but substituting the fresh
    sample for every evaluation split (population analog of the moment).
    """
    items = [models[key] for key in sorted(models)]
    if isinstance(mf, AverageMoment):
        means = np.array([float(np.mean(mf.f_values(model, fresh, None))) for model in items])
        if variant in (1, 2):
            return np.array([means.mean()])
        return np.array([means.reshape(plan.M, plan.K).mean(axis=1).mean()])
    # general moments: Newton on the pooled fresh moment
    from .zestim import newton_solve

    def fun(theta):
        acc = np.zeros(mf.dim)
        for model in items:
            acc += mf.psi(theta, model, fresh, None).mean(axis=0)
        return acc / len(items)

    def jac(theta):
        acc = np.zeros((mf.dim, mf.dim))
        for model in items:
            acc += mf.jacobian_estimate(theta, model, fresh, None)
        return acc / len(items)

    theta0 = mf.initial_guess(items[0], fresh, None)
    theta, _, _ = newton_solve(fun, jac, theta0, 1e-9)
    return theta


# ---------------------------------------------------------------------------
# experiment grid


@dataclass
class ExperimentGrid:
    """Seeded cross of DGP x n x K x method, one row per (cell, iteration)."""

    dgp: dict
    n_list: tuple
    K_list: tuple
    M: int
    methods: tuple
    iterations: int
    seed: int
    out_csv: str
    out_json: str | None = None
    extra: dict = field(default_factory=dict)


GRID_COLUMNS = ("cell_id", "iteration", "method", "n", "K", "M",
                "estimate", "se", "ci_lo", "ci_hi", "p_value", "covered", "error")


def run_grid(grid: ExperimentGrid, methods_registry=None, resume: bool = True) -> list[dict]:
    """Execute every (cell, iteration), appending rows to the CSV sink.

    Failures are recorded in the ``error`` column and the grid continues.
    With ``resume`` the rows already present in the sink are skipped, keyed by
    (cell_id, iteration).
    """
    from .cli import METHOD_RUNNERS  # late import; the registry lives with the CLI

    registry = methods_registry or METHOD_RUNNERS
    cells = []
    for i, (n, K, method) in enumerate(product(grid.n_list, grid.K_list, grid.methods)):
        cells.append((f"cell{i:03d}", n, K, method))

    done = set()
    if resume and os.path.exists(grid.out_csv):
        with open(grid.out_csv, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                done.add((row["cell_id"], int(row["iteration"])))
        mode = "a"
    else:
        mode = "w"

    rows = []
    with open(grid.out_csv, mode, newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
        if mode == "w":
            writer.writeheader()
        for cell_index, (cell_id, n, K, method) in enumerate(cells):
            runner = registry[method]
            for it in range(grid.iterations):
                if (cell_id, it) in done:
                    continue
                row = {
                    "cell_id": cell_id, "iteration": it, "method": method,
                    "n": n, "K": K, "M": grid.M,
                    "estimate": "", "se": "", "ci_lo": "", "ci_hi": "",
                    "p_value": "", "covered": "", "error": "",
                }
                try:
                    result = runner(grid, n, K, cell_index, it)
                    row.update({k: v for k, v in result.items() if k in GRID_COLUMNS})
                except Exception as exc:  # noqa: BLE001 - per-cell failures recorded
                    row["error"] = f"{type(exc).__name__}: {exc}"
                writer.writerow(row)
                rows.append(row)

    if grid.out_json:
        summary = summarize_grid(grid.out_csv)
        from .report import write_report
        write_report(grid.out_json, {"schema_version": "1.0.0", "method": "simulate",
                                     "summary": summary})
    return rows


def summarize_grid(csv_path: str) -> dict:
    """Per-cell means of the numeric grid columns."""
    agg: dict[str, dict] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cell = agg.setdefault(row["cell_id"], {
                "method": row["method"], "n": int(row["n"]), "K": int(row["K"]),
                "count": 0, "failures": 0,
                "estimate_sum": 0.0, "covered_sum": 0.0, "p_sum": 0.0,
            })
            cell["count"] += 1
            if row["error"]:
                cell["failures"] += 1
                continue
            for key, target in (("estimate", "estimate_sum"),
                                ("covered", "covered_sum"),
                                ("p_value", "p_sum")):
                if row[key] != "":
                    cell[target] += float(row[key])
    out = {}
    for cell_id, cell in agg.items():
        ok = cell["count"] - cell["failures"]
        out[cell_id] = {
            "method": cell["method"], "n": cell["n"], "K": cell["K"],
            "iterations": cell["count"], "failures": cell["failures"],
            "mean_estimate": cell["estimate_sum"] / ok if ok else None,
            "coverage": cell["covered_sum"] / ok if ok else None,
            "mean_p": cell["p_sum"] / ok if ok else None,
        }
    return out
