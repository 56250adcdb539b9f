"""Split-sample Z-estimators, three aggregation variants.

Variant 1 solves the moment condition separately on every evaluation split and
averages the solutions. Variant 2 solves the single equation obtained by
averaging the per-split empirical moments. Variant 3 pools within each
repetition and averages the per-repetition solutions. For average-type moments
(psi = f - theta) all three coincide and are computed in closed form; the
tercile-fraction system is likewise solved in closed form because its moment
is piecewise constant in the thresholds. Everything else goes through a damped
Newton iteration with a Nelder-Mead fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import Dataset
from .errors import NoConvergence, SingularJacobian
from .moments import AverageMoment, MomentFunction, TercileFractions
from .splits import SplitPlan

DEFAULT_TOL = 1e-10


@dataclass
class ZEstimate:
    variant: int
    theta_hat: np.ndarray
    per_split_thetas: dict[tuple[int, int], np.ndarray] | None = None
    per_repetition_thetas: dict[int, np.ndarray] | None = None
    iterations: int = 0
    residual_norm: float = 0.0
    tol: float = DEFAULT_TOL

    def to_jsonable(self) -> dict:
        out = {
            "variant": self.variant,
            "theta_hat": self.theta_hat.tolist(),
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
        }
        if self.per_split_thetas is not None:
            out["per_split_thetas"] = {
                f"{m},{k}": v.tolist() for (m, k), v in self.per_split_thetas.items()
            }
        if self.per_repetition_thetas is not None:
            out["per_repetition_thetas"] = {
                str(m): v.tolist() for m, v in self.per_repetition_thetas.items()
            }
        return out


@dataclass
class _Split:
    m: int
    k: int
    rows: np.ndarray
    model: object


def _splits_of(plan: SplitPlan, models) -> list[_Split]:
    out = []
    for m, rep in enumerate(plan.repetitions):
        for k, rows in enumerate(rep):
            out.append(_Split(m, k, rows, models[(m, k)]))
    return out


def _tolerance(tol_base: float, theta: np.ndarray) -> float:
    return tol_base * (1.0 + float(np.linalg.norm(theta)))


def newton_solve(fun, jac, theta0, tol_base=DEFAULT_TOL, max_iter=80):
    """Damped Newton root-finder on a vector system, Nelder-Mead fallback.

    ``fun(theta)`` returns the stacked moment, ``jac(theta)`` its Jacobian
    estimate. Returns (theta, iterations, residual_norm).
    """
    theta = np.asarray(theta0, dtype=np.float64).copy()
    value = fun(theta)
    it = 0
    for it in range(1, max_iter + 1):
        norm = float(np.linalg.norm(value))
        if norm <= _tolerance(tol_base, theta):
            return theta, it - 1, norm
        j = jac(theta)
        try:
            step = np.linalg.solve(j, -value)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            theta, norm = _nelder_mead(fun, theta)
            if norm <= _tolerance(tol_base, theta):
                return theta, it, norm
            raise SingularJacobian("Newton step unsolvable and fallback did not reach tolerance")
        alpha = 1.0
        improved = False
        for _ in range(40):
            cand = theta + alpha * step
            cand_value = fun(cand)
            if np.linalg.norm(cand_value) <= (1.0 - 1e-4 * alpha) * norm:
                theta, value = cand, cand_value
                improved = True
                break
            alpha *= 0.5
        if not improved:
            theta, final = _nelder_mead(fun, theta)
            if final <= _tolerance(tol_base, theta):
                return theta, it, final
            raise NoConvergence(f"stalled at residual {final:.3e}")
    norm = float(np.linalg.norm(fun(theta)))
    if norm <= _tolerance(tol_base, theta):
        return theta, max_iter, norm
    raise NoConvergence(f"residual {norm:.3e} after {max_iter} iterations")


def _nelder_mead(fun, theta0):
    res = optimize.minimize(
        lambda t: float(np.linalg.norm(fun(t)) ** 2),
        theta0,
        method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-24, "maxiter": 4000},
    )
    return np.asarray(res.x, dtype=np.float64), float(np.linalg.norm(fun(res.x)))


def _solve_group(mf: MomentFunction, group: list[_Split], d: Dataset,
                 tol_base: float, theta_init) -> tuple[np.ndarray, int, float]:
    """Solve the averaged moment over one group of splits (size >= 1)."""
    if isinstance(mf, AverageMoment):
        theta = np.array(
            [float(np.mean([np.mean(mf.f_values(s.model, d, s.rows)) for s in group]))]
        )
        res = _group_residual(mf, group, d, theta)
        return theta, 0, res
    if isinstance(mf, TercileFractions):
        if len(group) == 1:
            s = group[0]
            theta = mf.solve_closed_form(s.model, d, s.rows)
        else:
            theta = mf.solve_pooled(
                [(s.model.predict(d.x[s.rows]), d.y[s.rows]) for s in group]
            )
        return theta, 0, _group_residual(mf, group, d, theta)

    def fun(theta):
        acc = np.zeros(mf.dim)
        for s in group:
            acc += mf.psi(theta, s.model, d, s.rows).mean(axis=0)
        return acc / len(group)

    def jac(theta):
        acc = np.zeros((mf.dim, mf.dim))
        for s in group:
            acc += mf.jacobian_estimate(theta, s.model, d, s.rows)
        return acc / len(group)

    if theta_init is None:
        s0 = group[0]
        theta_init = mf.initial_guess(s0.model, d, s0.rows)
    return newton_solve(fun, jac, theta_init, tol_base)


def _group_residual(mf, group, d, theta) -> float:
    acc = np.zeros(mf.dim)
    for s in group:
        acc += mf.psi(theta, s.model, d, s.rows).mean(axis=0)
    return float(np.linalg.norm(acc / len(group)))


def per_split_estimates(mf: MomentFunction, models, plan: SplitPlan, d: Dataset,
                        tol: float = DEFAULT_TOL, theta_init=None):
    """Variant-1 ingredients: one solved theta per (m, k)."""
    mf.validate(d)
    out = {}
    for s in _splits_of(plan, models):
        theta, _, _ = _solve_group(mf, [s], d, tol, theta_init)
        out[(s.m, s.k)] = theta
    return out


def solve(variant: int, mf: MomentFunction, models, plan: SplitPlan, d: Dataset,
          tol: float = DEFAULT_TOL, theta_init=None) -> ZEstimate:
    """Solve the split-sample Z-estimator for the requested variant."""
    if variant not in (1, 2, 3):
        raise ValueError(f"variant must be 1, 2 or 3, got {variant}")
    mf.validate(d)
    splits = _splits_of(plan, models)

    if variant == 1:
        per_split = {}
        worst = 0.0
        iters = 0
        for s in splits:
            theta, it, res = _solve_group(mf, [s], d, tol, theta_init)
            per_split[(s.m, s.k)] = theta
            worst = max(worst, res)
            iters = max(iters, it)
        theta_hat = np.mean(list(per_split.values()), axis=0)
        return ZEstimate(1, theta_hat, per_split_thetas=per_split,
                         iterations=iters, residual_norm=worst, tol=tol)

    if variant == 2:
        theta_hat, iters, res = _solve_group(mf, splits, d, tol, theta_init)
        return ZEstimate(2, theta_hat, iterations=iters, residual_norm=res, tol=tol)

    per_rep = {}
    worst = 0.0
    iters = 0
    for m in range(plan.M):
        group = [s for s in splits if s.m == m]
        theta, it, res = _solve_group(mf, group, d, tol, theta_init)
        per_rep[m] = theta
        worst = max(worst, res)
        iters = max(iters, it)
    theta_hat = np.mean(list(per_rep.values()), axis=0)
    return ZEstimate(3, theta_hat, per_repetition_thetas=per_rep,
                     iterations=iters, residual_norm=worst, tol=tol)


def solve_fullsample(mf: MomentFunction, model_b, d: Dataset,
                     tol: float = DEFAULT_TOL, theta_init=None) -> np.ndarray:
    """Whole-sample baseline estimate: solve the moment on all rows with one model."""
    mf.validate(d)
    rows = np.arange(d.n)
    group = [_Split(-1, -1, rows, model_b)]
    theta, _, _ = _solve_group(mf, group, d, tol, theta_init)
    return theta
