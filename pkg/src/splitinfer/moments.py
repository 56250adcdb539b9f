"""Moment functions psi(theta, model, row) and their empirical means.

Built-ins cover the standard model-property estimands: mean squared error,
probabilistic and exact classification rates, outcome/prediction covariance,
OLS of the outcome on the model prediction, the between-group MSE gap, and the
tercile-fraction system (three group fractions plus two quantile conditions).

All built-ins evaluate vectorized over a row index set. Smooth built-ins carry
analytic Jacobians; the tercile system is piecewise constant in theta and is
handled by closed-form solving plus a dedicated Jacobian construction (see
``TercileFractions.jacobian_estimate``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, as_row_index_set
from .errors import EmptySubset, IncompatibleRoles, NonFiniteJacobian, UnknownMoment
from .learners import Model


@dataclass(frozen=True)
class EmpiricalMoment:
    """Subsample mean of psi at a fixed theta."""

    value: np.ndarray
    size: int


def _take(arr, rows):
    return arr if rows is None else arr[rows]


def _count(d, rows):
    return d.n if rows is None else len(rows)


class MomentFunction:
    """Vector-valued moment abstraction; subclasses implement ``psi``.

    ``rows=None`` in the evaluation methods means "all rows" and avoids the
    index-copy on large inputs (used by the fresh-draw oracles).

    Attributes
    ----------
    dim : parameter/moment dimension d.
    smooth : whether psi is differentiable in theta.
    average_type : True when psi has the form f(w, model) - theta, in which
        case Z-estimation reduces to averaging f.
    """

    name = "custom"
    dim = 1
    smooth = True
    average_type = False

    def validate(self, d: Dataset) -> None:
        """Raise IncompatibleRoles when the dataset lacks required roles."""

    def psi(self, theta, model: Model, d: Dataset, rows=None) -> np.ndarray:
        """Per-row moment values, shape (len(rows), dim)."""
        raise NotImplementedError

    def jac_rows(self, theta, model: Model, d: Dataset, rows):
        """Per-row Jacobians d psi / d theta, shape (len(rows), dim, dim), or None."""
        return None

    def jacobian_estimate(self, theta, model: Model, d: Dataset, rows) -> np.ndarray:
        """Estimated Jacobian of the subsample-mean moment at theta."""
        jr = self.jac_rows(theta, model, d, rows)
        if jr is not None:
            out = jr.mean(axis=0)
        elif self.smooth:
            out = _fd_jacobian(self, theta, model, d, rows)
        else:
            raise NonFiniteJacobian(
                f"moment {self.name!r} is non-smooth and provides no Jacobian construction"
            )
        if not np.all(np.isfinite(out)):
            raise NonFiniteJacobian(f"non-finite Jacobian for moment {self.name!r}")
        return out

    def initial_guess(self, model: Model, d: Dataset, rows) -> np.ndarray:
        return np.zeros(self.dim)


def _fd_jacobian(mf: MomentFunction, theta, model, d, rows) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty((mf.dim, mf.dim))
    for j in range(mf.dim):
        step = 1e-6 * (1.0 + abs(theta[j]))
        hi = theta.copy()
        lo = theta.copy()
        hi[j] += step
        lo[j] -= step
        out[:, j] = (
            mf.psi(hi, model, d, rows).mean(axis=0) - mf.psi(lo, model, d, rows).mean(axis=0)
        ) / (2.0 * step)
    return out


class AverageMoment(MomentFunction):
    """psi = f(w, model) - theta for a scalar f; Jacobian is -1."""

    average_type = True
    dim = 1

    def f_values(self, model: Model, d: Dataset, rows) -> np.ndarray:
        raise NotImplementedError

    def psi(self, theta, model, d, rows):
        theta = np.asarray(theta, dtype=np.float64)
        return (self.f_values(model, d, rows) - theta[0])[:, None]

    def jac_rows(self, theta, model, d, rows):
        return np.broadcast_to(-np.eye(1), (_count(d, rows), 1, 1))

    def jacobian_estimate(self, theta, model, d, rows):
        return -np.eye(1)

    def initial_guess(self, model, d, rows):
        return np.array([float(np.mean(self.f_values(model, d, rows)))])


class Mse(AverageMoment):
    name = "mse"

    def f_values(self, model, d, rows):
        return (_take(d.y, rows) - model.predict(_take(d.x, rows))) ** 2


class ClassifyProb(AverageMoment):
    """Correct-classification rate of a probabilistic classifier."""

    name = "classify_prob"

    def f_values(self, model, d, rows):
        y = _take(d.y, rows)
        p = model.predict(_take(d.x, rows))
        return p * (y == 1.0) + (1.0 - p) * (y == 0.0)

    def validate(self, d):
        y = d.y
        if not np.all((y == 0.0) | (y == 1.0)):
            raise IncompatibleRoles("classify_prob needs a binary outcome")


class ClassifyBinary(AverageMoment):
    """Exact-match classification rate; the model must emit labels in {0,1}."""

    name = "classify_binary"

    def f_values(self, model, d, rows):
        return (_take(d.y, rows) == model.predict(_take(d.x, rows))).astype(np.float64)


class Covariance(AverageMoment):
    """psi = y * eta(x) - theta, the prediction/outcome covariance when E y = 0."""

    name = "covariance"

    def f_values(self, model, d, rows):
        return _take(d.y, rows) * model.predict(_take(d.x, rows))


class LinregOnEta(MomentFunction):
    """OLS moment for the regression y ~ theta0 + theta1 * eta(x)."""

    name = "linreg_on_eta"
    dim = 2

    def psi(self, theta, model, d, rows):
        theta = np.asarray(theta, dtype=np.float64)
        eta = model.predict(d.x[rows])
        r = d.y[rows] - theta[0] - theta[1] * eta
        return np.column_stack([r, r * eta])

    def jac_rows(self, theta, model, d, rows):
        eta = model.predict(d.x[rows])
        out = np.empty((eta.shape[0], 2, 2))
        out[:, 0, 0] = -1.0
        out[:, 0, 1] = -eta
        out[:, 1, 0] = -eta
        out[:, 1, 1] = -(eta**2)
        return out

    def initial_guess(self, model, d, rows):
        eta = model.predict(d.x[rows])
        z = np.column_stack([np.ones(eta.shape[0]), eta])
        beta, *_ = np.linalg.lstsq(z, d.y[rows], rcond=None)
        return beta


class GroupMseGap(MomentFunction):
    """Per-group MSEs (theta_1, theta_2) for the two group labels, sorted.

    The fairness gap is the coordinate difference; combine with the "diff"
    reduction for inference on theta_1 - theta_2.
    """

    name = "group_mse_gap"
    dim = 2

    def validate(self, d):
        if d.roles.group is None:
            raise IncompatibleRoles("group_mse_gap needs a group column")
        if np.unique(d.g).size != 2:
            raise IncompatibleRoles("group_mse_gap needs exactly two group labels")

    def _masks(self, d, rows):
        labels = np.unique(d.g)
        g = d.g[rows]
        return g == labels[0], g == labels[1]

    def psi(self, theta, model, d, rows):
        theta = np.asarray(theta, dtype=np.float64)
        in_a, in_b = self._masks(d, rows)
        sq = (d.y[rows] - model.predict(d.x[rows])) ** 2
        return np.column_stack([(sq - theta[0]) * in_a, (sq - theta[1]) * in_b])

    def jac_rows(self, theta, model, d, rows):
        in_a, in_b = self._masks(d, rows)
        out = np.zeros((in_a.shape[0], 2, 2))
        out[:, 0, 0] = -in_a.astype(np.float64)
        out[:, 1, 1] = -in_b.astype(np.float64)
        return out

    def initial_guess(self, model, d, rows):
        in_a, in_b = self._masks(d, rows)
        sq = (d.y[rows] - model.predict(d.x[rows])) ** 2
        a = float(sq[in_a].mean()) if in_a.any() else 0.0
        b = float(sq[in_b].mean()) if in_b.any() else 0.0
        return np.array([a, b])


def left_inverse_quantile(values: np.ndarray, prob: float) -> float:
    """Left-continuous empirical inverse inf{t : Fhat(t) >= prob}."""
    srt = np.sort(values)
    idx = max(int(math.ceil(prob * srt.size)) - 1, 0)
    return float(srt[min(idx, srt.size - 1)])


class TercileFractions(MomentFunction):
    """Outcome fractions by tercile of the model prediction, J = 3.

    Parameters are (theta_1, theta_2, theta_3, t_1, t_2): three group means of
    the outcome and the two prediction quantile thresholds. Group membership
    uses half-open intervals (t_{j-1}, t_j]; ties go to the lower group. The
    moment is piecewise constant in (t_1, t_2), so it is solved in closed form
    and its Jacobian is built from the block structure rather than finite
    differences: the threshold rows only require the prediction density and
    the outcome's conditional mean at each threshold, and the density factors
    cancel out of every functional of the fraction block.
    """

    name = "tercile_fractions"
    dim = 5
    smooth = False
    J = 3

    def group_masks(self, theta, model, d, rows):
        theta = np.asarray(theta, dtype=np.float64)
        eta = model.predict(d.x[rows])
        t1, t2 = theta[3], theta[4]
        g1 = eta <= t1
        g2 = (eta > t1) & (eta <= t2)
        g3 = eta > t2
        return g1, g2, g3, eta

    def psi(self, theta, model, d, rows):
        theta = np.asarray(theta, dtype=np.float64)
        g1, g2, g3, eta = self.group_masks(theta, model, d, rows)
        y = d.y[rows]
        return np.column_stack(
            [
                (y - theta[0]) * g1,
                (y - theta[1]) * g2,
                (y - theta[2]) * g3,
                g1.astype(np.float64) - 1.0 / 3.0,
                (eta <= theta[4]).astype(np.float64) - 2.0 / 3.0,
            ]
        )

    def solve_closed_form(self, model, d, rows) -> np.ndarray:
        """Order statistics for the thresholds, then group means of y."""
        eta = model.predict(d.x[rows])
        y = d.y[rows]
        t1 = left_inverse_quantile(eta, 1.0 / 3.0)
        t2 = left_inverse_quantile(eta, 2.0 / 3.0)
        g1 = eta <= t1
        g2 = (eta > t1) & (eta <= t2)
        g3 = eta > t2
        means = [float(y[g].mean()) if g.any() else 0.0 for g in (g1, g2, g3)]
        return np.array([*means, t1, t2])

    def solve_pooled(self, split_items) -> np.ndarray:
        """Closed-form solve of the averaged moment over splits.

        ``split_items`` is a list of (eta_values, y_values) pairs; each split
        contributes weight 1/(n_splits * |s|) per row.
        """
        etas = []
        ys = []
        weights = []
        n_splits = len(split_items)
        for eta, y in split_items:
            etas.append(eta)
            ys.append(y)
            weights.append(np.full(eta.shape[0], 1.0 / (n_splits * eta.shape[0])))
        eta = np.concatenate(etas)
        y = np.concatenate(ys)
        w = np.concatenate(weights)
        order = np.argsort(eta, kind="stable")
        cum = np.cumsum(w[order])
        total = cum[-1]
        thresholds = []
        for j in (1, 2):
            target = j * total / 3.0
            pos = int(np.searchsorted(cum, target - 1e-12, side="left"))
            thresholds.append(float(eta[order][min(pos, eta.size - 1)]))
        t1, t2 = thresholds
        g1 = eta <= t1
        g2 = (eta > t1) & (eta <= t2)
        g3 = eta > t2
        means = []
        for g in (g1, g2, g3):
            means.append(float((w[g] * y[g]).sum() / w[g].sum()) if g.any() else 0.0)
        return np.array([*means, t1, t2])

    def jacobian_estimate(self, theta, model, d, rows):
        theta = np.asarray(theta, dtype=np.float64)
        g1, g2, g3, eta = self.group_masks(theta, model, d, rows)
        y = d.y[rows]
        n = eta.shape[0]
        p = np.array([g1.mean(), g2.mean(), g3.mean()])
        p = np.maximum(p, 1.0 / n)
        # local estimates at each threshold: k-nearest predictions by distance
        k = max(5, int(round(math.sqrt(n))))
        m_hat = np.empty(2)
        f_hat = np.empty(2)
        for idx, t in enumerate(theta[3:5]):
            near = np.argsort(np.abs(eta - t), kind="stable")[: min(k, n)]
            m_hat[idx] = float(y[near].mean())
            width = 2.0 * max(float(np.abs(eta[near] - t).max()), 1e-12)
            f_hat[idx] = near.size / (n * width)
        jac = np.zeros((5, 5))
        jac[0, 0], jac[1, 1], jac[2, 2] = -p
        jac[0, 3] = (m_hat[0] - theta[0]) * f_hat[0]
        jac[1, 3] = -(m_hat[0] - theta[1]) * f_hat[0]
        jac[1, 4] = (m_hat[1] - theta[1]) * f_hat[1]
        jac[2, 4] = -(m_hat[1] - theta[2]) * f_hat[1]
        jac[3, 3] = f_hat[0]
        jac[4, 4] = f_hat[1]
        return jac


_BUILTINS = {
    cls.name: cls
    for cls in (Mse, ClassifyProb, ClassifyBinary, Covariance, LinregOnEta, GroupMseGap, TercileFractions)
}


def builtin_moment(name: str) -> MomentFunction:
    """Instantiate a built-in moment function by name."""
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise UnknownMoment(f"no built-in moment named {name!r}") from None


def empirical(mf: MomentFunction, theta, model: Model, d: Dataset, rows) -> EmpiricalMoment:
    """Exact subsample mean of psi, order-independent by compensated summation."""
    rows = as_row_index_set(rows, d.n)
    if rows.size == 0:
        raise EmptySubset("empirical moment needs a nonempty subsample")
    values = mf.psi(np.asarray(theta, dtype=np.float64), model, d, rows)
    mean = np.array([math.fsum(values[:, j]) / values.shape[0] for j in range(values.shape[1])])
    return EmpiricalMoment(value=mean, size=int(rows.size))
