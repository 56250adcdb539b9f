"""Normal-approximation inference for split-sample Z-estimates.

Builds the plug-in Jacobian, the psi outer-product "meat", the
variance-inflation factor, and the sandwich covariance, then applies the delta
method for a scalar reduction h and forms the CI
h(theta) +/- z_{1-alpha/2} * sigma / sqrt(n).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .data import Dataset
from .errors import NonFiniteJacobian, SingularJacobian, ZeroVariance
from .moments import MomentFunction
from .splits import SplitPlan
from .zestim import ZEstimate, _splits_of


def norm_ppf(q):
    return special.ndtri(q)


def norm_cdf(x):
    return special.ndtr(x)


@dataclass(frozen=True)
class DeltaSpec:
    """Scalar reduction h with gradient; gradient defaults to central differences."""

    name: str
    h: "callable"
    grad_h: "callable | None" = None

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if self.grad_h is not None:
            return np.asarray(self.grad_h(theta), dtype=np.float64)
        out = np.empty(theta.shape[0])
        for j in range(theta.shape[0]):
            step = 1e-6 * (1.0 + abs(theta[j]))
            hi, lo = theta.copy(), theta.copy()
            hi[j] += step
            lo[j] -= step
            out[j] = (self.h(hi) - self.h(lo)) / (2.0 * step)
        return out


def identity_reduction() -> DeltaSpec:
    return DeltaSpec("identity", lambda t: float(np.asarray(t).ravel()[0]),
                     lambda t: np.eye(np.asarray(t).size)[0])


def coordinate_reduction(j: int) -> DeltaSpec:
    def grad(t):
        g = np.zeros(np.asarray(t).size)
        g[j] = 1.0
        return g

    return DeltaSpec(f"coordinate:{j}", lambda t: float(np.asarray(t)[j]), grad)


def difference_reduction(i: int, j: int) -> DeltaSpec:
    def grad(t):
        g = np.zeros(np.asarray(t).size)
        g[i] = 1.0
        g[j] = -1.0
        return g

    return DeltaSpec(f"diff:{i}-{j}", lambda t: float(t[i] - t[j]), grad)


def named_reduction(spec: str, dim: int) -> DeltaSpec:
    """Parse "identity", "coordinate:j", or "diff:i-j"."""
    if spec == "identity":
        return identity_reduction()
    if spec.startswith("coordinate:"):
        return coordinate_reduction(int(spec.split(":")[1]))
    if spec.startswith("diff:"):
        i, j = spec.split(":")[1].split("-")
        return difference_reduction(int(i), int(j))
    raise ValueError(f"unknown reduction {spec!r}")


def variance_inflation(M: int, K: int, b: int, n: int) -> float:
    """V_{M,K}: 1 for cross-fitting, (n/b + M - 1)/M for sample-splitting."""
    if K > 1:
        return 1.0
    return (n / b + M - 1.0) / M


def jacobian_hat(mf: MomentFunction, models, plan: SplitPlan, d: Dataset, theta) -> np.ndarray:
    """Plug-in Jacobian: per-split estimates averaged with weight 1/(MK)."""
    theta = np.asarray(theta, dtype=np.float64)
    acc = np.zeros((mf.dim, mf.dim))
    splits = _splits_of(plan, models)
    for s in splits:
        acc += mf.jacobian_estimate(theta, s.model, d, s.rows)
    out = acc / len(splits)
    if not np.all(np.isfinite(out)):
        raise NonFiniteJacobian("plug-in Jacobian has non-finite entries")
    return out


def meat_hat(mf: MomentFunction, models, plan: SplitPlan, d: Dataset, theta) -> np.ndarray:
    """Mean outer product of psi at theta over all splits and their rows."""
    theta = np.asarray(theta, dtype=np.float64)
    acc = np.zeros((mf.dim, mf.dim))
    splits = _splits_of(plan, models)
    for s in splits:
        values = mf.psi(theta, s.model, d, s.rows)
        acc += values.T @ values / values.shape[0]
    out = acc / len(splits)
    return 0.5 * (out + out.T)


def sandwich(jac: np.ndarray, meat: np.ndarray, inflation: float) -> np.ndarray:
    """V = inflation * J^{-1} meat J^{-T}, symmetrized."""
    jac = np.asarray(jac, dtype=np.float64)
    scale = float(np.abs(jac).max())
    if scale == 0.0 or abs(np.linalg.det(jac)) <= 1e-12 * scale ** jac.shape[0]:
        raise SingularJacobian("moment Jacobian is numerically singular")
    inv = np.linalg.solve(jac, np.eye(jac.shape[0]))
    v = inflation * inv @ meat @ inv.T
    return 0.5 * (v + v.T)


@dataclass
class InferenceReport:
    theta_hat: np.ndarray
    h_hat: float
    jacobian: np.ndarray
    meat: np.ndarray
    sandwich_matrix: np.ndarray
    variance_inflation: float
    se: float
    ci: tuple[float, float]
    alpha: float
    n: int
    flags: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "h_hat": self.h_hat,
            "jacobian": self.jacobian.tolist(),
            "meat": self.meat.tolist(),
            "sandwich": self.sandwich_matrix.tolist(),
            "variance_inflation": self.variance_inflation,
            "se": self.se,
            "ci": list(self.ci),
            "alpha": self.alpha,
            "n": self.n,
            "flags": dict(self.flags),
        }


def normal_ci(mf: MomentFunction, models, plan: SplitPlan, d: Dataset,
              estimate: ZEstimate, h: DeltaSpec | None = None,
              alpha: float = 0.05) -> InferenceReport:
    """Sandwich-variance normal CI for h(theta_hat).

    Flags ``fast_convergence_risk`` when the meat is numerically degenerate,
    which is the signature of a fast-converging moment (hand the problem to
    the adaptive CI in that case).
    """
    if h is None:
        h = identity_reduction()
    theta = estimate.theta_hat
    jac = jacobian_hat(mf, models, plan, d, theta)
    meat = meat_hat(mf, models, plan, d, theta)
    vmk = variance_inflation(plan.M, plan.K, plan.b, plan.n)
    flags = {}
    eigs = np.linalg.eigvalsh(meat)
    if eigs.min() <= 1e-12 * (1.0 + float(theta @ theta)):
        flags["fast_convergence_risk"] = True
    v = sandwich(jac, meat, vmk)
    grad = h.gradient(theta)
    var_h = float(grad @ v @ grad)
    if var_h <= 0.0:
        raise ZeroVariance("delta-method variance is zero; normal CI undefined")
    se = float(np.sqrt(var_h))
    z = float(norm_ppf(1.0 - alpha / 2.0))
    point = float(h.h(theta))
    half = z * se / np.sqrt(plan.n)
    return InferenceReport(
        theta_hat=theta,
        h_hat=point,
        jacobian=jac,
        meat=meat,
        sandwich_matrix=v,
        variance_inflation=vmk,
        se=se / float(np.sqrt(plan.n)),
        ci=(point - half, point + half),
        alpha=alpha,
        n=plan.n,
        flags=flags,
    )
