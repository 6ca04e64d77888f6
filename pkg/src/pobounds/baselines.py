"""Kernel ridge base learner, symmetric interval rules and kernel quantile regression."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from pobounds.bounds import ArmBounds, FeatureMap, FitConfig, select_anchors
from pobounds.kernels import KernelSpec, gram
from pobounds.qp import SOLVED, QpProblem, SolverSettings, solve

DEFAULT_RIDGE_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
RULE_KINDS = ("cci", "conformal", "gamma_shift")


def _as_2d(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


@dataclass(frozen=True)
class KernelRidgeModel:
    """``f(x) = sum_i a_i k(anchor_i, x) + intercept``."""

    coef: np.ndarray
    intercept: float
    kernel: KernelSpec
    ridge: float
    anchors: np.ndarray
    system_residual: float = 0.0
    cv_error: dict | None = None

    def predict(self, X) -> np.ndarray:
        return gram(self.kernel, _as_2d(X), self.anchors) @ self.coef + self.intercept

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist(), "intercept": self.intercept, "kernel": self.kernel.to_dict(),
                "ridge": self.ridge, "anchors": self.anchors.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelRidgeModel":
        return cls(np.asarray(d["coef"], float), float(d["intercept"]), KernelSpec.from_dict(d["kernel"]),
                   float(d["ridge"]), _as_2d(np.asarray(d["anchors"], float)))


def fit_kernel_ridge(X, y, weights=None, kernel: KernelSpec = KernelSpec(), ridge: float = 1.0,
                     intercept: bool = True) -> KernelRidgeModel:
    """Weighted kernel ridge regression.

    Minimizes ``sum_i w_i (y_i - f(x_i))^2 + ridge * a'Ka`` with weights
    rescaled to mean one. Stationarity gives ``(K + ridge W^-1) a + b 1 = y``
    and ``1'a = 0`` for the unpenalized intercept ``b``; with
    ``intercept=False`` and uniform weights this is ``(K + ridge I) a = y``.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if n < 1 or X.shape[0] != n:
        raise ValueError("need at least one sample and matching X, y")
    if not ridge > 0:
        raise ValueError("ridge must be positive")
    w = np.ones(n) if weights is None else np.asarray(weights, float).ravel()
    if w.shape != (n,) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per sample")
    w = w / w.mean()
    K = gram(kernel, X)
    M = K + np.diag(ridge / w)
    if intercept:
        S = np.zeros((n + 1, n + 1))
        S[:n, :n] = M
        S[:n, n] = 1.0
        S[n, :n] = 1.0
        rhs = np.concatenate([y, [0.0]])
        sol = sla.solve(S, rhs, assume_a="sym")
        resid = float(np.max(np.abs(S @ sol - rhs)))
        a, b = sol[:n], float(sol[n])
    else:
        a = sla.solve(M, y, assume_a="pos")
        resid = float(np.max(np.abs(M @ a - y)))
        b = 0.0
    return KernelRidgeModel(a, b, kernel, float(ridge), X.copy(), resid)


def _folds(n, k, seed):
    rng = np.random.default_rng(seed)
    f = np.empty(n, dtype=int)
    f[rng.permutation(n)] = np.arange(n) % k
    return f


def select_kernel_ridge(X, y, weights=None, kernels=(KernelSpec(),), ridge_grid=DEFAULT_RIDGE_GRID,
                        folds: int = 3, seed: int = 0) -> KernelRidgeModel:
    """k-fold CV over (kernel, ridge) minimizing weighted squared error, refit on all data."""
    X = _as_2d(X)
    y = np.asarray(y, float).ravel()
    n = y.size
    w = np.ones(n) if weights is None else np.asarray(weights, float).ravel()
    cands = [(kern, float(lam)) for kern in kernels for lam in ridge_grid]
    if not cands:
        raise ValueError("empty hyperparameter grid")
    if len(cands) == 1 or n < 2 * folds:
        kern, lam = cands[0] if len(cands) == 1 else (kernels[0], float(np.median(ridge_grid)))
        return fit_kernel_ridge(X, y, w, kern, lam)
    fold_of = _folds(n, folds, seed)
    errors = {}
    for ci, (kern, lam) in enumerate(cands):
        err = 0.0
        for k in range(folds):
            tr, te = fold_of != k, fold_of == k
            m = fit_kernel_ridge(X[tr], y[tr], w[tr], kern, lam)
            err += float(np.sum(w[te] * (y[te] - m.predict(X[te])) ** 2))
        errors[ci] = err / w.sum()
    # ties go to the larger ridge (smoother fit)
    best = min(errors, key=lambda ci: (errors[ci], -cands[ci][1]))
    kern, lam = cands[best]
    model = fit_kernel_ridge(X, y, w, kern, lam)
    table = {f"{c[0].kind}:{c[0].bandwidth:g}:{c[1]:g}": e for c, e in zip(cands, errors.values())}
    return KernelRidgeModel(model.coef, model.intercept, kern, lam, model.anchors, model.system_residual, table)


# standard normal quantile ------------------------------------------------

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)


def normal_ppf(p: float) -> float:
    """Standard normal quantile: rational approximation plus one Halley step."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    lo = 0.02425
    if p < lo:
        r = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]) / \
            ((((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0)
    elif p <= 1.0 - lo:
        s = p - 0.5
        r = s * s
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * s / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        r = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]) / \
            ((((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


# interval rules ----------------------------------------------------------

@dataclass(frozen=True)
class IntervalRule:
    kind: str
    shift: float
    level: float
    warning: str = ""

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if not self.shift >= 0:
            raise ValueError("shift must be non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SymmetricInterval:
    """Base prediction plus/minus a rule's shift."""

    base: KernelRidgeModel
    rule: IntervalRule

    def bounds(self, X):
        mu = self.base.predict(X)
        return mu - self.rule.shift, mu + self.rule.shift

    def to_dict(self) -> dict:
        return {"base": self.base.to_dict(), "rule": self.rule.to_dict()}


def _abs_residuals(base, X_cal, y_cal):
    y_cal = np.asarray(y_cal, float).ravel()
    if y_cal.size == 0:
        raise ValueError("empty calibration set")
    return np.abs(y_cal - base.predict(X_cal))


def conformal_index(m: int, level: float) -> int:
    """1-based rank of the split-conformal quantile, ``ceil((m + 1)(1 - level))``."""
    # the small offset absorbs float noise such as 100 * 0.95 = 95.00000000000001
    return int(math.ceil((m + 1) * (1.0 - level) - 1e-9))


def conformal_shift(abs_residuals, level: float) -> float:
    r = np.sort(np.asarray(abs_residuals, float).ravel())
    m = r.size
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    k = conformal_index(m, level)
    if k > m:
        raise ValueError(f"calibration set of size {m} is too small for level {level} "
                         f"(need at least {math.ceil(1 / level - 1)})")
    return float(r[max(k, 1) - 1])


def endpoint_guard(shift: float, y_cal, mu_cal) -> float:
    """Widen ``shift`` by a few ulps so a calibration point whose residual
    equals the shift is still inside ``[mu - shift, mu + shift]`` after rounding."""
    scale = max(float(np.max(np.abs(y_cal))), float(np.max(np.abs(mu_cal))), abs(shift))
    return float(shift + 4.0 * np.spacing(scale))


def conformal_rule(base: KernelRidgeModel, X_cal, y_cal, level: float) -> IntervalRule:
    y_cal = np.asarray(y_cal, float).ravel()
    mu = base.predict(X_cal)
    shift = conformal_shift(_abs_residuals(base, X_cal, y_cal), level)
    return IntervalRule("conformal", endpoint_guard(shift, y_cal, mu), level)


def gamma_shift(abs_residuals, required_fcr: float, grid=None, weights=None) -> tuple[float, str]:
    """Smallest grid value whose symmetric interval reaches the required FCR.

    ``grid`` defaults to zero plus the sorted residuals (the only values at
    which the empirical FCR changes). Returns ``(shift, warning)``.
    """
    r = np.asarray(abs_residuals, float).ravel()
    w = np.full(r.size, 1.0 / r.size) if weights is None else np.asarray(weights, float) / np.sum(weights)
    if grid is None:
        grid = np.concatenate([[0.0], np.sort(r)])
    grid = np.asarray(grid, float).ravel()
    if grid.size == 0:
        raise ValueError("empty gamma grid")
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("gamma grid must be sorted ascending and non-negative")
    for g in grid:
        if np.sum(w[r > g]) <= required_fcr + 1e-12:
            return float(g), ""
    return float(grid[-1]), "no grid value reaches the required FCR; using the largest"


def gamma_rule(base: KernelRidgeModel, X_cal, y_cal, required_fcr: float, grid=None, weights=None) -> IntervalRule:
    r = _abs_residuals(base, X_cal, y_cal)
    g, warn = gamma_shift(r, required_fcr, grid, weights)
    if warn:
        warnings.warn(warn, UserWarning, stacklevel=2)
    return IntervalRule("gamma_shift", g, required_fcr, warn)


def cci_rule(base: KernelRidgeModel, X_cal, y_cal, level: float) -> IntervalRule:
    """Gaussian-residual interval: ``z_{1 - level/2}`` times the residual sd."""
    y_cal = np.asarray(y_cal, float).ravel()
    if y_cal.size < 2:
        raise ValueError("cci needs at least 2 calibration points")
    sd = float(np.std(y_cal - base.predict(X_cal), ddof=1))
    return IntervalRule("cci", cci_half_width(sd, level), level)


def cci_half_width(sd: float, level: float) -> float:
    return float(normal_ppf(1.0 - level / 2.0) * sd)


# quantile regression -----------------------------------------------------

@dataclass(frozen=True)
class QuantilePair:
    """Upper (quantile ``q``) and lower (quantile ``1 - q``) kernel quantile fits."""

    bounds: ArmBounds
    q: float
    alpha: float
    D_u: float
    D_l: float
    status: str
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return self.status != SOLVED

    def raw(self, X):
        return self.bounds.raw(X)

    def to_dict(self) -> dict:
        return {"bounds": self.bounds.to_dict(), "q": self.q, "alpha": self.alpha,
                "D_u": self.D_u, "D_l": self.D_l, "status": self.status}


def assemble_quantile_pair(Phi, y, w, q, alpha) -> QpProblem:
    """Pinball pair with non-crossing over [theta_u, theta_l, rho_u, rho_l, p_u, n_u, p_l, n_l]."""
    n, r = Phi.shape
    names = (("theta_u", r), ("theta_l", r), ("rho_u", 1), ("rho_l", 1),
             ("p_u", n), ("n_u", n), ("p_l", n), ("n_l", n))
    layout, off = {}, 0
    for name, size in names:
        layout[name] = slice(off, off + size)
        off += size
    nvar = off
    e = np.ones((n, 1))
    I = sp.identity(n, format="csr")
    Z = sp.csr_matrix((n, n))
    Zr = sp.csr_matrix((n, r))
    z1 = sp.csr_matrix((n, 1))
    Phs = sp.csr_matrix(Phi)
    # f_u + p_u - n_u = y ; f_l + p_l - n_l = y
    fit_u = sp.hstack([Phs, Zr, e, z1, I, -I, Z, Z])
    fit_l = sp.hstack([Zr, Phs, z1, e, Z, Z, I, -I])
    nonneg = sp.hstack([sp.csr_matrix((4 * n, 2 * r + 2)), sp.identity(4 * n)])
    cross = sp.hstack([Phs, -Phs, e, -e, Z, Z, Z, Z])
    A = sp.vstack([fit_u, fit_l, nonneg, cross], format="csc")
    l = np.concatenate([y, y, np.zeros(4 * n), np.zeros(n)])
    u = np.concatenate([y, y, np.full(4 * n, np.inf), np.full(n, np.inf)])
    qv = np.zeros(nvar)
    # pinball_q(y - f_u) = q p_u + (1-q) n_u ; pinball_{1-q}(y - f_l) = (1-q) p_l + q n_l
    qv[layout["p_u"]] = q * w
    qv[layout["n_u"]] = (1 - q) * w
    qv[layout["p_l"]] = (1 - q) * w
    qv[layout["n_l"]] = q * w
    Pd = np.zeros(nvar)
    Pd[layout["theta_u"]] = 2 * alpha
    Pd[layout["theta_l"]] = 2 * alpha
    return QpProblem(sp.diags(Pd, format="csc"), qv, A, l, u, layout)


def fit_quantile_pair(X, y, weights=None, q: float = 0.9, kernel: KernelSpec = KernelSpec(),
                      alpha: float = 1e-3, anchor_cap: int = 1000, anchor_seed: int = 0,
                      solver: SolverSettings | None = None, fmap: FeatureMap | None = None) -> QuantilePair:
    """Weighted non-crossing kernel quantile regression for quantiles ``q`` and ``1 - q``.

    ``weights`` are normalized to sum to one. The regularizer is
    ``alpha * (||theta_u||^2 + ||theta_l||^2)``, the same as the bound programs.
    """
    if not 0.5 < q < 1:
        raise ValueError("q must lie in (0.5, 1)")
    if not alpha >= 0:
        raise ValueError("alpha must be non-negative")
    X = _as_2d(X)
    y = np.asarray(y, float).ravel()
    n = y.size
    w = np.ones(n) if weights is None else np.asarray(weights, float).ravel()
    w = w / w.sum()
    if fmap is None:
        fmap = FeatureMap(kernel, X[select_anchors(X, anchor_cap, anchor_seed)])
    Phi = fmap.features(None if fmap.anchors.shape[0] == n and np.array_equal(fmap.anchors, X) else X)
    prob = assemble_quantile_pair(Phi, y, w, q, alpha)
    sol = solve(prob, solver)
    if sol.status not in (SOLVED, "max_iter"):
        raise RuntimeError(f"quantile regression program reported {sol.status}")
    th_u, th_l = prob.block(sol.x, "theta_u"), prob.block(sol.x, "theta_l")
    b = ArmBounds(fmap.dual(th_u), fmap.dual(th_l), float(prob.block(sol.x, "rho_u")[0]),
                  float(prob.block(sol.x, "rho_l")[0]), fmap.anchors, kernel)
    lo, up = b.raw(X)
    D_u = float(np.sum(w * np.maximum(y - up, 0)))
    D_l = float(np.sum(w * np.maximum(lo - y, 0)))
    return QuantilePair(b, float(q), float(alpha), D_u, D_l, sol.status, sol.iterations)


def equivalent_bound_config(pair: QuantilePair, kernel: KernelSpec | None = None,
                            solver: SolverSettings | None = None) -> FitConfig:
    """Decoupled L1 bound config with the same minimizer as ``pair``.

    Dividing the pinball-pair objective by ``1 - q`` leaves the width term
    ``sum_i w_i (f_u - f_l)`` plus hinge terms scaled by ``1 / (1 - q)``, and
    the regularizer becomes ``alpha / (1 - q)``. The hinge sums at the
    quantile solution become the violation budgets.
    """
    return FitConfig(loss="L1", coupled=False, alpha=pair.alpha / (1.0 - pair.q),
                     beta_u=max(pair.D_u, 0.0), beta_l=max(pair.D_l, 0.0),
                     kernel=kernel or pair.bounds.kernel, gamma=0.0,
                     solver=solver or SolverSettings())
