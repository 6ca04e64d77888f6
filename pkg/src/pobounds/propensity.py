"""Propensity scores by L2-penalized logistic regression and importance weights."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

log = logging.getLogger(__name__)

DEFAULT_REG_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
DEFAULT_CLIP_CAP = 100.0


@dataclass(frozen=True)
class LogisticModel:
    """Fitted model on standardized features; ``coefficients`` live on that scale."""

    coefficients: np.ndarray
    intercept: float
    regularization: float
    mean: np.ndarray
    scale: np.ndarray
    converged: bool = True
    cv_loglik: dict | None = None

    @property
    def n_features(self) -> int:
        return self.coefficients.size

    def original_scale(self) -> tuple[np.ndarray, float]:
        """Coefficients and intercept expressed on the raw feature scale."""
        beta = self.coefficients / self.scale
        return beta, float(self.intercept - beta @ self.mean)

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "regularization": self.regularization,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(
            coefficients=np.asarray(d["coefficients"], float),
            intercept=float(d["intercept"]),
            regularization=float(d["regularization"]),
            mean=np.asarray(d["mean"], float),
            scale=np.asarray(d["scale"], float),
            converged=bool(d.get("converged", True)),
        )


@dataclass(frozen=True)
class WeightSet:
    """Importance weights ``p(T=t_i) / e(x_i, t_i)``.

    ``normalized`` sums to one within each treatment arm. ``max_raw_weight``
    holds the pre-clipping maximum per arm, the empirical overlap diagnostic.
    """

    raw: np.ndarray
    normalized: np.ndarray
    clip_cap: float
    max_raw_weight: dict
    marginal_treated: float
    n_clipped: int = 0

    def arm(self, T, t) -> np.ndarray:
        return self.normalized[np.asarray(T) == t]


def _standardize_stats(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def _check_binary(T):
    T = np.asarray(T)
    if not np.all((T == 0) | (T == 1)):
        raise ValueError("treatment must be binary (0/1)")
    return T.astype(int)


def _newton(Z, T, lam, max_iter=100, tol=1e-8):
    """Penalized logistic regression by Newton's method.

    Minimizes ``sum_i nll_i + lam/2 ||beta||^2``; the intercept (last column of
    the augmented design) is not penalized.
    """
    n, d = Z.shape
    Za = np.hstack([Z, np.ones((n, 1))])
    w = np.zeros(d + 1)
    pen = np.full(d + 1, lam)
    pen[-1] = 0.0
    p_bar = T.mean()
    w[-1] = np.log(p_bar / (1 - p_bar))
    converged = False

    def objective(w):
        s = Za @ w
        return -np.sum(T * log_expit(s) + (1 - T) * log_expit(-s)) + 0.5 * np.sum(pen * w * w)

    f = objective(w)
    for _ in range(max_iter):
        p = expit(Za @ w)
        g = Za.T @ (p - T) + pen * w
        if np.max(np.abs(g)) <= tol:
            converged = True
            break
        H = (Za * (p * (1 - p))[:, None]).T @ Za + np.diag(pen) + 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(H, g)
        t = 1.0
        while True:
            w_new = w - t * step
            f_new = objective(w_new)
            if f_new <= f - 1e-4 * t * (g @ step) or t < 1e-10:
                break
            t *= 0.5
        w, f = w_new, f_new
    else:
        p = expit(Za @ w)
        g = Za.T @ (p - T) + pen * w
        converged = bool(np.max(np.abs(g)) <= tol)
    return w[:-1].copy(), float(w[-1]), converged


def _loglik(Z, T, beta, b):
    s = Z @ beta + b
    return float(np.sum(T * log_expit(s) + (1 - T) * log_expit(-s)))


def _separated(Z, T, beta, b):
    s = Z @ beta + b
    return bool(np.all((s > 0) == (T == 1)))


def fit_logistic(X, T, regularization_grid=DEFAULT_REG_GRID, folds: int = 3, seed: int = 0) -> LogisticModel:
    """Fit ``e(x, 1)`` choosing the L2 penalty by k-fold held-out log-likelihood.

    Raises ``ValueError`` when one arm is empty. A perfectly separable sample
    triggers a ``UserWarning``; the penalty keeps the coefficients finite.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    T = _check_binary(T)
    if T.size != X.shape[0]:
        raise ValueError("X and T have different numbers of rows")
    if T.min() == T.max():
        raise ValueError("degenerate treatment: all samples are in one arm")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    grid = sorted(float(g) for g in regularization_grid)
    if not grid or grid[0] < 0:
        raise ValueError("regularization grid must be non-empty and non-negative")

    mean, scale = _standardize_stats(X)
    Z = (X - mean) / scale
    n = T.size
    cv = {}
    if len(grid) == 1:
        best = grid[0]
    else:
        rng = np.random.default_rng(seed)
        fold_of = np.empty(n, dtype=int)
        # stratified fold assignment keeps both arms in every training fold
        for t in (0, 1):
            idx = np.flatnonzero(T == t)
            idx = idx[rng.permutation(idx.size)]
            fold_of[idx] = np.arange(idx.size) % folds
        for lam in grid:
            ll = 0.0
            for k in range(folds):
                tr, te = fold_of != k, fold_of == k
                if T[tr].min() == T[tr].max():
                    ll = -np.inf
                    break
                beta, b, _ = _newton(Z[tr], T[tr], lam)
                ll += _loglik(Z[te], T[te], beta, b)
            cv[lam] = ll / n
        best = max(grid, key=lambda lam: (cv[lam], lam))
    beta, b, converged = _newton(Z, T, best)
    if _separated(Z, T, beta, b):
        warnings.warn("treatment is perfectly separated by the covariates; "
                      "coefficients are determined by the L2 penalty", UserWarning, stacklevel=2)
    if not converged:
        log.warning("logistic regression did not reach gradient tolerance")
    return LogisticModel(beta, b, best, mean, scale, converged, cv or None)


def predict_propensity(model: LogisticModel, X) -> np.ndarray:
    """``e(x, 1)`` for each row of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if model.n_features == 1 else X[None, :]
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    Z = (X - model.mean) / model.scale
    return expit(Z @ model.coefficients + model.intercept)


def weights_from_propensity(e1, T, clip_cap: float = DEFAULT_CLIP_CAP) -> WeightSet:
    e1 = np.asarray(e1, dtype=float)
    T = _check_binary(T)
    if not clip_cap > 0:
        raise ValueError("clip_cap must be positive")
    if np.any((e1 <= 0) | (e1 >= 1)):
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    p1 = T.mean()
    raw = np.empty(T.size)
    normalized = np.empty(T.size)
    max_raw = {}
    n_clipped = 0
    for t in (0, 1):
        m = T == t
        if not m.any():
            raise ValueError(f"treatment arm {t} is empty")
        marg = p1 if t == 1 else 1 - p1
        e_t = e1[m] if t == 1 else 1 - e1[m]
        w = marg / e_t
        max_raw[t] = float(w.max())
        n_clipped += int(np.sum(w > clip_cap))
        w = np.minimum(w, clip_cap)
        raw[m] = w
        normalized[m] = w / w.sum()
    return WeightSet(raw, normalized, float(clip_cap), max_raw, float(p1), n_clipped)


def importance_weights(model: LogisticModel, X, T, clip_cap: float = DEFAULT_CLIP_CAP) -> WeightSet:
    """Clipped, within-arm normalized importance weights for the sample ``(X, T)``."""
    return weights_from_propensity(predict_propensity(model, X), T, clip_cap)


def uniform_weights(T) -> WeightSet:
    """Weights of a randomized trial with known propensity equal to the arm share."""
    T = _check_binary(T)
    return weights_from_propensity(np.full(T.size, T.mean()), T, np.inf)
