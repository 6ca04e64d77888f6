"""Upper/lower bound functions on potential outcomes fitted by convex programs.

Each bound is ``f(x) = sum_i a_i k(anchor_i, x) + rho``. Internally the
program is posed over coordinates ``theta`` of the factorized anchor Gram
matrix ``K = U S U'``: with ``phi(x) = S^{-1/2} U' k(anchors, x)`` one has
``f(x) = theta' phi(x) + rho`` and ``a = U S^{-1/2} theta``, so the squared
RKHS norm ``a'Ka`` equals ``||theta||^2``. Directions of ``K`` with
eigenvalue below ``EIG_RTOL * max`` (or near the jitter) are discarded;
a rank-zero map leaves constant bounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from pobounds.datagen import Dataset
from pobounds.kernels import KernelSpec, gram
from pobounds.qp import MAX_ITER, SOLVED, QpProblem, QpSolution, SolverSettings, solve

log = logging.getLogger(__name__)

LOSSES = ("L1", "L2", "Linf")
EIG_RTOL = 1e-9


def normalize_loss(loss: str) -> str:
    key = str(loss).lower().replace("_", "").replace("-", "")
    table = {"l1": "L1", "1": "L1", "l2": "L2", "2": "L2", "linf": "Linf", "inf": "Linf", "l∞": "Linf"}
    if key not in table:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    return table[key]


@dataclass(frozen=True)
class FitConfig:
    loss: str = "L2"
    coupled: bool = False
    alpha: float = 1e-3
    beta_u: float = 0.05
    beta_l: float = 0.05
    kernel: KernelSpec = field(default_factory=KernelSpec)
    gamma: float = 0.0
    anchor_cap: int = 1000
    anchor_seed: int = 0
    # coupled only: enforce lower <= upper at every training point for both
    # arms (True) or only at each arm's factual points (False)
    counterfactual_noncrossing: bool = True
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        object.__setattr__(self, "loss", normalize_loss(self.loss))
        for name in ("alpha", "beta_u", "beta_l", "gamma"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.anchor_cap < 1:
            raise ValueError("anchor_cap must be >= 1")

    def to_dict(self) -> dict:
        return {
            "loss": self.loss, "coupled": self.coupled, "alpha": self.alpha,
            "beta_u": self.beta_u, "beta_l": self.beta_l, "kernel": self.kernel.to_dict(),
            "gamma": self.gamma, "anchor_cap": self.anchor_cap, "anchor_seed": self.anchor_seed,
            "counterfactual_noncrossing": self.counterfactual_noncrossing,
            "solver": self.solver.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if "kernel" in d:
            d["kernel"] = KernelSpec.from_dict(d["kernel"])
        if "solver" in d:
            d["solver"] = SolverSettings.from_dict(d["solver"])
        return cls(**d)


@dataclass(frozen=True)
class ArmBounds:
    """Bounds for one potential outcome. ``rho_u``/``rho_l`` are pre-shift."""

    a_u: np.ndarray
    a_l: np.ndarray
    rho_u: float
    rho_l: float
    anchors: np.ndarray
    kernel: KernelSpec
    gamma: float = 0.0

    def _values(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None] if self.anchors.shape[1] == 1 else X[None, :]
        if X.shape[1] != self.anchors.shape[1]:
            raise ValueError(f"expected {self.anchors.shape[1]} covariates, got {X.shape[1]}")
        K = gram(self.kernel, X, self.anchors) if X is not self.anchors else gram(self.kernel, X, self.anchors.copy())
        return K @ self.a_l, K @ self.a_u

    def raw(self, X):
        """Pre-shift ``(lower, upper)``."""
        lo, up = self._values(X)
        return lo + self.rho_l, up + self.rho_u

    def bounds(self, X):
        lo, up = self._values(X)
        return lo + self.rho_l - self.gamma, up + self.rho_u + self.gamma

    def to_dict(self) -> dict:
        return {"a_u": self.a_u.tolist(), "a_l": self.a_l.tolist(), "rho_u": self.rho_u,
                "rho_l": self.rho_l, "gamma": self.gamma, "anchors": self.anchors.tolist(),
                "kernel": self.kernel.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArmBounds":
        anchors = np.asarray(d["anchors"], float)
        if anchors.ndim == 1:
            anchors = anchors[:, None]
        return cls(np.asarray(d["a_u"], float), np.asarray(d["a_l"], float), float(d["rho_u"]),
                   float(d["rho_l"]), anchors, KernelSpec.from_dict(d["kernel"]), float(d.get("gamma", 0.0)))


@dataclass(frozen=True)
class ArmDiagnostics:
    norm_l: float
    norm_gap: float
    D_u: float
    D_l: float
    max_crossing: float
    status: str
    iterations: int
    objective: float

    @property
    def flagged(self) -> bool:
        return self.status != SOLVED

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class BoundModel:
    arms: dict
    config: FitConfig
    diagnostics: dict

    @property
    def gamma(self) -> float:
        return next(iter(self.arms.values())).gamma

    @property
    def flagged(self) -> bool:
        return any(d.flagged for d in self.diagnostics.values())

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "arms": {str(t): b.to_dict() for t, b in self.arms.items()},
            "diagnostics": {str(t): d.to_dict() for t, d in self.diagnostics.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundModel":
        return cls(
            arms={int(t): ArmBounds.from_dict(b) for t, b in d["arms"].items()},
            config=FitConfig.from_dict(d["config"]),
            diagnostics={int(t): ArmDiagnostics(**v) for t, v in d["diagnostics"].items()},
        )


@dataclass(frozen=True)
class BoundPrediction:
    lower: np.ndarray
    upper: np.ndarray
    arm: int

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


class FeatureMap:
    """Exact finite-dimensional coordinates of the span of anchor kernels."""

    def __init__(self, kernel: KernelSpec, anchors):
        anchors = np.asarray(anchors, dtype=float)
        if anchors.ndim == 1:
            anchors = anchors[:, None]
        self.kernel = kernel
        self.anchors = anchors
        K = gram(kernel, anchors)
        s, U = np.linalg.eigh(K)
        # directions at the jitter level carry no signal off the anchors
        keep = s > max(EIG_RTOL * s.max(), 10.0 * kernel.jitter)
        self.proj = U[:, keep] / np.sqrt(s[keep])
        self.K = K
        self._anchor_features = U[:, keep] * np.sqrt(s[keep])

    @property
    def rank(self) -> int:
        return self.proj.shape[1]

    def features(self, X=None) -> np.ndarray:
        if X is None:
            return self._anchor_features
        return gram(self.kernel, X, self.anchors) @ self.proj

    def dual(self, theta) -> np.ndarray:
        return self.proj @ theta


def select_anchors(X, cap: int, seed: int) -> np.ndarray:
    """Row indices used as anchors: all rows, or a seeded uniform subsample of ``cap``."""
    n = np.asarray(X).shape[0]
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, cap, replace=False))


@dataclass
class _ArmTerms:
    """Per-arm pieces of a bound-fitting program.

    ``fact`` indexes the arm's factual points (with their normalized weights
    ``w`` and outcomes ``y``) into the shared point set; ``noncross`` lists
    points where ``f_l <= f_u`` is imposed; ``loss_w`` are the loss weights of
    every point in the shared set (zero where the point does not enter).
    """

    fact: np.ndarray
    w: np.ndarray
    y: np.ndarray
    noncross: np.ndarray
    loss_w: np.ndarray


def _assemble(Phi, arms: list[_ArmTerms], config: FitConfig, linf_points) -> QpProblem:
    """Build the QP over [theta_u, theta_l, rho_u, rho_l, xi_u, xi_l] per arm (+ s)."""
    npts, r = Phi.shape
    loss = config.loss
    layout = {}
    offset = 0
    for k, arm in enumerate(arms):
        nf = arm.fact.size
        for name, size in (("theta_u", r), ("theta_l", r), ("rho_u", 1), ("rho_l", 1), ("xi_u", nf), ("xi_l", nf)):
            layout[f"{name}{k}"] = slice(offset, offset + size)
            offset += size
    if loss == "Linf":
        layout["s"] = slice(offset, offset + 1)
        offset += 1
    nvar = offset

    G = np.hstack([Phi, np.ones((npts, 1))])
    ones = np.ones((npts, 1))
    rows, lo, hi = [], [], []
    q = np.zeros(nvar)
    Pdiag = np.zeros(nvar)
    Pblocks = []

    def block_matrix(nrows, parts):
        """Sparse (nrows x nvar) matrix with dense/sparse blocks placed at layout slices."""
        M = sp.lil_matrix((nrows, nvar))
        for name, B in parts:
            sl = layout[name]
            M[:, sl] = B
        return M.tocsr()

    width_parts = []
    for k, arm in enumerate(arms):
        nf = arm.fact.size
        Pf = Phi[arm.fact]
        ef = np.ones((nf, 1))
        eye = sp.identity(nf, format="csr")
        # xi_u + f_u(x_i) >= y_i
        rows.append(block_matrix(nf, [(f"theta_u{k}", Pf), (f"rho_u{k}", ef), (f"xi_u{k}", eye)]))
        lo.append(arm.y)
        hi.append(np.full(nf, np.inf))
        # xi_l - f_l(x_i) >= -y_i
        rows.append(block_matrix(nf, [(f"theta_l{k}", -Pf), (f"rho_l{k}", -ef), (f"xi_l{k}", eye)]))
        lo.append(-arm.y)
        hi.append(np.full(nf, np.inf))
        # xi >= 0
        rows.append(block_matrix(2 * nf, [(f"xi_u{k}", sp.vstack([eye, sp.csr_matrix((nf, nf))])),
                                          (f"xi_l{k}", sp.vstack([sp.csr_matrix((nf, nf)), eye]))]))
        lo.append(np.zeros(2 * nf))
        hi.append(np.full(2 * nf, np.inf))
        # weighted violation budgets
        rows.append(block_matrix(2, [(f"xi_u{k}", sp.csr_matrix(np.vstack([arm.w, np.zeros(nf)]))),
                                     (f"xi_l{k}", sp.csr_matrix(np.vstack([np.zeros(nf), arm.w])))]))
        # the lower end 0 is implied by xi >= 0; stating it makes beta = 0 an
        # equality row, which the solver treats with a stiffer penalty
        lo.append(np.zeros(2))
        hi.append(np.array([config.beta_u, config.beta_l]))
        # non-crossing
        nc = arm.noncross
        if nc.size:
            Pn = Phi[nc]
            en = np.ones((nc.size, 1))
            rows.append(block_matrix(nc.size, [(f"theta_u{k}", Pn), (f"theta_l{k}", -Pn),
                                               (f"rho_u{k}", en), (f"rho_l{k}", -en)]))
            lo.append(np.zeros(nc.size))
            hi.append(np.full(nc.size, np.inf))

        Pdiag[layout[f"theta_u{k}"]] = 2.0 * config.alpha
        Pdiag[layout[f"theta_l{k}"]] = 2.0 * config.alpha

        # interval width IW = G @ d with d = [theta_u - theta_l; rho_u - rho_l]
        sel = np.zeros((r + 1, nvar))
        sel[np.arange(r), np.arange(layout[f"theta_u{k}"].start, layout[f"theta_u{k}"].stop)] = 1.0
        sel[np.arange(r), np.arange(layout[f"theta_l{k}"].start, layout[f"theta_l{k}"].stop)] = -1.0
        sel[r, layout[f"rho_u{k}"].start] = 1.0
        sel[r, layout[f"rho_l{k}"].start] = -1.0
        if loss == "L1":
            q += sel.T @ (G.T @ arm.loss_w)
        elif loss == "L2":
            H = G.T @ (arm.loss_w[:, None] * G)
            Pblocks.append(2.0 * sel.T @ H @ sel)
        else:
            width_parts.append((G, sel))

    if loss == "Linf":
        pts = np.asarray(linf_points)
        W = sum(Gk[pts] @ selk for Gk, selk in width_parts)
        M = sp.csr_matrix(-W)
        M = M + block_matrix(pts.size, [("s", np.ones((pts.size, 1)))])
        rows.append(M)
        lo.append(np.zeros(pts.size))
        hi.append(np.full(pts.size, np.inf))
        q[layout["s"]] = 1.0

    A = sp.vstack(rows, format="csc")
    P = sp.diags(Pdiag, format="csc")
    if Pblocks:
        dense = sum(Pblocks)
        dense = 0.5 * (dense + dense.T)
        P = (P + sp.csc_matrix(dense)).tocsc()
    return QpProblem(P, q, A, np.concatenate(lo), np.concatenate(hi), layout)


def _check_fit_inputs(data: Dataset, arms):
    for t in arms:
        if np.sum(data.T == t) < 1:
            raise ValueError(f"treatment arm {t} has no samples")


def assemble_decoupled(data_t: Dataset, config: FitConfig, t: int | None = None,
                       fmap: FeatureMap | None = None) -> tuple[QpProblem, FeatureMap, np.ndarray]:
    """QP for one arm. ``data_t`` may contain both arms; only arm ``t`` is used
    (default: the single arm present).

    Returns the problem, the feature map and the arm's row indices into ``data_t``.
    """
    if t is None:
        present = np.unique(data_t.T)
        if present.size != 1:
            raise ValueError("data contains both arms; pass t")
        t = int(present[0])
    idx = data_t.arm_index(t)
    if idx.size < 1:
        raise ValueError(f"treatment arm {t} is empty")
    X = data_t.X[idx]
    if fmap is None:
        fmap = FeatureMap(config.kernel, X[select_anchors(X, config.anchor_cap, config.anchor_seed)])
    Phi = fmap.features(None if fmap.anchors.shape[0] == idx.size and np.array_equal(fmap.anchors, X) else X)
    w = data_t.arm_weights(t)
    pts = np.arange(idx.size)
    arm = _ArmTerms(fact=pts, w=w, y=data_t.Y[idx], noncross=pts, loss_w=w)
    return _assemble(Phi, [arm], config, pts), fmap, idx


def assemble_coupled(data: Dataset, config: FitConfig,
                     fmap: FeatureMap | None = None) -> tuple[QpProblem, FeatureMap]:
    """Joint QP over both arms; losses use every training point with the
    normalized weight of the point's observed arm."""
    _check_fit_inputs(data, (0, 1))
    X = data.X
    if fmap is None:
        fmap = FeatureMap(config.kernel, X[select_anchors(X, config.anchor_cap, config.anchor_seed)])
    Phi = fmap.features(None if fmap.anchors.shape[0] == data.n and np.array_equal(fmap.anchors, X) else X)
    wt = data.normalized_weights()
    allpts = np.arange(data.n)
    arms = []
    for t in (0, 1):
        fact = data.arm_index(t)
        nc = allpts if config.counterfactual_noncrossing else fact
        arms.append(_ArmTerms(fact=fact, w=wt[fact], y=data.Y[fact], noncross=nc, loss_w=wt))
    return _assemble(Phi, arms, config, allpts), fmap


def _arm_from_solution(sol: QpSolution, prob: QpProblem, fmap: FeatureMap, k: int, kernel, gamma):
    th_u = prob.block(sol.x, f"theta_u{k}")
    th_l = prob.block(sol.x, f"theta_l{k}")
    rho_u = float(prob.block(sol.x, f"rho_u{k}")[0])
    rho_l = float(prob.block(sol.x, f"rho_l{k}")[0])
    bounds = ArmBounds(fmap.dual(th_u), fmap.dual(th_l), rho_u, rho_l, fmap.anchors, kernel, gamma)
    return bounds, th_u, th_l


def _diagnostics(b: ArmBounds, th_u, th_l, X, y, w, sol: QpSolution) -> ArmDiagnostics:
    lo, up = b.raw(X)
    return ArmDiagnostics(
        norm_l=float(np.linalg.norm(th_l)),
        norm_gap=float(np.linalg.norm(th_u - th_l)),
        D_u=float(np.sum(w * np.maximum(y - up, 0.0))),
        D_l=float(np.sum(w * np.maximum(lo - y, 0.0))),
        max_crossing=float(np.max(lo - up, initial=-np.inf)),
        status=sol.status,
        iterations=sol.iterations,
        objective=sol.objective,
    )


def _solve_checked(prob, settings):
    sol = solve(prob, settings)
    if sol.status == MAX_ITER:
        log.warning("bound fit reached max_iter (%d); keeping flagged iterate", sol.iterations)
    elif sol.status != SOLVED:
        raise RuntimeError(f"bound-fitting program reported {sol.status}")
    return sol


def fit(dataset: Dataset, config: FitConfig, arms=(0, 1), feature_maps: dict | None = None) -> BoundModel:
    """Fit upper and lower bounds for the requested arms.

    Decoupled fits solve one program per arm; the coupled fit solves a single
    program over both arms and always returns both. ``feature_maps`` lets a
    caller reuse factorizations across fits on the same data (keys: arm, or
    ``"coupled"``). ``max_iter`` fits are kept and flagged in the diagnostics.
    """
    arms = tuple(arms)
    feature_maps = {} if feature_maps is None else feature_maps
    out, diags = {}, {}
    if config.coupled:
        _check_fit_inputs(dataset, (0, 1))
        prob, fmap = assemble_coupled(dataset, config, feature_maps.get("coupled"))
        feature_maps["coupled"] = fmap
        sol = _solve_checked(prob, config.solver)
        for k, t in enumerate((0, 1)):
            b, th_u, th_l = _arm_from_solution(sol, prob, fmap, k, config.kernel, 0.0)
            idx = dataset.arm_index(t)
            out[t] = b
            diags[t] = _diagnostics(b, th_u, th_l, dataset.X[idx], dataset.Y[idx], dataset.arm_weights(t), sol)
    else:
        _check_fit_inputs(dataset, arms)
        for t in arms:
            prob, fmap, idx = assemble_decoupled(dataset, config, t, feature_maps.get(t))
            feature_maps[t] = fmap
            sol = _solve_checked(prob, config.solver)
            b, th_u, th_l = _arm_from_solution(sol, prob, fmap, 0, config.kernel, 0.0)
            out[t] = b
            diags[t] = _diagnostics(b, th_u, th_l, dataset.X[idx], dataset.Y[idx], dataset.arm_weights(t), sol)
    model = BoundModel(out, replace(config, gamma=0.0), diags)
    return apply_gamma_shift(model, config.gamma) if config.gamma else model


def apply_gamma_shift(model: BoundModel, gamma: float) -> BoundModel:
    """Widen every bound outward by ``gamma`` (cumulative with any earlier shift)."""
    if not gamma >= 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0:
        return model
    arms = {t: replace(b, gamma=b.gamma + gamma) for t, b in model.arms.items()}
    return BoundModel(arms, replace(model.config, gamma=model.config.gamma + gamma), model.diagnostics)


def predict_bounds(model: BoundModel, X, arm: int) -> BoundPrediction:
    if arm not in model.arms:
        raise ValueError(f"model has no bounds for arm {arm!r}")
    lo, up = model.arms[arm].bounds(X)
    return BoundPrediction(lo, up, arm)


def violation_magnitude(model: BoundModel, data: Dataset, side: str, arm: int | None = None,
                        shifted: bool = False) -> float:
    """Weighted average hinge overshoot ``sum_i w_i max(0, y_i - f_u(x_i))``
    (``side="upper"``) or ``max(0, f_l(x_i) - y_i)`` (``side="lower"``)."""
    if data.n == 0:
        raise ValueError("empty data")
    if arm is None:
        present = np.unique(data.T)
        if present.size != 1:
            raise ValueError("data contains both arms; pass arm")
        arm = int(present[0])
    idx = data.arm_index(arm)
    if idx.size == 0:
        raise ValueError(f"no samples in arm {arm}")
    b = model.arms[arm]
    lo, up = b.bounds(data.X[idx]) if shifted else b.raw(data.X[idx])
    y = data.Y[idx]
    w = data.arm_weights(arm)
    if side == "upper":
        return float(np.sum(w * np.maximum(y - up, 0.0)))
    if side == "lower":
        return float(np.sum(w * np.maximum(lo - y, 0.0)))
    raise ValueError("side must be 'upper' or 'lower'")
