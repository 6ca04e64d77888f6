"""Operator-splitting (ADMM) solver for convex quadratic programs.

Solves::

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

with the splitting ``z = Ax`` used by OSQP: Ruiz equilibration, a cached
factorization of the regularized KKT system, over-relaxation, adaptive step
size, infeasibility certificates and a final active-set polishing step.

Duals follow the sign convention of the Lagrangian ``0.5 x'Px + q'x + y'Ax``:
``y_i > 0`` on an active upper bound, ``y_i < 0`` on an active lower bound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import lsq_linear

log = logging.getLogger(__name__)

INF = np.inf
RHO_MIN = 1e-6
POLISH_FIRST = 200
RHO_MAX = 1e6
RHO_EQ_FACTOR = 1e3
MIN_SCALING = 1e-4
MAX_SCALING = 1e4

SOLVED = "solved"
MAX_ITER = "max_iter"
PRIMAL_INFEASIBLE = "primal_infeasible"
DUAL_INFEASIBLE = "dual_infeasible"


@dataclass
class SolverSettings:
    rho_init: float = 0.1
    sigma: float = 1e-6
    alpha_relax: float = 1.6
    eps_abs: float = 1e-5
    eps_rel: float = 1e-5
    eps_prim_inf: float = 1e-4
    eps_dual_inf: float = 1e-4
    max_iter: int = 20000
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 50
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 25
    scaling_iters: int = 10
    polish: bool = True
    polish_delta: float = 1e-7
    polish_refine_iter: int = 5
    linsys: str = "auto"  # "auto" | "dense" | "sparse"
    # cold restarts with fixed rho (scaled units) when the adaptive run stalls
    restart_interval: int = 2000
    restart_rhos: tuple = (10.0, 1.0, 100.0, 0.01)
    check_psd: bool = True

    def __post_init__(self):
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("eps_abs and eps_rel must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        for name in ("rho_init", "sigma", "alpha_relax"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.linsys not in ("auto", "dense", "sparse"):
            raise ValueError("linsys must be 'auto', 'dense' or 'sparse'")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["restart_rhos"] = list(self.restart_rhos)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolverSettings":
        d = dict(d)
        if "restart_rhos" in d:
            d["restart_rhos"] = tuple(float(r) for r in d["restart_rhos"])
        return cls(**d)


@dataclass
class QpProblem:
    """Convex QP in the two-sided canonical form.

    ``layout`` maps block names to ``slice`` objects over the variable vector;
    when given, the slices must be disjoint and cover ``range(n)``.
    """

    P: object
    q: np.ndarray
    A: object
    l: np.ndarray
    u: np.ndarray
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.P = _as_csc(self.P, (n, n))
        if self.A is None:
            self.A = sp.csc_matrix((0, n))
        self.A = _as_csc(self.A)
        m = self.A.shape[0]
        self.l = np.full(m, -INF) if self.l is None else np.asarray(self.l, dtype=float).ravel()
        self.u = np.full(m, INF) if self.u is None else np.asarray(self.u, dtype=float).ravel()
        if self.A.shape[1] != n:
            raise ValueError(f"A has {self.A.shape[1]} columns, expected {n}")
        if self.l.size != m or self.u.size != m:
            raise ValueError("l and u must have one entry per constraint row")
        if np.any(self.l > self.u):
            raise ValueError("constraint bounds must satisfy l <= u")
        if np.any(np.isnan(self.l)) or np.any(np.isnan(self.u)) or not np.all(np.isfinite(self.q)):
            raise ValueError("q, l, u must not contain NaN (bounds may be infinite)")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-10:
            raise ValueError("P must be symmetric")
        if self.layout:
            covered = np.zeros(n, dtype=int)
            for name, sl in self.layout.items():
                covered[sl] += 1
            if np.any(covered != 1):
                raise ValueError("layout slices must be disjoint and cover all variables")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def block(self, x, name):
        return x[self.layout[name]]

    def dump(self, path) -> None:
        """Write (P, q, A, l, u) as plain-text dense matrices for external checks."""
        with open(path, "w", encoding="utf-8") as fh:
            for name, M in (("P", self.P.toarray()), ("q", self.q[None, :]), ("A", self.A.toarray()),
                            ("l", self.l[None, :]), ("u", self.u[None, :])):
                fh.write(f"# {name} {M.shape[0]} {M.shape[1]}\n")
                np.savetxt(fh, M, fmt="%.17g")


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    polished: bool = False
    rho_updates: int = 0

    @property
    def solved(self) -> bool:
        return self.status == SOLVED


def _as_csc(M, shape=None):
    if M is None:
        return sp.csc_matrix(shape)
    if sp.issparse(M):
        M = sp.csc_matrix(M, dtype=float)
    else:
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if not np.all(np.isfinite(M)):
            raise ValueError("matrix contains non-finite entries")
        M = sp.csc_matrix(M)
    if shape is not None and M.shape != shape:
        raise ValueError(f"matrix has shape {M.shape}, expected {shape}")
    M.eliminate_zeros()
    return M


def kkt_residuals(problem: QpProblem, x, y) -> tuple[float, float]:
    """Primal ``||Ax - clamp(Ax, l, u)||_inf`` and dual ``||Px + q + A'y||_inf``."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != problem.n or y.size != problem.m:
        raise ValueError("dimension mismatch between problem and (x, y)")
    Ax = problem.A @ x
    prim = float(np.max(np.abs(Ax - np.clip(Ax, problem.l, problem.u)), initial=0.0))
    dual = float(np.max(np.abs(problem.P @ x + problem.q + problem.A.T @ y), initial=0.0))
    return prim, dual


def _check_psd(P: sp.csc_matrix) -> None:
    nz = np.unique(np.concatenate([P.indices, np.repeat(np.arange(P.shape[1]), np.diff(P.indptr))]))
    if nz.size == 0:
        return
    if nz.size > 3000:
        return
    sub = P[nz][:, nz].toarray()
    ev = np.linalg.eigvalsh(0.5 * (sub + sub.T))
    tol = 1e-8 * max(1.0, np.abs(ev).max())
    if ev.min() < -tol:
        raise ValueError(f"P is not positive semidefinite (min eigenvalue {ev.min():.3g})")


def _inf_norm_cols(M: sp.csc_matrix) -> np.ndarray:
    if M.shape[0] == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _limit(v):
    v = np.where(v < MIN_SCALING, 1.0, v)
    return np.minimum(v, MAX_SCALING)


class _Scaled:
    """Ruiz-equilibrated copy of the problem data together with the scalings."""

    def __init__(self, prob: QpProblem, iters: int):
        n, m = prob.n, prob.m
        P, A, q = prob.P.copy(), prob.A.copy(), prob.q.copy()
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0
        for _ in range(iters):
            dcol = np.maximum(_inf_norm_cols(P), _inf_norm_cols(A))
            d_t = 1.0 / np.sqrt(_limit(dcol))
            if m:
                e_t = 1.0 / np.sqrt(_limit(_inf_norm_cols(A.T.tocsc())))
            else:
                e_t = np.ones(0)
            Dm = sp.diags(d_t)
            P = (Dm @ P @ Dm).tocsc()
            A = (sp.diags(e_t) @ A @ Dm).tocsc()
            q = d_t * q
            D *= d_t
            E *= e_t
            # mean over structurally nonzero columns: with many P-free variables
            # the plain mean shrinks toward zero and the cost scaling diverges
            pn = _inf_norm_cols(P)
            pn = pn[pn > 0]
            c_t = max(pn.mean() if pn.size else 0.0, np.max(np.abs(q), initial=0.0))
            c_t = 1.0 / float(_limit(np.array([c_t]))[0])
            P = P * c_t
            q = q * c_t
            c *= c_t
        self.P, self.A, self.q = P, A, q
        self.D, self.E, self.c = D, E, c
        self.Dinv = 1.0 / D
        self.Einv = 1.0 / E
        self.l = np.where(np.isfinite(prob.l), E * prob.l, prob.l)
        self.u = np.where(np.isfinite(prob.u), E * prob.u, prob.u)


class _DenseSystem:
    """Cholesky of the reduced system P + sigma I + A' diag(rho) A."""

    def __init__(self, P, A, sigma):
        self.Pd = P.toarray()
        self.Ad = A.toarray()
        self.sigma = sigma

    def factor(self, rho_vec):
        M = self.Pd + self.sigma * np.eye(self.Pd.shape[0]) + self.Ad.T @ (rho_vec[:, None] * self.Ad)
        self.cf = sla.cho_factor(M, lower=True, check_finite=False)
        self.rho_vec = rho_vec

    def step(self, x, z, y, q):
        rhs = self.sigma * x - q + self.Ad.T @ (self.rho_vec * z - y)
        xt = sla.cho_solve(self.cf, rhs, check_finite=False)
        return xt, self.Ad @ xt


class _SparseSystem:
    """LU of the quasi-definite KKT matrix [[P + sigma I, A'], [A, -diag(1/rho)]]."""

    def __init__(self, P, A, sigma):
        self.P, self.A, self.sigma = P, A, sigma
        self.n, self.m = A.shape[1], A.shape[0]

    def factor(self, rho_vec):
        K = sp.bmat(
            [[self.P + self.sigma * sp.eye(self.n), self.A.T], [self.A, -sp.diags(1.0 / rho_vec)]],
            format="csc",
        )
        self.lu = spla.splu(K, permc_spec="COLAMD")
        self.rho_vec = rho_vec

    def step(self, x, z, y, q):
        rhs = np.concatenate([self.sigma * x - q, z - y / self.rho_vec])
        sol = self.lu.solve(rhs)
        xt = sol[: self.n]
        nu = sol[self.n:]
        return xt, z + (nu - y) / self.rho_vec


def _rho_vector(rho, l, u):
    r = np.full(l.size, rho)
    free = ~np.isfinite(l) & ~np.isfinite(u)
    eq = np.isfinite(l) & np.isfinite(u) & (u - l < 1e-4)
    r[free] = RHO_MIN
    r[eq] = RHO_EQ_FACTOR * rho
    return r


def _solve_kkt_system(P, Aact, rhs, delta, refine):
    """Solve [[P, Aact'], [Aact, 0]] s = rhs via a delta-regularized factorization
    followed by iterative refinement against the unregularized matrix."""
    n = P.shape[0]
    k = Aact.shape[0]
    K0 = sp.bmat([[P, Aact.T], [Aact, None]], format="csc") if k else P.tocsc()
    reg = sp.diags(np.concatenate([np.full(n, delta), np.full(k, -delta)]))
    Kd = (K0 + reg).tocsc()
    if n + k <= 400:
        lu = sla.lu_factor(Kd.toarray(), check_finite=False)
        solve_ = lambda b: sla.lu_solve(lu, b, check_finite=False)  # noqa: E731
    else:
        lu = spla.splu(Kd, permc_spec="COLAMD")
        solve_ = lu.solve
    s = solve_(rhs)
    for _ in range(refine):
        r = rhs - K0 @ s
        s = s + solve_(r)
    return s


class _Admm:
    def __init__(self, prob: QpProblem, settings: SolverSettings):
        self.prob = prob
        self.st = settings
        self.sc = _Scaled(prob, settings.scaling_iters)
        n, m = prob.n, prob.m
        kind = settings.linsys
        if kind == "auto":
            kind = "sparse" if n + m > 300 else "dense"
        cls = _SparseSystem if kind == "sparse" else _DenseSystem
        self.sys = cls(self.sc.P, self.sc.A, settings.sigma)
        self.rho = settings.rho_init
        self.rho_vec = _rho_vector(self.rho, self.sc.l, self.sc.u)
        self.sys.factor(self.rho_vec)
        self.rho_updates = 0

    # residuals measured on the unscaled problem
    def _residuals(self, x, z, y):
        sc = self.sc
        Ax = sc.A @ x
        Px = sc.P @ x
        Aty = sc.A.T @ y
        prim = np.max(np.abs(sc.Einv * (Ax - z)), initial=0.0)
        dual = np.max(np.abs(sc.Dinv * (Px + sc.q + Aty)), initial=0.0) / sc.c
        eps_p = self.st.eps_abs + self.st.eps_rel * max(
            np.max(np.abs(sc.Einv * Ax), initial=0.0), np.max(np.abs(sc.Einv * z), initial=0.0))
        eps_d = self.st.eps_abs + self.st.eps_rel * max(
            np.max(np.abs(sc.Dinv * Px), initial=0.0) / sc.c,
            np.max(np.abs(sc.Dinv * Aty), initial=0.0) / sc.c,
            np.max(np.abs(sc.Dinv * sc.q), initial=0.0) / sc.c)
        return prim, dual, eps_p, eps_d, Ax, Px, Aty

    def _new_rho(self, x, z, y, Ax, Px, Aty):
        sc = self.sc
        prim = np.max(np.abs(Ax - z), initial=0.0)
        dual = np.max(np.abs(Px + sc.q + Aty), initial=0.0)
        pn = prim / (max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0)) + 1e-30)
        dn = dual / (max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                         np.max(np.abs(sc.q), initial=0.0)) + 1e-30)
        rho = self.rho * np.sqrt(pn / (dn + 1e-30))
        return float(np.clip(rho, RHO_MIN, RHO_MAX))

    def _primal_infeasible(self, dy):
        sc = self.sc
        dy_u = sc.E * dy
        nrm = np.max(np.abs(dy_u), initial=0.0)
        if nrm < 1e-30:
            return False
        eps = self.st.eps_prim_inf * nrm
        if np.max(np.abs(sc.Dinv * (sc.A.T @ dy)), initial=0.0) > eps:
            return False
        pos = np.maximum(dy_u, 0.0)
        neg = np.minimum(dy_u, 0.0)
        uinf = ~np.isfinite(self.prob.u)
        linf = ~np.isfinite(self.prob.l)
        if np.any(pos[uinf] > eps) or np.any(neg[linf] < -eps):
            return False
        support = np.sum(np.where(uinf, 0.0, self.prob.u) * pos) + np.sum(np.where(linf, 0.0, self.prob.l) * neg)
        return support < -eps

    def _dual_infeasible(self, dx):
        sc = self.sc
        dx_u = sc.D * dx
        nrm = np.max(np.abs(dx_u), initial=0.0)
        if nrm < 1e-30:
            return False
        eps = self.st.eps_dual_inf * nrm
        if np.max(np.abs(sc.Dinv * (sc.P @ dx)), initial=0.0) / sc.c > eps:
            return False
        if (sc.q @ dx) / sc.c >= -eps:
            return False
        Adx = sc.Einv * (sc.A @ dx)
        ufin = np.isfinite(self.prob.u)
        lfin = np.isfinite(self.prob.l)
        if np.any(Adx[ufin] > eps) or np.any(Adx[lfin] < -eps):
            return False
        return True

    def set_rho(self, rho):
        self.rho = float(rho)
        self.rho_vec = _rho_vector(self.rho, self.sc.l, self.sc.u)
        self.sys.factor(self.rho_vec)

    def run(self, x0=None, polish_cb=None, max_iter=None, adaptive=None, warm=None):
        """ADMM iterations. ``polish_cb(x, z, y)`` is tried at geometrically
        spaced checks and ends the run when it certifies a solution."""
        st, sc = self.st, self.sc
        max_iter = st.max_iter if max_iter is None else max_iter
        adaptive = st.adaptive_rho if adaptive is None else adaptive
        self.polished = None
        next_polish = POLISH_FIRST
        n, m = self.prob.n, self.prob.m
        if warm is not None:
            x, z, y = warm
        else:
            x = np.zeros(n) if x0 is None else sc.Dinv * np.asarray(x0, dtype=float)
            z = np.clip(sc.A @ x, sc.l, sc.u)
            y = np.zeros(m)
        a = st.alpha_relax
        status = MAX_ITER
        it = 0
        for it in range(1, max_iter + 1):
            x_prev, y_prev = x, y
            xt, zt = self.sys.step(x, z, y, sc.q)
            x = a * xt + (1.0 - a) * x_prev
            zr = a * zt + (1.0 - a) * z
            z_new = np.clip(zr + y / self.rho_vec, sc.l, sc.u)
            y = y + self.rho_vec * (zr - z_new)
            z = z_new

            if it % st.check_interval == 0 or it == max_iter:
                prim, dual, eps_p, eps_d, Ax, Px, Aty = self._residuals(x, z, y)
                if prim <= eps_p and dual <= eps_d:
                    status = SOLVED
                    break
                if polish_cb is not None and it >= next_polish:
                    next_polish *= 2
                    res = polish_cb(x, z, y)
                    if res is not None:
                        self.polished = res
                        status = SOLVED
                        break
                if self._primal_infeasible(y - y_prev):
                    status = PRIMAL_INFEASIBLE
                    break
                if self._dual_infeasible(x - x_prev):
                    status = DUAL_INFEASIBLE
                    break
                if adaptive and it % st.adaptive_rho_interval == 0:
                    rho_new = self._new_rho(x, z, y, Ax, Px, Aty)
                    if rho_new > st.adaptive_rho_tolerance * self.rho or rho_new < self.rho / st.adaptive_rho_tolerance:
                        self.rho = rho_new
                        self.rho_vec = _rho_vector(rho_new, sc.l, sc.u)
                        self.sys.factor(self.rho_vec)
                        self.rho_updates += 1
        self.last_score = 0.0 if status == SOLVED else max(prim / eps_p, dual / eps_d)
        return x, z, y, status, it

    def polish(self, x, z, y):
        """Active-set refinement in scaled space; returns (x, y) or None."""
        sc = self.sc
        low = (z - sc.l < -y) & np.isfinite(sc.l)
        up = (sc.u - z < y) & np.isfinite(sc.u) & ~low
        idx = np.concatenate([np.flatnonzero(low), np.flatnonzero(up)])
        Aact = sc.A[idx]
        bact = np.concatenate([sc.l[low], sc.u[up]])
        rhs = np.concatenate([-sc.q, bact])
        try:
            s = _solve_kkt_system(sc.P, Aact, rhs, self.st.polish_delta, self.st.polish_refine_iter)
        except (RuntimeError, np.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(s)):
            return None
        n = sc.P.shape[0]
        xp = s[:n]
        yp = np.zeros_like(y)
        yp[idx] = s[n:]
        return xp, yp

    def unscale(self, x, y):
        return self.sc.D * x, self.sc.E * y / self.sc.c


def _complementarity_ok(prob: QpProblem, x, y, tol):
    """Dual signs consistent with which bound is touched."""
    Ax = prob.A @ x
    scale = tol * (1.0 + np.abs(Ax))
    at_u = np.isfinite(prob.u) & (Ax >= prob.u - scale)
    at_l = np.isfinite(prob.l) & (Ax <= prob.l + scale)
    bad_pos = (y > tol) & ~at_u
    bad_neg = (y < -tol) & ~at_l
    return not (np.any(bad_pos) or np.any(bad_neg))


def solve(problem: QpProblem, settings: SolverSettings | None = None, x0=None) -> QpSolution:
    """Solve a convex QP.

    Non-PSD ``P`` raises ``ValueError`` up front. ``max_iter`` and infeasibility
    outcomes are reported through ``QpSolution.status`` rather than raised.
    ``x0`` is an optional warm-start hint for the primal variable.
    """
    settings = settings or SolverSettings()
    if settings.check_psd:
        _check_psd(problem.P)
    n, m = problem.n, problem.m
    if m == 0 and problem.P.nnz == 0:
        # linear objective without constraints
        if np.any(problem.q != 0):
            return QpSolution(np.zeros(n), np.zeros(0), DUAL_INFEASIBLE, 0, 0.0, float(np.abs(problem.q).max()), -INF)
        return QpSolution(np.zeros(n), np.zeros(0), SOLVED, 0, 0.0, 0.0, 0.0)

    admm = _Admm(problem, settings)
    cb = (lambda xs, zs, ys: _certified_polish(problem, admm, xs, zs, ys)) if settings.polish else None
    xs, zs, ys, status, it = _run_with_restarts(admm, settings, x0, cb)
    polished = False
    if admm.polished is not None:
        (x, y), polished = admm.polished, True
    else:
        x, y = admm.unscale(xs, ys)
        if status in (SOLVED, MAX_ITER) and settings.polish:
            cert = _certified_polish(problem, admm, xs, zs, ys)
            if cert is not None:
                (x, y), polished, status = cert, True, SOLVED
            else:
                pol = admm.polish(xs, zs, ys)
                if pol is not None:
                    xp, yp = admm.unscale(*pol)
                    p0, d0 = kkt_residuals(problem, x, y)
                    p1, d1 = kkt_residuals(problem, xp, yp)
                    if p1 <= max(p0, 1e-10) and d1 <= max(d0, 1e-10) and _complementarity_ok(problem, xp, yp, 1e-7):
                        x, y, polished = xp, yp, True
    if status in (PRIMAL_INFEASIBLE, DUAL_INFEASIBLE):
        log.info("qp status %s after %d iterations", status, it)
    prim, dual = kkt_residuals(problem, x, y)
    return QpSolution(
        x=x, y=y, status=status, iterations=it,
        primal_residual=prim, dual_residual=dual,
        objective=problem.objective(x), polished=polished, rho_updates=admm.rho_updates,
    )


def _run_with_restarts(admm: "_Admm", st: SolverSettings, x0, cb):
    """Adaptive run first; if it stalls, warm restarts cycling through fixed rho values.

    The residual-balancing rho estimate can sit orders of magnitude away from
    a good value on degenerate, LP-like problems (hard hinge budgets). Each
    restart continues from the current iterate for a doubled stage length.
    Returns the iterate of the stage that solved, or the least-violating one.
    """
    budget = st.max_iter
    stage = min(budget, st.restart_interval) if st.restart_rhos else budget
    out = admm.run(x0, cb, max_iter=stage)
    total = budget_used = out[4]
    best, best_score, best_pol = out, admm.last_score, admm.polished
    k = 0
    while out[3] == MAX_ITER and budget_used < budget and st.restart_rhos:
        admm.set_rho(st.restart_rhos[k % len(st.restart_rhos)])
        k += 1
        stage = min(budget - budget_used, st.restart_interval * 2 ** (k // len(st.restart_rhos)))
        out = admm.run(x0, cb, max_iter=stage, adaptive=False, warm=out[:3])
        total += out[4]
        budget_used += out[4]
        if out[3] != MAX_ITER or admm.last_score < best_score:
            best, best_score, best_pol = out, admm.last_score, admm.polished
    admm.polished = best_pol
    x, z, y, status, _ = best
    return x, z, y, status, total


def _tolerances(problem: QpProblem, x, y, st: SolverSettings):
    Ax = problem.A @ x
    z = np.clip(Ax, problem.l, problem.u)
    Px = problem.P @ x
    Aty = problem.A.T @ y
    eps_p = st.eps_abs + st.eps_rel * max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0))
    eps_d = st.eps_abs + st.eps_rel * max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                                         np.max(np.abs(problem.q), initial=0.0))
    return eps_p, eps_d


def _certify_dual(problem: QpProblem, x, tol=1e-9):
    """Sign-constrained least-squares multipliers for the rows active at ``x``.

    Needed on degenerate problems, where the polishing system returns some
    multiplier with the wrong sign even though ``x`` itself is optimal.
    """
    Ax = problem.A @ x
    lf, uf = np.isfinite(problem.l), np.isfinite(problem.u)
    l0, u0 = np.where(lf, problem.l, 0.0), np.where(uf, problem.u, 0.0)
    at_l = lf & (Ax <= l0 + tol * (1.0 + np.abs(l0)))
    at_u = uf & (Ax >= u0 - tol * (1.0 + np.abs(u0)))
    act = np.flatnonzero(at_l | at_u)
    g = problem.P @ x + problem.q
    y = np.zeros(problem.m)
    if act.size == 0:
        return y
    lb = np.where(at_l[act], -np.inf, 0.0)
    ub = np.where(at_u[act], np.inf, 0.0)
    res = lsq_linear(problem.A[act].T.tocsr(), -g, bounds=(lb, ub), method="trf",
                     lsq_solver="lsmr", tol=1e-12, max_iter=200)
    y[act] = res.x
    return y


def _certified_polish(problem: QpProblem, admm: "_Admm", xs, zs, ys):
    """Polished ``(x, y)`` in original units if it meets the stopping tolerances, else None."""
    pol = admm.polish(xs, zs, ys)
    if pol is None:
        return None
    x, y = admm.unscale(*pol)
    prim, dual = kkt_residuals(problem, x, y)
    eps_p, eps_d = _tolerances(problem, x, y, admm.st)
    if prim > eps_p:
        return None
    if dual <= eps_d and _complementarity_ok(problem, x, y, 1e-7):
        return x, y
    y = _certify_dual(problem, x)
    prim, dual = kkt_residuals(problem, x, y)
    eps_p, eps_d = _tolerances(problem, x, y, admm.st)
    if dual <= eps_d:
        return x, y
    return None
