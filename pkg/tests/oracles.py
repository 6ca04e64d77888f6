"""Independent reference computations used by the test-suite.

Nothing here imports the solver or the estimators it checks.
"""

from __future__ import annotations

import itertools

import numpy as np


def active_set_qp(P, q, A, l, u, tol=1e-9):
    """Brute-force active-set enumeration for a strictly convex QP.

    Enumerates working sets (each constraint inactive, at its lower bound or
    at its upper bound) in order of increasing size, solves the equality
    constrained KKT system for each and keeps the feasible point whose
    multipliers have the right signs. For positive definite ``P`` the KKT
    point is unique, so the first one found is the optimum; the remaining
    feasible candidates of the same size are still compared by objective.
    Returns ``(x, objective)``.
    """
    P = np.asarray(P, float)
    q = np.asarray(q, float)
    A = np.asarray(A, float).reshape(-1, q.size)
    l = np.asarray(l, float)
    u = np.asarray(u, float)
    n, m = q.size, A.shape[0]
    best = None
    choices = []
    for i in range(m):
        opts = []
        if np.isfinite(l[i]):
            opts.append((i, -1))
        if np.isfinite(u[i]) and not (np.isfinite(l[i]) and u[i] - l[i] < 1e-12):
            opts.append((i, +1))
        choices.append(opts)
    for k in range(0, min(n, m) + 1):
        cands = []
        for rows in itertools.combinations(range(m), k):
            for sides in itertools.product(*[choices[r] for r in rows]):
                cands.append(sides)
        if not cands:
            continue
        # batch the KKT solves for this working-set size
        K = np.zeros((len(cands), n + k, n + k))
        rhs = np.zeros((len(cands), n + k))
        K[:, :n, :n] = P
        rhs[:, :n] = -q
        for c, sides in enumerate(cands):
            for j, (r, s) in enumerate(sides):
                K[c, n + j, :n] = A[r]
                K[c, :n, n + j] = A[r]
                rhs[c, n + j] = u[r] if s > 0 else l[r]
        ok = np.abs(np.linalg.det(K)) > 1e-12
        if not np.any(ok):
            continue
        sol = np.full((len(cands), n + k), np.nan)
        sol[ok] = np.linalg.solve(K[ok], rhs[ok][..., None])[..., 0]
        for c in np.flatnonzero(ok):
            x = sol[c, :n]
            lam = sol[c, n:]
            Ax = A @ x
            scale = 1.0 + np.abs(Ax)
            if np.any(Ax < l - tol * scale * 1e3) or np.any(Ax > u + tol * scale * 1e3):
                continue
            signs = np.array([s for _, s in cands[c]])
            # y_i > 0 at upper bound, y_i < 0 at lower bound
            if k and np.any(lam * signs < -1e-9):
                continue
            obj = 0.5 * x @ P @ x + q @ x
            if best is None or obj < best[1] - 1e-12:
                best = (x, obj)
        if best is not None:
            return best
    raise RuntimeError("no KKT point found; problem infeasible or degenerate")


def random_qp(rng, n, m):
    """Random strictly convex QP that is feasible by construction."""
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3
    A = rng.normal(size=(m, n))
    x_feas = rng.normal(size=n)
    Ax = A @ x_feas
    l = Ax - rng.uniform(0.0, 2.0, size=m)
    u = Ax + rng.uniform(0.0, 2.0, size=m)
    # some one-sided rows
    one = rng.random(m)
    l[one < 0.25] = -np.inf
    u[(one >= 0.25) & (one < 0.5)] = np.inf
    return P, q, A, l, u


def pinball(r, q):
    r = np.asarray(r, float)
    return np.where(r >= 0, q * r, (q - 1.0) * r)


def normal_ppf_bisect(p, lo=-40.0, hi=40.0):
    """Standard normal quantile by bisection on math.erfc."""
    import math

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(-mid / math.sqrt(2)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
