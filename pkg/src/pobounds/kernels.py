"""Kernel functions and Gram matrices."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

KINDS = ("linear", "rbf", "polynomial")


@dataclass(frozen=True)
class KernelSpec:
    """Reproducing kernel description.

    ``rbf`` uses ``exp(-||a - b||^2 / (2 bandwidth^2))``; ``polynomial`` uses
    ``(scale <a, b> + offset) ** degree``. ``jitter`` is added to the diagonal
    of square Gram matrices computed with ``B`` omitted or identical to ``A``.
    """

    kind: str = "linear"
    bandwidth: float = 1.0
    degree: int = 2
    scale: float = 1.0
    offset: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "rbf" and not self.bandwidth > 0:
            raise ValueError("rbf bandwidth must be positive")
        if self.kind == "polynomial" and (int(self.degree) != self.degree or self.degree < 1):
            raise ValueError("polynomial degree must be an integer >= 1")
        if not self.jitter >= 0:
            raise ValueError("jitter must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(**{k: d[k] for k in ("kind", "bandwidth", "degree", "scale", "offset", "jitter") if k in d})

    def with_bandwidth(self, bandwidth: float) -> "KernelSpec":
        d = self.to_dict()
        d["bandwidth"] = float(bandwidth)
        return KernelSpec(**d)


def _as_matrix(X, name):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-d covariate matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


def gram(spec: KernelSpec, A, B=None) -> np.ndarray:
    """Kernel matrix ``K[i, j] = k(a_i, b_j)``.

    Parameters
    ----------
    spec : KernelSpec
    A : array, shape (m, d)
    B : array, shape (n, d), optional
        Defaults to ``A``. When ``B`` is ``A`` the result is symmetrized and
        ``spec.jitter`` is added to its diagonal.
    """
    same = B is None or B is A
    A = _as_matrix(A, "A")
    B = A if same else _as_matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: A has {A.shape[1]} columns, B has {B.shape[1]}")

    if spec.kind == "linear":
        K = A @ B.T
    elif spec.kind == "polynomial":
        K = (spec.scale * (A @ B.T) + spec.offset) ** int(spec.degree)
    else:
        sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
        np.maximum(sq, 0.0, out=sq)
        if same:
            np.fill_diagonal(sq, 0.0)
        K = np.exp(-sq / (2.0 * spec.bandwidth**2))

    if same:
        K = 0.5 * (K + K.T)
        K[np.diag_indices_from(K)] += spec.jitter
    return K


def symmetric_psd_check(G, sym_tol: float = 1e-10, eig_tol: float = -1e-8) -> bool:
    """True iff ``G`` is symmetric and positive semidefinite within tolerance."""
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        return False
    if not np.all(np.isfinite(G)):
        return False
    if G.size and np.max(np.abs(G - G.T)) > sym_tol:
        return False
    if G.size == 0:
        return True
    return bool(np.linalg.eigvalsh(0.5 * (G + G.T)).min() >= eig_tol)


def median_heuristic(X, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance, the usual starting rbf bandwidth."""
    X = _as_matrix(X, "X")
    if X.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(X.shape[0], max_points, replace=False)
        X = X[np.sort(idx)]
    sq = (X * X).sum(1)[:, None] + (X * X).sum(1)[None, :] - 2.0 * X @ X.T
    iu = np.triu_indices(X.shape[0], k=1)
    d = np.sqrt(np.maximum(sq[iu], 0.0))
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 0 else 1.0
