"""Synthetic IST-like and heteroskedastic generators, confounding, CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import optimize, stats

AGE_MEAN = 71.8
AGE_SKEW = -0.79
AGE_SD = 11.0
AGE_RANGE = (40.0, 100.0)
NOISE_VAR = 0.1


@dataclass
class Dataset:
    """Observational sample ``(X, T, Y)`` with optional true potential outcomes.

    ``weights`` are positive per-sample importance weights (renormalized
    within each arm wherever they are used; ``None`` means uniform).
    ``standardization`` is ``(mean, scale)`` when ``X`` has been standardized
    from raw covariates, ``None`` otherwise.
    """

    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    Y0: np.ndarray | None = None
    Y1: np.ndarray | None = None
    weights: np.ndarray | None = None
    columns: tuple = ()
    standardization: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.T = np.asarray(self.T)
        self.Y = np.asarray(self.Y, dtype=float).ravel()
        n = self.X.shape[0]
        if self.T.shape != (n,) or self.Y.shape != (n,):
            raise ValueError("X, T and Y must have matching lengths")
        if not np.all((self.T == 0) | (self.T == 1)):
            raise ValueError("treatment must be binary (0/1)")
        self.T = self.T.astype(int)
        for name in ("Y0", "Y1", "weights"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float).ravel()
                if v.shape != (n,):
                    raise ValueError(f"{name} must have one entry per sample")
                setattr(self, name, v)
        if self.weights is not None and np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        finite = [self.X, self.Y] + [v for v in (self.Y0, self.Y1, self.weights) if v is not None]
        if not all(np.all(np.isfinite(a)) for a in finite):
            raise ValueError("dataset contains non-finite values")
        if not self.columns:
            self.columns = tuple(f"x{j}" for j in range(self.X.shape[1]))
        self.columns = tuple(self.columns)
        if len(self.columns) != self.X.shape[1]:
            raise ValueError("one column name per covariate is required")

    @property
    def n(self) -> int:
        return self.Y.size

    @property
    def has_potential_outcomes(self) -> bool:
        return self.Y0 is not None and self.Y1 is not None

    def potential(self, t: int) -> np.ndarray:
        v = self.Y1 if t == 1 else self.Y0
        if v is None:
            raise ValueError("true potential outcomes are not available for this dataset")
        return v

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx], T=self.T[idx], Y=self.Y[idx],
            Y0=None if self.Y0 is None else self.Y0[idx],
            Y1=None if self.Y1 is None else self.Y1[idx],
            weights=None if self.weights is None else self.weights[idx],
            meta=dict(self.meta),
        )

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise KeyError(f"unknown covariate {name!r}; available: {list(self.columns)}")
        return self.X[:, self.columns.index(name)]

    def arm_index(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.T == t)

    def arm_weights(self, t: int) -> np.ndarray:
        """Weights of arm ``t`` normalized to sum to one."""
        idx = self.arm_index(t)
        if idx.size == 0:
            raise ValueError(f"treatment arm {t} is empty")
        w = np.ones(idx.size) if self.weights is None else self.weights[idx]
        total = w.sum()
        if not total > 0:
            raise ValueError(f"weights of arm {t} sum to zero")
        return w / total

    def normalized_weights(self) -> np.ndarray:
        """Per-sample weights normalized within the sample's own arm."""
        out = np.zeros(self.n)
        for t in (0, 1):
            idx = self.arm_index(t)
            if idx.size:
                out[idx] = self.arm_weights(t)
        return out

    def with_weights(self, weights) -> "Dataset":
        return replace(self, weights=np.asarray(weights, float), meta=dict(self.meta))

    def raw_X(self) -> np.ndarray:
        if self.standardization is None:
            return self.X
        mean, scale = self.standardization
        return self.X * scale + mean

    def check_consistency(self, tol: float = 0.0) -> bool:
        """``Y == Y(T)`` whenever potential outcomes are present."""
        if not self.has_potential_outcomes:
            return True
        factual = np.where(self.T == 1, self.Y1, self.Y0)
        return bool(np.all(np.abs(factual - self.Y) <= tol))


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "ist_like"
    n: int = 9064
    seed: int = 0
    noise_var: float = NOISE_VAR
    confound_threshold: float = 70.0
    confound_arm: int = 0
    drop_fraction: float = 0.7

    def __post_init__(self):
        if self.kind not in ("ist_like", "heteroskedastic"):
            raise ValueError(f"unknown dgp kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass(frozen=True)
class ConfoundRule:
    covariate: str = "age"
    threshold: float = 70.0
    arm: int = 0
    drop_fraction: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.drop_fraction <= 1.0:
            raise ValueError("drop_fraction must lie in [0, 1]")
        if self.arm not in (0, 1):
            raise ValueError("arm must be 0 or 1")


DEFAULT_RULE = ConfoundRule()


@lru_cache(maxsize=None)
def skewnormal_params(mean: float = AGE_MEAN, sd: float = AGE_SD, skew: float = AGE_SKEW):
    """Location, scale and shape of the skew-normal with the given first three moments."""
    c = math.sqrt(2.0 / math.pi)

    def skew_of(delta):
        m = c * delta
        return (4.0 - math.pi) / 2.0 * m**3 / (1.0 - m * m) ** 1.5

    if abs(skew) >= 0.995:
        raise ValueError("skew-normal skewness must lie in (-0.995, 0.995)")
    if skew == 0:
        delta = 0.0
    else:
        lo, hi = (0.0, 1.0 - 1e-12) if skew > 0 else (-1.0 + 1e-12, 0.0)
        delta = optimize.brentq(lambda d: skew_of(d) - skew, lo, hi, xtol=1e-14)
    omega = sd / math.sqrt(1.0 - (c * delta) ** 2)
    loc = mean - omega * c * delta
    shape = delta / math.sqrt(1.0 - delta * delta)
    return loc, omega, shape


def sample_ages(n: int, rng: np.random.Generator) -> np.ndarray:
    loc, scale, shape = skewnormal_params()
    age = stats.skewnorm.rvs(shape, loc=loc, scale=scale, size=n, random_state=rng)
    return np.clip(age, *AGE_RANGE)


def rescale_age(age, lo: float, hi: float) -> np.ndarray:
    """Affine map of the clip range ``AGE_RANGE`` onto ``[lo, hi]``."""
    a0, a1 = AGE_RANGE
    return lo + (np.asarray(age, float) - a0) * (hi - lo) / (a1 - a0)


def sigmoid_with_coefficient(a: float, x, scale: float = 1.0) -> np.ndarray:
    """``1 / (1 + exp(-a x / scale))``."""
    return 1.0 / (1.0 + np.exp(-a * np.asarray(x, float) / scale))


def ist_mean_outcomes(age) -> tuple[np.ndarray, np.ndarray]:
    """Expected ``(Y(0), Y(1))`` given age in years."""
    ap = rescale_age(age, -10.0, 10.0)
    mu1 = sigmoid_with_coefficient(-5.0, ap) + 2.5
    mu0 = sigmoid_with_coefficient(-5.0, ap - 4.0) + 1.5
    return mu0, mu1


def _age_meta():
    loc, scale, shape = skewnormal_params()
    return {
        "age_distribution": "skew-normal, clipped",
        "age_target_mean": AGE_MEAN, "age_target_sd": AGE_SD, "age_target_skewness": AGE_SKEW,
        "age_skewnorm_loc": loc, "age_skewnorm_scale": scale, "age_skewnorm_shape": shape,
        "age_clip": list(AGE_RANGE),
    }


def gen_ist_like(n: int, seed: int, noise_var: float = NOISE_VAR) -> Dataset:
    """Randomized-trial sample with sigmoid INR-like outcome surfaces in age.

    Treatment is a fair coin; apply :func:`confound` to induce confounding.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    age = sample_ages(n, rng)
    T = rng.integers(0, 2, size=n)
    mu0, mu1 = ist_mean_outcomes(age)
    sd = math.sqrt(noise_var)
    Y1 = mu1 + rng.normal(0.0, sd, size=n)
    Y0 = mu0 + rng.normal(0.0, sd, size=n)
    Y = np.where(T == 1, Y1, Y0)
    meta = {"dgp": "ist_like", "n": n, "seed": seed, "noise_var": noise_var,
            "sigmoid": "S(a, x) = 1 / (1 + exp(-a x)), x = age rescaled to [-10, 10]"}
    meta.update(_age_meta())
    return Dataset(age[:, None], T, Y, Y0, Y1, columns=("age",), meta=meta)


def heteroskedastic_noise_sd(x) -> np.ndarray:
    x = np.asarray(x, float)
    return np.where(x <= 0, 0.1, 0.1 + x)


def gen_heteroskedastic(n: int, seed: int) -> Dataset:
    """``Y(1) = x^2 + eps`` with sd 0.1 for ``x <= 0`` and ``0.1 + x`` above.

    ``x`` is age rescaled to ``[-2, 2]``. ``Y(0)`` uses the same mean with
    homoskedastic sd 0.1 and is not the target of this experiment.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    age = sample_ages(n, rng)
    T = rng.integers(0, 2, size=n)
    x = rescale_age(age, -2.0, 2.0)
    Y1 = x**2 + rng.normal(size=n) * heteroskedastic_noise_sd(x)
    Y0 = x**2 + rng.normal(0.0, 0.1, size=n)
    Y = np.where(T == 1, Y1, Y0)
    meta = {"dgp": "heteroskedastic", "n": n, "seed": seed}
    meta.update(_age_meta())
    return Dataset(age[:, None], T, Y, Y0, Y1, columns=("age",), meta=meta)


def confound(dataset: Dataset, rule: ConfoundRule = DEFAULT_RULE, seed: int = 0) -> Dataset:
    """Drop each sample with ``covariate > threshold`` in ``rule.arm`` with
    probability ``rule.drop_fraction``."""
    col = dataset.column(rule.covariate) if dataset.standardization is None else \
        dataset.raw_X()[:, dataset.columns.index(rule.covariate)]
    match = (col > rule.threshold) & (dataset.T == rule.arm)
    rng = np.random.default_rng(seed)
    drop = match & (rng.random(dataset.n) < rule.drop_fraction)
    keep = np.flatnonzero(~drop)
    out = dataset.subset(keep)
    for t in (0, 1):
        if not np.any(out.T == t):
            raise ValueError(f"confounding rule empties treatment arm {t}")
    out.meta["confounding"] = {"covariate": rule.covariate, "threshold": rule.threshold, "arm": rule.arm,
                               "drop_fraction": rule.drop_fraction, "seed": seed,
                               "matched": int(match.sum()), "dropped": int(drop.sum())}
    return out


def generate(spec: DgpSpec) -> Dataset:
    """Generate and confound a dataset described by ``spec``."""
    if spec.kind == "ist_like":
        data = gen_ist_like(spec.n, spec.seed, spec.noise_var)
    else:
        data = gen_heteroskedastic(spec.n, spec.seed)
    rule = ConfoundRule("age", spec.confound_threshold, spec.confound_arm, spec.drop_fraction)
    # separate stream so the confounding draw does not alias the outcome noise
    return confound(data, rule, seed=spec.seed + 7919)


def standardize(dataset: Dataset, stats_: tuple | None = None) -> Dataset:
    """Standardize covariates to mean 0 / sd 1, or with given ``(mean, scale)``."""
    X = dataset.raw_X()
    if stats_ is None:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        mean, scale = (np.asarray(s, float) for s in stats_)
    return replace(dataset, X=(X - mean) / scale, standardization=(mean, scale), meta=dict(dataset.meta))


@dataclass(frozen=True)
class CsvSchema:
    covariates: tuple
    treatment: str = "t"
    outcome: str = "y"
    y0: str | None = None
    y1: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        return cls(tuple(d["covariates"]), d.get("treatment", "t"), d.get("outcome", "y"),
                   d.get("y0"), d.get("y1"))

    def to_dict(self) -> dict:
        return {"covariates": list(self.covariates), "treatment": self.treatment,
                "outcome": self.outcome, "y0": self.y0, "y1": self.y1}


class CsvFormatError(ValueError):
    pass


def load_csv(path, schema: CsvSchema, standardize_covariates: bool = True) -> Dataset:
    """Parse a comma-separated file into a :class:`Dataset`.

    Rows are numbered from 1 after the header. Missing or non-numeric cells and
    non-binary treatments raise :class:`CsvFormatError` naming the row and column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        wanted = list(schema.covariates) + [schema.treatment, schema.outcome]
        wanted += [c for c in (schema.y0, schema.y1) if c]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise CsvFormatError(f"{path}: missing column(s) {missing}")
        pos = {c: header.index(c) for c in wanted}
        rows = {c: [] for c in wanted}
        errors = []
        for r, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            for c in wanted:
                j = pos[c]
                cell = rec[j].strip() if j < len(rec) else ""
                if cell == "":
                    errors.append(f"row {r}, column {c!r}: missing value")
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    errors.append(f"row {r}, column {c!r}: non-numeric value {cell!r}")
                    continue
                if c == schema.treatment and v not in (0.0, 1.0):
                    errors.append(f"row {r}, column {c!r}: treatment value {cell!r} is not binary")
                    continue
                if not math.isfinite(v):
                    errors.append(f"row {r}, column {c!r}: non-finite value {cell!r}")
                    continue
                rows[c].append(v)
        if errors:
            raise CsvFormatError(f"{path}: " + "; ".join(errors[:20]) + (" ..." if len(errors) > 20 else ""))
    X = np.column_stack([rows[c] for c in schema.covariates]) if schema.covariates else np.zeros((len(rows[schema.outcome]), 0))
    data = Dataset(
        X, np.asarray(rows[schema.treatment]).astype(int), np.asarray(rows[schema.outcome]),
        Y0=np.asarray(rows[schema.y0]) if schema.y0 else None,
        Y1=np.asarray(rows[schema.y1]) if schema.y1 else None,
        columns=tuple(schema.covariates), meta={"source": str(path)},
    )
    return standardize(data) if standardize_covariates else data


def save_csv(dataset: Dataset, path, raw: bool = True) -> CsvSchema:
    """Write ``dataset`` with a header row; returns the schema to read it back."""
    X = dataset.raw_X() if raw else dataset.X
    cols = list(dataset.columns)
    header = cols + ["t", "y"]
    data = [X, dataset.T[:, None], dataset.Y[:, None]]
    if dataset.has_potential_outcomes:
        header += ["y0", "y1"]
        data += [dataset.Y0[:, None], dataset.Y1[:, None]]
    M = np.hstack([np.asarray(d, float) for d in data])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in M:
            w.writerow([repr(float(v)) if j not in (len(cols),) else str(int(v)) for j, v in enumerate(row)])
    return CsvSchema(tuple(cols), "t", "y",
                     "y0" if dataset.has_potential_outcomes else None,
                     "y1" if dataset.has_potential_outcomes else None)
