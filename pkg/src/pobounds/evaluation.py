"""Coverage and width metrics, and the replicated benchmark harness."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from pobounds.baselines import (
    KernelRidgeModel,
    cci_half_width,
    conformal_shift,
    endpoint_guard,
    fit_quantile_pair,
    gamma_shift,
    select_kernel_ridge,
)
from pobounds.bounds import (
    ArmDiagnostics,
    BoundModel,
    FeatureMap,
    FitConfig,
    apply_gamma_shift,
    normalize_loss,
    select_anchors,
)
from pobounds.datagen import ConfoundRule, Dataset, confound, gen_heteroskedastic, gen_ist_like, standardize
from pobounds.kernels import KernelSpec
from pobounds.propensity import DEFAULT_CLIP_CAP, fit_logistic, importance_weights
from pobounds.qp import SOLVED
from pobounds.selection import (
    CellFit,
    Grid,
    SplitPlan,
    choose,
    evaluate_grid,
    gamma_unit_for,
    make_splits,
    score_cells,
    select_from_cells,
)

log = logging.getLogger(__name__)

STANDARD_FCR_GRID = (0.001, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.15, 0.2)
BP_METHODS = tuple(f"BP-{v}-{p}" for v in ("D", "C") for p in ("L1", "L2", "Linf"))
BASELINE_METHODS = ("QR", "KR-CI", "KR-gamma", "KR-CCI")
METHODS = BP_METHODS + BASELINE_METHODS
DEFAULT_QUANTILES = (0.9, 0.95, 0.975, 0.99, 0.995)


def _check_lengths(*arrays):
    n = len(arrays[0])
    if n == 0:
        raise ValueError("empty input")
    if any(len(a) != n for a in arrays):
        raise ValueError("inputs must have equal lengths")


def _norm_weights(weights, n):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, float)
    if w.shape != (n,) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative with positive sum, one per point")
    return w / w.sum()


def fcr(lower, upper, outcomes, weights=None) -> float:
    """(Weighted) share of outcomes outside the closed interval ``[lower, upper]``.

    A crossed interval (``upper < lower``) covers nothing.
    """
    lower, upper, y = (np.asarray(v, float).ravel() for v in (lower, upper, outcomes))
    _check_lengths(lower, upper, y)
    w = _norm_weights(weights, y.size)
    miss = (y < lower) | (y > upper) | (upper < lower)
    return float(np.clip(np.sum(w[miss]), 0.0, 1.0))


def iw_stats(lower, upper, weights=None) -> tuple[float, float, float]:
    """``(mean width, max width, crossing rate)``; the mean is weighted when weights are given."""
    lower, upper = (np.asarray(v, float).ravel() for v in (lower, upper))
    _check_lengths(lower, upper)
    w = _norm_weights(weights, lower.size)
    width = upper - lower
    return float(np.sum(w * width)), float(np.max(width)), float(np.mean(upper < lower))


@dataclass(frozen=True)
class ArmReport:
    achieved_fcr: float
    mean_iw: float
    max_iw: float
    crossing_rate: float
    required_fcr: float
    strata: dict = field(default_factory=dict)

    @property
    def fcr_violation(self) -> float:
        return self.achieved_fcr - self.required_fcr

    def metrics(self) -> dict:
        d = {"achieved_fcr": self.achieved_fcr, "mean_iw": self.mean_iw, "max_iw": self.max_iw,
             "crossing_rate": self.crossing_rate, "fcr_violation": self.fcr_violation}
        for name, v in self.strata.items():
            d[f"mean_iw[{name}]"] = v
        return d


@dataclass(frozen=True)
class EvalReport:
    model: str
    seed: int
    required_fcr: float
    arms: dict
    config_hash: str = ""
    notes: dict = field(default_factory=dict)


def evaluate_intervals(lower, upper, outcomes, required_fcr: float, weights=None, strata=None) -> ArmReport:
    """Metrics for one arm. ``strata`` maps a name to a boolean mask for stratum mean widths."""
    f = fcr(lower, upper, outcomes, weights)
    mean_iw, max_iw, cr = iw_stats(lower, upper, weights)
    st = {}
    for name, mask in (strata or {}).items():
        mask = np.asarray(mask, bool)
        st[name] = float(np.mean((np.asarray(upper) - np.asarray(lower))[mask])) if mask.any() else float("nan")
    return ArmReport(f, mean_iw, max_iw, cr, required_fcr, st)


# interval producers ------------------------------------------------------

@dataclass(frozen=True)
class ShiftedBase:
    """Symmetric interval ``mu(x) +/- shift`` around a kernel ridge fit."""

    base: KernelRidgeModel
    shift: float

    def bounds(self, X):
        mu = self.base.predict(X)
        return mu - self.shift, mu + self.shift


def _bounds_for(producer, X, arm):
    # a fitted BoundModel, or a dict arm -> object with ``bounds(X)``
    if isinstance(producer, BoundModel):
        return producer.arms[arm].bounds(X)
    return producer[arm].bounds(X)


# benchmark configuration -------------------------------------------------

@dataclass(frozen=True)
class BenchmarkConfig:
    """Replicated simulation (or observational) benchmark.

    ``method_arms`` narrows the evaluated arms per method; coupled methods are
    always fitted jointly but only the listed arms are reported. ``strata``
    maps names to ``(covariate, op, value)`` on raw covariates, with op one
    of ``">"``, ``">="``, ``"<"``, ``"<="``.
    """

    dgp: str = "ist_like"
    n_pool: int = 9064
    n_train: int = 3000
    n_test: int = 3000
    noise_var: float = 0.1
    confound_rule: ConfoundRule = field(default_factory=ConfoundRule)
    seeds: tuple = tuple(range(20))
    levels: tuple = (0.01,)
    methods: tuple = ("BP-D-L2", "KR-CI")
    arms: tuple = (0, 1)
    method_arms: dict = field(default_factory=dict)
    split: SplitPlan = field(default_factory=SplitPlan)
    grid: Grid = field(default_factory=Grid)
    qr_quantiles: tuple = DEFAULT_QUANTILES
    kr_ridge_grid: tuple = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
    clip_cap: float = DEFAULT_CLIP_CAP
    weighted_validation: bool = True
    mode: str = "simulation"
    strata: dict = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self):
        if self.dgp not in ("ist_like", "heteroskedastic"):
            raise ValueError(f"unknown dgp {self.dgp!r}")
        if self.mode not in ("simulation", "observational"):
            raise ValueError("mode must be 'simulation' or 'observational'")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        if not self.levels or any(not 0 < v < 1 for v in self.levels):
            raise ValueError("levels must be a non-empty list in (0, 1)")
        if self.n_train < 8 or self.n_test < 1:
            raise ValueError("n_train must be >= 8 and n_test >= 1")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "arms", tuple(int(a) for a in self.arms))
        object.__setattr__(self, "method_arms", {k: tuple(int(a) for a in v) for k, v in self.method_arms.items()})

    def arms_for(self, method: str) -> tuple:
        return self.method_arms.get(method, self.arms)

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp, "n_pool": self.n_pool, "n_train": self.n_train, "n_test": self.n_test,
            "noise_var": self.noise_var, "confound_rule": dict(self.confound_rule.__dict__),
            "seeds": list(self.seeds), "levels": list(self.levels), "methods": list(self.methods),
            "arms": list(self.arms), "method_arms": {k: list(v) for k, v in self.method_arms.items()},
            "split": self.split.to_dict(), "grid": self.grid.to_dict(), "qr_quantiles": list(self.qr_quantiles),
            "kr_ridge_grid": list(self.kr_ridge_grid), "clip_cap": self.clip_cap,
            "weighted_validation": self.weighted_validation, "mode": self.mode,
            "strata": {k: list(v) for k, v in self.strata.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "confound_rule" in d:
            d["confound_rule"] = ConfoundRule(**d["confound_rule"])
        if "split" in d:
            d["split"] = SplitPlan(**d["split"])
        if "grid" in d:
            d["grid"] = Grid.from_dict(d["grid"])
        if "strata" in d:
            d["strata"] = {k: tuple(v) for k, v in d["strata"].items()}
        for k in ("seeds", "levels", "methods", "arms", "qr_quantiles", "kr_ridge_grid"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def simulate_replicate(cfg: BenchmarkConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Confounded pool split into ``(train, test)`` raw datasets."""
    if cfg.dgp == "ist_like":
        pool = gen_ist_like(cfg.n_pool, seed, cfg.noise_var)
    else:
        pool = gen_heteroskedastic(cfg.n_pool, seed)
    pool = confound(pool, cfg.confound_rule, seed=seed + 7919)
    need = cfg.n_train + cfg.n_test
    if pool.n < need:
        raise ValueError(f"confounded pool has {pool.n} samples; {need} are needed (raise n_pool)")
    perm = np.random.default_rng(seed + 104729).permutation(pool.n)
    return pool.subset(np.sort(perm[:cfg.n_train])), pool.subset(np.sort(perm[cfg.n_train:need]))


@dataclass
class PreparedReplicate:
    """Standardized and split data for one seed, with importance weights attached."""

    seed: int
    train: Dataset
    validate: Dataset
    test: Dataset
    test_raw_X: np.ndarray
    test_weights: np.ndarray | None
    max_raw_weight: dict


def prepare_replicate(cfg: BenchmarkConfig, train_raw: Dataset, test_raw: Dataset, seed: int) -> PreparedReplicate:
    full = standardize(train_raw)
    test = standardize(test_raw, full.standardization)
    nuis, tr, va = make_splits(full, replace(cfg.split, seed=seed))
    # propensities on the nuisance part only
    pm = fit_logistic(nuis.X, nuis.T, seed=seed)
    w_tr = importance_weights(pm, tr.X, tr.T, cfg.clip_cap)
    w_va = importance_weights(pm, va.X, va.T, cfg.clip_cap)
    test_w = None
    if cfg.mode == "observational":
        test_w = importance_weights(pm, test.X, test.T, cfg.clip_cap).normalized
    return PreparedReplicate(seed, tr.with_weights(w_tr.raw), va.with_weights(w_va.raw), test,
                             test_raw.raw_X(), test_w, dict(w_tr.max_raw_weight))


def _strata_masks(cfg: BenchmarkConfig, raw_X, columns, idx=None):
    ops = {">": np.greater, ">=": np.greater_equal, "<": np.less, "<=": np.less_equal}
    out = {}
    for name, (col, op, val) in cfg.strata.items():
        v = raw_X[:, list(columns).index(col)]
        m = ops[op](v, float(val))
        out[name] = m if idx is None else m[idx]
    return out


def _test_arm(cfg: BenchmarkConfig, rep: PreparedReplicate, producer, arm: int, level: float) -> ArmReport:
    test = rep.test
    if cfg.mode == "simulation":
        if not test.has_potential_outcomes:
            raise ValueError("simulation-mode metrics need true potential outcomes in the test set")
        lo, up = _bounds_for(producer, test.X, arm)
        return evaluate_intervals(lo, up, test.potential(arm), level,
                                  strata=_strata_masks(cfg, rep.test_raw_X, test.columns))
    idx = test.arm_index(arm)
    lo, up = _bounds_for(producer, test.X[idx], arm)
    w = rep.test_weights[idx]
    return evaluate_intervals(lo, up, test.Y[idx], level, w,
                              strata=_strata_masks(cfg, rep.test_raw_X, test.columns, idx))


# per-method runners: each returns {level: (producer, notes)} -------------

def _bp_levels(cfg: BenchmarkConfig, rep: PreparedReplicate, method: str):
    _, variant, loss = method.split("-")
    coupled = variant == "C"
    grid = cfg.grid.with_(loss=normalize_loss(loss), coupled=coupled)
    arms = (0, 1) if coupled else cfg.arms_for(method)
    cells = evaluate_grid(rep.train, rep.validate, grid, arms, cfg.weighted_validation, cfg.jobs)
    unit = gamma_unit_for(rep.train, grid)
    out = {}
    for level in cfg.levels:
        res = select_from_cells(cells, grid, unit, level, arms)
        notes = {"fallback_used": float(res.any_fallback),
                 "flagged_cells": float(sum(c.flagged for c in cells))}
        out[level] = (res.model, notes)
    return out


def _qr_cells(cfg: BenchmarkConfig, rep: PreparedReplicate, arm: int) -> list[CellFit]:
    tr, va = rep.train, rep.validate
    idx = tr.arm_index(arm)
    X, y, w = tr.X[idx], tr.Y[idx], tr.arm_weights(arm)
    cells = []
    vidx = va.arm_index(arm)
    wv = va.arm_weights(arm) if cfg.weighted_validation else np.full(vidx.size, 1.0 / vidx.size)
    kern = cfg.grid.kernels(X)
    k = 0
    for kernel in kern:
        fmap = FeatureMap(kernel, X[select_anchors(X, cfg.grid.anchor_cap, 0)])
        for q in cfg.qr_quantiles:
            for a in cfg.grid.alphas:
                pair = fit_quantile_pair(X, y, w, q, kernel, a, cfg.grid.anchor_cap, solver=cfg.grid.solver,
                                         fmap=fmap)
                diag = ArmDiagnostics(0.0, 0.0, pair.D_u, pair.D_l, 0.0, pair.status, pair.iterations, 0.0)
                config = FitConfig(loss="L1", alpha=a, beta_u=pair.D_u, beta_l=pair.D_l, kernel=kernel)
                model = BoundModel({arm: pair.bounds}, config, {arm: diag})
                cell = CellFit(k, config, model, pair.status, pair.flagged)
                lo_all, up_all = pair.bounds.raw(va.X)
                cell.widths[arm] = up_all - lo_all
                cell.factual[arm] = (lo_all[vidx], up_all[vidx], va.Y[vidx], wv)
                cell.qr_q = q  # type: ignore[attr-defined]
                cells.append(cell)
                k += 1
    return cells


def _qr_levels(cfg: BenchmarkConfig, rep: PreparedReplicate, method: str):
    arms = cfg.arms_for(method)
    unit = gamma_unit_for(rep.train, cfg.grid)
    per_arm = {arm: _qr_cells(cfg, rep, arm) for arm in arms}
    out = {}
    for level in cfg.levels:
        bounds, diags, fb = {}, {}, False
        for arm, cells in per_arm.items():
            scores = score_cells(cells, cfg.grid.gammas, unit, "L1", arm)
            best, f = choose(scores, level)
            fb |= f
            m = apply_gamma_shift(cells[best.cell].model, best.gamma * unit)
            bounds[arm], diags[arm] = m.arms[arm], m.diagnostics[arm]
        out[level] = (BoundModel(bounds, FitConfig(loss="L1"), diags), {"fallback_used": float(fb)})
    return out


def _kr_levels(cfg: BenchmarkConfig, rep: PreparedReplicate, method: str):
    arms = cfg.arms_for(method)
    tr, va = rep.train, rep.validate
    kind = method.split("-")[1]
    bases, resid, wv, mu_cal = {}, {}, {}, {}
    for arm in arms:
        idx = tr.arm_index(arm)
        kernels = cfg.grid.kernels(tr.X[idx])
        bases[arm] = select_kernel_ridge(tr.X[idx], tr.Y[idx], tr.arm_weights(arm), kernels,
                                         cfg.kr_ridge_grid, folds=3, seed=rep.seed)
        vidx = va.arm_index(arm)
        mu_cal[arm] = bases[arm].predict(va.X[vidx])
        resid[arm] = va.Y[vidx] - mu_cal[arm]
        wv[arm] = va.arm_weights(arm) if cfg.weighted_validation else None
    out = {}
    for level in cfg.levels:
        per_arm, notes = {}, {"fallback_used": 0.0}
        for arm in arms:
            r = resid[arm]
            if kind == "CI":
                try:
                    shift = conformal_shift(np.abs(r), level)
                except ValueError:
                    # calibration set too small for this level: the widest finite interval
                    shift = float(np.max(np.abs(r)))
                    notes["fallback_used"] = 1.0
                shift = endpoint_guard(shift, va.Y[va.arm_index(arm)], mu_cal[arm])
            elif kind == "gamma":
                shift, warn = gamma_shift(np.abs(r), level, None, wv[arm])
                notes["fallback_used"] = max(notes["fallback_used"], float(bool(warn)))
            else:
                shift = cci_half_width(float(np.std(r, ddof=1)), level)
            per_arm[arm] = ShiftedBase(bases[arm], shift)
        out[level] = (per_arm, notes)
    return out


def run_replicate(cfg: BenchmarkConfig, seed: int) -> list[dict]:
    """Long-format metric rows for one seed, ordered by (method, level, arm, metric)."""
    train_raw, test_raw = simulate_replicate(cfg, seed)
    rep = prepare_replicate(cfg, train_raw, test_raw, seed)
    rows = []
    for method in cfg.methods:
        if method.startswith("BP-"):
            levels = _bp_levels(cfg, rep, method)
        elif method == "QR":
            levels = _qr_levels(cfg, rep, method)
        else:
            levels = _kr_levels(cfg, rep, method)
        for level in cfg.levels:
            producer, notes = levels[level]
            for arm in cfg.arms_for(method):
                rpt = _test_arm(cfg, rep, producer, arm, level)
                metrics = rpt.metrics()
                metrics.update(notes)
                for name in sorted(metrics):
                    rows.append({"model": method, "level": level, "seed": seed, "arm": arm,
                                 "metric": name, "value": float(metrics[name])})
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean, sd and standard error over seeds per (model, level, arm, metric)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["model"], r["level"], r["arm"], r["metric"]), []).append(r["value"])
    out = []
    for (model, level, arm, metric), vals in groups.items():
        v = np.asarray(vals, float)
        n = v.size
        sd = float(np.std(v, ddof=1)) if n > 1 else 0.0
        out.append({"model": model, "level": level, "arm": arm, "metric": metric, "n": n,
                    "mean": float(np.mean(v)), "sd": sd, "se": sd / math.sqrt(n)})
    return out


def _order(rows, cfg):
    mi = {m: i for i, m in enumerate(cfg.methods)}
    li = {v: i for i, v in enumerate(cfg.levels)}
    return sorted(rows, key=lambda r: (mi[r["model"]], li[r["level"]], r.get("seed", 0), r["arm"], r["metric"]))


@dataclass
class BenchmarkReport:
    config: BenchmarkConfig
    rows: list
    summary: list

    def value(self, model, level, arm, metric, seed=None):
        vals = [r["value"] for r in self.rows if r["model"] == model and r["level"] == level
                and r["arm"] == arm and r["metric"] == metric and (seed is None or r["seed"] == seed)]
        return np.asarray(vals) if seed is None else vals[0]

    def stat(self, model, level, arm, metric) -> dict:
        for s in self.summary:
            if (s["model"], s["level"], s["arm"], s["metric"]) == (model, level, arm, metric):
                return s
        raise KeyError((model, level, arm, metric))

    def write(self, out_dir, stem: str = "benchmark") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}_summary.json"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["model", "level", "seed", "arm", "metric", "value"])
            for r in self.rows:
                wr.writerow([r["model"], repr(r["level"]), r["seed"], r["arm"], r["metric"], repr(r["value"])])
        payload = {"config": self.config.to_dict(), "config_hash": self.config.config_hash(),
                   "significance_note": "sd is across seeds; se = sd / sqrt(n)",
                   "cells": self.summary}
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")
        return csv_path, json_path


def benchmark(cfg: BenchmarkConfig, progress=None) -> BenchmarkReport:
    """Run every seed; ``progress(seed)`` is called after each replicate."""
    rows = []
    for seed in cfg.seeds:
        rows.extend(run_replicate(cfg, seed))
        if progress is not None:
            progress(seed)
    rows = _order(rows, cfg)
    summary = _order(summarize(rows), cfg)
    return BenchmarkReport(cfg, rows, summary)
