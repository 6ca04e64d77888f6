"""Command-line entry point: simulate, fit, predict, evaluate, benchmark.

Every command reads one YAML (or JSON) config tree; flags override the
matching keys. See README for the layout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from pobounds import __version__
from pobounds.bounds import BoundModel, fit, normalize_loss
from pobounds.datagen import ConfoundRule, CsvSchema, Dataset, load_csv, save_csv, standardize
from pobounds.evaluation import (
    STANDARD_FCR_GRID,
    BenchmarkConfig,
    benchmark,
    evaluate_intervals,
    simulate_replicate,
)
from pobounds.propensity import DEFAULT_CLIP_CAP, LogisticModel, fit_logistic, importance_weights
from pobounds.selection import Grid, SplitPlan, grid_search, make_splits

log = logging.getLogger("pobounds")


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def apply_overrides(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    if getattr(args, "seed", None) is not None:
        cfg["seeds"] = [args.seed]
    if getattr(args, "out", None):
        cfg["out"] = args.out
    if getattr(args, "required_fcr", None) is not None:
        cfg["required_fcr"] = args.required_fcr
    if getattr(args, "loss", None):
        cfg["loss"] = args.loss
    if getattr(args, "coupled", False):
        cfg["coupled"] = True
    if getattr(args, "jobs", None) is not None:
        cfg["jobs"] = args.jobs
    return cfg


def _seeds(cfg) -> list[int]:
    s = cfg.get("seeds", [0])
    return [int(v) for v in (s if isinstance(s, (list, tuple)) else [s])]


def _out_dir(cfg) -> Path:
    out = Path(cfg.get("out", "results"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _data_section(cfg) -> dict:
    data = cfg.get("data", {"dgp": "ist_like"})
    if ("dgp" in data) == ("csv" in data):
        raise ConfigError("data must name exactly one source: 'dgp' or 'csv'")
    return data


def _grid(cfg) -> Grid:
    g = dict(cfg.get("grid", {}))
    if "loss" in cfg:
        g["loss"] = normalize_loss(cfg["loss"])
    if "coupled" in cfg:
        g["coupled"] = bool(cfg["coupled"])
    if "required_fcr" in cfg:
        g["required_fcr"] = float(cfg["required_fcr"])
    return Grid.from_dict(g)


def _split(cfg, seed) -> SplitPlan:
    return SplitPlan(**{**cfg.get("split", {}), "seed": seed})


def _clip_cap(cfg) -> float:
    return float(cfg.get("propensity", {}).get("clip_cap", DEFAULT_CLIP_CAP))


def benchmark_config(cfg) -> BenchmarkConfig:
    data = _data_section(cfg)
    if "dgp" not in data:
        raise ConfigError("benchmark needs a simulated data source ('data.dgp')")
    b = dict(cfg.get("benchmark", {}))
    conf = data.get("confound")
    kw = {
        "dgp": data["dgp"],
        "seeds": tuple(_seeds(cfg)),
        "split": SplitPlan(**cfg.get("split", {})),
        "grid": _grid(cfg),
        "clip_cap": _clip_cap(cfg),
        "jobs": int(cfg.get("jobs", 1)),
    }
    for k in ("n_pool", "n_train", "n_test", "noise_var"):
        if k in data:
            kw[k] = data[k]
    if conf is not None:
        kw["confound_rule"] = ConfoundRule(**conf)
    levels = b.pop("levels", cfg.get("levels", [cfg.get("required_fcr", 0.01)]))
    kw["levels"] = STANDARD_FCR_GRID if levels == "standard" else tuple(levels)
    if b.get("strata"):
        b["strata"] = {k: tuple(v) for k, v in b["strata"].items()}
    for k in ("methods", "arms", "qr_quantiles", "kr_ridge_grid"):
        if k in b:
            b[k] = tuple(b[k])
    kw.update(b)
    return BenchmarkConfig(**kw)


def _bench_sim_config(cfg) -> BenchmarkConfig:
    # simulate/fit reuse the benchmark's pool and split recipe
    c = dict(cfg)
    c.setdefault("benchmark", {})
    c["benchmark"] = {k: v for k, v in c["benchmark"].items() if k in ("mode",)}
    return benchmark_config(c)


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_simulate(cfg: dict) -> list[Path]:
    """Write ``train_seed{s}.csv`` / ``test_seed{s}.csv`` per seed plus ``simulate_meta.json``."""
    bc = _bench_sim_config(cfg)
    out = _out_dir(cfg)
    written, meta = [], {"config": bc.to_dict(), "files": {}}
    for seed in bc.seeds:
        train, test = simulate_replicate(bc, seed)
        for name, ds in (("train", train), ("test", test)):
            p = out / f"{name}_seed{seed}.csv"
            schema = save_csv(ds, p)
            meta["files"][p.name] = {"n": ds.n, "sha256": _sha(p), "schema": schema.to_dict()}
            written.append(p)
        meta.setdefault("dgp_meta", {})[str(seed)] = {k: v for k, v in train.meta.items()
                                                      if isinstance(v, (int, float, str, list))}
    mp = out / "simulate_meta.json"
    _write_json(mp, meta)
    return written + [mp]


def _load_source(cfg, seed) -> Dataset:
    """Raw (unstandardized) training data for ``seed``."""
    data = _data_section(cfg)
    if "csv" in data:
        if "schema" not in data:
            raise ConfigError("a csv data source needs a 'schema' mapping")
        return load_csv(data["csv"], CsvSchema.from_dict(data["schema"]), standardize_covariates=False)
    train, _ = simulate_replicate(_bench_sim_config(cfg), seed)
    return train


def fit_pipeline(cfg: dict, seed: int) -> dict:
    """Splits, propensities, grid search and the final refit; returns the artifact payload."""
    raw = _load_source(cfg, seed)
    full = standardize(raw)
    grid = _grid(cfg)
    nuis, tr, va = make_splits(full, _split(cfg, seed))
    pm = fit_logistic(nuis.X, nuis.T, seed=seed)
    cap = _clip_cap(cfg)
    tr = tr.with_weights(importance_weights(pm, tr.X, tr.T, cap).raw)
    va = va.with_weights(importance_weights(pm, va.X, va.T, cap).raw)
    res = grid_search(tr, va, grid, jobs=int(cfg.get("jobs", 1)))
    # refit on train + validate with each target's chosen configuration
    both_X = np.vstack([tr.X, va.X])
    both = replace(tr, X=both_X, T=np.concatenate([tr.T, va.T]), Y=np.concatenate([tr.Y, va.Y]),
                   Y0=None, Y1=None, weights=np.concatenate([tr.weights, va.weights]), meta={})
    if grid.coupled:
        final = fit(both, res.configs["joint"])
    else:
        arms, diags = {}, {}
        for t, c in res.configs.items():
            m = fit(both, c, arms=(t,))
            arms[t], diags[t] = m.arms[t], m.diagnostics[t]
        final = BoundModel(arms, res.configs[min(res.configs)], diags)
    mean, scale = full.standardization
    return {
        "version": __version__,
        "seed": seed,
        "columns": list(full.columns),
        "standardization": {"mean": np.asarray(mean).tolist(), "scale": np.asarray(scale).tolist()},
        "propensity": pm.to_dict(),
        "clip_cap": cap,
        "model": final.to_dict(),
        "selection_model": res.model.to_dict(),
        "selection": res.to_dict(),
        "per_arm_configs": {str(t): c.to_dict() for t, c in res.configs.items()},
        "warnings": {"fallback_used": res.any_fallback, "certified": res.certified,
                     "flagged_final_fit": final.flagged},
    }


def cmd_fit(cfg: dict) -> list[Path]:
    out = _out_dir(cfg)
    paths = []
    for seed in _seeds(cfg):
        art = fit_pipeline(cfg, seed)
        p = out / f"model_seed{seed}.json"
        _write_json(p, art)
        paths.append(p)
        if art["warnings"]["fallback_used"] or art["warnings"]["flagged_final_fit"]:
            log.warning("seed %d: %s", seed, art["warnings"])
    return paths


def load_artifact(path) -> dict:
    try:
        art = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model artifact {path}: {exc}") from exc
    art["_model"] = BoundModel.from_dict(art["model"])
    return art


def _query_matrix(art, path):
    cols = art["columns"]
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty query file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in cols if c not in header]
    if missing:
        raise ConfigError(f"{path}: missing covariate column(s) {missing}")
    try:
        X = np.array([[float(r[header.index(c)]) for c in cols] for r in rows[1:] if r], float)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: bad covariate value ({exc})") from exc
    st = art["standardization"]
    return X, (X - np.asarray(st["mean"])) / np.asarray(st["scale"])


def cmd_predict(cfg: dict, model_path, query_path) -> Path:
    art = load_artifact(model_path)
    raw, X = _query_matrix(art, query_path)
    model = art["_model"]
    out = _out_dir(cfg)
    p = out / f"{Path(query_path).stem}_bounds_seed{art['seed']}.csv"
    cols = list(art["columns"])
    arms = sorted(model.arms)
    bounds = {t: model.arms[t].bounds(X) for t in arms}
    with open(p, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols + [f"{s}{t}" for t in arms for s in ("lower", "upper")])
        for i in range(X.shape[0]):
            vals = [repr(float(v)) for v in raw[i]]
            for t in arms:
                vals += [repr(float(bounds[t][0][i])), repr(float(bounds[t][1][i]))]
            wr.writerow(vals)
    return p


def cmd_evaluate(cfg: dict, model_path, data_path) -> Path:
    """Metrics of a fitted artifact on a CSV with outcomes (true potential
    outcomes when present, else importance-weighted factual outcomes)."""
    art = load_artifact(model_path)
    data = cfg.get("data", {})
    schema = data.get("schema") or {"covariates": art["columns"], "treatment": "t", "outcome": "y",
                                    "y0": "y0", "y1": "y1"}
    schema = CsvSchema.from_dict(schema)
    try:
        ds = load_csv(data_path, schema, standardize_covariates=False)
    except ValueError:
        ds = load_csv(data_path, replace(schema, y0=None, y1=None), standardize_covariates=False)
    st = art["standardization"]
    ds = standardize(ds, (st["mean"], st["scale"]))
    model = art["_model"]
    level = float(art["selection"]["required_fcr"])
    report = {"model": str(model_path), "required_fcr": level, "arms": {}}
    pm = LogisticModel.from_dict(art["propensity"])
    for t in sorted(model.arms):
        if ds.has_potential_outcomes:
            lo, up = model.arms[t].bounds(ds.X)
            r = evaluate_intervals(lo, up, ds.potential(t), level)
            mode = "simulation"
        else:
            idx = ds.arm_index(t)
            w = importance_weights(pm, ds.X, ds.T, art["clip_cap"]).normalized[idx]
            lo, up = model.arms[t].bounds(ds.X[idx])
            r = evaluate_intervals(lo, up, ds.Y[idx], level, w)
            mode = "observational"
        report["arms"][str(t)] = r.metrics()
        report["mode"] = mode
    p = _out_dir(cfg) / f"{Path(data_path).stem}_eval_seed{art['seed']}.json"
    _write_json(p, report)
    return p


def cmd_benchmark(cfg: dict) -> tuple[Path, Path]:
    bc = benchmark_config(cfg)
    out = _out_dir(cfg)
    report = benchmark(bc, progress=lambda s: log.info("seed %d done", s))
    stem = cfg.get("benchmark_stem", "benchmark")
    return report.write(out, stem)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pobounds", description="High-probability bounds on potential outcomes.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--required-fcr", type=float, dest="required_fcr")
        sp.add_argument("--loss", choices=["l1", "l2", "linf"])
        sp.add_argument("--coupled", action="store_true")
        sp.add_argument("--jobs", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("simulate", help="write simulated train/test CSVs"))
    common(sub.add_parser("fit", help="select and fit a bound model"))
    sp = common(sub.add_parser("predict", help="bounds for a CSV of query points"))
    sp.add_argument("model")
    sp.add_argument("query")
    sp = common(sub.add_parser("evaluate", help="coverage and width of a fitted model"))
    sp.add_argument("model")
    sp.add_argument("data")
    common(sub.add_parser("benchmark", help="replicated comparison against baselines"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("default")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "simulate":
            paths = cmd_simulate(cfg)
        elif args.command == "fit":
            paths = cmd_fit(cfg)
        elif args.command == "predict":
            paths = [cmd_predict(cfg, args.model, args.query)]
        elif args.command == "evaluate":
            paths = [cmd_evaluate(cfg, args.model, args.data)]
        else:
            paths = list(cmd_benchmark(cfg))
    except (ValueError, RuntimeError, OSError, KeyError, TypeError) as exc:
        print(f"pobounds {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
