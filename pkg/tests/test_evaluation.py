import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from evaluation_helpers import naive_fcr, naive_iw
from pobounds.evaluation import (
    STANDARD_FCR_GRID,
    BenchmarkConfig,
    benchmark,
    evaluate_intervals,
    fcr,
    iw_stats,
)
from pobounds.selection import Grid

SMALL_GRID = Grid(alphas=(1e-3, 1e-1), betas_u=(0.0, 0.005, 0.01, 0.05), gammas=(0.0, 0.1, 0.2, 0.4))


def small_config(**kw):
    base = dict(n_train=800, n_test=400, seeds=(0,), levels=(0.05, 0.1), methods=("BP-D-L2", "KR-CI"),
                grid=SMALL_GRID, qr_quantiles=(0.9, 0.95), kr_ridge_grid=(1e-2, 1.0))
    base.update(kw)
    return BenchmarkConfig(**base)


def test_fcr_examples():
    y = np.array([0.0, 5.0, 10.0])
    lo, up = np.ones(3), np.full(3, 9.0)
    assert fcr(lo, up, [2.0, 3.0, 4.0]) == 0.0
    assert fcr(lo, up, y) == pytest.approx(2 / 3)
    assert fcr(lo, up, y, [0.5, 0.25, 0.25]) == pytest.approx(0.75)


def test_fcr_closed_endpoints_and_crossing():
    assert fcr([1.0], [2.0], [2.0]) == 0.0
    assert fcr([3.0], [2.0], [2.5]) == 1.0
    with pytest.raises(ValueError):
        fcr([], [], [])


def test_infinite_intervals_cover_everything():
    y = np.random.default_rng(0).normal(size=50)
    for level in STANDARD_FCR_GRID:
        r = evaluate_intervals(np.full(50, -np.inf), np.full(50, np.inf), y, level)
        assert r.achieved_fcr == 0.0 and r.fcr_violation == -level


def test_iw_examples():
    assert iw_stats(np.zeros(4), np.full(4, 0.6)) == pytest.approx((0.6, 0.6, 0.0))
    assert iw_stats([0.0, 0.0], [1.0, 3.0])[:2] == (2.0, 3.0)


def test_iw_matches_naive_loop():
    rng = np.random.default_rng(1)
    lo = rng.normal(size=1000)
    up = lo + rng.normal(size=1000) + 0.5
    w = rng.uniform(0, 1, 1000)
    assert iw_stats(lo, up, w) == pytest.approx(naive_iw(lo, up, w), abs=1e-12)
    assert iw_stats(lo, up) == pytest.approx(naive_iw(lo, up), abs=1e-12)
    y = rng.normal(size=1000)
    assert fcr(lo, up, y, w) == pytest.approx(naive_fcr(lo, up, y, w), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(-100, 100), st.floats(0, 3))
def test_fcr_shift_invariance_and_widening(seed, shift, widen):
    rng = np.random.default_rng(seed)
    lo = rng.normal(size=40)
    up = lo + rng.uniform(0, 2, 40)
    y = rng.normal(size=40)
    # dyadic shifts keep the comparisons exact in floating point
    c = np.round(shift * 8) / 8
    assert fcr(lo + c, up + c, y + c) == fcr(lo, up, y)
    assert fcr(lo - widen, up + widen, y) <= fcr(lo, up, y)


def test_config_checks():
    with pytest.raises(ValueError):
        BenchmarkConfig(methods=("GP-CCI",))
    with pytest.raises(ValueError):
        BenchmarkConfig(mode="other")
    with pytest.raises(ValueError, match="raise n_pool"):
        benchmark(small_config(n_pool=1000, n_train=800, n_test=400))
    cfg = small_config(levels=STANDARD_FCR_GRID)
    assert BenchmarkConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_report_counts_and_determinism(tmp_path):
    cfg = small_config(seeds=(0, 1))
    a = benchmark(cfg)
    cells = {(r["model"], r["level"], r["seed"]) for r in a.rows}
    assert len(cells) == 2 * 2 * 2
    pa = a.write(tmp_path / "a")
    pb = benchmark(cfg).write(tmp_path / "b")
    for x, y in zip(pa, pb):
        assert x.read_bytes() == y.read_bytes()
    summary = json.loads(pa[1].read_text())
    assert {c["n"] for c in summary["cells"]} == {2}


def test_linf_width_is_nearly_constant():
    rep = benchmark(small_config(methods=("BP-D-Linf",), levels=(0.05,), arms=(1,)))
    mean = rep.value("BP-D-Linf", 0.05, 1, "mean_iw", seed=0)
    mx = rep.value("BP-D-Linf", 0.05, 1, "max_iw", seed=0)
    assert mx == pytest.approx(mean, rel=0.05)


def test_bp_width_decreases_with_required_fcr():
    levels = (0.01, 0.05, 0.1, 0.2)
    rep = benchmark(small_config(n_train=1200, levels=levels, methods=("BP-D-L2",), arms=(1,)))
    widths = [rep.value("BP-D-L2", v, 1, "mean_iw", seed=0) for v in levels]
    assert spearmanr(levels, widths)[0] <= 0


def test_observational_mode_and_strata():
    cfg = small_config(mode="observational", methods=("KR-CCI", "QR"), levels=(0.1,),
                       strata={"old": ("age", ">", 70)})
    rep = benchmark(cfg)
    metrics = {r["metric"] for r in rep.rows}
    assert {"achieved_fcr", "mean_iw", "mean_iw[old]"} <= metrics
    assert all(np.isfinite(r["value"]) for r in rep.rows)
