import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evaluation_helpers import naive_fcr
from pobounds.bounds import (
    ArmBounds,
    BoundModel,
    FitConfig,
    apply_gamma_shift,
    assemble_decoupled,
    fit,
    predict_bounds,
    violation_magnitude,
)
from pobounds.datagen import Dataset
from pobounds.kernels import KernelSpec
from pobounds.qp import SOLVED, solve

LIN = KernelSpec("linear")
RBF = KernelSpec("rbf", bandwidth=1.0)


def _arm_data(X, y, t=1, w=None):
    X = np.asarray(X, float).reshape(len(y), -1)
    return Dataset(X, np.full(len(y), t), np.asarray(y, float), weights=w)


@pytest.mark.parametrize("loss", ["L1", "L2", "Linf"])
@pytest.mark.parametrize("kernel", [LIN, RBF])
def test_constant_outcomes_give_zero_width(loss, kernel):
    X = np.random.default_rng(0).normal(size=(12, 2))
    m = fit(_arm_data(X, np.full(12, 2.5)), FitConfig(loss=loss, alpha=1e-2, beta_u=0, beta_l=0, kernel=kernel),
            arms=(1,))
    lo, up = m.arms[1].raw(X)
    assert np.allclose(lo, 2.5, atol=1e-4) and np.allclose(up, 2.5, atol=1e-4)
    assert m.diagnostics[1].objective == pytest.approx(0.0, abs=1e-6)


def test_three_point_line_against_grid_brute_force():
    x = np.array([0.0, 1.0, 2.0])
    y = np.array([0.0, 1.0, 2.0])
    # grid oracle: common slope s, tightest offsets containing every point
    best = None
    for s in np.linspace(-1, 3, 4001):
        r = y - s * x
        width = r.max() - r.min()
        if best is None or width < best[0]:
            best = (width, s, r.max(), r.min())
    width, s, ru, rl = best
    m = fit(_arm_data(x, y), FitConfig(loss="L1", alpha=1e-6, beta_u=0, beta_l=0, kernel=LIN), arms=(1,))
    lo, up = m.arms[1].raw(x[:, None])
    assert np.allclose(up, s * x + ru, atol=1e-3)
    assert np.allclose(lo, s * x + rl, atol=1e-3)
    assert np.max(up - lo) <= width + 1e-3


def test_feasibility_witness_and_never_infeasible():
    rng = np.random.default_rng(1)
    for beta in (0.0, 0.05, 0.3):
        X = rng.normal(size=(30, 1))
        y = np.sin(2 * X[:, 0]) + rng.normal(size=30) * 0.3
        data = _arm_data(X, y)
        prob, _, _ = assemble_decoupled(data, FitConfig(loss="L2", beta_u=beta, beta_l=beta, kernel=RBF))
        x = np.zeros(prob.n)
        prob.block(x, "rho_u0")[:] = y.max()
        prob.block(x, "rho_l0")[:] = y.min()
        Ax = prob.A @ x
        assert np.all(Ax >= prob.l - 1e-12) and np.all(Ax <= prob.u + 1e-12)
        assert solve(prob).status == SOLVED


def test_budget_contract():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(80, 1))
    y = X[:, 0] ** 2 + rng.standard_t(3, size=80)
    w = rng.uniform(0.5, 2.0, 80)
    for loss in ("L1", "L2", "Linf"):
        cfg = FitConfig(loss=loss, alpha=1e-3, beta_u=0.05, beta_l=0.1, kernel=RBF)
        m = fit(_arm_data(X, y, w=w), cfg, arms=(1,))
        d = m.diagnostics[1]
        assert d.D_u <= 0.05 + 1e-4 and d.D_l <= 0.1 + 1e-4
        assert d.max_crossing <= 1e-4


def _loss_value(loss, widths):
    return {"L1": np.mean(widths), "L2": np.mean(widths**2), "Linf": np.max(widths)}[loss]


def test_each_loss_minimizes_its_own_criterion():
    rng = np.random.default_rng(3)
    X = rng.uniform(-2, 2, size=(60, 1))
    y = X[:, 0] + rng.normal(size=60) * (0.2 + 0.5 * (X[:, 0] > 0))
    data = _arm_data(X, y)
    widths = {}
    for loss in ("L1", "L2", "Linf"):
        m = fit(data, FitConfig(loss=loss, alpha=1e-6, beta_u=0.02, beta_l=0.02, kernel=LIN), arms=(1,))
        lo, up = m.arms[1].raw(X)
        widths[loss] = up - lo
    for own in widths:
        for other in widths:
            assert _loss_value(own, widths[own]) <= _loss_value(own, widths[other]) + 1e-3


def test_translation_equivariance():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 1))
    y = np.cos(X[:, 0]) + rng.normal(size=40) * 0.2
    cfg = FitConfig(loss="L2", alpha=1e-3, beta_u=0.03, beta_l=0.03, kernel=RBF)
    a = fit(_arm_data(X, y), cfg, arms=(1,)).arms[1].raw(X)
    b = fit(_arm_data(X, y + 7.0), cfg, arms=(1,)).arms[1].raw(X)
    assert np.allclose(np.asarray(b) - 7.0, a, atol=1e-4)


def test_coupled_matches_decoupled_on_symmetric_data():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(25, 1))
    y = X[:, 0] + rng.normal(size=25) * 0.3
    data = Dataset(np.vstack([X, X]), np.r_[np.zeros(25, int), np.ones(25, int)], np.r_[y, y])
    # the coupled loss counts every point once per arm, which doubles the loss
    # relative to alpha; a tiny alpha makes both programs width-dominated
    cfg = FitConfig(loss="L2", alpha=1e-6, beta_u=0.05, beta_l=0.05, kernel=LIN)
    dec = fit(data, cfg)
    cou = fit(data, FitConfig(**{**cfg.__dict__, "coupled": True}))
    for t in (0, 1):
        lo_d, up_d = dec.arms[t].raw(X)
        lo_c, up_c = cou.arms[t].raw(X)
        assert np.mean((up_c - lo_c) ** 2) == pytest.approx(np.mean((up_d - lo_d) ** 2), abs=1e-3)
        assert np.allclose((lo_c, up_c), (lo_d, up_d), atol=1e-2)


def test_coupled_single_sample_per_arm():
    data = Dataset([[0.3], [0.3]], [0, 1], [1.0, 1.0])
    m = fit(data, FitConfig(loss="L1", coupled=True, beta_u=0, beta_l=0, kernel=LIN))
    for t in (0, 1):
        lo, up = m.arms[t].raw([[0.3]])
        assert up[0] - lo[0] == pytest.approx(0.0, abs=1e-5)


def test_coupled_tighter_where_arm_is_missing():
    # arm 0 has no samples above x = 0.7; the coupled loss still sees those x
    diffs = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        x = rng.uniform(0, 1, 240)
        T = rng.integers(0, 2, 240)
        keep = ~((T == 0) & (x > 0.7))
        x, T = x[keep], T[keep]
        y = np.where(T == 1, 2 * x, 1 - x) + rng.normal(size=x.size) * 0.1
        data = Dataset(x[:, None], T, y)
        cfg = FitConfig(loss="L2", alpha=1e-3, beta_u=0.02, beta_l=0.02, kernel=LIN)
        dec = fit(data, cfg, arms=(0,))
        cou = fit(data, FitConfig(**{**cfg.__dict__, "coupled": True}))
        grid = np.linspace(0.7, 1.0, 31)[:, None]
        w_dec = np.subtract(*dec.arms[0].raw(grid)[::-1])
        w_cou = np.subtract(*cou.arms[0].raw(grid)[::-1])
        diffs.append(w_cou.mean() - w_dec.mean())
    assert np.mean(diffs) <= 0.0


def test_gamma_shift_examples():
    b = ArmBounds(np.zeros(1), np.zeros(1), 2.0, 2.0, np.zeros((1, 1)), LIN)
    m = BoundModel({1: b}, FitConfig(), {})
    assert apply_gamma_shift(m, 0.0) is m
    shifted = apply_gamma_shift(m, 0.5)
    p = predict_bounds(shifted, np.zeros((1, 1)), 1)
    assert (p.lower[0], p.upper[0]) == (1.5, 2.5) and p.width[0] == 1.0
    with pytest.raises(ValueError):
        apply_gamma_shift(m, -0.1)


def test_predict_hand_computed_linear_model():
    # f_u(x) = 1*<1, x> + 0.5*<2, x> + 0.3 = 2x + 0.3; f_l(x) = -x - 1
    b = ArmBounds(np.array([1.0, 0.5]), np.array([-1.0, 0.0]), 0.3, -1.0, np.array([[1.0], [2.0]]), LIN)
    m = BoundModel({0: b}, FitConfig(), {})
    p = predict_bounds(m, np.array([[3.0]]), 0)
    assert p.upper[0] == pytest.approx(6.3) and p.lower[0] == pytest.approx(-4.0)
    with pytest.raises(ValueError):
        predict_bounds(m, np.array([[3.0]]), 1)


def test_fitted_bounds_do_not_cross_at_training_points():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(50, 2))
    y = rng.normal(size=50)
    m = fit(_arm_data(X, y), FitConfig(loss="L2", beta_u=0.1, beta_l=0.1, kernel=RBF, gamma=0.1), arms=(1,))
    p = predict_bounds(m, X, 1)
    assert np.all(p.lower <= p.upper + 1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_fcr_non_increasing_in_gamma(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 1))
    y = X[:, 0] + rng.normal(size=15)
    m = fit(_arm_data(X, y), FitConfig(loss="L2", beta_u=0.2, beta_l=0.2, kernel=LIN), arms=(1,))
    Xe = rng.normal(size=(200, 1))
    ye = Xe[:, 0] + rng.normal(size=200)
    prev = np.inf
    for g in np.round(np.arange(0, 1.01, 0.1), 10):
        lo, up = apply_gamma_shift(m, g).arms[1].bounds(Xe)
        f = naive_fcr(lo, up, ye)
        assert f <= prev
        prev = f


def test_violation_magnitude_examples():
    b = ArmBounds(np.zeros(1), np.zeros(1), 1.5, -5.0, np.zeros((1, 1)), LIN)
    m = BoundModel({1: b}, FitConfig(), {})
    assert violation_magnitude(m, _arm_data([[0.0]], [2.0]), "upper") == pytest.approx(0.5)
    assert violation_magnitude(m, _arm_data([[0.0]], [0.0]), "upper") == 0.0
    assert violation_magnitude(m, _arm_data([[0.0]], [0.0]), "lower") == 0.0


def test_violation_magnitude_matches_naive_loop():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        anchors = rng.normal(size=(3, 1))
        b = ArmBounds(rng.normal(size=3), rng.normal(size=3), rng.normal(), rng.normal() - 1, anchors, LIN)
        m = BoundModel({0: b}, FitConfig(), {})
        X = rng.normal(size=(n, 1))
        y = rng.normal(size=n) * 2
        w = rng.uniform(0.1, 1, n)
        data = _arm_data(X, y, t=0, w=w)
        ref_u = ref_l = 0.0
        for i in range(n):
            fu = sum(b.a_u[j] * anchors[j, 0] * X[i, 0] for j in range(3)) + b.rho_u
            fl = sum(b.a_l[j] * anchors[j, 0] * X[i, 0] for j in range(3)) + b.rho_l
            ref_u += w[i] / w.sum() * max(y[i] - fu, 0.0)
            ref_l += w[i] / w.sum() * max(fl - y[i], 0.0)
        assert violation_magnitude(m, data, "upper") == pytest.approx(ref_u, abs=1e-12)
        assert violation_magnitude(m, data, "lower") == pytest.approx(ref_l, abs=1e-12)


def test_model_round_trip():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(20, 1))
    m = fit(_arm_data(X, X[:, 0]), FitConfig(kernel=RBF, gamma=0.2), arms=(1,))
    r = BoundModel.from_dict(m.to_dict())
    assert np.array_equal(np.asarray(r.arms[1].bounds(X)), np.asarray(m.arms[1].bounds(X)))
    assert r.config == m.config


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(loss="L3")
    with pytest.raises(ValueError):
        FitConfig(beta_u=-1)
    assert FitConfig(loss="linf").loss == "Linf"
