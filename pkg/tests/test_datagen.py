import numpy as np
import pytest
from scipy import stats

from pobounds.datagen import (
    DEFAULT_RULE,
    ConfoundRule,
    CsvFormatError,
    CsvSchema,
    DgpSpec,
    confound,
    gen_heteroskedastic,
    gen_ist_like,
    generate,
    heteroskedastic_noise_sd,
    ist_mean_outcomes,
    load_csv,
    rescale_age,
    sample_ages,
    save_csv,
    standardize,
)


def test_extreme_ages():
    mu0, mu1 = ist_mean_outcomes(np.array([100.0, 40.0]))
    # age' = 10: S(-5, 10) = 1/(1 + e^50) and S(-5, 6) = 1/(1 + e^30)
    assert mu1[0] == pytest.approx(2.5 + 1 / (1 + np.exp(50.0)), abs=1e-15)
    assert mu0[0] == pytest.approx(1.5 + 1 / (1 + np.exp(30.0)), abs=1e-15)
    assert mu0[0] - 1.5 < 1e-12
    assert mu1[1] == pytest.approx(3.5, abs=1e-12)


def test_rescale_age_endpoints():
    assert np.allclose(rescale_age([40.0, 70.0, 100.0], -10, 10), [-10, 0, 10])


def test_age_moments():
    ages = sample_ages(100000, np.random.default_rng(0))
    assert ages.mean() == pytest.approx(71.8, abs=0.5)
    assert stats.skew(ages) < 0


def test_consistency_and_reproducibility():
    a, b = gen_ist_like(500, 3), gen_ist_like(500, 3)
    assert a.check_consistency() and np.array_equal(a.Y, b.Y) and np.array_equal(a.X, b.X)
    assert not np.array_equal(a.Y, gen_ist_like(500, 4).Y)
    h = gen_heteroskedastic(500, 3)
    assert h.check_consistency()


def test_confound_drop_zero_and_one():
    ds = gen_ist_like(2000, 1)
    same = confound(ds, ConfoundRule(drop_fraction=0.0), seed=0)
    assert np.array_equal(same.Y, ds.Y)
    rule = ConfoundRule(drop_fraction=1.0)
    age = ds.column("age")
    k = int(np.sum((age > 70) & (ds.T == 0)))
    out = confound(ds, rule, seed=0)
    assert out.n == ds.n - k
    assert not np.any((out.column("age") > 70) & (out.T == 0))


def test_default_rule_survival_fraction():
    ds = gen_ist_like(100000, 5)
    before = np.sum((ds.column("age") > 70) & (ds.T == 0))
    out = confound(ds, DEFAULT_RULE, seed=1)
    after = np.sum((out.column("age") > 70) & (out.T == 0))
    assert after / before == pytest.approx(0.30, abs=0.01)


def test_confounding_truncates_untreated_ages():
    out = generate(DgpSpec(n=10000, seed=2))
    age = out.column("age")
    assert age[out.T == 1].mean() - age[out.T == 0].mean() > 2.0


def test_heteroskedastic_formula():
    assert heteroskedastic_noise_sd(np.array([-2.0, 0.0, 2.0])).tolist() == [0.1, 0.1, 2.1]
    ds = gen_heteroskedastic(100000, 0)
    x = rescale_age(ds.column("age"), -2, 2)
    # binned residual sd against bin centre on the x > 0 half
    edges = np.linspace(0, 1.2, 7)
    centres, sds = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (x > lo) & (x <= hi)
        centres.append(x[m].mean())
        sds.append(np.std(ds.Y1[m] - x[m] ** 2))
    slope = np.polyfit(centres, sds, 1)[0]
    assert slope == pytest.approx(1.0, abs=0.1)


def test_csv_round_trip(tmp_path):
    ds = standardize(gen_ist_like(50, 0))
    p = tmp_path / "d.csv"
    schema = save_csv(ds, p)
    back = load_csv(p, schema)
    assert np.allclose(back.X, ds.X, atol=1e-9)
    assert np.array_equal(back.T, ds.T)
    assert np.allclose(back.Y, ds.Y, atol=1e-9)
    assert back.standardization is not None


def test_small_csv_and_row_errors(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("age,t,y\n50,1,2.0\n60,0,1.5\n70,1,2.2\n")
    ds = load_csv(p, CsvSchema(("age",)))
    assert ds.n == 3 and ds.standardization is not None
    bad = tmp_path / "b.csv"
    bad.write_text("age,t,y\n50,1,2\n51,0,2\n52,1,2\n53,0,2\n54,2,2\n")
    with pytest.raises(CsvFormatError, match="row 5"):
        load_csv(bad, CsvSchema(("age",)))
    with pytest.raises(CsvFormatError, match="missing column"):
        load_csv(p, CsvSchema(("weight",)))


def test_potential_outcomes_guard():
    ds = gen_ist_like(10, 0)
    stripped = type(ds)(ds.X, ds.T, ds.Y)
    with pytest.raises(ValueError):
        stripped.potential(1)
