import hashlib
import json

import numpy as np
import pytest
import yaml

from pobounds.cli import main

FAST = {"alphas": [1e-3, 1e-2], "betas_u": [0.0, 0.01], "gammas": [0.0, 0.1, 0.2]}


def _write_config(tmp_path, **kw):
    cfg = {"data": {"dgp": "ist_like", "n_train": 600, "n_test": 300}, "seeds": [0], "grid": FAST,
           "required_fcr": 0.05, "out": str(tmp_path / "out")}
    cfg.update(kw)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return p


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def test_simulate_files_and_determinism(tmp_path, capsys):
    cfg = _write_config(tmp_path, data={"dgp": "ist_like", "n_train": 3000, "n_test": 3000})
    assert main(["simulate", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == ["simulate_meta.json", "test_seed0.csv", "train_seed0.csv"]
    first = {p.name: _sha(p) for p in out.iterdir()}
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert first == {p.name: _sha(p) for p in out.iterdir()}
    capsys.readouterr()


def test_simulate_two_seeds_distinct(tmp_path):
    cfg = _write_config(tmp_path, seeds=[0, 1])
    assert main(["simulate", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    csvs = sorted(out.glob("*.csv"))
    assert len(csvs) == 4
    assert len({_sha(p) for p in csvs}) == 4


def test_fit_predict_evaluate(tmp_path):
    cfg = _write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert main(["fit", "--config", str(cfg), "--loss", "linf"]) == 0
    out = tmp_path / "out"
    art = json.loads((out / "model_seed0.json").read_text())
    assert art["model"]["config"]["loss"] == "Linf"
    for t, ok in art["selection"]["fallback_used"].items():
        assert ok or art["selection"]["chosen"][t]["nu_hat"] <= 0.05
    h = _sha(out / "model_seed0.json")
    assert main(["fit", "--config", str(cfg), "--loss", "linf"]) == 0
    assert _sha(out / "model_seed0.json") == h
    assert main(["predict", "--config", str(cfg), str(out / "model_seed0.json"), str(out / "test_seed0.csv")]) == 0
    lines = (out / "test_seed0_bounds_seed0.csv").read_text().splitlines()
    assert lines[0] == "age,lower0,upper0,lower1,upper1" and len(lines) == 301
    assert main(["evaluate", "--config", str(cfg), str(out / "model_seed0.json"), str(out / "test_seed0.csv")]) == 0
    report = json.loads((out / "test_seed0_eval_seed0.json").read_text())
    assert report["mode"] == "simulation" and set(report["arms"]) == {"0", "1"}


def test_fit_constant_csv_gives_near_zero_width(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["x,t,y"] + [f"{rng.normal()!r},{i % 2},3.0" for i in range(200)]
    data = tmp_path / "c.csv"
    data.write_text("\n".join(rows) + "\n")
    cfg = _write_config(tmp_path, data={"csv": str(data), "schema": {"covariates": ["x"]}},
                        grid={"alphas": [1e-3], "betas_u": [0.0], "gammas": [0.0]})
    assert main(["fit", "--config", str(cfg), "--required-fcr", "0.5"]) == 0
    from pobounds.bounds import BoundModel

    art = json.loads((tmp_path / "out" / "model_seed0.json").read_text())
    m = BoundModel.from_dict(art["model"])
    X = rng.normal(size=(20, 1))
    for t in (0, 1):
        lo, up = m.arms[t].bounds(X)
        assert np.max(up - lo) < 1e-3


def test_benchmark_cell_count_and_determinism(tmp_path):
    cfg = _write_config(tmp_path, seeds=[0, 1],
                        benchmark={"methods": ["BP-D-L2", "KR-CI"], "levels": [0.05, 0.1],
                                   "kr_ridge_grid": [0.1, 1.0]})
    assert main(["benchmark", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    lines = (out / "benchmark.csv").read_text().splitlines()
    cells = {tuple(line.split(",")[:3]) for line in lines[1:]}
    assert len(cells) == 8
    h = (_sha(out / "benchmark.csv"), _sha(out / "benchmark_summary.json"))
    assert main(["benchmark", "--config", str(cfg)]) == 0
    assert h == (_sha(out / "benchmark.csv"), _sha(out / "benchmark_summary.json"))


def test_standard_grid_accepted(tmp_path):
    from pobounds.cli import benchmark_config, load_config
    from pobounds.evaluation import STANDARD_FCR_GRID

    cfg = _write_config(tmp_path, benchmark={"levels": list(STANDARD_FCR_GRID)})
    assert benchmark_config(load_config(cfg)).levels == STANDARD_FCR_GRID
    cfg = _write_config(tmp_path, benchmark={"levels": "standard"})
    assert benchmark_config(load_config(cfg)).levels == STANDARD_FCR_GRID


def test_fatal_errors_exit_nonzero(tmp_path, capsys):
    assert main(["fit", "--config", str(tmp_path / "missing.yaml")]) == 1
    bad = _write_config(tmp_path, data={"dgp": "ist_like", "csv": "x.csv"})
    assert main(["simulate", "--config", str(bad)]) == 1
    assert "error" in capsys.readouterr().err


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("simulate", "fit", "predict", "evaluate", "benchmark"):
        assert cmd in text
