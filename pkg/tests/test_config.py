import json

import pytest

from snell.config import OUT_DIR_ENV, ConfigError, RunConfig, build_config, load_config_file


def test_defaults():
    cfg = build_config("fit-matrix")
    assert (cfg.fit.m, cfg.fit.n, cfg.fit.rank, cfg.fit.steps, cfg.fit.seeds) == (32, 32, 4, 20000, 10)
    assert cfg.fit.kernels == ["linear", "piecewise_linear", "sigmoid", "rbf"]
    assert (cfg.train.base_lr, cfg.train.weight_decay, cfg.train.batch_size) == (1e-3, 1e-4, 32)
    assert cfg.model.sparsity == 0.9 and cfg.model.rank == 8
    assert cfg.mode == "recompute"


def test_file_then_flags():
    cfg = build_config("train", {"seed": 5, "mode": "store", "train": {"epochs": 7}}, {"seed": 9, "mode": None})
    assert cfg.seed == 9 and cfg.mode == "store" and cfg.train.epochs == 7


@pytest.mark.parametrize(
    "data,field",
    [
        ({"fit": {"stepz": 1}}, "fit.stepz"),
        ({"fit": {"steps": "many"}}, "fit.steps"),
        ({"fit": {"steps": 1.5}}, "fit.steps"),
        ({"fit": {"lr": -1.0}}, "fit.lr"),
        ({"fit": {"kernels": ["linear", "cosine"]}}, "fit.kernels[1]"),
        ({"model": {"sparsity": 1.5}}, "model.sparsity"),
        ({"model": {"soft_threshold": "hard"}}, "model.soft_threshold"),
        ({"model": {"rank": 1}}, "model.segments"),
        ({"train": {"betas": [0.9]}}, "train.betas"),
        ({"sweep": {"grid": [0.5, 2]}}, "sweep.grid[1]"),
        ({"data": {"source": "csv"}}, "data.path"),
        ({"seed": -1}, "seed"),
        ({"mode": "lazy"}, "mode"),
        ({"emit_plot_data": 1}, "emit_plot_data"),
        ({"rank_study": {"scales": ["huge"]}}, "rank_study.scales[0]"),
        ({"fit": 3}, "fit"),
    ],
)
def test_errors_name_field(data, field):
    with pytest.raises(ConfigError) as info:
        build_config("fit-matrix", data)
    assert info.value.field == field


def test_experiment_mismatch():
    with pytest.raises(ConfigError, match="rank-study"):
        build_config("fit-matrix", {"experiment": "rank-study"})


def test_aliases_canonicalized():
    assert build_config("train", {"model": {"kernel": "PWL"}}).model.kernel == "piecewise_linear"


def test_echo_round_trip():
    cfg = build_config("sweep-sparsity", {"seed": 3, "sweep": {"grid": [0, 0.5]}}, {"out_dir": "/tmp/x", "parallel_seeds": 4})
    echo = cfg.echo()
    assert "out_dir" not in echo and "parallel_seeds" not in echo
    again = build_config("sweep-sparsity", json.loads(json.dumps(echo)))
    assert again.echo() == echo


def test_report_json_accepted(tmp_path):
    echo = build_config("train", {"seed": 11}).echo()
    p = tmp_path / "report.json"
    p.write_text(json.dumps({"experiment": "train", "metrics": {}, "config": echo}))
    assert load_config_file(p) == echo


def test_bad_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="JSON"):
        load_config_file(tmp_path / "bad.json")


def test_out_dir_env(monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, "/tmp/elsewhere")
    assert build_config("train").out_dir == "/tmp/elsewhere"
    assert build_config("train", None, {"out_dir": "here"}).out_dir == "here"
    monkeypatch.delenv(OUT_DIR_ENV)
    assert build_config("train").out_dir == "runs"


def test_seed_list_wraps():
    cfg = RunConfig(seed=2**64 - 1)
    assert cfg.seed_list(2) == [2**64 - 1, 0]
