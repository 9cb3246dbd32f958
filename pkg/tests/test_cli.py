"""Tests for config parsing, CSV emission, figures, and the CLI driver."""

import math

import numpy as np
import pytest

from alloc_dichotomy import cli
from alloc_dichotomy.cli import (
    ConfigError,
    RunConfig,
    build_instance,
    emit_csv,
    main,
    parse_config,
    parse_config_text,
)
from alloc_dichotomy.harness import run_experiment
from alloc_dichotomy.tree_allocator import build_tree


def test_preset_defaults_delta():
    config = parse_config(
        ["--preset", "appendix-e-beta2", "--horizon", "1000000", "--seeds", "10"]
    )
    instance, beta, label = build_instance(config)
    assert instance.confidence == pytest.approx(2e-12)
    assert beta == 2.0
    assert config.seeds == 10


def test_beta_validation_message(capsys):
    code = main(["--preset", "lower-bound-pair", "--beta", "0.5", "--horizon", "100"])
    assert code == 2
    assert "beta must be >= 1" in capsys.readouterr().err


def test_family_padded_tree_config():
    config = parse_config(
        ["--k", "3", "--family", "quadratic", "--a", "1", "--b", "2", "--horizon", "100"]
    )
    instance, beta, label = build_instance(config)
    assert instance.k == 3
    tree = build_tree(instance.functions)
    assert tree.leaf_count == 4
    assert tree.leaves[3].is_pad
    assert beta == pytest.approx(2.0)


def test_unknown_key_in_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("horizon = 100\nbogus = 3\n")
    with pytest.raises(ConfigError, match="unknown key: bogus"):
        parse_config(["--config", str(path), "--preset", "linear-gap"])


def test_config_file_roundtrip(tmp_path):
    config = parse_config(
        ["--preset", "c-alpha", "--horizon", "5000", "--seeds", "3", "--sigma", "0.5"]
    )
    text = config.canonical_text()
    parsed = RunConfig(**parse_config_text(text))
    assert parsed == config


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset = linear-gap\nhorizon = 100  # comment\nseeds = 2\n")
    config = parse_config(["--config", str(path), "--horizon", "200"])
    assert config.horizon == 200
    assert config.seeds == 2
    assert config.preset == "linear-gap"


def test_missing_instance_is_an_error(capsys):
    assert main(["--horizon", "100"]) == 2
    assert "preset or family" in capsys.readouterr().err


def _result_for(horizon=10, beta=2.0):
    config = parse_config(
        ["--preset", "appendix-e-beta2", "--horizon", str(horizon), "--noise", "zero"]
    )
    instance, beta_ref, label = build_instance(config)
    return run_experiment(instance, algorithm="k2", replications=1, beta=beta)


def test_emit_csv_header_only_for_empty_checkpoints(tmp_path):
    result = _result_for()
    result.checkpoint_ts = np.array([], dtype=np.int64)
    result.mean_avg_regret = np.array([])
    result.ref_lower = np.array([])
    result.ref_upper = np.array([])
    out = tmp_path / "empty.csv"
    emit_csv(result, out)
    assert out.read_text().strip() == cli.CSV_HEADER


def test_emit_csv_single_checkpoint_row(tmp_path):
    result = _result_for()
    result.checkpoint_ts = np.array([10], dtype=np.int64)
    result.mean_avg_regret = np.array([0.1])
    result.ref_lower = np.array([0.1])  # t^{-1} at t=10
    ref_upper = (10.0 / math.log(10.0) ** 2) ** -1.0
    result.ref_upper = np.array([ref_upper])
    out = tmp_path / "one.csv"
    emit_csv(result, out)
    lines = out.read_text().splitlines()
    assert lines[0] == cli.CSV_HEADER
    cells = lines[1].split(",")
    assert cells[0] == "10"
    assert cells[1] == "0.1"
    assert cells[2] == "0.1"
    assert float(cells[3]) == pytest.approx(ref_upper, rel=1e-11)
    assert cells[4] == "1"
    assert cells[5] == "-1"
    assert cells[6] == "-1"
    assert float(cells[7]) == pytest.approx(math.log10(ref_upper), rel=1e-11)


def test_emit_csv_values_roundtrip_at_12_digits(tmp_path):
    result = _result_for(horizon=500)
    out = tmp_path / "r.csv"
    emit_csv(result, out)
    lines = out.read_text().splitlines()
    for line in lines[1:]:
        for cell in line.split(",")[1:]:
            value = float(cell)
            assert cli._fmt(value) == cell
    summary = (tmp_path / "r.csv.summary.csv").read_text().splitlines()
    assert summary[0] == cli.SUMMARY_HEADER
    assert len(summary) == 2


def test_csv_rows_ascend_in_t(tmp_path):
    result = _result_for(horizon=2000)
    out = tmp_path / "asc.csv"
    emit_csv(result, out)
    ts = [int(line.split(",")[0]) for line in out.read_text().splitlines()[1:]]
    assert ts == sorted(ts)
    assert ts[-1] == 2000


def test_main_writes_deterministic_outputs(tmp_path):
    args = [
        "--preset",
        "appendix-e-beta2",
        "--horizon",
        "2000",
        "--seeds",
        "2",
        "--no-figure",
    ]
    outs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        assert main(args + ["--out", str(out)]) == 0
        outs.append(out.read_bytes())
        assert (tmp_path / f"{name}.summary.csv").exists()
    assert outs[0] == outs[1]


def test_main_renders_figure(tmp_path):
    out = tmp_path / "fig.csv"
    code = main(
        [
            "--preset",
            "quadratic-k4",
            "--algorithm",
            "tree",
            "--horizon",
            "1000",
            "--noise",
            "zero",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    assert out.exists()
    assert (tmp_path / "fig.png").exists()


def test_main_all_runs_allocator_and_baseline(tmp_path):
    out = tmp_path / "all.csv"
    code = main(
        [
            "--preset",
            "appendix-e-beta2",
            "--algorithm",
            "all",
            "--horizon",
            "500",
            "--no-figure",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    assert (tmp_path / "all__k2.csv").exists()
    assert (tmp_path / "all__sgd.csv").exists()


def test_exit_code_zero_iff_all_seeds_complete():
    assert main(["--preset", "linear-gap", "--horizon", "200", "--seeds", "2"]) == 0
