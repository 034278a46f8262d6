"""Command-line interface tests: argument handling, file outputs,
reproducibility guarantees, config merging, seed resolution, exit codes,
and the built-in check suites.

Every invocation goes through ``exlab.cli.main(argv)`` in-process, so exit
codes and stderr text are asserted directly.  All outputs land in pytest's
``tmp_path``; an autouse fixture strips any ambient EXLAB_SEED so the seed
resolution tests see a clean environment.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from exlab.cli import main


@pytest.fixture(autouse=True)
def _no_ambient_seed(monkeypatch):
    monkeypatch.delenv("EXLAB_SEED", raising=False)


def read_csv(path, skip_header=0):
    return np.loadtxt(path, delimiter=",", skiprows=skip_header, ndmin=2)


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def trapezoid_average(rows: np.ndarray) -> np.ndarray:
    n = rows.shape[1]
    w = np.full(n, 1.0 / (n - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return rows @ w


# ---------------------------------------------------------------------------
# parser-level behaviour
# ---------------------------------------------------------------------------


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "COMMAND" in capsys.readouterr().out


def test_version_exits_zero(capsys):
    assert main(["--version"]) == 0


def test_unknown_command_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_unknown_flag_is_usage_error():
    assert main(["sample", "meander", "--bogus", "1"]) == 2


def test_unknown_sample_process_is_usage_error():
    assert main(["sample", "walk"]) == 2


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def test_sample_meander_writes_csv_and_sidecar(tmp_path):
    out = tmp_path / "m"
    code = main(["sample", "meander", "--n", "3", "--seed", "7",
                 "--out", str(out)])
    assert code == 0
    rows = read_csv(out.with_suffix(".csv"))
    assert rows.shape == (3, 1025)
    meta = read_json(out.with_suffix(".json"))
    assert meta["command"] == "sample"
    assert meta["process"] == "meander"
    assert meta["n"] == 3
    assert meta["seed"] == 7
    assert meta["grid"]["n_points"] == 1025
    assert meta["params"] == {}
    assert "version" in meta


def test_sample_rerun_is_bitwise_identical(tmp_path):
    argv = ["sample", "meander", "--n", "3", "--seed", "7"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(argv + ["--out", str(out_a)]) == 0
    assert main(argv + ["--out", str(out_b)]) == 0
    for ext in (".csv", ".json"):
        assert (out_a.with_suffix(ext).read_bytes()
                == out_b.with_suffix(ext).read_bytes())


def test_sample_seed_changes_output(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    main(["sample", "bm", "--n", "2", "--grid-points", "65",
          "--seed", "1", "--out", str(out_a)])
    main(["sample", "bm", "--n", "2", "--grid-points", "65",
          "--seed", "2", "--out", str(out_b)])
    assert (out_a.with_suffix(".csv").read_bytes()
            != out_b.with_suffix(".csv").read_bytes())


def test_sample_excursion_rows_are_nonnegative(tmp_path):
    out = tmp_path / "e"
    assert main(["sample", "excursion", "--n", "50", "--grid-points", "257",
                 "--seed", "9", "--out", str(out)]) == 0
    rows = read_csv(out.with_suffix(".csv"))
    assert rows.shape == (50, 257)
    assert rows.min() >= 0.0


def test_sample_weighted_excursion_rows_average_to_target(tmp_path):
    out = tmp_path / "v"
    assert main(["sample", "Vc", "--c", "0.6", "--n", "40", "--seed", "11",
                 "--out", str(out)]) == 0
    rows = read_csv(out.with_suffix(".csv"))
    assert rows.shape == (40, 1537)  # default grid for the glued construction
    assert np.abs(trapezoid_average(rows) - 0.6).max() <= 1e-4
    meta = read_json(out.with_suffix(".json"))
    assert meta["params"] == {"c": 0.6}
    assert meta["grid"]["n_points"] == 1537


def test_sample_weighted_meander_rows_average_to_target(tmp_path):
    out = tmp_path / "u"
    assert main(["sample", "Uc", "--c", "0.8", "--n", "20", "--seed", "12",
                 "--out", str(out)]) == 0
    rows = read_csv(out.with_suffix(".csv"))
    assert rows.shape == (20, 1025)
    assert np.abs(trapezoid_average(rows) - 0.8).max() <= 1e-4


def test_sample_pinned_average_measure_rows(tmp_path):
    out = tmp_path / "p"
    assert main(["sample", "mu_c", "--c", "0.6", "--n", "8",
                 "--grid-points", "129", "--seed", "13",
                 "--out", str(out)]) == 0
    rows = read_csv(out.with_suffix(".csv"))
    assert rows.shape == (8, 129)
    assert np.abs(rows[:, 0]).max() <= 1e-12
    assert np.abs(rows[:, -1]).max() <= 1e-12
    assert np.abs(trapezoid_average(rows) - 0.6).max() <= 1e-8


def test_sample_bridge_endpoint_flags(tmp_path):
    out = tmp_path / "br"
    assert main(["sample", "bridge", "--a", "1.0", "--b", "-0.5", "--n", "4",
                 "--grid-points", "129", "--seed", "3", "--out", str(out)]) == 0
    rows = read_csv(out.with_suffix(".csv"))
    assert np.all(rows[:, 0] == 1.0)
    assert np.all(rows[:, -1] == -0.5)
    meta = read_json(out.with_suffix(".json"))
    assert meta["params"] == {"a": 1.0, "b": -0.5}


def test_sample_flag_misuse_is_usage_error(tmp_path, capsys):
    assert main(["sample", "meander", "--c", "0.5"]) == 2
    assert "does not apply" in capsys.readouterr().err
    assert main(["sample", "Vc"]) == 2
    assert "requires --c" in capsys.readouterr().err
    assert main(["sample", "bm", "--a", "0.3"]) == 2
    assert "bridge" in capsys.readouterr().err
    assert main(["sample", "bm", "--n", "0"]) == 2


def test_sample_plot_writes_standalone_svg(tmp_path):
    out = tmp_path / "s"
    assert main(["sample", "meander", "--n", "2", "--grid-points", "129",
                 "--seed", "4", "--plot", "--out", str(out)]) == 0
    svg = out.with_suffix(".svg").read_text(encoding="utf-8")
    assert svg.startswith("<svg")
    root = ET.fromstring(svg)  # well-formed XML
    assert root.tag.endswith("svg")
    assert "polyline" in svg
    assert "<!-- data" in svg  # plotted numbers embedded as a comment


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def test_density_meander_curve_and_sidecar(tmp_path):
    out = tmp_path / "d"
    code = main(["density", "meander", "--c-min", "0.0", "--c-max", "1.0",
                 "--c-step", "0.5", "--n", "400", "--grid-points", "257",
                 "--seed", "5", "--out", str(out)])
    assert code == 0
    header = out.with_suffix(".csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "c,density,std_error"
    table = read_csv(out.with_suffix(".csv"), skip_header=1)
    assert table.shape == (3, 3)
    np.testing.assert_array_equal(table[:, 0], [0.0, 0.5, 1.0])
    assert table[0, 1] == 0.0  # the average of a nonnegative path cannot be 0
    assert np.all(table[1:, 2] > 0.0)
    meta = read_json(out.with_suffix(".json"))
    assert meta["target"] == "meander"
    assert meta["n"] == 400
    assert meta["threads"] == 1
    assert meta["seed"] == 5


def test_density_thread_count_does_not_change_estimates(tmp_path):
    base = ["density", "meander", "--c-min", "0.5", "--c-max", "0.5",
            "--c-step", "0.5", "--n", "600", "--grid-points", "257",
            "--seed", "6"]
    out_a, out_b = tmp_path / "t1", tmp_path / "t2"
    assert main(base + ["--threads", "1", "--out", str(out_a)]) == 0
    assert main(base + ["--threads", "3", "--out", str(out_b)]) == 0
    assert (out_a.with_suffix(".csv").read_bytes()
            == out_b.with_suffix(".csv").read_bytes())


def test_density_csv_uses_17_significant_digits_and_lf_endings(tmp_path):
    out = tmp_path / "fmt"
    assert main(["density", "meander", "--c-min", "0.1", "--c-max", "0.1",
                 "--c-step", "0.05", "--n", "50", "--grid-points", "257",
                 "--seed", "8", "--out", str(out)]) == 0
    raw = out.with_suffix(".csv").read_bytes()
    assert b"\r" not in raw
    first_row = raw.decode().splitlines()[1]
    assert first_row.startswith("0.10000000000000001,")  # repr-exact 0.1


def test_density_validation_errors(tmp_path):
    assert main(["density", "meander", "--c-min", "-0.1"]) == 2
    assert main(["density", "meander", "--c-step", "0"]) == 2
    assert main(["density", "meander", "--c-min", "2.0", "--c-max", "1.0"]) == 2
    assert main(["density", "meander", "--n", "1"]) == 2
    assert main(["density", "meander", "--threads", "0"]) == 2


# ---------------------------------------------------------------------------
# spde
# ---------------------------------------------------------------------------


def test_spde_linear_snapshots_and_stats(tmp_path):
    out = tmp_path / "lin"
    argv = ["spde", "--dt", "1e-3", "--t-end", "0.5", "--snapshots", "5",
            "--grid-points", "129", "--seed", "3", "--out", str(out)]
    assert main(argv) == 0
    rows = read_csv(out.with_suffix(".csv"))
    assert rows.shape == (5, 130)  # time column + field at 129 nodes
    np.testing.assert_allclose(rows[:, 0], np.linspace(0.0, 0.5, 5),
                               rtol=0, atol=1e-12)
    stats = read_json(out.with_suffix(".json"))
    assert stats["mode"] == "linear"
    assert stats["eps"] is None
    assert stats["n_steps"] == 500
    assert stats["penalty_stable"] is True
    assert stats["avg_drift_max"] < 1e-8
    assert len(stats["snapshot_times"]) == 5
    # byte-identical rerun
    out_b = tmp_path / "lin2"
    assert main(argv[:-1] + [str(out_b)]) == 0
    assert (out.with_suffix(".csv").read_bytes()
            == out_b.with_suffix(".csv").read_bytes())
    assert (out.with_suffix(".json").read_bytes()
            == out_b.with_suffix(".json").read_bytes())


def test_spde_penalized_stable_run_conserves(tmp_path):
    out = tmp_path / "pen"
    assert main(["spde", "--mode", "penalized", "--eps", "0.1",
                 "--dt", "1e-4", "--t-end", "0.02", "--snapshots", "3",
                 "--grid-points", "129", "--seed", "4",
                 "--out", str(out)]) == 0
    stats = read_json(out.with_suffix(".json"))
    assert stats["mode"] == "penalized"
    assert stats["eps"] == 0.1
    assert stats["avg_drift_max"] < 1e-8


def test_spde_unstable_penalty_is_numerical_failure(tmp_path, capsys):
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["spde", "--mode", "penalized", "--eps", "1e-3",
                     "--c", "0.0", "--dt", "1e-4", "--t-end", "0.25",
                     "--grid-points", "129", "--seed", "916",
                     "--out", str(tmp_path / "boom")])
    err = capsys.readouterr().err
    assert code == 3
    assert "stability" in err  # warned up front about dt > 8*eps^2
    assert "numerical failure" in err


def test_spde_mode_validation(tmp_path):
    assert main(["spde", "--mode", "weird"]) == 2
    assert main(["spde", "--mode", "penalized"]) == 2  # missing --eps
    assert main(["spde", "--eps", "0.1"]) == 2  # eps in linear mode
    assert main(["spde", "--snapshots", "1"]) == 2


# ---------------------------------------------------------------------------
# check suites
# ---------------------------------------------------------------------------


def test_check_abco_passes(capsys):
    assert main(["check", "abco"]) == 0
    assert "check abco: PASS" in capsys.readouterr().out


def test_check_operators_passes(capsys):
    assert main(["check", "operators"]) == 0
    assert "check operators: PASS" in capsys.readouterr().out


def test_check_invariance_passes(capsys):
    assert main(["check", "invariance", "--seed", "1", "--n", "24"]) == 0
    assert "check invariance: PASS" in capsys.readouterr().out


def test_check_invariance_needs_enough_trajectories():
    assert main(["check", "invariance", "--n", "5"]) == 2


# ---------------------------------------------------------------------------
# config files and seed resolution
# ---------------------------------------------------------------------------


def test_config_file_supplies_defaults_and_flags_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# comment line\n"
        "n = 5\n"
        "seed = 9\n"
        "grid-points = 257\n",  # dashed keys are accepted
        encoding="utf-8",
    )
    out = tmp_path / "c1"
    assert main(["sample", "meander", "--config", str(cfg),
                 "--out", str(out)]) == 0
    meta = read_json(out.with_suffix(".json"))
    assert meta["n"] == 5
    assert meta["seed"] == 9
    assert meta["grid"]["n_points"] == 257

    out2 = tmp_path / "c2"
    assert main(["sample", "meander", "--config", str(cfg), "--n", "3",
                 "--out", str(out2)]) == 0
    meta2 = read_json(out2.with_suffix(".json"))
    assert meta2["n"] == 3  # explicit flag wins
    assert meta2["seed"] == 9  # untouched keys keep the file value


def test_config_unknown_key_is_rejected_with_known_list(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n", encoding="utf-8")
    assert main(["sample", "meander", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "unknown config key" in err
    assert "known:" in err


def test_config_syntax_and_value_errors(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["sample", "meander", "--config", str(missing)]) == 2

    no_eq = tmp_path / "noeq.cfg"
    no_eq.write_text("n 5\n", encoding="utf-8")
    assert main(["sample", "meander", "--config", str(no_eq)]) == 2
    assert "key = value" in capsys.readouterr().err

    bad_val = tmp_path / "badval.cfg"
    bad_val.write_text("n = many\n", encoding="utf-8")
    assert main(["sample", "meander", "--config", str(bad_val)]) == 2


def test_seed_resolution_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "seed.cfg"
    cfg.write_text("seed = 9\n", encoding="utf-8")
    base = ["sample", "meander", "--n", "1", "--grid-points", "65"]

    def seed_of(extra, tag):
        out = tmp_path / tag
        assert main(base + extra + ["--out", str(out)]) == 0
        return read_json(out.with_suffix(".json"))["seed"]

    monkeypatch.setenv("EXLAB_SEED", "11")
    assert seed_of(["--config", str(cfg), "--seed", "7"], "s1") == 7
    assert seed_of(["--config", str(cfg)], "s2") == 9
    assert seed_of([], "s3") == 11
    monkeypatch.delenv("EXLAB_SEED")
    assert seed_of([], "s4") == 0


def test_bad_environment_seed_is_usage_error(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("EXLAB_SEED", "not-a-number")
    assert main(["sample", "meander", "--n", "1", "--grid-points", "65",
                 "--out", str(tmp_path / "x")]) == 2
    assert "EXLAB_SEED" in capsys.readouterr().err
