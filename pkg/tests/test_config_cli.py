import argparse
import filecmp
import json

import pytest

from dlcpsim.cli import main, parse_seeds
from dlcpsim.config import ConfigError, RunConfig, from_dict, load_config, parse_config
from dlcpsim.metrics import read_csv

SMALL = """
[run]
name = "tiny"
seeds = [1]

[topology]
n_core = 1
hosts_per_tor = 5

[workload]
n_workers = 4
iterations = 1
"""


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError, match=r"switch\.bufer_bytes"):
        from_dict({"switch": {"bufer_bytes": 10}})


def test_bad_value_rejected_with_path():
    with pytest.raises(ConfigError, match=r"transport\.loss_bound"):
        parse_config("[transport]\nloss_bound = 1.5\n")


def test_toml_syntax_error():
    with pytest.raises(ConfigError, match="TOML"):
        parse_config("[run\n")


def test_too_many_hosts_rejected():
    with pytest.raises(ConfigError):
        from_dict({"topology": {"hosts_per_tor": 4}, "workload": {"n_workers": 4}})


def test_defaults_materialized_round_trip():
    cfg = parse_config(SMALL)
    text = cfg.to_toml()
    assert "buffer_bytes" in text and "rto_min_ms" in text and "loss_bound" in text
    assert parse_config(text) == cfg


def test_bundled_example_configs_load(repo_root):
    assert load_config(repo_root / "configs" / "incast.toml").workload.n_workers == 16


def test_parse_seeds():
    assert parse_seeds("1,2,5") == [1, 2, 5]
    assert parse_seeds("1-3") == [1, 2, 3]
    assert parse_seeds("0..2,7") == [0, 1, 2, 7]
    with pytest.raises(argparse.ArgumentTypeError):
        parse_seeds("5-1")


def _cfg(tmp_path, text=SMALL):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "-c", str(_cfg(tmp_path)), "-o", str(out), "--seeds", "1,2"]) == 0
    for seed in (1, 2):
        d = out / f"seed-{seed}"
        for name in ("config.toml", "flows.csv", "iterations.csv", "counters.csv", "summary.csv"):
            assert (d / name).exists()
        assert load_config(d / "config.toml").run.seeds == [seed]
    assert len(read_csv(out / "summary.csv")) == 2
    assert (out / "report.csv").exists() and (out / "curves" / "bars.csv").exists()
    assert "p99 ms" in capsys.readouterr().out


def test_run_is_byte_identical(tmp_path):
    cfg = _cfg(tmp_path)
    for name in ("a", "b"):
        assert main(["run", "-c", str(cfg), "-o", str(tmp_path / name)]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files


def test_report_with_plots(tmp_path):
    out = tmp_path / "out"
    main(["run", "-c", str(_cfg(tmp_path)), "-o", str(out)])
    assert main(["report", str(out)]) == 0
    assert (out / "fct_cdf.png").stat().st_size > 0 and (out / "fct_bars.png").exists()


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = _cfg(tmp_path, "[switch]\nnonsense = 1\n")
    assert main(["run", "-c", str(bad)]) == 2
    assert "switch.nonsense" in capsys.readouterr().err


def test_show_config_defaults(capsys):
    assert main(["show-config"]) == 0
    assert parse_config(capsys.readouterr().out) == RunConfig()


def test_preset_list(capsys):
    assert main(["preset", "--list"]) == 0
    names = [l.split()[0] for l in capsys.readouterr().out.splitlines()]
    assert {"motivation-tail", "ps-incast", "ring", "rtomin-sweep", "loss-bound-sweep",
            "spray-vs-ecmp"} <= set(names)


def test_optimize_thresholds_feeds_the_switch(tmp_path, repo_root, capsys):
    th = tmp_path / "th.csv"
    assert main(["optimize-thresholds", "-c", str(repo_root / "configs" / "thresholds.toml"),
                 "-o", str(th)]) == 0
    rows = read_csv(th)
    assert len(rows) == 7 and sum(int(r["L"]) for r in rows) <= 40
    text = SMALL + f'\n[switch]\nthresholds = "file"\nthresholds_file = "{th}"\n'
    assert main(["run", "-c", str(_cfg(tmp_path, text)), "-o", str(tmp_path / "o")]) == 0


def test_optimize_infeasible_exit_code(tmp_path, capsys):
    cfg = _cfg(tmp_path, "[model]\nn_queues = 2\nbuffer_packets = 10\narrival_rate = 1.5\n"
                         "layer_sizes = [1, 1]\n")
    assert main(["optimize-thresholds", "-c", str(cfg), "-o", str(tmp_path / "t.csv")]) == 2
    err = capsys.readouterr().err
    assert "infeasible" in err and "rho=" in err
    assert not (tmp_path / "t.csv").exists()


def test_drop_lab_cli(tmp_path):
    out = tmp_path / "lab"
    assert main(["drop-lab", "--task", "linear-regression", "--seeds", "0-2", "--p-grid", "0.05,0.2",
                 "-o", str(out)]) == 0
    rows = read_csv(out / "outcomes.csv")
    assert len(rows) == 3 * (1 + 2 * (1 + 3))
    info = json.loads((out / "droplab.json").read_text())
    assert info["granularity"] == "element"
    assert read_csv(out / "cost_curves.csv")[0]["queue"] == "1"
