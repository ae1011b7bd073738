from __future__ import annotations

import csv
import re
import subprocess
import sys
from pathlib import Path

import pytest

from metanas.cli import EXIT_BOUND, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_OK, build_parser, main
from metanas.engine import ARTIFACTS, normalized_hypervolume
from metanas.moea import read_front_csv

CONFIGS = Path(__file__).parent.parent / "configs"
RESTRICTED = str(CONFIGS / "restricted.ini")


def _search(out, *extra):
    return main(["search", "--config", RESTRICTED, "--out", str(out), *extra])


@pytest.mark.parametrize("command", ["pretrain", "search", "resume", "report", "enumerate"])
def test_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in {"search": ["--config", "--seed", "--out", "--workers", "--evaluator",
                            "--toggle", "--override", "--literal-eq8"],
                 "pretrain": ["--config", "--override", "--out", "--seed"]}.get(command, []):
        assert flag in text


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "metanas.cli", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "enumerate" in proc.stdout


def test_pretrain_writes_files_and_logs_steps(tmp_path, capsys):
    code = main(["pretrain", "--config", str(CONFIGS / "pretrain.ini"), "--out", str(tmp_path),
                 "--override", "es.meta_steps=1", "--override", "es.inner_steps=20"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert (tmp_path / "schedule.csv").exists() and (tmp_path / "controller.json").exists()
    assert len(re.findall(r"^meta-step ", out, re.M)) == 1
    assert "final meta-score" in out


def test_pretrain_without_task_section(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[es]\nmeta_steps=1\n")
    assert main(["pretrain", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path)]) == \
        EXIT_CONFIG
    assert "[task]" in capsys.readouterr().err


def test_search_prints_table_and_artifacts(tmp_path, capsys):
    assert _search(tmp_path) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["gen", "tau", "H_t", "best_f1", "front", "full"]
    assert [int(line.split()[0]) for line in lines[1:]] == list(range(6))
    assert all((tmp_path / name).exists() for name in ARTIFACTS)


def test_config_errors_exit_two(tmp_path):
    (tmp_path / "bad.ini").write_text("[search]\nbogus=1\n")
    assert main(["search", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) == \
        EXIT_CONFIG
    assert main(["search", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path)]) \
        == EXIT_CONFIG
    assert _search(tmp_path, "--override", "search.population_size=1") == EXIT_CONFIG


def test_no_surrogate_toggle(tmp_path):
    assert _search(tmp_path, "--toggle", "no-surrogate") == EXIT_OK
    with open(tmp_path / "diagnostics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["n_surrogate_only"] == "0" for r in rows)


def test_flags_change_the_run(tmp_path):
    _search(tmp_path / "a")
    _search(tmp_path / "b", "--literal-eq8")
    _search(tmp_path / "c", "--seed", "5")
    arch = {k: (tmp_path / k / "archive.jsonl").read_bytes() for k in "abc"}
    assert arch["a"] != arch["b"] and arch["a"] != arch["c"]


def test_resume_after_interrupt(tmp_path):
    _search(tmp_path / "full")
    _search(tmp_path / "part", "--stop-after", "2")
    assert main(["resume", "--out", str(tmp_path / "part")]) == EXIT_OK
    for name in ARTIFACTS:
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_resume_checkpoint_failures(tmp_path):
    assert main(["resume", "--out", str(tmp_path)]) == EXIT_CHECKPOINT
    _search(tmp_path, "--stop-after", "1")
    assert main(["resume", "--config", RESTRICTED, "--seed", "9", "--out", str(tmp_path)]) == \
        EXIT_CHECKPOINT
    (tmp_path / "checkpoint.json").write_text("{ truncated")
    assert main(["resume", "--out", str(tmp_path)]) == EXIT_CHECKPOINT


def test_report_table_and_hypervolume(tmp_path, capsys):
    _search(tmp_path)
    capsys.readouterr()
    plot = tmp_path / "front.dat"
    assert main(["report", str(tmp_path), "--plot-data", str(plot)]) == EXIT_OK
    out = capsys.readouterr().out
    front = [r for r in read_front_csv(tmp_path / "front.csv") if r.front == 0]
    header = re.search(r"Pareto front \((\d+) points", out)
    assert int(header.group(1)) == len(front)
    ref = float(re.search(r"reference f1=1, f2=([0-9.e+]+)", out).group(1))
    reported = float(re.search(r"front.csv hypervolume: ([0-9.]+)", out).group(1))
    recomputed = normalized_hypervolume([(r.objectives.f1, r.objectives.f2) for r in front], ref)
    assert reported == pytest.approx(recomputed, abs=1e-6)
    # the last trajectory entry describes the same front
    last = out.split("front.csv hypervolume")[0].strip().splitlines()[-1].split()
    assert float(last[1]) == pytest.approx(reported, abs=1e-6)
    data = plot.read_text().splitlines()
    assert data[0].startswith("#") and len(data) == 1 + len(front)
    f1s = [float(line.split()[0]) for line in data[1:]]
    assert f1s == sorted(f1s)


def test_report_on_empty_dir(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_CONFIG


def test_enumerate_fixture_and_bound(tmp_path, capsys):
    out = tmp_path / "front.json"
    assert main(["enumerate", "--config", RESTRICTED, "--out", str(out)]) == EXIT_OK
    assert "space size: 78327" in capsys.readouterr().out
    frozen = Path(__file__).parent / "fixtures" / "restricted_front.json"
    assert out.read_bytes() == frozen.read_bytes()
    assert main(["enumerate", "--config", str(CONFIGS / "oracle.ini"), "--out",
                 str(tmp_path / "x.json")]) == EXIT_BOUND
    assert not (tmp_path / "x.json").exists()
