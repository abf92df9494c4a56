"""コマンドラインのテスト"""

import json
from pathlib import Path

import pytest

import app
from config.settings import settings
from src.models.report import PipelineConfig, Report
from src.utils.exceptions import SolverError


@pytest.fixture
def report_dir(temp_data_dir, mocker):
    mocker.patch.object(settings, "REPORT_DIR", temp_data_dir)
    return Path(temp_data_dir)


def _report(status: str) -> Report:
    return Report(config=PipelineConfig(program_path="program.s"), status=status)


# ---------------------------
# 引数と終了コード
# ---------------------------
def test_version_exits_cleanly(capsys):
    assert app.run(["--version"]) == 0
    assert settings.APP_VERSION in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["analyze"],
    ["analyze", "x.s", "--solver", "cvc"],
    ["harden", "x.s", "--pass", "lfence"],
])
def test_usage_errors(argv):
    assert app.run(argv) == settings.EXIT_USAGE


def test_missing_program(temp_data_dir, capsys):
    code = app.run(["analyze", str(Path(temp_data_dir) / "missing.s")])
    assert code == settings.EXIT_USAGE
    assert "エラー" in capsys.readouterr().err


def test_bad_branch_list(write_program, kocher_source):
    assert app.run(["analyze", write_program(kocher_source), "--branches", "two"]) == settings.EXIT_USAGE


def test_syntax_error(write_program):
    assert app.run(["analyze", write_program("frobnicate r1\n")]) == settings.EXIT_USAGE


@pytest.mark.parametrize("status, expected", [
    ("no-leak", 0),
    ("leak", 10),
    ("inconclusive", 20),
    ("error", 2),
])
def test_exit_code_follows_status(write_program, kocher_source, mocker, status, expected):
    mocker.patch("app.cmd_analyze", return_value=_report(status))
    assert app.run(["analyze", write_program(kocher_source)]) == expected


def test_unanalyzable_program(corpus_dir, capsys):
    code = app.run(["analyze", str(corpus_dir / "case09.s"), "--solver", "enumerate"])
    assert code == settings.EXIT_INTERNAL
    assert "single-path" in capsys.readouterr().out


def test_toolchain_error_is_internal(write_program, kocher_source, mocker, capsys):
    mocker.patch("app.cmd_analyze", side_effect=SolverError("z3 が見つかりません", code="solver-unavailable"))
    assert app.run(["analyze", write_program(kocher_source)]) == settings.EXIT_INTERNAL
    assert "solver-unavailable" in capsys.readouterr().err


def test_config_from_arguments(write_program, kocher_source, mocker):
    analyze = mocker.patch("app.cmd_analyze", return_value=_report("no-leak"))
    path = write_program(kocher_source)
    app.run(["analyze", path, "--branches", "2", "--budget", "5", "--seed", "9", "--profile", "shortwin"])
    config = analyze.call_args.args[0]
    assert config.program_path == path
    assert config.refinement == "explicit"
    assert config.branches == [2]
    assert config.pair_budget == 5
    assert config.seed == 9
    assert config.profile == "shortwin"


def test_harden_options(write_program, kocher_source, mocker):
    harden = mocker.patch("app.cmd_harden", return_value=_report("no-leak"))
    app.run(["harden", write_program(kocher_source), "--pass", "fence", "--force", "--order-search"])
    config = harden.call_args.args[0]
    assert config.hardening == "fence"
    assert config.force
    assert config.order_search


def test_report_is_saved(write_program, kocher_source, mocker, report_dir):
    mocker.patch("app.cmd_analyze", return_value=_report("leak"))
    target = report_dir / "report.json"
    assert app.run(["analyze", write_program(kocher_source), "--report", str(target)]) == 10
    assert target.exists()


# ---------------------------
# コーパス
# ---------------------------
def test_corpus_list(capsys):
    assert app.run(["corpus", "list"]) == 0
    out = capsys.readouterr().out
    assert "case01" in out
    assert "sigalgs" in out


def test_corpus_run_all_saves_summary(mocker, report_dir):
    from src.models.report import CorpusRow
    import pandas as pd

    rows = [CorpusRow(case="case01", profile="longwin", status="leak")]
    mocker.patch("app.cmd_corpus", return_value=(pd.DataFrame({"case": ["case01"]}), rows))
    assert app.run(["corpus", "run-all", "--save"]) == 0
    saved = json.loads((report_dir / "corpus_summary.json").read_text(encoding="utf-8"))
    assert [row["case"] for row in saved] == ["case01"]


def test_export_name_is_passed(write_program, kocher_source, mocker):
    analyze = mocker.patch("app.cmd_analyze", return_value=_report("leak"))
    app.run(["analyze", write_program(kocher_source), "--export-tests", "kocher"])
    assert analyze.call_args.args[1] == "kocher"
