"""レポートモデルのテスト"""

from datetime import datetime

import pytest
from freezegun import freeze_time
from pydantic import ValidationError

from config.settings import settings
from src.models.program import MachineState
from src.models.report import (
    CorpusRow, PipelineConfig, Report, StateRecord, TestCaseRecord,
)


# ---------------------------
# パイプライン設定
# ---------------------------
def test_pipeline_config_defaults():
    config = PipelineConfig(program_path="p.s")
    assert config.profile == "longwin"
    assert config.pair_budget == 50
    assert config.cache_configs == 7
    assert config.iterations == 10
    assert config.theta_present == 0.7
    assert config.theta_agree == 0.8
    assert config.d_shadow == 32


@pytest.mark.parametrize("field, value", [
    ("program_path", " "),
    ("solver", "cvc9"),
    ("labels", {"r0": "private"}),
    ("refinement", "manual"),
    ("pair_budget", 0),
    ("theta_present", 0.0),
    ("theta_agree", 1.2),
    ("hardening", "retpoline"),
])
def test_pipeline_config_rejects(field, value):
    kwargs = {"program_path": "p.s", field: value}
    with pytest.raises(ValidationError):
        PipelineConfig(**kwargs)


# ---------------------------
# レポート
# ---------------------------
@pytest.mark.parametrize("status, code", [
    ("no-leak", settings.EXIT_NO_LEAK),
    ("leak", settings.EXIT_LEAK),
    ("inconclusive", settings.EXIT_INCONCLUSIVE),
    ("error", settings.EXIT_INTERNAL),
])
def test_report_exit_code(status, code):
    report = Report(config=PipelineConfig(program_path="p.s"), status=status)
    assert report.exit_code == code


def test_report_rejects_unknown_status():
    with pytest.raises(ValidationError):
        Report(config=PipelineConfig(program_path="p.s"), status="maybe")


@freeze_time("2025-01-01 10:00:00")
def test_report_serializes_created_at():
    report = Report(config=PipelineConfig(program_path="p.s"))
    data = report.model_dump(mode="json")
    assert data["created_at"] == "2025-01-01T10:00:00"
    assert data["schema_version"] == settings.REPORT_SCHEMA_VERSION
    assert data["config"]["program_path"] == "p.s"


def test_report_restores_from_dump():
    report = Report(config=PipelineConfig(program_path="p.s"), status="leak", notes=["x"])
    restored = Report(**report.model_dump(mode="json"))
    assert restored.status == "leak"
    assert restored.notes == ["x"]
    assert isinstance(restored.created_at, datetime)


# ---------------------------
# テストケース
# ---------------------------
def test_state_record_keeps_nonzero_registers(kocher_program):
    state = MachineState.create(kocher_program, {0: 20, 5: 0}, {16: 7})
    record = StateRecord.from_state(state, kocher_program, leaf_id=1)
    assert record.registers == {"r0": 20}
    assert record.data["A"][0] == 7
    assert record.data["A_size"] == [16]
    assert len(record.data["B"]) == 4096

    restored = record.to_state(kocher_program)
    assert restored.registers[0] == 20
    assert restored.memory[16] == 7


def test_state_record_rejects_unknown_data(kocher_program):
    record = StateRecord(data={"Z": [1]})
    with pytest.raises(ValueError):
        record.to_state(kocher_program)


def test_test_case_requires_name():
    with pytest.raises(ValidationError):
        TestCaseRecord(name="", program_hash="h", s1=StateRecord(), s2=StateRecord())


def test_corpus_row_requires_case():
    with pytest.raises(ValidationError):
        CorpusRow(case=" ", profile="longwin")
