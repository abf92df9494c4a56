"""強化の最適化のテスト"""

import pytest

from src.models.experiment import Classification, StatePair
from src.models.microarch import MicroConfig, PredictorKind
from src.models.program import MachineState
from src.services.assembler import parse_program
from src.services.hardening import apply_slh
from src.services.input_generator import PairPool
from src.services.leak_tester import LeakContext
from src.services.optimizer import (
    LeakOracle, harden_with_escalation, measure_cycles, search_removal_orders, selective_slh,
    validate_counterexamples,
)
from src.utils.exceptions import EscalationExhaustedError, HardeningError, HardeningInsufficientError


@pytest.fixture
def wide() -> MicroConfig:
    """常に誤予測し、2段目のロードまでウィンドウに収まるプロファイル"""
    return MicroConfig(name="wide", window=100, predictor=PredictorKind.ALWAYS_MISPREDICT)


def _context(mocker, config, pairs):
    generator = mocker.Mock()
    generator.next_pair.side_effect = list(pairs) + [None]
    return LeakContext(config=config, pairs=PairPool(generator), cache_configs=3, iterations=2)


def _secret_value_pair(program):
    """範囲外の添字は同じで、その先の秘密の値だけが違う"""
    s1 = MachineState.create(program, {0: 100}, {116: 9})
    s2 = MachineState.create(program, {0: 100}, {116: 3})
    return StatePair(s1=s1, s2=s2)


def _committed_pair(program):
    """範囲内で読む値が違うので、どう強化してもキャッシュが異なる"""
    s1 = MachineState.create(program, {0: 1}, {17: 1})
    s2 = MachineState.create(program, {0: 1}, {17: 5})
    return StatePair(s1=s1, s2=s2)


# ---------------------------
# 選択的な強化
# ---------------------------
class TestSelectiveSlh:
    """ポイントを昇順に外す"""

    def test_keeps_only_needed_mask(self, kocher_program, wide, mocker):
        ctx = _context(mocker, wide, [_secret_value_pair(kocher_program)])
        result = selective_slh(apply_slh(kocher_program, "value-slh"), ctx, budget=1)
        assert result.retained == [1]
        assert result.removed == [0, 2]
        assert [(s.point_id, s.retained) for s in result.steps] == [(0, False), (1, True), (2, False)]
        assert result.optimized.active == frozenset({1})

    def test_insufficient_hardening(self, kocher_program, wide, mocker):
        ctx = _context(mocker, wide, [_committed_pair(kocher_program)])
        with pytest.raises(HardeningInsufficientError) as exc:
            selective_slh(apply_slh(kocher_program, "value-slh"), ctx, budget=1)
        assert exc.value.code == "hardening-insufficient"

    def test_requires_points(self, wide, mocker):
        program = parse_program("mov r1, 2\nhalt\n")
        with pytest.raises(HardeningError):
            selective_slh(apply_slh(program, "value-slh"), _context(mocker, wide, []), budget=1)

    def test_validation_reruns_counterexample(self, kocher_program, wide, mocker):
        pair = _secret_value_pair(kocher_program)
        ctx = _context(mocker, wide, [pair])
        result = selective_slh(apply_slh(kocher_program, "value-slh"), ctx, budget=1)
        records = validate_counterexamples(result, ctx, [pair])
        assert [r.classification for r in records] == [Classification.NO_LEAK]
        assert result.validation == records


def test_oracle_memoizes(kocher_program, wide, mocker):
    ctx = _context(mocker, wide, [_secret_value_pair(kocher_program)])
    oracle = LeakOracle(ctx, budget=1)
    hp = apply_slh(kocher_program, "value-slh")
    first = oracle(hp)
    assert oracle(hp.with_active(hp.point_ids)) is first
    assert oracle.queries == 1


def test_search_removal_orders(kocher_program, wide, mocker):
    ctx = _context(mocker, wide, [_secret_value_pair(kocher_program)])
    hp = apply_slh(kocher_program, "value-slh")
    oracle = LeakOracle(ctx, budget=1)
    search = search_removal_orders(hp, oracle)
    assert search.ascending_retained == [1]
    assert not search.improved
    assert search_removal_orders(hp, oracle, max_points=2) is None


# ---------------------------
# 段階的な切り替え
# ---------------------------
def test_escalation_stops_at_first_sufficient_level(kocher_program, wide, mocker):
    ctx = _context(mocker, wide, [_secret_value_pair(kocher_program)])
    result = harden_with_escalation(ctx, kocher_program, budget=1)
    assert result.escalations == ["value-slh"]


def test_escalation_to_address_mask(corpus_dir, wide, mocker):
    program = parse_program((corpus_dir / "case10p.s").read_text(encoding="utf-8"))
    s1 = MachineState.create(program, {0: 100, 1: 7})
    s2 = MachineState.create(program, {0: 200, 1: 7})
    ctx = _context(mocker, wide, [StatePair(s1=s1, s2=s2)])
    result = harden_with_escalation(ctx, program, budget=1)
    assert result.escalations == ["value-slh", "addr-slh"]
    assert result.retained == [0]


def test_escalation_exhausted(kocher_program, wide, mocker):
    ctx = _context(mocker, wide, [_committed_pair(kocher_program)])
    with pytest.raises(EscalationExhaustedError) as exc:
        harden_with_escalation(ctx, kocher_program, budget=1, selected_branches=[2])
    assert exc.value.code == "escalation-exhausted"


# ---------------------------
# サイクル計測
# ---------------------------
def test_measure_cycles_warm_cache(kocher_program):
    cfg = MicroConfig(predictor=PredictorKind.ALWAYS_CORRECT)
    state = MachineState.create(kocher_program, {0: 3}, {19: 2})
    stats = measure_cycles(kocher_program, state, cfg, repetitions=5)
    assert stats.as_tuple() == (7.0, 7.0, 0.0)
    hardened = measure_cycles(apply_slh(kocher_program, "value-slh"), state, cfg, repetitions=5)
    assert hardened.max == 13.0


def test_measure_cycles_with_noise(kocher_program):
    cfg = MicroConfig(predictor=PredictorKind.ALWAYS_CORRECT, eviction_noise=1.0)
    state = MachineState.create(kocher_program, {0: 3}, {19: 2})
    stats = measure_cycles(kocher_program, state, cfg, repetitions=3)
    assert stats.mean == 7 + 3 * cfg.miss_penalty
    assert stats.stddev == 0.0


def test_measure_cycles_needs_repetitions(kocher_program):
    with pytest.raises(ValueError):
        measure_cycles(kocher_program, MachineState.create(kocher_program), MicroConfig(), repetitions=0)
