"""リーク検査のテスト"""

import pytest

from src.models.experiment import Classification, ConfigEvidence, ExperimentPlan, StatePair, dimensions
from src.models.program import MachineState
from src.services.assembler import parse_program
from src.services.input_generator import PairPool
from src.services.leak_tester import (
    NO_PAIRS_REASON, LeakContext, classify_evidence, counterexample_lines, has_side_channel_leakage,
    is_conclusive, plan_hash, presence_frame, run_experiment,
)
from src.utils.exceptions import ExperimentAbortedError

A = (1, 0)
B = (2, 0)
C = (3, 0)


def _evidence(runs1, runs2, index=0):
    return ConfigEvidence(index=index, runs1=[frozenset(r) for r in runs1], runs2=[frozenset(r) for r in runs2])


def _oob_pair(program, secret1=9, secret2=3):
    s1 = MachineState.create(program, {0: 100}, {116: secret1})
    s2 = MachineState.create(program, {0: 100}, {116: secret2})
    return StatePair(s1=s1, s2=s2, leaf_id=1)


# ---------------------------
# 判定規則
# ---------------------------
class TestClassification:
    """記録済みのプローブ結果からの判定"""

    def test_line_only_in_one_input_is_counterexample(self):
        evidence = [_evidence([{A, C}] * 10, [{A}] * 10)]
        assert classify_evidence(evidence) == (Classification.COUNTEREXAMPLE, [C])

    @pytest.mark.parametrize("present, expected", [
        (7, Classification.COUNTEREXAMPLE),
        (6, Classification.INCONCLUSIVE),
    ])
    def test_presence_threshold(self, present, expected):
        runs1 = [{A, C}] * present + [{A}] * (10 - present)
        evidence = [_evidence(runs1, [{A}] * 10)]
        classification, _ = classify_evidence(evidence, theta_present=0.7)
        assert classification == expected

    def test_line_seen_in_both_is_not_counterexample(self):
        runs2 = [{A, C}] + [{A}] * 9
        assert counterexample_lines(_evidence([{A, C}] * 10, runs2), 0.7) == []

    def test_identical_probes_are_conclusive(self):
        evidence = [_evidence([{A, B}] * 10, [{A, B}] * 10, i) for i in range(3)]
        assert classify_evidence(evidence) == (Classification.NO_LEAK, [])

    def test_empty_union_is_conclusive(self):
        assert is_conclusive(_evidence([set()] * 4, [set()] * 4), 0.8)

    def test_low_agreement_is_inconclusive(self):
        evidence = _evidence([{A}, {B}], [{B}, {A}])
        assert not is_conclusive(evidence, 0.8)
        assert classify_evidence([evidence])[0] == Classification.INCONCLUSIVE

    def test_distinguishing_lines_are_deduplicated(self):
        evidence = [_evidence([{C}] * 5, [set()] * 5, i) for i in range(2)]
        assert classify_evidence(evidence)[1] == [C]


def test_presence_frame():
    evidence = [_evidence([{A, C}] * 3, [{A}] * 3)]
    frame = presence_frame(evidence, 0)
    assert list(frame.columns) == ["line", "s1", "s2"]
    assert frame.set_index("line").loc["3:0"].tolist() == [3, 0]
    assert dimensions(evidence) == (1, 3)


# ---------------------------
# 実験
# ---------------------------
def test_experiment_finds_counterexample(kocher_program, mispredicting):
    plan = ExperimentPlan(program=kocher_program, pair=_oob_pair(kocher_program), config=mispredicting)
    verdict = run_experiment(plan)
    assert verdict.is_counterexample
    assert (11, 0) in verdict.distinguishing_lines
    assert (5, 0) in verdict.distinguishing_lines
    assert len(verdict.evidence) == plan.cache_configs
    assert not verdict.retried


def test_experiment_equal_secrets_no_leak(kocher_program, mispredicting):
    plan = ExperimentPlan(program=kocher_program, pair=_oob_pair(kocher_program, 9, 9), config=mispredicting)
    assert run_experiment(plan).classification == Classification.NO_LEAK


def test_short_window_hides_leak(kocher_program, shortwin):
    from src.models.microarch import PredictorKind
    cfg = shortwin.model_copy(update={"predictor": PredictorKind.ALWAYS_MISPREDICT})
    plan = ExperimentPlan(program=kocher_program, pair=_oob_pair(kocher_program), config=cfg)
    assert run_experiment(plan).classification == Classification.NO_LEAK


def test_experiment_retries_once_when_inconclusive(kocher_program, mispredicting, mocker):
    unclear = [_evidence([{A}, {B}], [{B}, {A}])]
    collect = mocker.patch("src.services.leak_tester._collect", return_value=unclear)
    plan = ExperimentPlan(program=kocher_program, pair=_oob_pair(kocher_program), config=mispredicting)
    verdict = run_experiment(plan)
    assert verdict.classification == Classification.INCONCLUSIVE
    assert verdict.retried
    assert collect.call_count == 2
    assert [c.args[1] for c in collect.call_args_list] == [plan.seed, plan.seed + 1]


def test_committed_fault_aborts_experiment(longwin):
    program = parse_program(".addrspace 64\n.array A 16\nload r1, [r0+A]\nhalt\n")
    state = MachineState.create(program, {0: 1000})
    plan = ExperimentPlan(program=program, pair=StatePair(s1=state, s2=state.copy()), config=longwin)
    with pytest.raises(ExperimentAbortedError) as exc:
        run_experiment(plan)
    assert exc.value.code == "simulator-fault"


def test_plan_validation(kocher_program, longwin):
    plan = ExperimentPlan(program=kocher_program, pair=_oob_pair(kocher_program), config=longwin,
                          theta_present=0.0)
    with pytest.raises(ValueError):
        run_experiment(plan)


def test_plan_hash_depends_on_seed(kocher_program, longwin):
    pair = _oob_pair(kocher_program)
    first = ExperimentPlan(program=kocher_program, pair=pair, config=longwin, seed=1)
    second = ExperimentPlan(program=kocher_program, pair=pair, config=longwin, seed=2)
    assert plan_hash(first) == plan_hash(first)
    assert plan_hash(first) != plan_hash(second)


# ---------------------------
# 組の予算
# ---------------------------
def _context(mocker, config, pairs):
    generator = mocker.Mock()
    generator.next_pair.side_effect = list(pairs) + [None]
    return LeakContext(config=config, pairs=PairPool(generator), cache_configs=2, iterations=2)


def test_stops_at_first_counterexample(kocher_program, mispredicting, mocker):
    leaky = _oob_pair(kocher_program)
    ctx = _context(mocker, mispredicting, [leaky, leaky])
    query = has_side_channel_leakage(kocher_program, 5, ctx)
    assert query.leaks
    assert query.counterexample == 0
    assert query.pairs_tested == 1
    assert query.counterexamples == 1


def test_budget_limits_pairs(kocher_program, mispredicting, mocker):
    same = _oob_pair(kocher_program, 9, 9)
    ctx = _context(mocker, mispredicting, [same] * 3)
    query = has_side_channel_leakage(kocher_program, 2, ctx)
    assert not query.leaks
    assert query.pairs_tested == 2
    assert query.reason is None


def test_no_pairs_reason(kocher_program, mispredicting, mocker):
    query = has_side_channel_leakage(kocher_program, 3, _context(mocker, mispredicting, []))
    assert not query.leaks
    assert query.pairs_tested == 0
    assert query.reason == NO_PAIRS_REASON


def test_budget_must_be_positive(kocher_program, mispredicting, mocker):
    with pytest.raises(ValueError):
        has_side_channel_leakage(kocher_program, 0, _context(mocker, mispredicting, []))
