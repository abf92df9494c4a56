"""強化パスのテスト"""

import pytest

from src.models.experiment import Classification, ExperimentPlan, StatePair
from src.models.program import MachineState, Opcode, TAINT_REGISTER
from src.services.assembler import parse_program, print_program
from src.services.hardening import (
    HardeningKind, apply_slh, insert_fences, insert_hardening, materialize, remove_hardening,
)
from src.services.interpreter import run_program
from src.services.leak_tester import run_experiment
from src.services.refinement import RefinementSpec, apply_refinement
from src.utils.exceptions import HardeningError

INPUTS = [({0: 3}, {19: 2}), ({0: 15}, {31: 200}), ({0: 100}, {116: 9}), ({0: 16}, {})]


def _same_behaviour(original, hardened):
    for registers, memory in INPUTS:
        expected, _ = run_program(original, MachineState.create(original, registers, memory))
        actual, _ = run_program(hardened.program, MachineState.create(hardened.program, registers, memory))
        ignore = hardened.ignored_registers()
        assert actual.architectural_view(ignore) == expected.architectural_view(ignore)


def _oob_pair(program):
    s1 = MachineState.create(program, {0: 100}, {116: 9})
    s2 = MachineState.create(program, {0: 100}, {116: 3})
    return StatePair(s1=s1, s2=s2)


# ---------------------------
# value-slh
# ---------------------------
class TestValueMask:
    """ロード値のマスク"""

    def test_points_per_load(self, kocher_program):
        hp = apply_slh(kocher_program, "value-slh")
        assert hp.kind == HardeningKind.VALUE_MASK
        assert [p.site for p in hp.points] == [0, 3, 5]
        assert [p.inserted for p in hp.points] == [(2,), (8,), (11,)]
        assert hp.scratch_register is None

    def test_layout(self, kocher_program):
        program = apply_slh(kocher_program, HardeningKind.VALUE_MASK).program
        assert len(program) == 16
        assert program[0].opcode == Opcode.MOV
        assert program[0].dest.index == TAINT_REGISTER
        assert program[4].target == "T2"
        assert [program[i].opcode for i in (5, 6)] == [Opcode.CSEL, Opcode.CSDB]
        assert program.labels["T2"] == 13
        assert program[15].opcode == Opcode.JMP
        assert program[8].note == "HP1"

    def test_semantics_preserved(self, kocher_program):
        _same_behaviour(kocher_program, apply_slh(kocher_program, "value-slh"))

    @pytest.mark.parametrize("kind", ["value-slh", "addr-slh"])
    def test_printed_program_parses_back(self, kocher_program, kind):
        program = apply_slh(kocher_program, kind).program
        text = print_program(program)
        assert "mov taint, 0xffffffff" in text
        reparsed = parse_program(text)
        assert print_program(reparsed) == text
        assert reparsed[0].sources[0].value == 0xFFFFFFFF

    def test_blocks_transient_leak(self, kocher_program, mispredicting):
        program = apply_slh(kocher_program, "value-slh").program
        plan = ExperimentPlan(program=program, pair=_oob_pair(program), config=mispredicting)
        assert run_experiment(plan).classification == Classification.NO_LEAK

    def test_original_leaks(self, kocher_program, mispredicting):
        plan = ExperimentPlan(program=kocher_program, pair=_oob_pair(kocher_program), config=mispredicting)
        assert run_experiment(plan).is_counterexample


# ---------------------------
# addr-slh
# ---------------------------
class TestAddressMask:
    """アドレスレジスタのマスク"""

    def test_points_for_based_loads_only(self, kocher_program):
        hp = apply_slh(kocher_program, "addr-slh")
        assert [p.site for p in hp.points] == [3, 5]
        assert hp.scratch_register == 31
        assert hp.ignored_registers() == (TAINT_REGISTER, 31)

    def test_masked_load_uses_scratch(self, kocher_program):
        program = apply_slh(kocher_program, "addr-slh").program
        assert len(program) == 15
        assert program[6].opcode == Opcode.AND
        assert program[7].address.base.index == 31

    def test_removing_point_restores_original_load(self, kocher_program):
        hp = remove_hardening(apply_slh(kocher_program, "addr-slh"), 0)
        program = hp.program
        assert len(program) == 14
        assert program[6].opcode == Opcode.LOAD
        assert program[6].address.base.index == 0
        assert program[6].note is None
        assert hp.removed == [0]

    def test_semantics_preserved(self, kocher_program):
        _same_behaviour(kocher_program, apply_slh(kocher_program, "addr-slh"))


# ---------------------------
# fence
# ---------------------------
class TestFences:
    """分岐の両側への fence"""

    def test_two_points_per_branch(self, kocher_program):
        hp = insert_fences(kocher_program)
        assert [(p.id, p.site) for p in hp.points] == [(0, 2), (1, 2)]
        assert [p.inserted for p in hp.points] == [(3,), (8,)]
        assert apply_slh(kocher_program, "fence").points == hp.points

    def test_label_moves_when_fence_removed(self, kocher_program):
        program = remove_hardening(insert_fences(kocher_program), 1).program
        assert program[program.labels["T2"]].opcode == Opcode.JMP

    def test_unknown_site(self, kocher_program):
        with pytest.raises(HardeningError) as exc:
            insert_fences(kocher_program, sites=[0])
        assert exc.value.code == "unknown-point"

    def test_semantics_preserved(self, kocher_program):
        _same_behaviour(kocher_program, insert_fences(kocher_program))

    def test_fence_blocks_window(self, kocher_program, mispredicting):
        program = insert_fences(kocher_program).program
        plan = ExperimentPlan(program=program, pair=_oob_pair(program), config=mispredicting)
        assert run_experiment(plan).classification == Classification.NO_LEAK


# ---------------------------
# ポイントの操作
# ---------------------------
def test_remove_then_insert_round_trip(kocher_program):
    hp = apply_slh(kocher_program, "value-slh")
    removed = remove_hardening(hp, 1)
    assert len(removed.program) == len(hp.program) - 1
    restored = insert_hardening(removed, 1)
    assert print_program(restored.program) == print_program(hp.program)
    assert materialize(restored) == hp.program


@pytest.mark.parametrize("operation, point_id, code", [
    ("insert", 0, "point-state"),
    ("remove", 99, "unknown-point"),
    ("insert", 99, "unknown-point"),
])
def test_invalid_point_transitions(kocher_program, operation, point_id, code):
    hp = apply_slh(kocher_program, "value-slh")
    action = insert_hardening if operation == "insert" else remove_hardening
    with pytest.raises(HardeningError) as exc:
        action(hp, point_id)
    assert exc.value.code == code


def test_remove_twice(kocher_program):
    hp = remove_hardening(apply_slh(kocher_program, "value-slh"), 0)
    with pytest.raises(HardeningError) as exc:
        remove_hardening(hp, 0)
    assert exc.value.code == "point-state"


@pytest.mark.parametrize("source, code", [
    ("mov taint, 1\nhalt\n", "taint-register-used"),
    ("L: jmp L\n", "point-state"),
])
def test_programs_that_cannot_be_hardened(source, code):
    with pytest.raises(HardeningError) as exc:
        apply_slh(parse_program(source), "value-slh")
    assert exc.value.code == code


def test_shadow_programs_cannot_be_hardened(kocher_program):
    shadowed = apply_refinement(kocher_program, RefinementSpec(branches=(2,))).program
    with pytest.raises(HardeningError):
        apply_slh(shadowed, "value-slh")
    with pytest.raises(HardeningError):
        insert_fences(shadowed)
