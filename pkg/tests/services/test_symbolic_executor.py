"""記号実行のテスト"""

import pytest

from src.models.program import ObservationKind, find_back_edge
from src.models.symbolic import (
    Assignment, FALSE, SymPath, TRUE, add, and_, const, dump_tree, eq, evaluate, register_symbol, ult,
)
from src.services.assembler import parse_program
from src.services.solver import Model
from src.services.symbolic_executor import (
    concretize_address, program_precondition, restart_concretization, shadow_observation_ids,
    sym_execute, value_under,
)
from src.utils.exceptions import SymbolicExecutionError

SHADOW_SOURCE = """\
.addrspace 64
.array A 16
sbegin
s.load r2, [r0+A]
send
halt
"""


def _kinds(path):
    return [o.kind for o in path.observations]


# ---------------------------
# 実行木の形
# ---------------------------
def test_tiny_program_splits_at_branch(tiny_program, enum_solver):
    tree = sym_execute(tiny_program, solver=enum_solver)
    assert len(tree.leaves) == 2
    assert tree.root.pc == 1
    assert tree.root.observed
    assert tree.is_fully_observed()
    assert [leaf.leaf_id for leaf in tree.leaves] == [0, 1]

    fall, taken = tree.paths
    assert fall.outcomes == [(1, False)]
    assert taken.outcomes == [(1, True)]
    assert _kinds(fall) == [ObservationKind.BRANCH_OUTCOME, ObservationKind.LOAD_ADDRESS]
    assert fall.observations[1].expr == const(1)
    assert taken.observations[1].expr == const(0)


def test_leaf_conditions_partition_inputs(tiny_program, enum_solver):
    fall, taken = sym_execute(tiny_program, solver=enum_solver).paths
    for value in range(8):
        env = Assignment(symbols={"a0": value})
        assert evaluate(fall.condition, env) == (value >= 4)
        assert evaluate(taken.condition, env) == (value < 4)


def test_segments_hold_observations_after_split(tiny_program, enum_solver):
    tree = sym_execute(tiny_program, solver=enum_solver)
    assert tree.root.segment == []
    assert [o.kind for o in tree.root.taken.segment] == [ObservationKind.LOAD_ADDRESS]


def test_kocher_tree_with_z3(kocher_program, z3_solver):
    tree = sym_execute(kocher_program, solver=z3_solver)
    assert tree.precondition != TRUE
    assert len(tree.leaves) == 2
    in_bounds = tree.paths[0]
    assert _kinds(in_bounds) == [
        ObservationKind.LOAD_ADDRESS,
        ObservationKind.BRANCH_OUTCOME,
        ObservationKind.LOAD_ADDRESS,
        ObservationKind.LOAD_ADDRESS,
    ]
    values = [entry.value for entry in in_bounds.log]
    assert len(values) == len(set(values)) == 3
    assert values[0] == 0


def test_fixed_cells_become_precondition(kocher_program):
    precondition = program_precondition(kocher_program)
    assert evaluate(precondition, Assignment(memory={"M": {0: 16}}))
    assert not evaluate(precondition, Assignment(memory={"M": {0: 3}}))


def test_out_of_range_accesses_are_constrained(enum_solver):
    program = parse_program(".addrspace 64\n.array A 16\nload r1, [r0+A]\nhalt\n")
    (path,) = sym_execute(program, solver=enum_solver).paths
    assert not evaluate(path.condition, Assignment(symbols={"a0": 100}))
    assert evaluate(path.condition, Assignment(symbols={"a0": 10}))


def test_unsat_precondition_gives_empty_tree(tiny_program, enum_solver):
    tree = sym_execute(tiny_program, precondition=FALSE, solver=enum_solver)
    assert tree.unsat_precondition
    assert tree.leaves == []
    assert "precondition unsatisfiable" in dump_tree(tree)


# ---------------------------
# 影命令
# ---------------------------
def test_shadow_ids_are_instruction_indices():
    program = parse_program(SHADOW_SOURCE)
    assert shadow_observation_ids(program) == (1,)


def test_shadow_access_splits_on_range(z3_solver):
    tree = sym_execute(parse_program(SHADOW_SOURCE), solver=z3_solver)
    assert len(tree.leaves) == 2
    assert not tree.root.observed
    assert not tree.is_fully_observed()
    escaped, inside = tree.paths
    assert escaped.observations == []
    assert _kinds(inside) == [ObservationKind.SHADOW_LOAD_ADDRESS]
    assert inside.observations[0].shadow_id == 1


# ---------------------------
# 上限とエラー
# ---------------------------
def test_loop_is_rejected(enum_solver):
    program = parse_program("L: jmp L\n")
    assert find_back_edge(program) == 0
    with pytest.raises(SymbolicExecutionError) as exc:
        sym_execute(program, solver=enum_solver)
    assert exc.value.code == "back-edge"


def test_depth_limit(enum_solver):
    program = parse_program("mov r1, 1\nmov r2, 2\nmov r3, 3\nhalt\n")
    with pytest.raises(SymbolicExecutionError) as exc:
        sym_execute(program, depth_limit=2, solver=enum_solver)
    assert exc.value.code == "depth-limit"


def test_path_budget(tiny_program, enum_solver):
    with pytest.raises(SymbolicExecutionError) as exc:
        sym_execute(tiny_program, solver=enum_solver, path_budget=1)
    assert exc.value.code == "path-budget"


# ---------------------------
# アドレスの具体化
# ---------------------------
def test_concretization_is_memoized(tiny_program, enum_solver):
    path = SymPath.initial(tiny_program)
    address = register_symbol(0)
    first = concretize_address(path, address, enum_solver)
    queries = enum_solver.queries
    assert concretize_address(path, address, enum_solver) == first
    assert enum_solver.queries == queries
    other = concretize_address(path, add(address, const(1)), enum_solver)
    assert other != first
    assert len(path.pins) == 2


def test_restart_concretizes_all_accesses_jointly(tiny_program, enum_solver):
    path = SymPath.initial(tiny_program)
    path.condition = ult(register_symbol(0), const(2))
    concretize_address(path, register_symbol(0), enum_solver)
    value = restart_concretization(path, register_symbol(1), enum_solver, pc=3)
    assert value is not None
    assert [e.pc for e in path.log][-1] == 3
    assert path.log[0].value < 2
    assert path.log[-1].value == value != path.log[0].value
    assert len(path.pins) == 2


def test_restart_without_distinct_solution(tiny_program, enum_solver):
    path = SymPath.initial(tiny_program)
    path.condition = and_(eq(register_symbol(0), const(0)), eq(register_symbol(1), const(0)))
    concretize_address(path, register_symbol(0), enum_solver)
    assert restart_concretization(path, register_symbol(1), enum_solver) is None


def test_value_under_defaults_missing_symbols():
    assert value_under(Model(symbols={"x": 2}), add(register_symbol(0), const(3))) == 3
