"""テスト入力生成のテスト"""

import pytest

from src.models.microarch import CacheGeometry
from src.models.program import MachineState
from src.models.symbolic import (
    FALSE, Assignment, and_, const, eq, evaluate, mem_sym, not_, prime, register_symbol, select, ult,
)
from src.services.input_generator import (
    PairGenerator, PairPool, blocking_clause, generate_pair, generate_training, leaf_of,
    satisfies, set_index_expr, spreading_constraint, worst_case_input,
)
from src.services.interpreter import low_equivalent
from src.services.relation import ObsModel, Relation, synthesize_relation
from src.services.solver import EnumerativeSolver, Model
from src.services.symbolic_executor import sym_execute
from src.utils.exceptions import RelationError, SolverError

a0 = register_symbol(0)


@pytest.fixture
def tiny_tree(tiny_program, enum_solver):
    return sym_execute(tiny_program, solver=enum_solver)


@pytest.fixture
def small_relation(tiny_tree):
    """両コピーの r0 が 2 未満に限られる基本モデルの関係(解は4組)"""
    base = synthesize_relation(tiny_tree, ObsModel.base())
    formula = and_(base.formula, ult(a0, const(2)), ult(prime(a0), const(2)))
    return Relation(formula=formula, model_id=base.model_id, program_hash=base.program_hash)


# ---------------------------
# 組の生成
# ---------------------------
def test_generate_pair_satisfies_relation(tiny_program, tiny_tree, small_relation, enum_solver):
    pair = generate_pair(small_relation, enum_solver, 7, tiny_program, tree=tiny_tree)
    assert pair is not None
    assert satisfies(small_relation, pair)
    assert pair.s1.registers[0] < 2
    assert pair.s2.registers[0] < 2
    assert pair.leaf_id == 1
    assert pair.model_ids == ("base",)
    assert pair.seed == 7


def test_public_memory_is_shared(tiny_program, small_relation, enum_solver):
    pair = generate_pair(small_relation, enum_solver, 3, tiny_program)
    assert pair.s1.memory[:16] == pair.s2.memory[:16]


def test_same_seed_gives_same_pair(tiny_program, small_relation):
    first = generate_pair(small_relation, EnumerativeSolver(symbol_bits=4), 11, tiny_program)
    second = generate_pair(small_relation, EnumerativeSolver(symbol_bits=4), 11, tiny_program)
    assert first.s1.registers == second.s1.registers
    assert first.s2.memory == second.s2.memory


def test_unsat_constraint_gives_none(tiny_program, enum_solver):
    relation = Relation(formula=FALSE, model_id="base", program_hash="h")
    assert generate_pair(relation, enum_solver, 0, tiny_program) is None


def test_solver_unknown_is_an_error(tiny_program, small_relation):
    with pytest.raises(SolverError) as exc:
        generate_pair(small_relation, EnumerativeSolver(symbol_bits=4, max_nodes=1), 0, tiny_program)
    assert exc.value.code == "solver-unknown"


def test_public_cell_read_by_one_copy_is_shared(tiny_program, enum_solver):
    relation = Relation(formula=eq(select(prime(mem_sym()), const(3)), const(9)), model_id="base",
                        program_hash="h")
    pair = generate_pair(relation, enum_solver, 5, tiny_program)
    assert pair.s2.memory[3] == 9
    assert pair.s1.memory[3] == 9
    assert low_equivalent(pair.s1, pair.s2, tiny_program)


def test_differing_public_registers_are_rejected(kocher_program, enum_solver):
    relation = Relation(formula=not_(eq(a0, prime(a0))), model_id="base", program_hash="h")
    with pytest.raises(RelationError) as exc:
        generate_pair(relation, enum_solver, 0, kocher_program)
    assert exc.value.code == "not-low-equivalent"


class TestPairGenerator:
    """ブロック節による多様化"""

    def test_pairs_are_distinct_until_exhausted(self, tiny_program, small_relation, enum_solver):
        generator = PairGenerator(small_relation, enum_solver, tiny_program)
        pairs = list(generator)
        seen = {(p.s1.registers[0], p.s2.registers[0]) for p in pairs}
        assert len(pairs) == 4
        assert seen == {(0, 0), (0, 1), (1, 0), (1, 1)}
        assert generator.exhausted
        assert generator.next_pair() is None

    def test_seeds_advance(self, tiny_program, small_relation, enum_solver):
        generator = PairGenerator(small_relation, enum_solver, tiny_program, seed=100)
        assert [generator.next_pair().seed for _ in range(2)] == [100, 101]

    def test_pool_replays_pairs(self, tiny_program, small_relation, enum_solver):
        pool = PairPool(PairGenerator(small_relation, enum_solver, tiny_program))
        first = pool.pair(0)
        assert pool.pair(0) is first
        assert pool.pair(3) is not None
        assert pool.pair(4) is None
        assert len(pool.pairs) == 4


def test_blocking_clause_excludes_model():
    model = Model(symbols={"a0": 1}, memory={"M": {2: 5}})
    clause = blocking_clause(model)
    assert not evaluate(clause, Assignment(symbols={"a0": 1}, memory={"M": {2: 5}}))
    assert evaluate(clause, Assignment(symbols={"a0": 1}, memory={"M": {2: 6}}))


# ---------------------------
# 訓練入力
# ---------------------------
def test_training_takes_other_path(tiny_tree, enum_solver):
    training = generate_training(tiny_tree, avoid_path=1, solver=enum_solver, rng_seed=0, selected=[1])
    assert training.leaf_id == 0
    assert training.state.registers[0] >= 4
    assert leaf_of(tiny_tree, training.state) == 0


def test_training_needs_another_path(enum_solver):
    from src.services.assembler import parse_program
    program = parse_program(".addrspace 64\nmov r1, 2\nhalt\n")
    tree = sym_execute(program, solver=enum_solver)
    assert generate_training(tree, avoid_path=0, solver=enum_solver, rng_seed=0) is None


def test_worst_case_input_takes_longest_path(kocher_program, z3_solver):
    tree = sym_execute(kocher_program, solver=z3_solver)
    state = worst_case_input(tree, kocher_program, z3_solver)
    assert isinstance(state, MachineState)
    assert state.registers[0] < 16


def test_leaf_of_tiny(tiny_program, tiny_tree):
    assert leaf_of(tiny_tree, MachineState.create(tiny_program, {0: 9})) == 0
    assert leaf_of(tiny_tree, MachineState.create(tiny_program, {0: 1})) == 1


# ---------------------------
# セットの分散
# ---------------------------
def test_set_index_expr(geometry):
    assert evaluate(set_index_expr(const(0x1234), geometry), Assignment()) == 3


def test_spreading_needs_shadow_loads(tiny_tree, geometry):
    assert spreading_constraint(tiny_tree, geometry) == FALSE


def test_spread_pairs_use_different_sets(kocher_program, z3_solver):
    from src.services.refinement import RefinementSpec, apply_refinement
    from src.services.relation import add_public_labels, distinguishing_constraint

    shadowed = apply_refinement(kocher_program, RefinementSpec(branches=(2,)))
    tree = sym_execute(shadowed.program, solver=z3_solver)
    relation = add_public_labels(
        distinguishing_constraint(tree, ObsModel.base(), ObsModel.top(tree)), kocher_program)
    geometry = CacheGeometry(sets=16, ways=2, line_bytes=16)
    generator = PairGenerator(relation, z3_solver, shadowed.program, tree=tree, geometry=geometry)
    pair = generator.next_pair()
    assert generator.spread is not None
    index = pair.s1.registers[0] + 16
    first, second = pair.s1.memory[index], pair.s2.memory[index]
    assert geometry.set_index(32 + (first << 4)) != geometry.set_index(32 + (second << 4))
