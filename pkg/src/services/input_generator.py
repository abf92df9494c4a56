"""
テスト入力の生成
識別制約を満たす状態の組と、分岐予測器の訓練用の状態をソルバーのモデルから作る
"""

import logging
import random
from typing import Dict, List, Optional, Sequence

from config.settings import settings
from src.models.experiment import StatePair, TrainingInput
from src.models.microarch import CacheGeometry
from src.models.program import NUM_REGISTERS, MachineState, ObservationKind, Program, TAINT_REGISTER
from src.models.symbolic import (
    Assignment, MEMORY_SYMBOL, SymExpr, SymbolicTree, UnassignedSymbol, and_, band, const, conjunction,
    disjunction, eq, evaluate, not_, or_, prime, primed_name, register_symbol, select, mem_sym, shr, sym,
)
from src.services.interpreter import low_equivalent
from src.services.relation import Relation
from src.services.solver import Model, SatisfiabilityService, SolverStatus
from src.utils.exceptions import RelationError, SolverError
from src.utils.helpers import log2_exact

logger = logging.getLogger(__name__)


def state_assignment(state: MachineState, primed: bool = False) -> Assignment:
    """状態を記号への割り当てにする(primed なら2コピー目の記号名)"""
    name = (lambda n: primed_name(n)) if primed else (lambda n: n)
    symbols = {name(register_symbol(i).payload): state.registers[i] for i in range(NUM_REGISTERS)}
    return Assignment(symbols=symbols, memory={name(MEMORY_SYMBOL): bytes(state.memory)})


def pair_assignment(pair: StatePair) -> Assignment:
    first = state_assignment(pair.s1)
    second = state_assignment(pair.s2, primed=True)
    first.symbols.update(second.symbols)
    first.memory.update(second.memory)
    return first


def satisfies(relation: Relation, pair: StatePair) -> bool:
    """組を代入して関係が真になるか"""
    try:
        return bool(evaluate(relation.formula, pair_assignment(pair)))
    except UnassignedSymbol:
        return False


def leaf_of(tree: SymbolicTree, state: MachineState) -> Optional[int]:
    """状態が満たすパス条件を持つ葉"""
    env = state_assignment(state)
    for node in tree.leaves:
        try:
            if evaluate(node.path.condition, env):
                return node.leaf_id
        except UnassignedSymbol:
            continue
    return None


def _materialize(program: Program, model: Model, rng: random.Random, primed: bool,
                 partner: Optional[MachineState] = None) -> MachineState:
    """
    モデルの値で状態を作る。モデルにない値は乱数で埋める。

    公開レジスタと公開データのうちこのコピーの値がモデルにないものは、もう片方のコピーの
    モデル値、それもなければ partner の値に合わせる。
    """
    name = primed_name if primed else (lambda n: n)
    other = (lambda n: n) if primed else primed_name
    registers: Dict[int, int] = {}
    public_registers = set(program.public_registers())
    for index in range(NUM_REGISTERS):
        if index == TAINT_REGISTER:
            continue
        symbol = register_symbol(index).payload
        if name(symbol) in model.symbols:
            registers[index] = model.symbols[name(symbol)]
        elif index in public_registers and other(symbol) in model.symbols:
            registers[index] = model.symbols[other(symbol)]
        elif partner is not None and index in public_registers:
            registers[index] = partner.registers[index]
        else:
            registers[index] = rng.getrandbits(8)
    cells = model.memory.get(name(MEMORY_SYMBOL), {})
    other_cells = model.memory.get(other(MEMORY_SYMBOL), {})
    memory: Dict[int, int] = {}
    for address in range(program.addrspace):
        if address in cells:
            memory[address] = cells[address]
        elif address in other_cells and program.is_public_address(address):
            memory[address] = other_cells[address]
        elif partner is not None and program.is_public_address(address):
            memory[address] = partner.memory[address]
        else:
            memory[address] = rng.getrandbits(8)
    return MachineState.create(program, registers, memory)


def _query(solver: SatisfiabilityService, formula: SymExpr) -> Optional[Model]:
    result = solver.check(formula)
    if result.status == SolverStatus.UNKNOWN:
        raise SolverError("ソルバーが判定できませんでした(時間切れ)", code="solver-unknown")
    if result.status == SolverStatus.UNSAT:
        return None
    return result.model


def generate_pair(constraint: Relation, solver: SatisfiabilityService, rng_seed: int, program: Program,
                  tree: Optional[SymbolicTree] = None, extra: Sequence[SymExpr] = ()) -> Optional[StatePair]:
    """
    制約を満たす具体的な状態の組を作る。

    Args:
        constraint (Relation): 識別制約(公開ラベル付きでもよい)
        solver (SatisfiabilityService): ソルバー
        rng_seed (int): 未割り当ての値を埋める乱数の種
        program (Program): 状態の形を決めるプログラム
        tree (Optional[SymbolicTree]): あれば組が通る葉を記録する
        extra (Sequence[SymExpr]): 追加の制約(ブロック節など)

    Returns:
        Optional[StatePair]: 充足不能なら None

    Raises:
        SolverError: ソルバーが判定できなかった場合
        RelationError: 組が公開データで一致しない場合(not-low-equivalent)
    """
    model = _query(solver, and_(constraint.formula, *extra))
    if model is None:
        return None
    return _pair_from_model(program, model, constraint, rng_seed, tree)


def _pair_from_model(program: Program, model: Model, constraint: Relation, seed: int,
                     tree: Optional[SymbolicTree]) -> StatePair:
    rng = random.Random(seed)
    s1 = _materialize(program, model, rng, primed=False)
    s2 = _materialize(program, model, rng, primed=True, partner=s1)
    if not low_equivalent(s1, s2, program):
        raise RelationError("生成した組が公開データで一致しません(公開ラベルの制約が不足しています)",
                            code="not-low-equivalent")
    leaf = leaf_of(tree, s1) if tree is not None else None
    return StatePair(s1=s1, s2=s2, leaf_id=leaf, model_ids=(constraint.model_id,), seed=seed)


def blocking_clause(model: Model) -> SymExpr:
    """同じ組を二度と返さないための節"""
    parts = [eq(sym(n), const(v)) for n, v in sorted(model.symbols.items())]
    for memory, cells in sorted(model.memory.items()):
        for address, value in sorted(cells.items()):
            parts.append(eq(select(mem_sym(memory), const(address)), const(value)))
    return not_(conjunction(parts))


def set_index_expr(address: SymExpr, geometry: CacheGeometry) -> SymExpr:
    return band(shr(address, const(log2_exact(geometry.line_bytes))), const(geometry.sets - 1))


def spreading_constraint(tree: SymbolicTree, geometry: CacheGeometry) -> SymExpr:
    """両コピーが通る葉のどこかで、影ロードのアドレスが異なるセットに対応する"""
    options = []
    for path in tree.paths:
        loads = [o for o in path.observations if o.kind == ObservationKind.SHADOW_LOAD_ADDRESS]
        if not loads:
            continue
        differs = [not_(eq(set_index_expr(o.expr, geometry), set_index_expr(prime(o.expr), geometry)))
                   for o in loads]
        options.append(and_(path.condition, prime(path.condition), or_(*differs)))
    return disjunction(options)


class PairGenerator:
    """
    多様化された状態の組の列。

    組を返すたびにその組を除外する節を加えるので、同じ組は二度返らない。
    geometry と tree があれば、影ロードのアドレスが別セットになる組を先に探す。
    """

    def __init__(self, constraint: Relation, solver: SatisfiabilityService, program: Program,
                 seed: int = settings.DEFAULT_SEED, tree: Optional[SymbolicTree] = None,
                 geometry: Optional[CacheGeometry] = None, spread: bool = True):
        self.constraint = constraint
        self.solver = solver
        self.program = program
        self.seed = seed
        self.tree = tree
        self.blocking: List[SymExpr] = []
        self.spread = spreading_constraint(tree, geometry) if (spread and tree and geometry) else None
        self.generated = 0
        self.exhausted = False

    def next_pair(self) -> Optional[StatePair]:
        if self.exhausted:
            return None
        model = None
        if self.spread is not None:
            model = _query(self.solver, and_(self.constraint.formula, self.spread, *self.blocking))
            if model is None:
                logger.warning("別セットに分かれる組が見つからないため、通常の制約で生成します")
                self.spread = None
        if model is None:
            model = _query(self.solver, and_(self.constraint.formula, *self.blocking))
        if model is None:
            self.exhausted = True
            logger.info("これ以上の組はありません(生成済み %d)", self.generated)
            return None
        pair = _pair_from_model(self.program, model, self.constraint, self.seed + self.generated, self.tree)
        self.blocking.append(blocking_clause(model))
        self.generated += 1
        logger.info("状態の組を生成しました: %d 組目 (葉 %s)", self.generated, pair.leaf_id)
        return pair

    def __iter__(self):
        while True:
            pair = self.next_pair()
            if pair is None:
                return
            yield pair


def _training_order(tree: SymbolicTree, avoid_path: int, selected: Sequence[int]) -> List[int]:
    test = tree.leaf(avoid_path).path
    test_outcomes = dict(test.outcomes)
    pivot = next((pc for pc, _ in test.outcomes if pc in set(selected)), None)
    ranked = []
    for node in tree.leaves:
        if node.leaf_id == avoid_path or node.path.outcomes == test.outcomes:
            continue
        outcomes = dict(node.path.outcomes)
        preferred = pivot is not None and pivot in outcomes and outcomes[pivot] != test_outcomes[pivot]
        ranked.append((0 if preferred else 1, node.leaf_id))
    return [leaf_id for _, leaf_id in sorted(ranked)]


def generate_training(tree: SymbolicTree, avoid_path: int, solver: SatisfiabilityService, rng_seed: int,
                      program: Optional[Program] = None,
                      selected: Sequence[int] = ()) -> Optional[TrainingInput]:
    """
    テスト対象のパスとは別のパスを通る訓練用の状態を作る。

    誤予測させたい分岐(selected のうちテストパスで最初に現れるもの)で
    逆方向に進む葉を優先する。

    Args:
        tree (SymbolicTree): 元のプログラムの実行木
        avoid_path (int): テストの組が通る葉
        selected (Sequence[int]): 誤予測させる分岐のインデックス

    Returns:
        Optional[TrainingInput]: 別の葉がなければ None
    """
    program = program if program is not None else tree.program
    avoid = tree.leaf(avoid_path).path.condition
    for leaf_id in _training_order(tree, avoid_path, selected):
        path = tree.leaf(leaf_id).path
        model = _query(solver, and_(tree.precondition, path.condition, not_(avoid)))
        if model is None:
            continue
        state = _materialize(program, model, random.Random(rng_seed), primed=False)
        logger.info("訓練入力を生成しました: 葉 %d", leaf_id)
        return TrainingInput(state=state, leaf_id=leaf_id)
    logger.info("訓練に使える別のパスがありません")
    return None


def worst_case_input(tree: SymbolicTree, program: Program, solver: SatisfiabilityService,
                     seed: int = settings.DEFAULT_SEED) -> Optional[MachineState]:
    """命令数が最大の葉を通る状態"""
    leaves = sorted(tree.leaves, key=lambda n: (-n.path.steps, n.leaf_id))
    for node in leaves:
        model = _query(solver, and_(tree.precondition, node.path.condition))
        if model is not None:
            return _materialize(program, model, random.Random(seed), primed=False)
    return None


class PairPool:
    """
    生成した組を保持し、何度問い合わせても同じ順序で同じ組を返す。

    強化したプログラムの検査でも、元のプログラムから作った同じ組を使うためのもの。
    """

    def __init__(self, generator: PairGenerator):
        self.generator = generator
        self.pairs: List[StatePair] = []

    def pair(self, index: int) -> Optional[StatePair]:
        while len(self.pairs) <= index:
            pair = self.generator.next_pair()
            if pair is None:
                return None
            self.pairs.append(pair)
        return self.pairs[index]
