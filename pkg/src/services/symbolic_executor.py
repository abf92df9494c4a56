"""
記号実行
プログラムの全パスを辿り、パス条件・観測列・アドレス具体化ログを持つ実行木を作る
"""

import logging
from dataclasses import replace
from typing import Dict, List, NamedTuple, Optional

from config.settings import settings
from src.models.program import (
    Instruction, ObsTag, ObservationKind, Opcode, Program, Register, find_back_edge, register_index,
)
from src.models.symbolic import (
    Concretization, FALSE, SymExpr, SymFlags, SymObservation, SymPath, SymbolicTree, TRUE, TreeNode,
    add, and_, band, bor, bxor, const, eq, evaluate, ite, mem_sym, mul, not_, select, shl, shr,
    store, sub, ult, word_symbols,
)
from src.services.solver import Model, SatisfiabilityService, SolverStatus, make_solver
from src.utils.exceptions import SymbolicExecutionError

logger = logging.getLogger(__name__)


class ConcretizationFailed(Exception):
    """衝突のない具体値が見つからない"""


def program_precondition(program: Program, memory: SymExpr = None) -> SymExpr:
    """.word で固定された初期メモリの値"""
    memory = memory if memory is not None else mem_sym()
    return and_(*[eq(select(memory, const(address)), const(value))
                  for address, value in sorted(program.fixed_cells().items())])


def shadow_observation_ids(program: Program) -> tuple:
    """洗練された観測を出す命令のインデックス"""
    ids = []
    for index, instr in enumerate(program.instructions):
        if instr.shadow and instr.opcode in (Opcode.LOAD, Opcode.STORE, Opcode.OBS):
            ids.append(index)
        elif instr.opcode == Opcode.OBS and instr.obs_tag == ObsTag.REFINED:
            ids.append(index)
    return tuple(ids)


def value_under(model: Model, expr: SymExpr) -> int:
    """モデルで式を評価する。モデルにない記号とセルは 0 とみなす"""
    env = model.assignment(cell_default=0)
    for name in word_symbols(expr):
        env.symbols.setdefault(name, 0)
    return evaluate(expr, env)


def concretize_address(path: SymPath, address: SymExpr, solver: SatisfiabilityService,
                       pc: int = 0, shadow: bool = False) -> int:
    """
    メモリアドレスを具体値に決める。

    同じ正規形の式には同じ値を返し(ソルバー問い合わせなし)、
    別の式にはこれまでと異なる値を選ぶ。選んだ値は path.pins に記録する。

    Args:
        path (SymPath): 対象パス(ログとピンが更新される)
        address (SymExpr): ワード型のアドレス式
        solver (SatisfiabilityService): ソルバー

    Returns:
        int: 具体アドレス

    Raises:
        ConcretizationFailed: 条件を満たす衝突のない値がない場合
    """
    known = path.memo(address)
    if known is not None:
        return known
    distinct = [not_(eq(address, const(entry.value)))
                for entry in path.log if entry.address != address]
    query = and_(path.concretized_condition, *distinct)
    result = solver.check(query)
    if result.status != SolverStatus.SAT:
        raise ConcretizationFailed(str(address))
    value = value_under(result.model, address)
    path.pins.append(eq(address, const(value)))
    path.log.append(Concretization(address, value, query, pc, shadow))
    logger.debug("具体化: %s -> %#x", address, value)
    return value


def restart_concretization(path: SymPath, address: SymExpr, solver: SatisfiabilityService,
                           pc: int = 0, shadow: bool = False) -> Optional[int]:
    """
    パス上の全アクセスを1回の問い合わせでまとめて具体化し直す。

    成功すればログとピンを書き換えて新しいアドレスの値を返す。
    解がなければ None(呼び出し側でパスを捨てる)。
    """
    expressions: List[SymExpr] = []
    for entry in path.log:
        if entry.address not in expressions:
            expressions.append(entry.address)
    if address not in expressions:
        expressions.append(address)
    distinct = [not_(eq(a, b)) for i, a in enumerate(expressions) for b in expressions[i + 1:]]
    joint = and_(path.condition, *distinct)
    result = solver.check(joint)
    if result.status != SolverStatus.SAT:
        return None
    values: Dict[SymExpr, int] = {e: value_under(result.model, e) for e in expressions}
    path.log = [replace(entry, value=values[entry.address], constraint=joint) for entry in path.log]
    path.pins = [eq(e, const(values[e])) for e in expressions if e != address]
    path.pins.append(eq(address, const(values[address])))
    path.log.append(Concretization(address, values[address], joint, pc, shadow))
    return values[address]


class _Pruned(Exception):
    pass


class _SkipInstruction(Exception):
    pass


class _Split(NamedTuple):
    condition: SymExpr
    observed: bool
    pc: int
    fallthrough: SymPath
    taken: SymPath


class SymbolicExecutor:
    """1つのプログラムの記号実行。インスタンスは1回の実行専用"""

    def __init__(self, program: Program, solver: Optional[SatisfiabilityService] = None,
                 precondition: SymExpr = TRUE, depth_limit: Optional[int] = None,
                 path_budget: Optional[int] = None, restart_budget: Optional[int] = None):
        self.program = program
        self.solver = solver if solver is not None else make_solver()
        self.precondition = and_(precondition, program_precondition(program))
        self.depth_limit = depth_limit if depth_limit is not None else settings.DEPTH_LIMIT
        self.path_budget = path_budget if path_budget is not None else settings.PATH_BUDGET
        self.restart_budget = restart_budget if restart_budget is not None else settings.RESTART_BUDGET
        self.addrspace = const(program.addrspace)
        self.leaf_count = 0
        self.restarts = 0
        self.impossible = 0

    # --- 全体 ---
    def run(self) -> SymbolicTree:
        back_edge = find_back_edge(self.program)
        if back_edge is not None:
            raise SymbolicExecutionError(
                f"ループがあります(命令 {back_edge} からの戻り辺)。展開してから解析してください",
                code="back-edge",
            )
        tree = SymbolicTree(program=self.program, root=TreeNode(), precondition=self.precondition,
                            shadow_ids=shadow_observation_ids(self.program))
        if self.solver.check(self.precondition).is_unsat:
            logger.warning("前提条件が充足不能です。空の実行木を返します")
            tree.unsat_precondition = True
            return tree
        path = SymPath.initial(self.program)
        path.condition = self.precondition
        self._initial_observations(path, tree.root)
        self._explore(path, tree.root)
        for leaf_id, node in enumerate(tree.leaves):
            node.leaf_id = leaf_id
        tree.restarts = self.restarts
        tree.impossible_paths = self.impossible
        logger.info("記号実行完了: 葉 %d, 再起動 %d, 具体化不能 %d",
                    len(tree.leaves), self.restarts, self.impossible)
        return tree

    def _initial_observations(self, path: SymPath, node: TreeNode) -> None:
        for name in self.program.initial_observations:
            item = self.program.data_item(name)
            if item is None:
                exprs = [path.registers[register_index(name)]]
            else:
                exprs = [select(path.memory, const(a)) for a in range(item.address, item.end)]
            for expr in exprs:
                self._observe(path, node, SymObservation(ObservationKind.INITIAL_PUBLIC, expr, -1))

    @staticmethod
    def _observe(path: SymPath, node: TreeNode, obs: SymObservation) -> None:
        path.observations.append(obs)
        node.segment.append(obs)

    def _feasible(self, formula: SymExpr) -> bool:
        if formula.op == "bool":
            return formula.payload
        # 判定不能は実行可能として扱う
        return self.solver.check(formula).status != SolverStatus.UNSAT

    def _explore(self, path: SymPath, node: TreeNode) -> None:
        program = self.program
        while True:
            if path.pc >= len(program):
                break
            instr = program[path.pc]
            if instr.opcode == Opcode.HALT and not instr.shadow:
                break
            path.steps += 1
            if path.steps > self.depth_limit:
                raise SymbolicExecutionError(
                    f"パスの命令数が上限({self.depth_limit})を超えました", code="depth-limit")
            try:
                split = self._step(path, node, instr)
            except _Pruned:
                return
            except _SkipInstruction:
                continue
            if split is not None:
                node.condition = split.condition
                node.pc = split.pc
                node.observed = split.observed
                node.fallthrough = TreeNode()
                node.taken = TreeNode()
                self._explore(split.fallthrough, node.fallthrough)
                self._explore(split.taken, node.taken)
                return
        self.leaf_count += 1
        if self.leaf_count > self.path_budget:
            raise SymbolicExecutionError(f"パス数が上限({self.path_budget})を超えました", code="path-budget")
        node.path = path

    # --- 命令 ---
    def _bank(self, path: SymPath, shadow: bool):
        if shadow:
            return path.shadow_registers, path.shadow_flags, path.shadow_memory
        return path.registers, path.flags, path.memory

    @staticmethod
    def _operand(registers: List[SymExpr], operand) -> SymExpr:
        if isinstance(operand, Register):
            return registers[operand.index]
        return const(operand.value)

    def _set_flags(self, path: SymPath, shadow: bool, flags: SymFlags) -> None:
        if shadow:
            path.shadow_flags = flags
        else:
            path.flags = flags

    def _step(self, path: SymPath, node: TreeNode, instr: Instruction):
        """1命令を実行する。分岐が両方向に実行可能なら分割情報を返す"""
        pc = path.pc
        shadow = instr.shadow
        op = instr.opcode
        next_pc = pc + 1

        if op == Opcode.SBEGIN:
            path.shadow_registers = list(path.registers)
            path.shadow_flags = path.flags
            path.shadow_memory = path.memory
            path.in_shadow = True
            path.pc = next_pc
            return None
        if op == Opcode.SEND:
            path.shadow_registers = None
            path.shadow_flags = None
            path.shadow_memory = None
            path.in_shadow = False
            path.pc = next_pc
            return None
        if shadow and op == Opcode.HALT:
            path.pc = self._fragment_end(pc)
            return None

        registers, flags, memory = self._bank(path, shadow)

        if op in (Opcode.LOAD, Opcode.STORE):
            base = registers[instr.address.base.index] if instr.address.base is not None else const(0)
            address = add(base, const(instr.address.displacement.value))
            in_range = ult(address, self.addrspace)
            if shadow:
                split = self._shadow_range_split(path, in_range)
                if split is not None:
                    return split
            elif in_range != TRUE:
                if not self._feasible(and_(path.condition, in_range)):
                    logger.debug("アドレス空間外のアクセスしかないパスを除外します pc=%d", pc)
                    raise _Pruned()
                path.condition = and_(path.condition, in_range)
            self._concretize(path, address, pc, shadow)
            if op == Opcode.LOAD:
                kind = ObservationKind.SHADOW_LOAD_ADDRESS if shadow else ObservationKind.LOAD_ADDRESS
                registers[instr.dest.index] = select(memory, address)
            else:
                kind = ObservationKind.SHADOW_STORE_ADDRESS if shadow else ObservationKind.STORE_ADDRESS
                updated = store(memory, address, self._operand(registers, instr.sources[0]))
                if shadow:
                    path.shadow_memory = updated
                else:
                    path.memory = updated
            self._observe(path, node, SymObservation(kind, address, pc, pc if shadow else None))
        elif op == Opcode.MOV:
            registers[instr.dest.index] = self._operand(registers, instr.sources[0])
        elif op == Opcode.CMP:
            self._set_flags(path, shadow, SymFlags.compare(self._operand(registers, instr.sources[0]),
                                                           self._operand(registers, instr.sources[1])))
        elif op == Opcode.CSEL:
            registers[instr.dest.index] = ite(flags.condition(instr.cond),
                                              self._operand(registers, instr.sources[0]),
                                              self._operand(registers, instr.sources[1]))
        elif op == Opcode.OBS:
            value = self._obs_value(instr, registers, flags)
            if instr.obs_tag == ObsTag.REFINED or shadow:
                obs = SymObservation(ObservationKind.REFINED_ANNOTATION, value, pc, pc)
            else:
                obs = SymObservation(ObservationKind.ANNOTATION, value, pc)
            self._observe(path, node, obs)
        elif op == Opcode.JMP:
            next_pc = self.program.target_index(instr.target)
        elif op == Opcode.BRANCH:
            return self._branch(path, node, instr, flags.condition(instr.cond))
        elif op in (Opcode.CSDB, Opcode.FENCE, Opcode.NOP):
            pass
        else:
            registers[instr.dest.index] = _ALU[op](self._operand(registers, instr.sources[0]),
                                                   self._operand(registers, instr.sources[1]))
        path.pc = next_pc
        return None

    def _obs_value(self, instr: Instruction, registers: List[SymExpr], flags: SymFlags) -> SymExpr:
        terms = []
        for term in instr.obs_expr.terms:
            if term.flags:
                terms.append(flags.word())
            elif term.register is not None:
                terms.append(mul(registers[term.register.index], const(term.coefficient)))
            else:
                terms.append(const(term.immediate.value))
        return add(*terms)

    def _branch(self, path: SymPath, node: TreeNode, instr: Instruction, condition: SymExpr):
        pc = path.pc
        target = self.program.target_index(instr.target)
        can_take = self._feasible(and_(path.condition, condition))
        can_fall = self._feasible(and_(path.condition, not_(condition)))
        if not can_take and not can_fall:
            raise _Pruned()
        if can_take and can_fall:
            taken = path.fork()
            self._follow(taken, node=None, instr=instr, condition=condition, outcome=True, target=target)
            self._follow(path, node=None, instr=instr, condition=condition, outcome=False, target=target)
            return _Split(condition, not instr.shadow, pc, path, taken)
        outcome = can_take
        self._follow(path, node, instr, condition, outcome, target)
        return None

    def _follow(self, path: SymPath, node: Optional[TreeNode], instr: Instruction,
                condition: SymExpr, outcome: bool, target: int) -> None:
        pc = path.pc
        guard = condition if outcome else not_(condition)
        if not instr.shadow:
            path.outcomes.append((pc, outcome))
            obs = SymObservation(ObservationKind.BRANCH_OUTCOME, TRUE if outcome else FALSE, pc)
            if node is not None:
                # 片方向のみ実行可能な分岐は分割しないので、区間にも記録する
                self._observe(path, node, obs)
            else:
                path.observations.append(obs)
        path.condition = and_(path.condition, guard)
        path.pc = target if outcome else pc + 1

    def _shadow_range_split(self, path: SymPath, in_range: SymExpr):
        if in_range == TRUE:
            return None
        inside = self._feasible(and_(path.condition, in_range))
        outside = self._feasible(and_(path.condition, not_(in_range)))
        if inside and not outside:
            return None
        if outside and not inside:
            logger.debug("影アクセスが常にアドレス空間外のためフラグメントを終了します pc=%d", path.pc)
            path.pc = self._fragment_end(path.pc)
            raise _SkipInstruction()
        pc = path.pc
        escaped = path.fork()
        escaped.condition = and_(escaped.condition, not_(in_range))
        escaped.pc = self._fragment_end(pc)
        path.condition = and_(path.condition, in_range)
        # 範囲内のパスはこの命令をもう一度実行する
        path.steps -= 1
        return _Split(in_range, False, pc, escaped, path)

    def _fragment_end(self, pc: int) -> int:
        index = pc + 1
        while self.program[index].opcode != Opcode.SEND:
            index += 1
        return index

    def _concretize(self, path: SymPath, address: SymExpr, pc: int, shadow: bool) -> int:
        try:
            return concretize_address(path, address, self.solver, pc, shadow)
        except ConcretizationFailed:
            pass
        self.restarts += 1
        if self.restarts > self.restart_budget:
            raise SymbolicExecutionError(
                f"具体化の再起動回数が上限({self.restart_budget})を超えました", code="restart-budget")
        logger.debug("具体化に失敗したため一括で再具体化します pc=%d", pc)
        value = restart_concretization(path, address, self.solver, pc, shadow)
        if value is None:
            logger.warning("具体化できないパスを除外します pc=%d", pc)
            self.impossible += 1
            raise _Pruned()
        return value


_ALU = {
    Opcode.ADD: add,
    Opcode.SUB: sub,
    Opcode.AND: band,
    Opcode.OR: bor,
    Opcode.XOR: bxor,
    Opcode.SHL: shl,
    Opcode.SHR: shr,
    Opcode.MUL: mul,
}


def sym_execute(program: Program, precondition: SymExpr = TRUE, depth_limit: Optional[int] = None,
                solver: Optional[SatisfiabilityService] = None, **options) -> SymbolicTree:
    """
    プログラムを記号実行して実行木を返す。

    Args:
        program (Program): ループ展開済みのプログラム
        precondition (SymExpr): 初期状態への追加の前提条件
        depth_limit (Optional[int]): 1パスあたりの命令数の上限
        solver (Optional[SatisfiabilityService]): 省略時は設定のバックエンド

    Returns:
        SymbolicTree: 充足可能なパスを葉に持つ実行木

    Raises:
        SymbolicExecutionError: 戻り辺、パス数・命令数・再起動回数の上限超過
    """
    return SymbolicExecutor(program, solver, precondition, depth_limit, **options).run()
