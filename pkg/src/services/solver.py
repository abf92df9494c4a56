"""
充足可能性判定サービス
全列挙(小さい定義域の基準実装)、z3、外部 SMT-LIB 2 プロセスの3種類のバックエンド
"""

import logging
import shlex
import subprocess
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from config.settings import settings
from src.models.symbolic import (
    Assignment, BOOL, MEM, SymExpr, UnassignedSymbol, base_memory, evaluate, iter_selects,
)
from src.utils.exceptions import ConfigurationError, SolverError

logger = logging.getLogger(__name__)


class SolverStatus(str, Enum):
    SAT = "sat"
    UNSAT = "unsat"
    UNKNOWN = "unknown"


@dataclass
class Model:
    """記号ごとのワード値と、式が参照するメモリセルの値"""

    symbols: Dict[str, int] = field(default_factory=dict)
    memory: Dict[str, Dict[int, int]] = field(default_factory=dict)

    def assignment(self, cell_default: Optional[int] = 0) -> Assignment:
        return Assignment(symbols=dict(self.symbols),
                          memory={k: dict(v) for k, v in self.memory.items()},
                          cell_default=cell_default)


@dataclass
class SolverResult:
    status: SolverStatus
    model: Optional[Model] = None

    @property
    def is_sat(self) -> bool:
        return self.status == SolverStatus.SAT

    @property
    def is_unsat(self) -> bool:
        return self.status == SolverStatus.UNSAT


class SatisfiabilityService(ABC):
    """充足可能性判定の共通インターフェース。インスタンスは1実行につき1つ使う"""

    name = "abstract"

    def __init__(self):
        self.queries = 0

    def check(self, formula: SymExpr) -> SolverResult:
        if formula.sort != BOOL:
            raise TypeError("充足可能性判定には論理式を指定してください")
        self.queries += 1
        if formula.op == "bool":
            return SolverResult(SolverStatus.SAT, Model()) if formula.payload else SolverResult(SolverStatus.UNSAT)
        result = self._check(formula)
        logger.debug("%s: %s (%d 回目)", self.name, result.status.value, self.queries)
        return result

    @abstractmethod
    def _check(self, formula: SymExpr) -> SolverResult:
        ...


def check_sat(formula: SymExpr, solver: SatisfiabilityService) -> SolverResult:
    """論理式の充足可能性を判定する"""
    return solver.check(formula)


# ---------------------------------------------------------------------------
# 全列挙
# ---------------------------------------------------------------------------

class _NodeBudgetExceeded(Exception):
    pass


class EnumerativeSolver(SatisfiabilityService):
    """
    記号ごとに symbol_bits ビットの定義域を深さ優先で全列挙する。

    3値評価で未割り当ての記号に到達したときだけ分岐するので、
    早い段階で偽になる部分割り当ては枝刈りされる。
    """

    name = "enumerate"

    def __init__(self, symbol_bits: Optional[int] = None, max_nodes: Optional[int] = None):
        super().__init__()
        self.symbol_bits = symbol_bits if symbol_bits is not None else settings.ENUM_SYMBOL_BITS
        self.max_nodes = max_nodes if max_nodes is not None else settings.ENUM_MAX_NODES
        if not 1 <= self.symbol_bits <= 32:
            raise ConfigurationError("symbol_bits は 1 から 32 で指定してください")
        self._nodes = 0

    def _check(self, formula: SymExpr) -> SolverResult:
        self._nodes = 0
        env = Assignment()
        try:
            found = self._search(formula, env)
        except _NodeBudgetExceeded:
            logger.warning("列挙ソルバーの探索ノード上限(%d)に達しました", self.max_nodes)
            return SolverResult(SolverStatus.UNKNOWN)
        if not found:
            return SolverResult(SolverStatus.UNSAT)
        memory = {name: dict(cells) for name, cells in env.memory.items()}
        return SolverResult(SolverStatus.SAT, Model(symbols=dict(env.symbols), memory=memory))

    def _search(self, formula: SymExpr, env: Assignment) -> bool:
        self._nodes += 1
        if self._nodes > self.max_nodes:
            raise _NodeBudgetExceeded()
        try:
            return bool(evaluate(formula, env))
        except UnassignedSymbol as missing:
            if missing.address is None:
                for value in range(1 << self.symbol_bits):
                    env.symbols[missing.name] = value
                    if self._search(formula, env):
                        return True
                del env.symbols[missing.name]
                return False
            cells = env.memory.setdefault(missing.name, {})
            for value in range(min(1 << self.symbol_bits, 256)):
                cells[missing.address] = value
                if self._search(formula, env):
                    return True
            del cells[missing.address]
            return False


# ---------------------------------------------------------------------------
# z3
# ---------------------------------------------------------------------------

class Z3Solver(SatisfiabilityService):
    """z3 によるビットベクタ・配列理論での判定"""

    name = "z3"

    def __init__(self, symbol_bits: Optional[int] = None, timeout_ms: Optional[int] = None):
        super().__init__()
        try:
            import z3
        except ImportError as e:
            raise ConfigurationError("z3-solver がインストールされていません", code="solver-missing") from e
        self._z3 = z3
        self.symbol_bits = symbol_bits
        self.timeout_ms = timeout_ms if timeout_ms is not None else settings.SOLVER_TIMEOUT_MS

    def translate(self, formula: SymExpr):
        z3 = self._z3
        memo: Dict[int, object] = {}

        def walk(e: SymExpr):
            key = id(e)
            if key in memo:
                return memo[key]
            op = e.op
            if op == "const":
                out = z3.BitVecVal(e.payload, 32)
            elif op == "bool":
                out = z3.BoolVal(e.payload)
            elif op == "sym":
                out = z3.BitVec(e.payload, 32)
            elif op == "memsym":
                out = z3.Array(e.payload, z3.BitVecSort(32), z3.BitVecSort(8))
            else:
                args = [walk(a) for a in e.args]
                out = _Z3_OPS[op](z3, args)
            memo[key] = out
            return out

        return walk(formula), walk

    def _check(self, formula: SymExpr) -> SolverResult:
        z3 = self._z3
        term, walk = self.translate(formula)
        solver = z3.Solver()
        solver.set("timeout", int(self.timeout_ms))
        solver.add(term)
        symbols = sorted(n for n in formula.symbols() if not _is_memory_name(formula, n))
        if self.symbol_bits is not None and self.symbol_bits < 32:
            bound = z3.BitVecVal(1 << self.symbol_bits, 32)
            for name in symbols:
                solver.add(z3.ULT(z3.BitVec(name, 32), bound))
        verdict = solver.check()
        if verdict == z3.unsat:
            return SolverResult(SolverStatus.UNSAT)
        if verdict != z3.sat:
            return SolverResult(SolverStatus.UNKNOWN)
        m = solver.model()
        model = Model()
        for name in symbols:
            model.symbols[name] = m.eval(z3.BitVec(name, 32), model_completion=True).as_long()
        for node in iter_selects(formula):
            memory = base_memory(node.args[0])
            address = m.eval(walk(node.args[1]), model_completion=True).as_long()
            cell = m.eval(z3.Select(walk(memory), z3.BitVecVal(address, 32)), model_completion=True)
            model.memory.setdefault(memory.payload, {})[address] = cell.as_long()
        return SolverResult(SolverStatus.SAT, model)


def _is_memory_name(formula: SymExpr, name: str) -> bool:
    stack = [formula]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "memsym" and node.payload == name:
            return True
        stack.extend(node.args)
    return False


def _z3_fold(fn):
    def build(z3, args):
        out = args[0]
        for arg in args[1:]:
            out = fn(z3, out, arg)
        return out
    return build


_Z3_OPS = {
    "add": _z3_fold(lambda z3, a, b: a + b),
    "mul": _z3_fold(lambda z3, a, b: a * b),
    "band": _z3_fold(lambda z3, a, b: a & b),
    "bor": _z3_fold(lambda z3, a, b: a | b),
    "bxor": _z3_fold(lambda z3, a, b: a ^ b),
    "sub": lambda z3, a: a[0] - a[1],
    "shl": lambda z3, a: a[0] << (a[1] & 31),
    "shr": lambda z3, a: z3.LShR(a[0], a[1] & 31),
    "select": lambda z3, a: z3.ZeroExt(24, z3.Select(a[0], a[1])),
    "store": lambda z3, a: z3.Store(a[0], a[1], z3.Extract(7, 0, a[2])),
    "eq": lambda z3, a: a[0] == a[1],
    "ult": lambda z3, a: z3.ULT(a[0], a[1]),
    "not": lambda z3, a: z3.Not(a[0]),
    "and": lambda z3, a: z3.And(*a),
    "or": lambda z3, a: z3.Or(*a),
    "iff": lambda z3, a: a[0] == a[1],
    "ite": lambda z3, a: z3.If(a[0], a[1], a[2]),
}


# ---------------------------------------------------------------------------
# SMT-LIB 2
# ---------------------------------------------------------------------------

_SMT_OPS = {
    "add": "bvadd", "mul": "bvmul", "band": "bvand", "bor": "bvor", "bxor": "bvxor",
    "sub": "bvsub", "eq": "=", "ult": "bvult", "not": "not", "and": "and", "or": "or",
    "iff": "=", "ite": "ite",
}


class _SmtWriter:
    def __init__(self):
        self.definitions: List[str] = []
        self.names: Dict[SymExpr, str] = {}
        self.uses: Dict[SymExpr, int] = {}

    def count(self, root: SymExpr) -> None:
        stack = [root]
        while stack:
            node = stack.pop()
            self.uses[node] = self.uses.get(node, 0) + 1
            if self.uses[node] == 1:
                stack.extend(node.args)

    def term(self, e: SymExpr) -> str:
        if e in self.names:
            return self.names[e]
        op = e.op
        if op == "const":
            return f"(_ bv{e.payload} 32)"
        if op == "bool":
            return "true" if e.payload else "false"
        if op in ("sym", "memsym"):
            return e.payload
        args = [self.term(a) for a in e.args]
        if op == "select":
            text = f"((_ zero_extend 24) (select {args[0]} {args[1]}))"
        elif op == "store":
            text = f"(store {args[0]} {args[1]} ((_ extract 7 0) {args[2]}))"
        elif op == "shl":
            text = f"(bvshl {args[0]} (bvand {args[1]} (_ bv31 32)))"
        elif op == "shr":
            text = f"(bvlshr {args[0]} (bvand {args[1]} (_ bv31 32)))"
        elif op in ("add", "mul", "band", "bor", "bxor") and len(args) > 2:
            text = args[0]
            for arg in args[1:]:
                text = f"({_SMT_OPS[op]} {text} {arg})"
        else:
            text = f"({_SMT_OPS[op]} " + " ".join(args) + ")"
        if self.uses.get(e, 0) > 1:
            name = f"_t{len(self.names)}"
            self.definitions.append(f"(define-fun {name} () {_smt_sort(e.sort)} {text})")
            self.names[e] = name
            return name
        return text


def _smt_sort(sort: str) -> str:
    if sort == BOOL:
        return "Bool"
    if sort == MEM:
        return "(Array (_ BitVec 32) (_ BitVec 8))"
    return "(_ BitVec 32)"


def _declarations(formula: SymExpr) -> List[str]:
    memories = set()
    words = set()
    stack = [formula]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "sym":
            words.add(node.payload)
        elif node.op == "memsym":
            memories.add(node.payload)
        stack.extend(node.args)
    lines = [f"(declare-const {name} (_ BitVec 32))" for name in sorted(words)]
    lines += [f"(declare-const {name} {_smt_sort(MEM)})" for name in sorted(memories)]
    return lines


def to_smtlib(formula: SymExpr, symbol_bits: Optional[int] = None,
              get_values: Tuple[str, ...] = ()) -> str:
    """
    論理式を QF_ABV の SMT-LIB 2 スクリプトにする。

    Args:
        formula (SymExpr): 論理式
        symbol_bits (Optional[int]): 記号の定義域を制限するビット数
        get_values (Tuple[str, ...]): check-sat の後に get-value で問い合わせる項

    Returns:
        str: スクリプト全体
    """
    writer = _SmtWriter()
    writer.count(formula)
    body = writer.term(formula)
    lines = ["(set-logic QF_ABV)", "(set-option :produce-models true)"]
    lines += _declarations(formula)
    lines += writer.definitions
    lines.append(f"(assert {body})")
    if symbol_bits is not None and symbol_bits < 32:
        for name in sorted(n for n in formula.symbols() if not _is_memory_name(formula, n)):
            lines.append(f"(assert (bvult {name} (_ bv{1 << symbol_bits} 32)))")
    lines.append("(check-sat)")
    if get_values:
        lines.append("(get-value (" + " ".join(get_values) + "))")
    return "\n".join(lines) + "\n"


def parse_sexpr(text: str):
    """S式を入れ子のリストに変換する"""
    tokens: List[str] = []
    current = ""
    for ch in text:
        if ch in "()":
            if current:
                tokens.append(current)
                current = ""
            tokens.append(ch)
        elif ch.isspace():
            if current:
                tokens.append(current)
                current = ""
        else:
            current += ch
    if current:
        tokens.append(current)
    stack: List[list] = [[]]
    for token in tokens:
        if token == "(":
            stack.append([])
        elif token == ")":
            if len(stack) < 2:
                raise SolverError("S式の括弧が対応していません")
            done = stack.pop()
            stack[-1].append(done)
        else:
            stack[-1].append(token)
    if len(stack) != 1:
        raise SolverError("S式の括弧が閉じていません")
    return stack[0]


def parse_bv(value) -> int:
    if isinstance(value, list):
        # (_ bvN 32)
        if len(value) == 3 and value[0] == "_" and value[1].startswith("bv"):
            return int(value[1][2:])
        raise SolverError(f"ビットベクタ値を解釈できません: {value}")
    if value.startswith("#x"):
        return int(value[2:], 16)
    if value.startswith("#b"):
        return int(value[2:], 2)
    raise SolverError(f"ビットベクタ値を解釈できません: {value}")


class SmtLibProcessSolver(SatisfiabilityService):
    """標準入出力で SMT-LIB 2 を話す外部ソルバープロセス"""

    name = "external"

    def __init__(self, command: Optional[str] = None, symbol_bits: Optional[int] = None,
                 timeout_ms: Optional[int] = None):
        super().__init__()
        self.command = command or settings.SMT_SOLVER_COMMAND
        self.symbol_bits = symbol_bits
        self.timeout_ms = timeout_ms if timeout_ms is not None else settings.SOLVER_TIMEOUT_MS

    def _check(self, formula: SymExpr) -> SolverResult:
        symbols = sorted(n for n in formula.symbols() if not _is_memory_name(formula, n))
        selects = list(iter_selects(formula))
        writer = _SmtWriter()
        queries: List[str] = list(symbols)
        cells: List[Tuple[str, SymExpr]] = []
        for node in selects:
            memory = base_memory(node.args[0])
            address = writer.term(node.args[1])
            queries.append(address)
            queries.append(f"(select {memory.payload} {address})")
            cells.append((memory.payload, node.args[1]))
        script = to_smtlib(formula, self.symbol_bits, tuple(queries))
        output = self._run(script)
        answer = parse_sexpr(output)
        if not answer:
            raise SolverError("ソルバーの応答が空です")
        status = answer[0]
        if status == "unsat":
            return SolverResult(SolverStatus.UNSAT)
        if status == "unknown" or status == "timeout":
            return SolverResult(SolverStatus.UNKNOWN)
        if status != "sat":
            raise SolverError(f"ソルバーの応答を解釈できません: {status}")
        model = Model()
        if queries:
            if len(answer) < 2 or not isinstance(answer[1], list):
                raise SolverError("get-value の応答がありません")
            values = [parse_bv(pair[1]) for pair in answer[1]]
            if len(values) != len(queries):
                raise SolverError("get-value の応答数が一致しません")
            for name, value in zip(symbols, values):
                model.symbols[name] = value
            rest = values[len(symbols):]
            for (memory, _), address, cell in zip(cells, rest[0::2], rest[1::2]):
                model.memory.setdefault(memory, {})[address] = cell & 0xFF
        return SolverResult(SolverStatus.SAT, model)

    def _run(self, script: str) -> str:
        try:
            completed = subprocess.run(
                shlex.split(self.command),
                input=script,
                capture_output=True,
                text=True,
                timeout=self.timeout_ms / 1000.0,
            )
        except FileNotFoundError as e:
            raise SolverError(f"外部ソルバーが見つかりません: {self.command}") from e
        except subprocess.TimeoutExpired:
            return "unknown"
        if completed.returncode != 0 and not completed.stdout.strip():
            raise SolverError(f"外部ソルバーが異常終了しました: {completed.stderr.strip()}")
        return completed.stdout


def make_solver(name: Optional[str] = None, **options) -> SatisfiabilityService:
    """
    名前からソルバーを生成する。

    Args:
        name (Optional[str]): "z3", "enumerate", "external" のいずれか(省略時は設定値)
        **options: 各バックエンドのコンストラクタ引数

    Raises:
        ConfigurationError: 未知のバックエンド名
    """
    backend = name or settings.SOLVER_BACKEND
    factories = {
        "z3": Z3Solver,
        "enumerate": EnumerativeSolver,
        "external": SmtLibProcessSolver,
    }
    if backend not in factories:
        raise ConfigurationError(f"未知のソルバーバックエンドです: {backend}", code="unknown-solver")
    return factories[backend](**options)
