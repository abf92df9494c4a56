"""
記号式と記号実行木のデータモデル
初期状態の記号(レジスタ a0..a31, at, メモリ M)上の式、パス、実行木
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

from src.models.program import NUM_REGISTERS, ObservationKind, Program, TAINT_REGISTER
from src.utils.helpers import WORD_MASK

WORD = "bv"
BOOL = "bool"
MEM = "mem"

PRIME_SUFFIX = "_p"
MEMORY_SYMBOL = "M"
SIGN_BIT = 0x80000000


class UnassignedSymbol(Exception):
    """評価中に未割り当ての記号やメモリセルに到達した"""

    def __init__(self, name: str, address: Optional[int] = None):
        super().__init__(name if address is None else f"{name}[{address}]")
        self.name = name
        self.address = address


class SymExpr:
    """
    正規化済みの記号式ノード。

    直接生成せず、モジュールのビルダー関数(add, eq, select など)を使う。
    構造的に等しい式は == で等しく、ハッシュも一致する。
    """

    __slots__ = ("op", "args", "payload", "sort", "_hash", "_text")

    def __init__(self, op: str, args: Tuple["SymExpr", ...], payload, sort: str):
        self.op = op
        self.args = args
        self.payload = payload
        self.sort = sort
        self._hash = hash((op, args, payload))
        self._text: Optional[str] = None

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, SymExpr) or self._hash != other._hash:
            return False
        return self.op == other.op and self.payload == other.payload and self.args == other.args

    def __ne__(self, other) -> bool:
        return not self.__eq__(other)

    @property
    def is_const(self) -> bool:
        return self.op in ("const", "bool")

    @property
    def value(self):
        return self.payload

    def symbols(self) -> set:
        """式に現れる記号名(メモリ記号を含む)"""
        found = set()
        stack = [self]
        seen = set()
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.op in ("sym", "memsym"):
                found.add(node.payload)
            stack.extend(node.args)
        return found

    def __str__(self) -> str:
        if self._text is None:
            self._text = _render(self)
        return self._text

    def __repr__(self) -> str:
        return f"SymExpr({self})"


def _render(e: SymExpr) -> str:
    op = e.op
    if op == "const":
        return str(e.payload) if e.payload < 10 else hex(e.payload)
    if op == "bool":
        return "true" if e.payload else "false"
    if op in ("sym", "memsym"):
        return e.payload
    if op in _INFIX:
        return "(" + f" {_INFIX[op]} ".join(str(a) for a in e.args) + ")"
    if op == "select":
        return f"{e.args[0]}[{e.args[1]}]"
    if op == "store":
        return f"{e.args[0]}{{{e.args[1]} := {e.args[2]}}}"
    if op == "not":
        return f"!{e.args[0]}"
    if op == "ite":
        return f"ite({e.args[0]}, {e.args[1]}, {e.args[2]})"
    return f"{op}(" + ", ".join(str(a) for a in e.args) + ")"


_INFIX = {
    "add": "+", "sub": "-", "mul": "*", "band": "&", "bor": "|", "bxor": "^",
    "shl": "<<", "shr": ">>", "eq": "=", "ult": "<u", "and": "&&", "or": "||", "iff": "<=>",
}

_CACHE: Dict[tuple, SymExpr] = {}


def _node(op: str, args: Tuple[SymExpr, ...], payload, sort: str) -> SymExpr:
    key = (op, args, payload)
    node = _CACHE.get(key)
    if node is None:
        node = SymExpr(op, args, payload, sort)
        if len(_CACHE) < 500_000:
            _CACHE[key] = node
    return node


def _order(e: SymExpr) -> tuple:
    # 定数は末尾
    return (1 if e.is_const else 0, str(e))


# ---------------------------------------------------------------------------
# 葉
# ---------------------------------------------------------------------------

def const(value: int) -> SymExpr:
    return _node("const", (), value & WORD_MASK, WORD)


def boolean(value: bool) -> SymExpr:
    return _node("bool", (), bool(value), BOOL)


TRUE = boolean(True)
FALSE = boolean(False)


def sym(name: str) -> SymExpr:
    return _node("sym", (), name, WORD)


def mem_sym(name: str = MEMORY_SYMBOL) -> SymExpr:
    return _node("memsym", (), name, MEM)


def register_symbol(index: int) -> SymExpr:
    return sym("at" if index == TAINT_REGISTER else f"a{index}")


# ---------------------------------------------------------------------------
# ワード演算
# ---------------------------------------------------------------------------

def _flatten(op: str, items: Iterable[SymExpr]) -> List[SymExpr]:
    out: List[SymExpr] = []
    for item in items:
        if item.op == op:
            out.extend(item.args)
        else:
            out.append(item)
    return out


def _nary(op: str, items: Iterable[SymExpr], fold, unit: int, absorbing: Optional[int] = None,
          idempotent: bool = False) -> SymExpr:
    terms = _flatten(op, items)
    acc = unit
    rest: List[SymExpr] = []
    for t in terms:
        if t.op == "const":
            acc = fold(acc, t.payload) & WORD_MASK
        else:
            rest.append(t)
    if absorbing is not None and acc == absorbing:
        return const(absorbing)
    if idempotent:
        unique = []
        seen = set()
        for t in rest:
            if t not in seen:
                seen.add(t)
                unique.append(t)
        rest = unique
    if op == "bxor":
        counts: Dict[SymExpr, int] = {}
        for t in rest:
            counts[t] = counts.get(t, 0) + 1
        rest = [t for t, n in counts.items() if n % 2 == 1]
    rest.sort(key=_order)
    if acc != unit:
        rest.append(const(acc))
    if not rest:
        return const(acc)
    if len(rest) == 1:
        return rest[0]
    return _node(op, tuple(rest), None, WORD)


def add(*items: SymExpr) -> SymExpr:
    return _nary("add", items, lambda a, b: a + b, 0)


def mul(*items: SymExpr) -> SymExpr:
    return _nary("mul", items, lambda a, b: a * b, 1, absorbing=0)


def band(*items: SymExpr) -> SymExpr:
    return _nary("band", items, lambda a, b: a & b, WORD_MASK, absorbing=0, idempotent=True)


def bor(*items: SymExpr) -> SymExpr:
    return _nary("bor", items, lambda a, b: a | b, 0, absorbing=WORD_MASK, idempotent=True)


def bxor(*items: SymExpr) -> SymExpr:
    return _nary("bxor", items, lambda a, b: a ^ b, 0)


def sub(a: SymExpr, b: SymExpr) -> SymExpr:
    if b.op == "const":
        return add(a, const(-b.payload))
    if a == b:
        return const(0)
    return _node("sub", (a, b), None, WORD)


def shl(a: SymExpr, b: SymExpr) -> SymExpr:
    if b.op == "const":
        amount = b.payload % 32
        if a.op == "const":
            return const(a.payload << amount)
        if amount == 0:
            return a
        b = const(amount)
    return _node("shl", (a, b), None, WORD)


def shr(a: SymExpr, b: SymExpr) -> SymExpr:
    if b.op == "const":
        amount = b.payload % 32
        if a.op == "const":
            return const(a.payload >> amount)
        if amount == 0:
            return a
        b = const(amount)
    return _node("shr", (a, b), None, WORD)


def ite(c: SymExpr, a: SymExpr, b: SymExpr) -> SymExpr:
    if c.op == "bool":
        return a if c.payload else b
    if a == b:
        return a
    if a.sort == BOOL:
        if a == TRUE and b == FALSE:
            return c
        if a == FALSE and b == TRUE:
            return not_(c)
    return _node("ite", (c, a, b), None, a.sort)


# ---------------------------------------------------------------------------
# メモリ
# ---------------------------------------------------------------------------

def select(m: SymExpr, address: SymExpr) -> SymExpr:
    """1バイト読み出し(ゼロ拡張)"""
    while m.op == "store":
        stored_at = m.args[1]
        if stored_at == address:
            return band(m.args[2], const(0xFF))
        if stored_at.op == "const" and address.op == "const":
            m = m.args[0]
            continue
        break
    return _node("select", (m, address), None, WORD)


def store(m: SymExpr, address: SymExpr, value: SymExpr) -> SymExpr:
    """下位1バイトの書き込み"""
    return _node("store", (m, address, value), None, MEM)


# ---------------------------------------------------------------------------
# 論理
# ---------------------------------------------------------------------------

def eq(a: SymExpr, b: SymExpr) -> SymExpr:
    if a.sort == BOOL:
        return iff(a, b)
    if a.op == "const" and b.op == "const":
        return boolean(a.payload == b.payload)
    if a == b:
        return TRUE
    if _order(b) < _order(a):
        a, b = b, a
    return _node("eq", (a, b), None, BOOL)


def ult(a: SymExpr, b: SymExpr) -> SymExpr:
    if a.op == "const" and b.op == "const":
        return boolean(a.payload < b.payload)
    if a == b:
        return FALSE
    if b.op == "const" and b.payload == 0:
        return FALSE
    return _node("ult", (a, b), None, BOOL)


def uge(a: SymExpr, b: SymExpr) -> SymExpr:
    return not_(ult(a, b))


def not_(a: SymExpr) -> SymExpr:
    if a.op == "bool":
        return boolean(not a.payload)
    if a.op == "not":
        return a.args[0]
    return _node("not", (a,), None, BOOL)


def _junction(op: str, items: Iterable[SymExpr], unit: SymExpr, zero: SymExpr) -> SymExpr:
    out: List[SymExpr] = []
    seen = set()
    for item in _flatten(op, items):
        if item == zero:
            return zero
        if item == unit or item in seen:
            continue
        if not_(item) in seen:
            return zero
        seen.add(item)
        out.append(item)
    if not out:
        return unit
    if len(out) == 1:
        return out[0]
    return _node(op, tuple(out), None, BOOL)


def and_(*items: SymExpr) -> SymExpr:
    return _junction("and", items, TRUE, FALSE)


def or_(*items: SymExpr) -> SymExpr:
    return _junction("or", items, FALSE, TRUE)


def conjunction(items: Iterable[SymExpr]) -> SymExpr:
    return and_(*list(items))


def disjunction(items: Iterable[SymExpr]) -> SymExpr:
    return or_(*list(items))


def implies(a: SymExpr, b: SymExpr) -> SymExpr:
    return or_(not_(a), b)


def iff(a: SymExpr, b: SymExpr) -> SymExpr:
    if a.op == "bool" and b.op == "bool":
        return boolean(a.payload == b.payload)
    if a == b:
        return TRUE
    if a.op == "bool":
        return b if a.payload else not_(b)
    if b.op == "bool":
        return a if b.payload else not_(a)
    if _order(b) < _order(a):
        a, b = b, a
    return _node("iff", (a, b), None, BOOL)


# ---------------------------------------------------------------------------
# 比較フラグ
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymFlags:
    n: SymExpr = FALSE
    z: SymExpr = FALSE
    c: SymExpr = FALSE
    v: SymExpr = FALSE

    @classmethod
    def compare(cls, a: SymExpr, b: SymExpr) -> "SymFlags":
        diff = sub(a, b)
        overflow = band(bxor(a, b), bxor(a, diff))
        return cls(
            n=uge(diff, const(SIGN_BIT)),
            z=eq(a, b),
            c=uge(a, b),
            v=uge(overflow, const(SIGN_BIT)),
        )

    def condition(self, cond) -> SymExpr:
        name = cond.value if hasattr(cond, "value") else cond
        if name == "eq":
            return self.z
        if name == "ne":
            return not_(self.z)
        if name == "lt":
            return not_(self.c)
        return self.c

    def word(self) -> SymExpr:
        """NZCV を4ビットのワードとして表す"""
        return add(ite(self.n, const(8), const(0)), ite(self.z, const(4), const(0)),
                   ite(self.c, const(2), const(0)), ite(self.v, const(1), const(0)))


# ---------------------------------------------------------------------------
# 評価
# ---------------------------------------------------------------------------

MemoryImage = Union[Mapping[int, int], bytes, bytearray]


@dataclass
class Assignment:
    """記号への具体値の割り当て。memory は記号名ごとのセル値"""

    symbols: Dict[str, int] = field(default_factory=dict)
    memory: Dict[str, MemoryImage] = field(default_factory=dict)
    cell_default: Optional[int] = None

    def cell(self, name: str, address: int) -> int:
        image = self.memory.get(name)
        if isinstance(image, (bytes, bytearray)):
            return image[address] if 0 <= address < len(image) else 0
        if image is not None and address in image:
            return image[address] & 0xFF
        if self.cell_default is not None:
            return self.cell_default
        raise UnassignedSymbol(name, address)


def evaluate(expr: SymExpr, env: Assignment):
    """
    式を具体値に評価する。

    論理演算は短絡評価し、結果が確定すれば未割り当ての部分式を無視する。

    Args:
        expr (SymExpr): 評価する式
        env (Assignment): 記号とメモリセルの割り当て

    Returns:
        int | bool | _MemoryValue: ワード値、真偽値、またはメモリ値

    Raises:
        UnassignedSymbol: 結果が未割り当ての記号に依存する場合
    """
    return _Evaluator(env).run(expr)


class _MemoryValue:
    __slots__ = ("name", "writes")

    def __init__(self, name: str, writes: Tuple[Tuple[int, int], ...] = ()):
        self.name = name
        self.writes = writes

    def read(self, env: Assignment, address: int) -> int:
        for at, value in reversed(self.writes):
            if at == address:
                return value
        return env.cell(self.name, address)


class _Evaluator:
    def __init__(self, env: Assignment):
        self.env = env
        self.cache: Dict[int, object] = {}

    def run(self, e: SymExpr):
        key = id(e)
        if key in self.cache:
            return self.cache[key]
        value = self._eval(e)
        self.cache[key] = value
        return value

    def _eval(self, e: SymExpr):
        op = e.op
        if op in ("const", "bool"):
            return e.payload
        if op == "sym":
            if e.payload not in self.env.symbols:
                raise UnassignedSymbol(e.payload)
            return self.env.symbols[e.payload] & WORD_MASK
        if op == "memsym":
            return _MemoryValue(e.payload)
        if op == "and":
            return self._junction(e.args, False)
        if op == "or":
            return self._junction(e.args, True)
        if op == "ite":
            return self.run(e.args[1]) if self.run(e.args[0]) else self.run(e.args[2])
        if op == "not":
            return not self.run(e.args[0])
        if op == "select":
            memory = self.run(e.args[0])
            return memory.read(self.env, self.run(e.args[1]))
        if op == "store":
            memory = self.run(e.args[0])
            address = self.run(e.args[1])
            value = self.run(e.args[2]) & 0xFF
            return _MemoryValue(memory.name, memory.writes + ((address, value),))
        values = [self.run(a) for a in e.args]
        if op == "add":
            return sum(values) & WORD_MASK
        if op == "mul":
            result = 1
            for v in values:
                result = (result * v) & WORD_MASK
            return result
        if op == "band":
            result = WORD_MASK
            for v in values:
                result &= v
            return result
        if op == "bor":
            result = 0
            for v in values:
                result |= v
            return result
        if op == "bxor":
            result = 0
            for v in values:
                result ^= v
            return result
        if op == "sub":
            return (values[0] - values[1]) & WORD_MASK
        if op == "shl":
            return (values[0] << (values[1] % 32)) & WORD_MASK
        if op == "shr":
            return values[0] >> (values[1] % 32)
        if op == "eq":
            return values[0] == values[1]
        if op == "ult":
            return values[0] < values[1]
        if op == "iff":
            return bool(values[0]) == bool(values[1])
        raise ValueError(f"未知の演算子です: {op}")

    def _junction(self, args, dominant: bool) -> bool:
        pending: Optional[UnassignedSymbol] = None
        for arg in args:
            try:
                if bool(self.run(arg)) == dominant:
                    return dominant
            except UnassignedSymbol as missing:
                if pending is None:
                    pending = missing
        if pending is not None:
            raise pending
        return not dominant


# ---------------------------------------------------------------------------
# 置換と二重化
# ---------------------------------------------------------------------------

def rename(expr: SymExpr, mapping: Mapping[str, str]) -> SymExpr:
    """記号名を置き換えた式を作り直す"""
    memo: Dict[int, SymExpr] = {}

    def walk(e: SymExpr) -> SymExpr:
        cached = memo.get(id(e))
        if cached is not None:
            return cached
        if e.op == "sym":
            out = sym(mapping.get(e.payload, e.payload))
        elif e.op == "memsym":
            out = mem_sym(mapping.get(e.payload, e.payload))
        elif not e.args:
            out = e
        else:
            out = rebuild(e, [walk(a) for a in e.args])
        memo[id(e)] = out
        return out

    return walk(expr)


def rebuild(e: SymExpr, args: List[SymExpr]) -> SymExpr:
    """同じ演算子で引数を差し替えて正規化し直す"""
    builders = {
        "add": add, "mul": mul, "band": band, "bor": bor, "bxor": bxor,
        "and": and_, "or": or_,
    }
    op = e.op
    if op in builders:
        return builders[op](*args)
    binary = {"sub": sub, "shl": shl, "shr": shr, "eq": eq, "ult": ult, "iff": iff, "select": select}
    if op in binary:
        return binary[op](args[0], args[1])
    if op == "store":
        return store(args[0], args[1], args[2])
    if op == "ite":
        return ite(args[0], args[1], args[2])
    if op == "not":
        return not_(args[0])
    raise ValueError(f"未知の演算子です: {op}")


def primed_name(name: str) -> str:
    return name + PRIME_SUFFIX


def prime(expr: SymExpr) -> SymExpr:
    """2コピー目(プライム付き)の記号に置き換える"""
    return rename(expr, {name: primed_name(name) for name in expr.symbols()
                         if not name.endswith(PRIME_SUFFIX)})


def swap_names(expr: SymExpr) -> SymExpr:
    mapping = {}
    for name in expr.symbols():
        if name.endswith(PRIME_SUFFIX):
            mapping[name] = name[: -len(PRIME_SUFFIX)]
        else:
            mapping[name] = primed_name(name)
    return rename(expr, mapping)


def word_symbols(expr: SymExpr) -> set:
    """メモリ記号を除いた記号名"""
    found = set()
    stack = [expr]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "sym":
            found.add(node.payload)
        stack.extend(node.args)
    return found


def iter_selects(expr: SymExpr) -> Iterator[SymExpr]:
    """式中の select ノードを列挙する(重複なし)"""
    seen = set()
    stack = [expr]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "select":
            yield node
        stack.extend(node.args)


def base_memory(m: SymExpr) -> SymExpr:
    while m.op == "store":
        m = m.args[0]
    return m


# ---------------------------------------------------------------------------
# パスと実行木
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymObservation:
    kind: ObservationKind
    expr: SymExpr
    pc: int
    shadow_id: Optional[int] = None

    def __str__(self) -> str:
        tag = f" #{self.shadow_id}" if self.shadow_id is not None else ""
        return f"{self.kind.value}{tag}: {self.expr}"


@dataclass(frozen=True)
class Concretization:
    """具体化ログの1エントリ。constraint は選択時点の制約"""

    address: SymExpr
    value: int
    constraint: SymExpr
    pc: int
    shadow: bool = False


@dataclass
class SymPath:
    registers: List[SymExpr]
    flags: SymFlags
    memory: SymExpr
    condition: SymExpr = TRUE
    pins: List[SymExpr] = field(default_factory=list)
    observations: List[SymObservation] = field(default_factory=list)
    log: List[Concretization] = field(default_factory=list)
    outcomes: List[Tuple[int, bool]] = field(default_factory=list)
    pc: int = 0
    steps: int = 0
    shadow_registers: Optional[List[SymExpr]] = None
    shadow_flags: Optional[SymFlags] = None
    shadow_memory: Optional[SymExpr] = None
    in_shadow: bool = False

    @classmethod
    def initial(cls, program: Program) -> "SymPath":
        return cls(
            registers=[register_symbol(i) for i in range(NUM_REGISTERS)],
            flags=SymFlags(),
            memory=mem_sym(),
            pc=program.entry_index,
        )

    @property
    def concretized_condition(self) -> SymExpr:
        return and_(self.condition, *self.pins)

    def memo(self, address: SymExpr) -> Optional[int]:
        for entry in self.log:
            if entry.address == address:
                return entry.value
        return None

    def fork(self) -> "SymPath":
        return SymPath(
            registers=list(self.registers),
            flags=self.flags,
            memory=self.memory,
            condition=self.condition,
            pins=list(self.pins),
            observations=list(self.observations),
            log=list(self.log),
            outcomes=list(self.outcomes),
            pc=self.pc,
            steps=self.steps,
            shadow_registers=list(self.shadow_registers) if self.shadow_registers is not None else None,
            shadow_flags=self.shadow_flags,
            shadow_memory=self.shadow_memory,
            in_shadow=self.in_shadow,
        )


@dataclass
class TreeNode:
    """
    実行木のノード。

    segment は直前の分岐(または根)からこのノードまでに出た観測。
    内部ノードは分岐条件と2つの子を持ち、葉はパスを持つ。
    """

    segment: List[SymObservation] = field(default_factory=list)
    condition: Optional[SymExpr] = None
    pc: Optional[int] = None
    observed: bool = True
    taken: Optional["TreeNode"] = None
    fallthrough: Optional["TreeNode"] = None
    path: Optional[SymPath] = None
    leaf_id: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.condition is None

    def leaves(self) -> Iterator["TreeNode"]:
        if self.is_leaf:
            if self.path is not None:
                yield self
            return
        yield from self.fallthrough.leaves()
        yield from self.taken.leaves()


@dataclass
class SymbolicTree:
    program: Program
    root: TreeNode
    precondition: SymExpr = TRUE
    shadow_ids: Tuple[int, ...] = ()
    unsat_precondition: bool = False
    impossible_paths: int = 0
    restarts: int = 0

    @property
    def leaves(self) -> List[TreeNode]:
        return list(self.root.leaves())

    @property
    def paths(self) -> List[SymPath]:
        return [leaf.path for leaf in self.leaves]

    def leaf(self, leaf_id: int) -> TreeNode:
        for node in self.leaves:
            if node.leaf_id == leaf_id:
                return node
        raise KeyError(leaf_id)

    def is_fully_observed(self) -> bool:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                continue
            if not node.observed:
                return False
            stack.extend([node.taken, node.fallthrough])
        return True


def dump_tree(tree: SymbolicTree) -> str:
    """葉ごとに条件・観測・具体化ログを並べたテキスト"""
    lines: List[str] = []
    if tree.unsat_precondition:
        lines.append("; precondition unsatisfiable")
    for node in tree.leaves:
        path = node.path
        lines.append(f"leaf {node.leaf_id} steps={path.steps}")
        lines.append(f"  condition: {path.condition}")
        lines.append("  observations:")
        for obs in path.observations:
            lines.append(f"    {obs}")
        lines.append("  concretizations:")
        for entry in path.log:
            mark = " shadow" if entry.shadow else ""
            lines.append(f"    pc={entry.pc}{mark} {entry.address} -> {hex(entry.value)}")
        lines.append("")
    return "\n".join(lines)
