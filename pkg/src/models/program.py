"""
中間表現(IR)のデータモデル
命令・プログラム・機械状態・観測の定義
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple, Union

from src.utils.exceptions import AssemblyError, MachineFault
from src.utils.helpers import WORD_MASK, format_hex

NUM_GENERAL_REGISTERS = 32
TAINT_REGISTER = 32
NUM_REGISTERS = 33

# NZCV フラグのビット位置
FLAG_N = 8
FLAG_Z = 4
FLAG_C = 2
FLAG_V = 1


class Opcode(str, Enum):
    LOAD = "load"
    STORE = "store"
    MOV = "mov"
    ADD = "add"
    SUB = "sub"
    AND = "and"
    OR = "or"
    XOR = "xor"
    SHL = "shl"
    SHR = "shr"
    MUL = "mul"
    CMP = "cmp"
    BRANCH = "b"
    JMP = "jmp"
    CSEL = "csel"
    CSDB = "csdb"
    FENCE = "fence"
    NOP = "nop"
    OBS = "obs"
    HALT = "halt"
    SBEGIN = "sbegin"
    SEND = "send"


BINARY_OPCODES = frozenset({
    Opcode.ADD, Opcode.SUB, Opcode.AND, Opcode.OR, Opcode.XOR,
    Opcode.SHL, Opcode.SHR, Opcode.MUL,
})
NULLARY_OPCODES = frozenset({
    Opcode.CSDB, Opcode.FENCE, Opcode.NOP, Opcode.HALT, Opcode.SBEGIN, Opcode.SEND,
})


class Condition(str, Enum):
    EQ = "eq"
    NE = "ne"
    LT = "lt"   # 符号なし未満 (C == 0)
    GE = "ge"   # 符号なし以上 (C == 1)

    def negate(self) -> "Condition":
        return _NEGATED[self]


_NEGATED = {
    Condition.EQ: Condition.NE,
    Condition.NE: Condition.EQ,
    Condition.LT: Condition.GE,
    Condition.GE: Condition.LT,
}


class SecurityLabel(str, Enum):
    PUBLIC = "public"
    SECRET = "secret"


class ObsTag(str, Enum):
    BASE = "base"
    REFINED = "refined"
    INITIAL = "initial"


class ObservationKind(str, Enum):
    LOAD_ADDRESS = "load-address"
    STORE_ADDRESS = "store-address"
    BRANCH_OUTCOME = "branch-outcome"
    INITIAL_PUBLIC = "initial-public"
    SHADOW_LOAD_ADDRESS = "shadow-load-address"
    SHADOW_STORE_ADDRESS = "shadow-store-address"
    ANNOTATION = "annotation"
    REFINED_ANNOTATION = "refined-annotation"

    @property
    def is_refined(self) -> bool:
        return self in (
            ObservationKind.SHADOW_LOAD_ADDRESS,
            ObservationKind.SHADOW_STORE_ADDRESS,
            ObservationKind.REFINED_ANNOTATION,
        )


BASE_OBSERVATION_KINDS = frozenset({
    ObservationKind.LOAD_ADDRESS,
    ObservationKind.STORE_ADDRESS,
    ObservationKind.BRANCH_OUTCOME,
    ObservationKind.INITIAL_PUBLIC,
    ObservationKind.ANNOTATION,
})


@dataclass(frozen=True)
class Register:
    index: int

    def __post_init__(self):
        if not 0 <= self.index < NUM_REGISTERS:
            raise ValueError(f"レジスタ番号が範囲外です: {self.index}")

    @property
    def is_taint(self) -> bool:
        return self.index == TAINT_REGISTER

    def __str__(self) -> str:
        return "taint" if self.is_taint else f"r{self.index}"


TAINT = Register(TAINT_REGISTER)


def register_index(name: str) -> int:
    """'r5' や 'taint' からレジスタ番号を得る"""
    if name == "taint":
        return TAINT_REGISTER
    if not (name.startswith("r") and name[1:].isdigit()):
        raise ValueError(f"レジスタ名ではありません: {name}")
    return int(name[1:])


@dataclass(frozen=True)
class Immediate:
    """即値。symbol があればデータ名(+offset)として表示する"""

    value: int
    symbol: Optional[str] = None
    offset: int = 0

    def __post_init__(self):
        if not 0 <= self.value <= WORD_MASK:
            raise ValueError(f"即値がワード幅を超えています: {self.value}")

    def __str__(self) -> str:
        if self.symbol is not None:
            if self.offset > 0:
                return f"{self.symbol}+{self.offset}"
            if self.offset < 0:
                return f"{self.symbol}-{-self.offset}"
            return self.symbol
        return str(self.value) if self.value < 4096 else format_hex(self.value)


Operand = Union[Register, Immediate]
ZERO = Immediate(0)


@dataclass(frozen=True)
class Address:
    """load/store のアドレス式 (base + displacement)"""

    base: Optional[Register]
    displacement: Immediate = ZERO

    def __str__(self) -> str:
        if self.base is None:
            return f"[{self.displacement}]"
        if self.displacement == ZERO:
            return f"[{self.base}]"
        return f"[{self.base}+{self.displacement}]"


@dataclass(frozen=True)
class ObsTerm:
    """obs 式の項: レジスタ(係数つき)、即値、または nzcv フラグ語"""

    register: Optional[Register] = None
    immediate: Optional[Immediate] = None
    coefficient: int = 1
    flags: bool = False

    def __str__(self) -> str:
        if self.flags:
            return "nzcv"
        if self.register is not None:
            return str(self.register) if self.coefficient == 1 else f"{self.register}*{self.coefficient}"
        return str(self.immediate)


@dataclass(frozen=True)
class ObsExpr:
    terms: Tuple[ObsTerm, ...]

    def registers(self) -> List[Register]:
        return [t.register for t in self.terms if t.register is not None]

    def __str__(self) -> str:
        return "+".join(str(t) for t in self.terms)


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    dest: Optional[Register] = None
    sources: Tuple[Operand, ...] = ()
    address: Optional[Address] = None
    cond: Optional[Condition] = None
    target: Optional[str] = None
    obs_tag: Optional[ObsTag] = None
    obs_expr: Optional[ObsExpr] = None
    shadow: bool = False
    note: Optional[str] = None

    @property
    def is_conditional_branch(self) -> bool:
        return self.opcode == Opcode.BRANCH

    @property
    def is_memory(self) -> bool:
        return self.opcode in (Opcode.LOAD, Opcode.STORE)

    def registers_read(self) -> List[Register]:
        regs = [s for s in self.sources if isinstance(s, Register)]
        if self.address is not None and self.address.base is not None:
            regs.append(self.address.base)
        if self.obs_expr is not None:
            regs.extend(self.obs_expr.registers())
        return regs

    def registers_written(self) -> List[Register]:
        return [self.dest] if self.dest is not None else []

    def with_note(self, note: Optional[str]) -> "Instruction":
        return _replace(self, note=note)

    def as_shadow(self) -> "Instruction":
        return _replace(self, shadow=True, note=None)

    def mnemonic(self) -> str:
        if self.opcode == Opcode.BRANCH:
            return f"b.{self.cond.value}"
        return self.opcode.value

    def __str__(self) -> str:
        prefix = "s." if self.shadow else ""
        op = self.opcode
        if op == Opcode.LOAD:
            body = f"load {self.dest}, {self.address}"
        elif op == Opcode.STORE:
            body = f"store {self.sources[0]}, {self.address}"
        elif op == Opcode.MOV:
            body = f"mov {self.dest}, {self.sources[0]}"
        elif op in BINARY_OPCODES:
            body = f"{op.value} {self.dest}, {self.sources[0]}, {self.sources[1]}"
        elif op == Opcode.CMP:
            body = f"cmp {self.sources[0]}, {self.sources[1]}"
        elif op == Opcode.BRANCH:
            body = f"b.{self.cond.value} {self.target}"
        elif op == Opcode.JMP:
            body = f"jmp {self.target}"
        elif op == Opcode.CSEL:
            body = f"csel {self.dest}, {self.sources[0]}, {self.sources[1]}, {self.cond.value}"
        elif op == Opcode.OBS:
            body = f"obs {self.obs_tag.value} {self.obs_expr}"
        else:
            body = op.value
        text = prefix + body
        if self.note:
            text = f"{text}  ; {self.note}"
        return text


def _replace(instr: Instruction, **changes) -> Instruction:
    return replace(instr, **changes)


@dataclass(frozen=True)
class DataItem:
    """データ領域の名前付き項目。fixed_value は .word の固定初期値"""

    name: str
    address: int
    size: int
    fixed_value: Optional[int] = None

    @property
    def end(self) -> int:
        return self.address + self.size

    def contains(self, address: int) -> bool:
        return self.address <= address < self.end


@dataclass(frozen=True)
class Program:
    instructions: Tuple[Instruction, ...]
    labels: Mapping[str, int] = field(default_factory=dict)
    data: Tuple[DataItem, ...] = ()
    security: Mapping[str, SecurityLabel] = field(default_factory=dict)
    entry: Optional[str] = None
    addrspace: int = 4096
    initial_observations: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.instructions)

    def __getitem__(self, index: int) -> Instruction:
        return self.instructions[index]

    @property
    def entry_index(self) -> int:
        return self.labels[self.entry] if self.entry is not None else 0

    def target_index(self, label: str) -> int:
        return self.labels[label]

    def labels_at(self, index: int) -> List[str]:
        return [name for name, i in self.labels.items() if i == index]

    def data_item(self, name: str) -> Optional[DataItem]:
        for item in self.data:
            if item.name == name:
                return item
        return None

    def data_end(self) -> int:
        return max((item.end for item in self.data), default=0)

    def security_label(self, name: str) -> SecurityLabel:
        """未ラベルの名前は secret として扱う"""
        return self.security.get(name, SecurityLabel.SECRET)

    def public_registers(self) -> List[int]:
        result = []
        for index in range(NUM_REGISTERS):
            if self.security_label(str(Register(index))) == SecurityLabel.PUBLIC:
                result.append(index)
        return result

    def public_data(self) -> List[DataItem]:
        return [d for d in self.data if self.security_label(d.name) == SecurityLabel.PUBLIC]

    def is_public_address(self, address: int) -> bool:
        return any(d.contains(address) for d in self.public_data())

    def fixed_cells(self) -> Dict[int, int]:
        return {d.address: d.fixed_value for d in self.data if d.fixed_value is not None}

    def used_registers(self) -> set:
        used = set()
        for instr in self.instructions:
            used.update(r.index for r in instr.registers_read())
            used.update(r.index for r in instr.registers_written())
        for name in self.initial_observations:
            if self.data_item(name) is None:
                used.add(register_index(name))
        return used

    def branch_indices(self) -> List[int]:
        return [i for i, ins in enumerate(self.instructions)
                if ins.is_conditional_branch and not ins.shadow]

    @property
    def has_shadow(self) -> bool:
        return any(ins.shadow or ins.opcode in (Opcode.SBEGIN, Opcode.SEND)
                   for ins in self.instructions)

    def successors(self, index: int) -> List[int]:
        """制御フロー上の後続命令のインデックス"""
        instr = self.instructions[index]
        if instr.opcode == Opcode.HALT:
            return []
        if instr.opcode == Opcode.JMP:
            return [self.labels[instr.target]]
        following = [index + 1] if index + 1 < len(self.instructions) else []
        if instr.opcode == Opcode.BRANCH:
            taken = self.labels[instr.target]
            return following + ([taken] if taken not in following else [])
        return following

    def validate(self) -> "Program":
        """ラベル解決とデータ配置の検証。問題があれば AssemblyError"""
        count = len(self.instructions)
        for name, index in self.labels.items():
            if not 0 <= index < count:
                raise AssemblyError(f"ラベル {name} に命令がありません", code="dangling-label")
        for index, instr in enumerate(self.instructions):
            if instr.target is not None and instr.target not in self.labels:
                raise AssemblyError(f"未定義のラベルです: {instr.target}", code="undefined-label")
        if self.entry is not None and self.entry not in self.labels:
            raise AssemblyError(f"未定義のエントリラベルです: {self.entry}", code="undefined-label")
        ordered = sorted(self.data, key=lambda d: d.address)
        for first, second in zip(ordered, ordered[1:]):
            if first.end > second.address:
                raise AssemblyError(f"データ領域が重なっています: {first.name}, {second.name}",
                                    code="data-overlap")
        if self.data_end() > self.addrspace:
            raise AssemblyError("データ領域がアドレス空間に収まりません", code="addrspace-range")
        return self


def find_back_edge(program: Program) -> Optional[int]:
    """エントリから到達可能な閉路があれば、その戻り辺の元の命令インデックス"""
    WHITE, GREY, BLACK = 0, 1, 2
    color = [WHITE] * len(program)
    stack = [(program.entry_index, iter(program.successors(program.entry_index)))]
    color[program.entry_index] = GREY
    while stack:
        node, successors = stack[-1]
        advanced = False
        for nxt in successors:
            if color[nxt] == GREY:
                return node
            if color[nxt] == WHITE:
                color[nxt] = GREY
                stack.append((nxt, iter(program.successors(nxt))))
                advanced = True
                break
        if not advanced:
            color[node] = BLACK
            stack.pop()
    return None


@dataclass(frozen=True)
class Observation:
    kind: ObservationKind
    value: Union[int, bool]
    shadow_id: Optional[int] = None
    pc: Optional[int] = None

    def __str__(self) -> str:
        value = str(self.value).lower() if isinstance(self.value, bool) else format_hex(self.value)
        return f"{self.kind.value}({value})"


@dataclass
class MachineState:
    """単一所有の可変な機械状態"""

    registers: List[int]
    memory: bytearray
    flags: int = 0
    pc: int = 0
    halted: bool = False
    shadow_registers: Optional[List[int]] = None
    shadow_flags: int = 0
    shadow_memory: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def create(cls, program: Program, registers: Optional[Mapping[int, int]] = None,
               memory: Optional[Mapping[int, int]] = None) -> "MachineState":
        regs = [0] * NUM_REGISTERS
        for index, value in (registers or {}).items():
            regs[index] = value & WORD_MASK
        mem = bytearray(program.addrspace)
        for address, value in (memory or {}).items():
            if 0 <= address < program.addrspace:
                mem[address] = value & 0xFF
        for address, value in program.fixed_cells().items():
            mem[address] = value & 0xFF
        return cls(registers=regs, memory=mem, pc=program.entry_index)

    def copy(self) -> "MachineState":
        return MachineState(
            registers=list(self.registers),
            memory=bytearray(self.memory),
            flags=self.flags,
            pc=self.pc,
            halted=self.halted,
            shadow_registers=list(self.shadow_registers) if self.shadow_registers is not None else None,
            shadow_flags=self.shadow_flags,
            shadow_memory=dict(self.shadow_memory),
        )

    def read_byte(self, address: int) -> int:
        if not 0 <= address < len(self.memory):
            raise MachineFault(f"アドレス空間外へのアクセスです: {format_hex(address)}",
                               address=address, pc=self.pc)
        return self.memory[address]

    def write_byte(self, address: int, value: int) -> None:
        if not 0 <= address < len(self.memory):
            raise MachineFault(f"アドレス空間外へのアクセスです: {format_hex(address)}",
                               address=address, pc=self.pc)
        self.memory[address] = value & 0xFF

    def architectural_view(self, ignore_registers: Tuple[int, ...] = ()) -> tuple:
        """影状態を除いた比較用のビュー"""
        regs = tuple(v for i, v in enumerate(self.registers) if i not in ignore_registers)
        return regs, self.flags, bytes(self.memory), self.halted
