"""
強化パス
値マスク型・アドレスマスク型の投機的ロード強化(SLH)と fence 挿入。
汚染レジスタ taint は csel + csdb で誤投機を追跡する
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from src.models.program import (
    Address, Condition, Immediate, Instruction, NUM_GENERAL_REGISTERS, Opcode, Program, Register,
    TAINT, TAINT_REGISTER, ZERO, find_back_edge,
)
from src.utils.exceptions import HardeningError
from src.utils.helpers import WORD_MASK

logger = logging.getLogger(__name__)


class HardeningKind(str, Enum):
    VALUE_MASK = "value-slh"
    ADDRESS_MASK = "addr-slh"
    FENCE = "fence"


@dataclass(frozen=True)
class HardeningPoint:
    id: int
    site: int
    kind: HardeningKind
    inserted: Tuple[int, ...] = ()


@dataclass(frozen=True)
class TemplateRow:
    """
    強化テンプレートの1行。

    point が None なら常に出力する。when_active が True なら point が有効なときだけ、
    False なら point が外されたときだけ出力する。
    """

    labels: Tuple[str, ...]
    instr: Instruction
    point: Optional[int] = None
    when_active: bool = True

    def emitted(self, active: FrozenSet[int]) -> bool:
        if self.point is None:
            return True
        return (self.point in active) == self.when_active


@dataclass(frozen=True)
class HardenedProgram:
    base: Program
    kind: HardeningKind
    points: Tuple[HardeningPoint, ...]
    template: Tuple[TemplateRow, ...]
    active: FrozenSet[int]
    taint_register: int = TAINT_REGISTER
    scratch_register: Optional[int] = None

    @property
    def point_ids(self) -> List[int]:
        return [p.id for p in self.points]

    @property
    def removed(self) -> List[int]:
        return [p.id for p in self.points if p.id not in self.active]

    def point(self, point_id: int) -> HardeningPoint:
        for p in self.points:
            if p.id == point_id:
                return p
        raise HardeningError(f"未知の強化ポイントです: {point_id}", code="unknown-point")

    @property
    def program(self) -> Program:
        return materialize(self)

    def with_active(self, ids: Iterable[int]) -> "HardenedProgram":
        ids = frozenset(ids)
        for point_id in ids:
            self.point(point_id)
        return HardenedProgram(self.base, self.kind, self.points, self.template, ids,
                               self.taint_register, self.scratch_register)

    def ignored_registers(self) -> Tuple[int, ...]:
        """意味保存の比較で無視するレジスタ"""
        regs = [self.taint_register]
        if self.scratch_register is not None:
            regs.append(self.scratch_register)
        return tuple(regs)


def materialize(hp: HardenedProgram) -> Program:
    """有効なポイントの命令だけを並べたプログラム。ラベルは位置以降の最初の出力命令に付く"""
    instructions: List[Instruction] = []
    labels: Dict[str, int] = {}
    pending: List[str] = []
    for row in hp.template:
        pending.extend(row.labels)
        if not row.emitted(hp.active):
            continue
        for name in pending:
            labels[name] = len(instructions)
        pending = []
        instructions.append(row.instr)
    if pending:
        raise HardeningError("ラベルの後に命令がありません", code="point-state")
    return Program(
        instructions=tuple(instructions),
        labels=labels,
        data=hp.base.data,
        security=dict(hp.base.security),
        entry=hp.base.entry,
        addrspace=hp.base.addrspace,
        initial_observations=hp.base.initial_observations,
    ).validate()


def _check_program(program: Program) -> None:
    if program.has_shadow:
        raise HardeningError("影コードを含むプログラムは強化できません", code="point-state")
    if TAINT_REGISTER in program.used_registers():
        raise HardeningError("プログラムが taint レジスタを使っています", code="taint-register-used")
    if find_back_edge(program) is not None:
        raise HardeningError("ループを含むプログラムは強化できません", code="point-state")


def _fresh_label(base: str, taken: set) -> str:
    name = base
    while name in taken:
        name += "_"
    taken.add(name)
    return name


def _note(point_id: int) -> str:
    return f"HP{point_id}"


def _taint_update(cond: Condition) -> Tuple[Instruction, Instruction]:
    return (Instruction(Opcode.CSEL, dest=TAINT, sources=(TAINT, ZERO), cond=cond),
            Instruction(Opcode.CSDB))


class _Builder:
    def __init__(self, program: Program, kind: HardeningKind):
        self.program = program
        self.kind = kind
        self.rows: List[TemplateRow] = []
        self.trampolines: List[TemplateRow] = []
        self.points: List[HardeningPoint] = []
        self.taken_names = set(program.labels)

    def new_point(self, site: int, kind: HardeningKind) -> int:
        point_id = len(self.points)
        self.points.append(HardeningPoint(point_id, site, kind))
        return point_id

    def add(self, instr: Instruction, labels=(), point: Optional[int] = None, when_active: bool = True,
            trampoline: bool = False) -> None:
        if point is not None and when_active:
            instr = instr.with_note(_note(point))
        row = TemplateRow(tuple(labels), instr, point, when_active)
        (self.trampolines if trampoline else self.rows).append(row)

    def finish(self, active: Optional[Iterable[int]] = None, scratch: Optional[int] = None) -> HardenedProgram:
        rows = list(self.rows)
        if self.trampolines:
            last = self.program[len(self.program) - 1]
            if last.opcode not in (Opcode.HALT, Opcode.JMP):
                rows.append(TemplateRow((), Instruction(Opcode.HALT)))
            rows.extend(self.trampolines)
        points = []
        for p in self.points:
            inserted = tuple(i for i, row in enumerate(rows) if row.point == p.id and row.when_active)
            points.append(HardeningPoint(p.id, p.site, p.kind, inserted))
        ids = frozenset(p.id for p in points) if active is None else frozenset(active)
        return HardenedProgram(self.program, self.kind, tuple(points), tuple(rows), ids,
                               scratch_register=scratch)


def _scratch_register(program: Program) -> int:
    used = program.used_registers()
    for index in range(NUM_GENERAL_REGISTERS - 1, -1, -1):
        if index not in used:
            return index
    raise HardeningError("アドレスマスク用の空きレジスタがありません", code="no-scratch-register")


def apply_slh(program: Program, kind: Union[HardeningKind, str]) -> HardenedProgram:
    """
    投機的ロード強化を行う。

    入口で taint を全ビット1に初期化し、各条件分岐の両方の後続の先頭で
    csel + csdb により taint を更新する。分岐先側は末尾に置いた中継ブロックを経由する。
    value-slh はロード後に値を taint でマスクし、addr-slh はロード前にアドレスレジスタを
    マスクした一時レジスタを使う。

    Args:
        program (Program): 強化するプログラム(ループなし、taint 未使用)
        kind: value-slh か addr-slh

    Returns:
        HardenedProgram: 全ポイントが有効な強化済みプログラム

    Raises:
        HardeningError: taint レジスタの使用、空きレジスタがない場合など
    """
    kind = HardeningKind(kind)
    if kind == HardeningKind.FENCE:
        return insert_fences(program)
    _check_program(program)
    scratch = _scratch_register(program) if kind == HardeningKind.ADDRESS_MASK else None
    builder = _Builder(program, kind)
    entry = program.entry_index
    for index, instr in enumerate(program.instructions):
        labels = program.labels_at(index)
        if index == entry:
            builder.add(Instruction(Opcode.MOV, dest=TAINT, sources=(Immediate(WORD_MASK),)), labels)
            labels = []
        if instr.opcode == Opcode.LOAD and kind == HardeningKind.VALUE_MASK:
            point = builder.new_point(index, kind)
            builder.add(instr, labels)
            builder.add(Instruction(Opcode.AND, dest=instr.dest, sources=(instr.dest, TAINT)), (), point)
        elif instr.opcode == Opcode.LOAD and instr.address.base is not None:
            point = builder.new_point(index, kind)
            masked = Register(scratch)
            builder.add(Instruction(Opcode.AND, dest=masked, sources=(instr.address.base, TAINT)),
                        labels, point)
            builder.add(Instruction(Opcode.LOAD, dest=instr.dest,
                                    address=Address(masked, instr.address.displacement)), (), point)
            builder.add(instr, (), point, when_active=False)
        elif instr.opcode == Opcode.BRANCH:
            trampoline = _fresh_label(f"T{index}", builder.taken_names)
            builder.add(Instruction(Opcode.BRANCH, cond=instr.cond, target=trampoline), labels)
            for row in _taint_update(instr.cond.negate()):
                builder.add(row)
            update = _taint_update(instr.cond)
            builder.add(update[0], [trampoline], trampoline=True)
            builder.add(update[1], trampoline=True)
            builder.add(Instruction(Opcode.JMP, target=instr.target), trampoline=True)
        else:
            builder.add(instr, labels)
    hardened = builder.finish(scratch=scratch)
    logger.info("%s を適用しました: ポイント %d", kind.value, len(hardened.points))
    return hardened


def insert_fences(program: Program, sites: Optional[Sequence[int]] = None) -> HardenedProgram:
    """
    選んだ分岐の両方の後続の先頭に fence を置く。sites が None なら全分岐。

    各 fence が1つのポイントになる(フォールスルー側、分岐先側の順)。
    """
    if program.has_shadow:
        raise HardeningError("影コードを含むプログラムは強化できません", code="point-state")
    branches = program.branch_indices()
    selected = set(branches if sites is None else sites)
    unknown = selected - set(branches)
    if unknown:
        raise HardeningError(f"条件分岐ではない位置が指定されました: {sorted(unknown)}", code="unknown-point")
    builder = _Builder(program, HardeningKind.FENCE)
    for index, instr in enumerate(program.instructions):
        labels = program.labels_at(index)
        if instr.opcode != Opcode.BRANCH or index not in selected:
            builder.add(instr, labels)
            continue
        fall = builder.new_point(index, HardeningKind.FENCE)
        taken = builder.new_point(index, HardeningKind.FENCE)
        trampoline = _fresh_label(f"T{index}", builder.taken_names)
        builder.add(Instruction(Opcode.BRANCH, cond=instr.cond, target=trampoline), labels)
        builder.add(Instruction(Opcode.FENCE), (), fall)
        builder.add(Instruction(Opcode.FENCE), [trampoline], taken, trampoline=True)
        builder.add(Instruction(Opcode.JMP, target=instr.target), trampoline=True)
    hardened = builder.finish()
    logger.info("fence を挿入しました: %d 箇所", len(hardened.points))
    return hardened


def remove_hardening(hp: HardenedProgram, point_id: int) -> HardenedProgram:
    """ポイントの命令を外す(taint の追跡はそのまま)"""
    hp.point(point_id)
    if point_id not in hp.active:
        raise HardeningError(f"ポイント {point_id} はすでに外されています", code="point-state")
    return hp.with_active(hp.active - {point_id})


def insert_hardening(hp: HardenedProgram, point_id: int) -> HardenedProgram:
    hp.point(point_id)
    if point_id in hp.active:
        raise HardeningError(f"ポイント {point_id} はすでに有効です", code="point-state")
    return hp.with_active(hp.active | {point_id})
