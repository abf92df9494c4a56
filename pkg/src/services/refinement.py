"""
観測の洗練
誤予測される分岐ごとに影コード(影状態上のフラグメント)を挿入する変換と、
洗練された観測列から基本モデルの観測列への射影
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from config.settings import settings
from src.models.program import Instruction, ObsTag, Opcode, Program
from src.services.relation import ObsModel, add_public_labels, distinguishing_constraint
from src.services.solver import make_solver
from src.services.symbolic_executor import sym_execute
from src.utils.exceptions import RefinementError, RelationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinementSpec:
    """誤予測させる分岐の集合と、影コピーで条件を反転するかどうか"""

    branches: Tuple[int, ...]
    negate: Mapping[int, bool] = field(default_factory=dict)
    d_shadow: int = settings.D_SHADOW

    def negates(self, index: int) -> bool:
        return self.negate.get(index, True)

    @property
    def label(self) -> str:
        if not self.branches:
            return "none"
        parts = [f"{i}" if self.negates(i) else f"{i}:keep" for i in self.branches]
        return "+".join(parts)

    def validate(self, program: Program) -> None:
        if program.has_shadow:
            raise RefinementError("影コードを含むプログラムはさらに洗練できません", code="nested-shadow")
        if self.d_shadow < 1:
            raise RefinementError("d_shadow は 1 以上で指定してください", code="invalid-depth")
        for index in self.branches:
            if not 0 <= index < len(program) or not program[index].is_conditional_branch:
                raise RefinementError(f"命令 {index} は条件分岐ではありません", code="invalid-branch")
        for index in self.negate:
            if index not in self.branches:
                raise RefinementError(f"選択されていない分岐 {index} に反転指定があります",
                                      code="invalid-branch")


@dataclass
class Fragment:
    number: int
    branch: int
    start: int
    end: int
    fence_truncated: bool = False
    end_truncated: bool = False


@dataclass
class ShadowedProgram:
    original: Program
    program: Program
    spec: RefinementSpec
    shadow_map: Dict[int, int] = field(default_factory=dict)
    fragments: List[Fragment] = field(default_factory=list)

    @property
    def flags(self) -> List[str]:
        """変換時に発生した打ち切りの種類"""
        out = []
        if any(f.fence_truncated for f in self.fragments):
            out.append("fence-truncated")
        if any(f.end_truncated for f in self.fragments):
            out.append("end-truncated")
        return out


def reachable_from(program: Program, start: int) -> set:
    seen = set()
    stack = list(program.successors(start))
    while stack:
        index = stack.pop()
        if index in seen:
            continue
        seen.add(index)
        stack.extend(program.successors(index))
    return seen


def outermost_branches(program: Program, branches: Iterable[int]) -> List[int]:
    """他の選択分岐から到達できない選択分岐"""
    selected = sorted(set(branches))
    reach = {b: reachable_from(program, b) for b in selected}
    return [b for b in selected if not any(b in reach[o] for o in selected if o != b)]


class _FragmentBuilder:
    def __init__(self, program: Program, spec: RefinementSpec, number: int, branch: int,
                 taken_names: set):
        self.program = program
        self.spec = spec
        self.number = number
        self.branch = branch
        self.taken_names = taken_names
        self.end_label = self._fresh(f"End_{number}")
        self.code: List[Tuple[Optional[str], Instruction, Optional[int]]] = []
        self.blocks: Dict[Tuple[int, int], str] = {}
        self.pending: List[Tuple[int, int]] = []
        self.counter = 0
        self.fence_truncated = False
        self.end_truncated = False

    def _fresh(self, name: str) -> str:
        while name in self.taken_names:
            name += "_"
        self.taken_names.add(name)
        return name

    def _block_label(self, index: int, remaining: int) -> str:
        key = (index, remaining)
        if key not in self.blocks:
            self.blocks[key] = self._fresh(f"S{self.number}_{self.counter}")
            self.counter += 1
            self.pending.append(key)
        return self.blocks[key]

    def _jump(self, label: Optional[str], target: str) -> None:
        self.code.append((label, Instruction(Opcode.JMP, target=target, shadow=True), None))

    def build(self) -> List[Tuple[Optional[str], Instruction, Optional[int]]]:
        self._block_label(self.branch, self.spec.d_shadow)
        emitted = set()
        while self.pending:
            key = self.pending.pop(0)
            if key in emitted:
                continue
            emitted.add(key)
            self._emit_block(*key)
        return self.code

    def _emit_block(self, index: int, remaining: int) -> None:
        label: Optional[str] = self.blocks[(index, remaining)]
        program = self.program
        while True:
            if remaining == 0:
                self._jump(label, self.end_label)
                return
            if index >= len(program):
                self.end_truncated = True
                self._jump(label, self.end_label)
                return
            if label is None and (index, remaining) in self.blocks:
                self._jump(None, self.blocks[(index, remaining)])
                return
            instr = program[index]
            if instr.opcode == Opcode.HALT:
                self._jump(label, self.end_label)
                return
            if instr.opcode == Opcode.FENCE:
                self.fence_truncated = True
                self._jump(label, self.end_label)
                return
            if instr.opcode == Opcode.JMP:
                index = program.target_index(instr.target)
                continue
            if instr.opcode == Opcode.BRANCH:
                cond = instr.cond
                if index in self.spec.branches and self.spec.negates(index):
                    cond = cond.negate()
                target = self._block_label(program.target_index(instr.target), remaining - 1)
                copy = Instruction(Opcode.BRANCH, cond=cond, target=target, shadow=True)
                self.code.append((label, copy, None))
            elif instr.opcode == Opcode.OBS:
                copy = Instruction(Opcode.OBS, obs_tag=ObsTag.REFINED, obs_expr=instr.obs_expr, shadow=True)
                self.code.append((label, copy, index))
            else:
                tracked = index if instr.is_memory else None
                self.code.append((label, instr.as_shadow(), tracked))
            label = None
            index += 1
            remaining -= 1


def apply_refinement(program: Program, spec: RefinementSpec) -> ShadowedProgram:
    """
    選択された分岐ごとに影フラグメントを挿入したプログラムを作る。

    配置は Start_k: sbegin / フラグメント / End_k: send / 元の分岐 の順で、
    元の分岐に付いていたラベルは sbegin に移る。

    Args:
        program (Program): ループ展開済みのプログラム
        spec (RefinementSpec): 洗練の指定

    Returns:
        ShadowedProgram: 変換後のプログラムと影観測の対応表

    Raises:
        RefinementError: 分岐でない命令の選択、入れ子の影コード、d_shadow が不正
    """
    spec.validate(program)
    if not spec.branches:
        return ShadowedProgram(original=program, program=program, spec=spec)

    outer = outermost_branches(program, spec.branches)
    taken_names = set(program.labels)
    builders: Dict[int, _FragmentBuilder] = {}
    for number, branch in enumerate(outer):
        builder = _FragmentBuilder(program, spec, number, branch, taken_names)
        builders[branch] = builder

    rows: List[Tuple[List[str], Instruction, Optional[int]]] = []
    fragments: List[Fragment] = []
    for index, instr in enumerate(program.instructions):
        labels = program.labels_at(index)
        builder = builders.get(index)
        if builder is None:
            rows.append((labels, instr, None))
            continue
        start_label = builder._fresh(f"Start_{builder.number}")
        start = len(rows)
        rows.append((labels + [start_label], Instruction(Opcode.SBEGIN), None))
        for label, code, origin in builder.build():
            rows.append(([label] if label else [], code, origin))
        end = len(rows)
        rows.append(([builder.end_label], Instruction(Opcode.SEND), None))
        rows.append(([], instr, None))
        fragments.append(Fragment(builder.number, index, start, end,
                                  builder.fence_truncated, builder.end_truncated))
        if builder.fence_truncated:
            logger.warning("分岐 %d の影フラグメントが fence で打ち切られました", index)
        if builder.end_truncated:
            logger.warning("分岐 %d の影フラグメントがプログラム末尾で打ち切られました", index)

    labels: Dict[str, int] = {}
    shadow_map: Dict[int, int] = {}
    for new_index, (names, instr, origin) in enumerate(rows):
        for name in names:
            labels[name] = new_index
        if instr.shadow and (origin is not None):
            shadow_map[new_index] = origin
    transformed = Program(
        instructions=tuple(instr for _, instr, _ in rows),
        labels=labels,
        data=program.data,
        security=dict(program.security),
        entry=program.entry,
        addrspace=program.addrspace,
        initial_observations=program.initial_observations,
    ).validate()
    logger.info("洗練 %s: フラグメント %d, 影観測 %d", spec.label, len(fragments), len(shadow_map))
    return ShadowedProgram(original=program, program=transformed, spec=spec,
                           shadow_map=shadow_map, fragments=fragments)


def project_observations(observations: Sequence) -> list:
    """洗練でのみ現れる観測(影アクセスと refined 注釈)を取り除く"""
    return [o for o in observations if not o.kind.is_refined]


def candidate_specs(program: Program, d_shadow: Optional[int] = None,
                    max_branches: Optional[int] = None) -> List[RefinementSpec]:
    """
    洗練の候補。分岐数の昇順、同数なら分岐インデックスの辞書順に並べる。

    候補では選択した分岐をすべて反転する。内側の分岐を keep にした指定は、
    その分岐を選ばない候補と同じ影プログラムになる(フラグメント内の未選択の分岐は
    元の条件のまま写される)ので列挙しない。
    """
    branches = program.branch_indices()
    limit = len(branches) if max_branches is None else min(max_branches, len(branches))
    depth = d_shadow if d_shadow is not None else settings.D_SHADOW
    specs = []
    for size in range(1, limit + 1):
        for subset in itertools.combinations(branches, size):
            specs.append(RefinementSpec(branches=subset, d_shadow=depth))
    return specs


def enumerate_refinements(program: Program, solver=None, filter_unusable: bool = True,
                          d_shadow: Optional[int] = None,
                          max_branches: Optional[int] = None) -> List[RefinementSpec]:
    """
    洗練の候補を列挙し、使えないものを除く。

    影観測で区別できる入力組が存在しない候補(識別制約が充足不能)は除外する。

    Args:
        program (Program): 対象プログラム
        solver: 充足可能性判定サービス(省略時は設定のバックエンド)
        filter_unusable (bool): False なら除外せずに全候補を返す

    Returns:
        List[RefinementSpec]: 候補(空なら使える洗練がない)
    """
    specs = candidate_specs(program, d_shadow, max_branches)
    if not filter_unusable:
        return specs
    solver = solver if solver is not None else make_solver()
    usable = []
    for spec in specs:
        shadowed = apply_refinement(program, spec)
        tree = sym_execute(shadowed.program, solver=solver)
        try:
            constraint = distinguishing_constraint(tree, ObsModel.base(), ObsModel.top(tree))
        except RelationError:
            logger.debug("洗練 %s は影観測を持たないため除外します", spec.label)
            continue
        constraint = add_public_labels(constraint, program)
        if solver.check(constraint.formula).is_unsat:
            logger.info("洗練 %s は区別可能な入力を持たないため除外します", spec.label)
            continue
        usable.append(spec)
    return usable
