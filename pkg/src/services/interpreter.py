"""
IR の具体実行(1ステップ意味論と観測の発行)
"""

import logging
from typing import List, Optional, Tuple

from config.settings import settings
from src.models.program import (
    Condition, FLAG_C, FLAG_N, FLAG_V, FLAG_Z, Instruction, MachineState,
    Observation, ObservationKind, ObsExpr, ObsTag, Opcode, Program, Register, register_index,
)
from src.utils.exceptions import MachineFault
from src.utils.helpers import WORD_MASK

logger = logging.getLogger(__name__)


def compare_flags(a: int, b: int) -> int:
    """cmp a, b の NZCV"""
    diff = (a - b) & WORD_MASK
    flags = 0
    if diff & 0x80000000:
        flags |= FLAG_N
    if a == b:
        flags |= FLAG_Z
    if a >= b:
        flags |= FLAG_C
    if ((a ^ b) & (a ^ diff)) & 0x80000000:
        flags |= FLAG_V
    return flags


def condition_holds(cond: Condition, flags: int) -> bool:
    if cond == Condition.EQ:
        return bool(flags & FLAG_Z)
    if cond == Condition.NE:
        return not flags & FLAG_Z
    if cond == Condition.LT:
        return not flags & FLAG_C
    return bool(flags & FLAG_C)


def alu(opcode: Opcode, a: int, b: int) -> int:
    if opcode == Opcode.ADD:
        return (a + b) & WORD_MASK
    if opcode == Opcode.SUB:
        return (a - b) & WORD_MASK
    if opcode == Opcode.AND:
        return a & b
    if opcode == Opcode.OR:
        return a | b
    if opcode == Opcode.XOR:
        return a ^ b
    if opcode == Opcode.SHL:
        return (a << (b % 32)) & WORD_MASK
    if opcode == Opcode.SHR:
        return a >> (b % 32)
    if opcode == Opcode.MUL:
        return (a * b) & WORD_MASK
    raise ValueError(f"ALU 命令ではありません: {opcode}")


class _Bank:
    """実行中の命令が読むレジスタ・フラグ・メモリ(通常状態か影状態)"""

    def __init__(self, state: MachineState, shadow: bool):
        self.state = state
        self.shadow = shadow

    @property
    def registers(self) -> List[int]:
        return self.state.shadow_registers if self.shadow else self.state.registers

    def value(self, operand) -> int:
        if isinstance(operand, Register):
            return self.registers[operand.index]
        return operand.value

    @property
    def flags(self) -> int:
        return self.state.shadow_flags if self.shadow else self.state.flags

    @flags.setter
    def flags(self, value: int) -> None:
        if self.shadow:
            self.state.shadow_flags = value
        else:
            self.state.flags = value

    def address(self, instr: Instruction) -> int:
        base = self.registers[instr.address.base.index] if instr.address.base is not None else 0
        return (base + instr.address.displacement.value) & WORD_MASK

    def read(self, address: int) -> int:
        if self.shadow and address in self.state.shadow_memory:
            return self.state.shadow_memory[address]
        return self.state.read_byte(address)

    def write(self, address: int, value: int) -> None:
        if self.shadow:
            if not 0 <= address < len(self.state.memory):
                raise MachineFault("影状態のアクセスがアドレス空間外です", address=address, pc=self.state.pc)
            self.state.shadow_memory[address] = value & 0xFF
        else:
            self.state.write_byte(address, value)


def obs_value(expr: ObsExpr, registers: List[int], flags: int) -> int:
    total = 0
    for term in expr.terms:
        if term.flags:
            total += flags
        elif term.register is not None:
            total += registers[term.register.index] * term.coefficient
        else:
            total += term.immediate.value
    return total & WORD_MASK


def _skip_fragment(state: MachineState, program: Program) -> None:
    index = state.pc + 1
    while program[index].opcode != Opcode.SEND:
        index += 1
    state.pc = index


def step_in_place(state: MachineState, program: Program) -> Optional[Observation]:
    """
    状態を破壊的に1命令進める。

    Returns:
        Optional[Observation]: 命令が発行した観測

    Raises:
        MachineFault: 通常実行のメモリアクセスがアドレス空間外の場合
    """
    if state.halted:
        return None
    pc = state.pc
    instr = program[pc]
    bank = _Bank(state, instr.shadow)
    regs = bank.registers
    op = instr.opcode
    observation: Optional[Observation] = None
    next_pc = pc + 1

    if op == Opcode.LOAD:
        address = bank.address(instr)
        if instr.shadow:
            if not 0 <= address < len(state.memory):
                logger.debug("影フラグメント内のアドレス空間外アクセス pc=%d", pc)
                _skip_fragment(state, program)
                return None
            observation = Observation(ObservationKind.SHADOW_LOAD_ADDRESS, address, shadow_id=pc, pc=pc)
        else:
            observation = Observation(ObservationKind.LOAD_ADDRESS, address, pc=pc)
        regs[instr.dest.index] = bank.read(address)
    elif op == Opcode.STORE:
        address = bank.address(instr)
        if instr.shadow:
            if not 0 <= address < len(state.memory):
                _skip_fragment(state, program)
                return None
            observation = Observation(ObservationKind.SHADOW_STORE_ADDRESS, address, shadow_id=pc, pc=pc)
        else:
            observation = Observation(ObservationKind.STORE_ADDRESS, address, pc=pc)
        bank.write(address, bank.value(instr.sources[0]))
    elif op == Opcode.MOV:
        regs[instr.dest.index] = bank.value(instr.sources[0])
    elif op == Opcode.CMP:
        bank.flags = compare_flags(bank.value(instr.sources[0]), bank.value(instr.sources[1]))
    elif op == Opcode.BRANCH:
        taken = condition_holds(instr.cond, bank.flags)
        if not instr.shadow:
            observation = Observation(ObservationKind.BRANCH_OUTCOME, taken, pc=pc)
        if taken:
            next_pc = program.target_index(instr.target)
    elif op == Opcode.JMP:
        next_pc = program.target_index(instr.target)
    elif op == Opcode.CSEL:
        chosen = instr.sources[0] if condition_holds(instr.cond, bank.flags) else instr.sources[1]
        regs[instr.dest.index] = bank.value(chosen)
    elif op == Opcode.OBS:
        value = obs_value(instr.obs_expr, regs, bank.flags)
        if instr.obs_tag == ObsTag.REFINED:
            observation = Observation(ObservationKind.REFINED_ANNOTATION, value, shadow_id=pc, pc=pc)
        else:
            observation = Observation(ObservationKind.ANNOTATION, value, pc=pc)
    elif op == Opcode.HALT:
        state.halted = True
        return None
    elif op == Opcode.SBEGIN:
        state.shadow_registers = list(state.registers)
        state.shadow_flags = state.flags
        state.shadow_memory = {}
    elif op == Opcode.SEND:
        state.shadow_registers = None
        state.shadow_flags = 0
        state.shadow_memory = {}
    elif op in (Opcode.CSDB, Opcode.FENCE, Opcode.NOP):
        pass
    else:
        regs[instr.dest.index] = alu(op, bank.value(instr.sources[0]), bank.value(instr.sources[1]))

    if next_pc >= len(program):
        # 末尾を越えたら停止扱い
        state.halted = True
    else:
        state.pc = next_pc
    return observation


def eval_step(state: MachineState, program: Program) -> Tuple[MachineState, Optional[Observation]]:
    """
    1命令を実行した次の状態と観測を返す。入力状態は変更しない。

    Args:
        state (MachineState): 現在の状態
        program (Program): 実行するプログラム

    Returns:
        Tuple[MachineState, Optional[Observation]]: 次の状態と観測

    Raises:
        MachineFault: メモリアクセスがアドレス空間外の場合
    """
    if not 0 <= state.pc < len(program):
        raise MachineFault(f"プログラムカウンタが範囲外です: {state.pc}", pc=state.pc)
    successor = state.copy()
    observation = step_in_place(successor, program)
    return successor, observation


def initial_observations(state: MachineState, program: Program) -> List[Observation]:
    observations = []
    for name in program.initial_observations:
        item = program.data_item(name)
        if item is None:
            index = register_index(name)
            observations.append(Observation(ObservationKind.INITIAL_PUBLIC, state.registers[index]))
        else:
            for address in range(item.address, item.end):
                observations.append(Observation(ObservationKind.INITIAL_PUBLIC, state.memory[address]))
    return observations


def run_program(program: Program, state: MachineState,
                max_steps: Optional[int] = None) -> Tuple[MachineState, List[Observation]]:
    """
    halt まで実行し、最終状態と観測列を返す。

    Raises:
        MachineFault: アドレス空間外アクセス、またはステップ上限超過
    """
    limit = max_steps if max_steps is not None else settings.MAX_CONCRETE_STEPS
    current = state.copy()
    trace = initial_observations(current, program)
    steps = 0
    while not current.halted:
        if steps >= limit:
            raise MachineFault(f"ステップ上限({limit})に達しました", pc=current.pc)
        observation = step_in_place(current, program)
        if observation is not None:
            trace.append(observation)
        steps += 1
    return current, trace


def low_equivalent(s1: MachineState, s2: MachineState, program: Program) -> bool:
    """公開レジスタと公開データのバイトが一致するか"""
    for index in program.public_registers():
        if s1.registers[index] != s2.registers[index]:
            return False
    for item in program.public_data():
        if s1.memory[item.address:item.end] != s2.memory[item.address:item.end]:
            return False
    return True


def base_trace(trace: List[Observation]) -> List[Observation]:
    return [o for o in trace if not o.kind.is_refined]


def trace_values(trace: List[Observation]) -> List[tuple]:
    """pc を除いた比較用の観測列"""
    return [(o.kind, o.value) for o in trace]
