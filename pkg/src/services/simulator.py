"""
投機実行シミュレータ
分岐予測器、サイクル単位の投機ウィンドウ、LRU データキャッシュ、サイクル計数
"""

import json
import logging
import random
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

from pydantic import ValidationError

from config.settings import settings
from src.models.microarch import (
    CacheState, MicroConfig, PredictorKind, PredictorState, RunResult, TransientLoad,
)
from src.models.program import Instruction, MachineState, Opcode, Program, Register
from src.services.interpreter import alu, compare_flags, condition_holds, step_in_place
from src.utils.exceptions import ConfigurationError, MachineFault
from src.utils.helpers import WORD_MASK

logger = logging.getLogger(__name__)

_FLAGS = "flags"


def load_profiles(path: Optional[str] = None) -> Dict[str, MicroConfig]:
    """
    プロファイル設定ファイルを読み込む

    Raises:
        ConfigurationError: ファイルが読めない、または内容が不正な場合
    """
    profile_path = Path(path) if path else Path(settings.PROFILES_PATH)
    try:
        with open(profile_path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"プロファイルを読み込めません: {e}", code="invalid-config")
    profiles = {}
    for name, body in raw.items():
        try:
            profiles[name] = MicroConfig(**{**body, "name": name})
        except ValidationError as e:
            raise ConfigurationError(f"プロファイル {name} が不正です: {e}", code="invalid-config")
    return profiles


def get_profile(name: str, path: Optional[str] = None) -> MicroConfig:
    profiles = load_profiles(path)
    if name not in profiles:
        raise ConfigurationError(f"未知のプロファイルです: {name}", code="unknown-profile")
    return profiles[name]


def probe_cache(cache: CacheState) -> Set[Tuple[int, int, bool]]:
    """有効なラインの一覧 (セット, タグ, プログラムが格納したか)"""
    return cache.lines()


def dump_cache(cache: CacheState) -> str:
    rows = []
    for set_index, tag, by_program in sorted(cache.lines()):
        address = cache.geometry.line_address(set_index, tag)
        rows.append(f"set={set_index} tag={tag} addr=0x{address:x} prog={int(by_program)}")
    return "\n".join(rows)


def apply_eviction_noise(cache: CacheState, probability: float, rng: random.Random) -> CacheState:
    """各ラインを確率 probability で追い出したコピー"""
    noisy = cache.copy()
    if probability <= 0:
        return noisy
    for key in sorted(noisy.keys()):
        if rng.random() < probability:
            noisy.evict(key)
    return noisy


def make_cache_configs(first_run_cache: CacheState, n: int = None, rng_seed: int = 0) -> List[CacheState]:
    """
    実験で使うキャッシュ初期状態を作る。

    0番目は空のキャッシュ、それ以降は最初の実行後のキャッシュから
    ランダムにラインを追い出したもの。
    """
    count = n if n is not None else settings.CACHE_CONFIGS
    if count < 1:
        raise ValueError("キャッシュ構成数は1以上で指定してください")
    rng = random.Random(rng_seed)
    configs = [CacheState.empty(first_run_cache.geometry)]
    for _ in range(count - 1):
        configs.append(apply_eviction_noise(first_run_cache, 0.5, rng))
    return configs


class _Transient:
    """誤予測された分岐から始まる一時的な実行(ウィンドウの終わりで破棄される)"""

    def __init__(self, program: Program, state: MachineState, cache: CacheState,
                 predictor: PredictorState, cfg: MicroConfig, branch: Instruction, predicted: bool):
        self.program = program
        self.registers = list(state.registers)
        self.flags = state.flags
        self.memory = state.memory
        self.cache = cache
        self.predictor = predictor
        self.cfg = cfg
        self.branch = branch
        self.predicted = predicted
        self.ready: Dict[object, int] = {}
        self.flags_from_branch = True
        self.loads: List[TransientLoad] = []
        self.suppressed: List[int] = []

    def _value(self, operand) -> int:
        if isinstance(operand, Register):
            return self.registers[operand.index]
        return operand.value

    def _issue_time(self, t: int, instr: Instruction) -> int:
        deps = [self.ready.get(r.index, 0) for r in instr.registers_read()]
        if instr.opcode in (Opcode.BRANCH, Opcode.CSEL):
            deps.append(self.ready.get(_FLAGS, 0))
        return max([t] + deps)

    def _csel_condition(self, pc: int, instr: Instruction, issue: int) -> bool:
        follows_csdb = pc + 1 < len(self.program) and self.program[pc + 1].opcode == Opcode.CSDB
        resolved = condition_holds(instr.cond, self.flags)
        if follows_csdb or issue >= self.cfg.resolve_delay or not self.flags_from_branch:
            return resolved
        if instr.cond == self.branch.cond:
            return self.predicted
        if instr.cond == self.branch.cond.negate():
            return not self.predicted
        return resolved

    def run(self, start: int) -> None:
        program, cfg = self.program, self.cfg
        window = cfg.window
        t = 0
        pc = start
        steps = 0
        while 0 <= pc < len(program) and steps < settings.MAX_CONCRETE_STEPS:
            steps += 1
            instr = program[pc]
            op = instr.opcode
            issue = self._issue_time(t, instr)
            if issue >= window or op in (Opcode.HALT, Opcode.FENCE):
                break
            done = issue + cfg.base_latency
            next_pc = pc + 1
            if op == Opcode.LOAD:
                address = self._address(instr)
                if not 0 <= address < len(self.memory):
                    self.suppressed.append(address)
                    logger.debug("投機中のアドレス空間外ロードを抑止しました: %#x", address)
                    self.registers[instr.dest.index] = 0
                else:
                    hit = self.cache.contains(address)
                    if not hit:
                        done += cfg.miss_penalty
                    if done <= window:
                        if not hit:
                            self.cache.touch(address)
                        self.loads.append(TransientLoad(address, pc, installed=not hit, hit=hit))
                    self.registers[instr.dest.index] = self.memory[address]
                self.ready[instr.dest.index] = done
            elif op == Opcode.STORE:
                # ストアはバッファされ、破棄される
                pass
            elif op == Opcode.MOV:
                self.registers[instr.dest.index] = self._value(instr.sources[0])
                self.ready[instr.dest.index] = done
            elif op == Opcode.CMP:
                self.flags = compare_flags(self._value(instr.sources[0]), self._value(instr.sources[1]))
                self.flags_from_branch = False
                self.ready[_FLAGS] = done
            elif op == Opcode.CSEL:
                chosen = instr.sources[0] if self._csel_condition(pc, instr, issue) else instr.sources[1]
                self.registers[instr.dest.index] = self._value(chosen)
                self.ready[instr.dest.index] = done
            elif op == Opcode.BRANCH:
                # 入れ子の分岐は予測に従うだけで新しいウィンドウは開かない
                actual = condition_holds(instr.cond, self.flags)
                if self.predictor.predict(pc, actual):
                    next_pc = self.program.target_index(instr.target)
            elif op == Opcode.JMP:
                next_pc = self.program.target_index(instr.target)
            elif op in (Opcode.CSDB, Opcode.NOP, Opcode.OBS, Opcode.SBEGIN, Opcode.SEND):
                pass
            else:
                self.registers[instr.dest.index] = alu(op, self._value(instr.sources[0]),
                                                       self._value(instr.sources[1]))
                self.ready[instr.dest.index] = done
            t = issue + cfg.base_latency
            pc = next_pc

    def _address(self, instr: Instruction) -> int:
        base = self.registers[instr.address.base.index] if instr.address.base is not None else 0
        return (base + instr.address.displacement.value) & WORD_MASK


def run(program: Program, s0: MachineState, cache0: CacheState, predictor: Optional[PredictorState],
        cfg: MicroConfig) -> RunResult:
    """
    プログラムを投機実行付きで実行する。

    誤予測された分岐では、予測された側の命令を最大 W サイクル一時的に実行する。
    一時的な実行はキャッシュにだけ影響し、アーキテクチャ状態には反映されない。

    Args:
        program (Program): 実行するプログラム(影コードを含まないこと)
        s0 (MachineState): 初期状態(変更しない)
        cache0 (CacheState): キャッシュの初期状態(変更しない)
        predictor (Optional[PredictorState]): 予測器の状態(変更しない)。None なら初期状態
        cfg (MicroConfig): プロファイル

    Returns:
        RunResult: 最終状態、キャッシュ、サイクル数、一時ロードの記録

    Raises:
        MachineFault: コミットされる経路でアドレス空間外アクセスが起きた場合
    """
    if s0.shadow_registers is not None or program.has_shadow:
        raise ValueError("影コードを含むプログラムはシミュレートできません")
    state = s0.copy()
    cache = cache0.copy()
    predictor = predictor.copy() if predictor is not None else PredictorState(cfg.predictor)
    result = RunResult(state=state, cache=cache, cycles=0, predictor=predictor)
    steps = 0
    while not state.halted:
        if steps >= settings.MAX_CONCRETE_STEPS:
            raise MachineFault("ステップ上限に達しました", pc=state.pc)
        steps += 1
        pc = state.pc
        instr = program[pc]
        op = instr.opcode
        result.cycles += cfg.base_latency
        if op == Opcode.BRANCH:
            actual = condition_holds(instr.cond, state.flags)
            predicted = predictor.predict(pc, actual)
            if predicted != actual:
                result.mispredictions += 1
                result.cycles += cfg.mispredict_penalty
                if cfg.window > 0:
                    wrong = program.target_index(instr.target) if predicted else pc + 1
                    transient = _Transient(program, state, cache, predictor, cfg, instr, predicted)
                    transient.run(wrong)
                    result.transient_loads.extend(transient.loads)
                    result.suppressed.extend(transient.suppressed)
            predictor.update(pc, actual)
        elif op in (Opcode.LOAD, Opcode.STORE):
            base = state.registers[instr.address.base.index] if instr.address.base is not None else 0
            address = (base + instr.address.displacement.value) & WORD_MASK
            if not 0 <= address < len(state.memory):
                raise MachineFault("アドレス空間外へのアクセスです", address=address, pc=pc)
            if not cache.touch(address):
                result.cycles += cfg.miss_penalty
            result.committed_accesses.append(address)
        elif op == Opcode.FENCE:
            result.cycles += cfg.fence_latency
        observation = step_in_place(state, program)
        if observation is not None:
            result.observations.append(observation)
    logger.debug("シミュレーション完了: %d サイクル, 誤予測 %d, 一時ロード %d",
                 result.cycles, result.mispredictions, len(result.transient_loads))
    return result


def train_predictor(program: Program, training: Sequence, cfg: MicroConfig,
                    predictor: Optional[PredictorState] = None) -> PredictorState:
    """
    訓練入力を投機なしで順に実行し、予測器のカウンタを更新する

    Args:
        training: TrainingInput(state 属性を持つ)または MachineState の列
    """
    state = predictor.copy() if predictor is not None else PredictorState(cfg.predictor)
    if cfg.predictor != PredictorKind.TWO_BIT:
        return state
    quiet = cfg.model_copy(update={"window": 0})
    for item in training:
        initial = getattr(item, "state", item)
        outcome = run(program, initial, CacheState.empty(cfg.cache), state, quiet)
        state = outcome.predictor
    return state
