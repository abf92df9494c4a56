"""
マイクロアーキテクチャのデータモデル
シミュレータの設定(プロファイル)、キャッシュ状態、分岐予測器、実行結果
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.models.program import MachineState, Observation
from src.utils.helpers import is_power_of_two


class PredictorKind(str, Enum):
    TWO_BIT = "two-bit"
    ALWAYS_MISPREDICT = "always-mispredict"
    ALWAYS_CORRECT = "always-correct"


class CacheGeometry(BaseModel):
    """キャッシュの形状(セット数、ウェイ数、ラインのバイト数)。置換は LRU"""

    model_config = ConfigDict(frozen=True)

    sets: int = 16
    ways: int = 2
    line_bytes: int = 16

    @field_validator('sets', 'ways')
    @classmethod
    def validate_power_of_two(cls, v):
        if not is_power_of_two(v):
            raise ValueError('セット数とウェイ数は2のべき乗で指定してください')
        return v

    @field_validator('line_bytes')
    @classmethod
    def validate_line_bytes(cls, v):
        if v < 4 or not is_power_of_two(v):
            raise ValueError('ラインのバイト数は4以上の2のべき乗で指定してください')
        return v

    def line_number(self, address: int) -> int:
        return address // self.line_bytes

    def set_index(self, address: int) -> int:
        return self.line_number(address) % self.sets

    def tag(self, address: int) -> int:
        return self.line_number(address) // self.sets

    def line_address(self, set_index: int, tag: int) -> int:
        return (tag * self.sets + set_index) * self.line_bytes


class MicroConfig(BaseModel):
    """シミュレータのプロファイル"""

    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    description: str = ""
    window: int = 64            # cycles
    base_latency: int = 1
    miss_penalty: int = 30
    fence_latency: int = 10
    mispredict_penalty: int = 8
    resolve_delay: int = 4
    predictor: PredictorKind = PredictorKind.TWO_BIT
    cache: CacheGeometry = Field(default_factory=CacheGeometry)
    eviction_noise: float = 0.0

    @field_validator('window', 'miss_penalty', 'fence_latency', 'mispredict_penalty', 'resolve_delay')
    @classmethod
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError('サイクル数は0以上で指定してください')
        return v

    @field_validator('base_latency')
    @classmethod
    def validate_base_latency(cls, v):
        if v < 1:
            raise ValueError('基本レイテンシは1以上で指定してください')
        return v

    @field_validator('eviction_noise')
    @classmethod
    def validate_noise(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError('追い出しノイズは0以上1以下で指定してください')
        return v


@dataclass
class CacheLine:
    tag: int
    by_program: bool = True
    valid: bool = True


LineKey = Tuple[int, int]


@dataclass
class CacheState:
    """
    セットごとのライン列。各リストは先頭が LRU、末尾が MRU。
    """

    geometry: CacheGeometry
    sets: List[List[CacheLine]] = field(default_factory=list)

    def __post_init__(self):
        if not self.sets:
            self.sets = [[] for _ in range(self.geometry.sets)]

    @classmethod
    def empty(cls, geometry: CacheGeometry) -> "CacheState":
        return cls(geometry=geometry)

    def copy(self) -> "CacheState":
        return CacheState(self.geometry, [[CacheLine(l.tag, l.by_program, l.valid) for l in ways]
                                          for ways in self.sets])

    def _find(self, address: int) -> Tuple[int, Optional[int]]:
        index = self.geometry.set_index(address)
        tag = self.geometry.tag(address)
        for position, line in enumerate(self.sets[index]):
            if line.valid and line.tag == tag:
                return index, position
        return index, None

    def contains(self, address: int) -> bool:
        return self._find(address)[1] is not None

    def touch(self, address: int, by_program: bool = True) -> bool:
        """
        アクセスを反映する。ヒットなら MRU に移し、ミスなら LRU を追い出して格納する。

        Returns:
            bool: ヒットしたか
        """
        index, position = self._find(address)
        ways = self.sets[index]
        if position is not None:
            ways.append(ways.pop(position))
            return True
        ways[:] = [line for line in ways if line.valid]
        if len(ways) >= self.geometry.ways:
            ways.pop(0)
        ways.append(CacheLine(self.geometry.tag(address), by_program))
        return False

    def evict(self, key: LineKey) -> None:
        set_index, tag = key
        self.sets[set_index] = [l for l in self.sets[set_index] if not (l.valid and l.tag == tag)]

    def keys(self) -> List[LineKey]:
        return [(s, line.tag) for s, ways in enumerate(self.sets) for line in ways if line.valid]

    def lines(self) -> Set[Tuple[int, int, bool]]:
        return {(s, line.tag, line.by_program) for s, ways in enumerate(self.sets)
                for line in ways if line.valid}

    def __eq__(self, other) -> bool:
        if not isinstance(other, CacheState):
            return NotImplemented
        return self.geometry == other.geometry and [
            [(l.tag, l.by_program, l.valid) for l in ways] for ways in self.sets] == [
            [(l.tag, l.by_program, l.valid) for l in ways] for ways in other.sets]


@dataclass
class PredictorState:
    """分岐命令のインデックスごとの2ビット飽和カウンタ(0-1: not taken, 2-3: taken)"""

    kind: PredictorKind = PredictorKind.TWO_BIT
    counters: Dict[int, int] = field(default_factory=dict)

    INITIAL = 1

    def counter(self, pc: int) -> int:
        return self.counters.get(pc, self.INITIAL)

    def predict(self, pc: int, actual: bool) -> bool:
        if self.kind == PredictorKind.ALWAYS_MISPREDICT:
            return not actual
        if self.kind == PredictorKind.ALWAYS_CORRECT:
            return actual
        return self.counter(pc) >= 2

    def update(self, pc: int, taken: bool) -> None:
        if self.kind != PredictorKind.TWO_BIT:
            return
        value = self.counter(pc)
        self.counters[pc] = min(3, value + 1) if taken else max(0, value - 1)

    def copy(self) -> "PredictorState":
        return PredictorState(self.kind, dict(self.counters))


@dataclass
class TransientLoad:
    address: int
    pc: int
    installed: bool
    hit: bool = False


@dataclass
class RunResult:
    state: MachineState
    cache: CacheState
    cycles: int
    transient_loads: List[TransientLoad] = field(default_factory=list)
    committed_accesses: List[int] = field(default_factory=list)
    suppressed: List[int] = field(default_factory=list)
    observations: List[Observation] = field(default_factory=list)
    mispredictions: int = 0
    predictor: Optional["PredictorState"] = None

    @property
    def transient_addresses(self) -> List[int]:
        return [t.address for t in self.transient_loads if t.installed or t.hit]
