"""
実験のデータモデル
テスト入力の組、訓練入力、実験計画、判定結果
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, List, Optional, Sequence, Tuple

from config.settings import settings
from src.models.microarch import LineKey, MicroConfig
from src.models.program import MachineState, Program


@dataclass
class StatePair:
    """同じパスを通り、基本モデルでは観測等価な2つの初期状態"""

    s1: MachineState
    s2: MachineState
    leaf_id: Optional[int] = None
    model_ids: Tuple[str, ...] = ()
    seed: int = 0


@dataclass
class TrainingInput:
    """テスト対象とは別のパスを通る、分岐予測器の訓練用の状態"""

    state: MachineState
    leaf_id: int


@dataclass
class ExperimentPlan:
    program: Program
    pair: StatePair
    training: List[TrainingInput] = field(default_factory=list)
    config: MicroConfig = field(default_factory=MicroConfig)
    cache_configs: int = settings.CACHE_CONFIGS
    iterations: int = settings.ITERATIONS
    theta_present: float = settings.THETA_PRESENT
    theta_agree: float = settings.THETA_AGREE
    seed: int = settings.DEFAULT_SEED
    training_runs: int = settings.TRAINING_RUNS

    def validate(self) -> "ExperimentPlan":
        # --- 型チェック ---
        if not 0 < self.theta_present <= 1:
            raise ValueError("θ_present は 0 より大きく 1 以下で指定してください")
        if not 0 < self.theta_agree <= 1:
            raise ValueError("θ_agree は 0 より大きく 1 以下で指定してください")
        if self.iterations < 1 or self.cache_configs < 1:
            raise ValueError("反復回数とキャッシュ構成数は 1 以上で指定してください")
        return self


class Classification(str, Enum):
    COUNTEREXAMPLE = "counterexample"
    NO_LEAK = "conclusive-no-leak"
    INCONCLUSIVE = "inconclusive"


@dataclass
class ConfigEvidence:
    """1つのキャッシュ構成での反復ごとのプローブ結果(プログラムが格納したラインのみ)"""

    index: int
    runs1: List[FrozenSet[LineKey]] = field(default_factory=list)
    runs2: List[FrozenSet[LineKey]] = field(default_factory=list)

    def counts(self) -> Tuple[dict, dict]:
        n1, n2 = {}, {}
        for runs, counts in ((self.runs1, n1), (self.runs2, n2)):
            for probe in runs:
                for line in probe:
                    counts[line] = counts.get(line, 0) + 1
        return n1, n2

    @property
    def union(self) -> FrozenSet[LineKey]:
        lines = set()
        for probe in list(self.runs1) + list(self.runs2):
            lines |= probe
        return frozenset(lines)


@dataclass
class LeakVerdict:
    classification: Classification
    evidence: List[ConfigEvidence] = field(default_factory=list)
    distinguishing_lines: List[LineKey] = field(default_factory=list)
    retried: bool = False
    plan_hash: str = ""

    @property
    def is_counterexample(self) -> bool:
        return self.classification == Classification.COUNTEREXAMPLE


def dimensions(evidence: Sequence[ConfigEvidence]) -> Tuple[int, int]:
    """(構成数, 反復回数)"""
    if not evidence:
        return 0, 0
    return len(evidence), len(evidence[0].runs1)
