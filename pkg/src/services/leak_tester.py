"""
リーク検査の実験プロトコル
状態の組を複数のキャッシュ構成と反復で実行し、プローブ結果から反例・リークなし・判定不能を決める
"""

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import pandas as pd

from config.settings import settings
from src.models.experiment import (
    Classification, ConfigEvidence, ExperimentPlan, LeakVerdict, StatePair, TrainingInput,
)
from src.models.microarch import CacheState, LineKey, MicroConfig
from src.models.program import Program
from src.services.assembler import print_program
from src.services.input_generator import PairPool
from src.services.simulator import apply_eviction_noise, make_cache_configs, run, train_predictor
from src.utils.exceptions import ExperimentAbortedError, MachineFault
from src.utils.helpers import sha256_text

logger = logging.getLogger(__name__)

NO_PAIRS_REASON = "no distinguishable inputs under refined model"
_EPSILON = 1e-9


def _at_least(count: float, fraction: float, total: int) -> bool:
    return count + _EPSILON >= fraction * total


def counterexample_lines(evidence: ConfigEvidence, theta_present: float) -> List[LineKey]:
    """片方の入力で θ_present 以上の割合で現れ、もう片方では一度も現れないライン"""
    iterations = len(evidence.runs1)
    n1, n2 = evidence.counts()
    lines = []
    for line in sorted(evidence.union):
        a, b = n1.get(line, 0), n2.get(line, 0)
        if (_at_least(a, theta_present, iterations) and b == 0) or (
                _at_least(b, theta_present, iterations) and a == 0):
            lines.append(line)
    return lines


def is_conclusive(evidence: ConfigEvidence, theta_agree: float) -> bool:
    """
    全ラインが両方の入力で一度以上現れ、両方に同時に現れたラインが
    和集合の θ_agree 以上を占めるか
    """
    union = evidence.union
    if not union:
        return True
    n1, n2 = evidence.counts()
    if any(n1.get(line, 0) == 0 or n2.get(line, 0) == 0 for line in union):
        return False
    agreed = set()
    for p1, p2 in zip(evidence.runs1, evidence.runs2):
        agreed |= p1 & p2
    return _at_least(len(agreed), theta_agree, len(union))


def classify_evidence(evidence: Sequence[ConfigEvidence], theta_present: float = settings.THETA_PRESENT,
                      theta_agree: float = settings.THETA_AGREE) -> Tuple[Classification, List[LineKey]]:
    """
    記録されたプローブ結果だけから判定を導く

    Returns:
        Tuple[Classification, List[LineKey]]: 判定と、反例なら区別できたライン
    """
    distinguishing: List[LineKey] = []
    for config in evidence:
        for line in counterexample_lines(config, theta_present):
            if line not in distinguishing:
                distinguishing.append(line)
    if distinguishing:
        return Classification.COUNTEREXAMPLE, distinguishing
    if all(is_conclusive(config, theta_agree) for config in evidence):
        return Classification.NO_LEAK, []
    return Classification.INCONCLUSIVE, []


def presence_frame(evidence: Sequence[ConfigEvidence], config: int) -> pd.DataFrame:
    """構成 config のラインごとの出現回数(列: line, s1, s2)"""
    target = evidence[config]
    n1, n2 = target.counts()
    rows = [{"line": f"{s}:{t}", "s1": n1.get((s, t), 0), "s2": n2.get((s, t), 0)}
            for s, t in sorted(target.union)]
    return pd.DataFrame(rows, columns=["line", "s1", "s2"])


def plan_hash(plan: ExperimentPlan) -> str:
    parts = [
        print_program(plan.program),
        bytes(plan.pair.s1.memory).hex(), ",".join(map(str, plan.pair.s1.registers)),
        bytes(plan.pair.s2.memory).hex(), ",".join(map(str, plan.pair.s2.registers)),
        plan.config.model_dump_json(), str(plan.seed), str(plan.cache_configs), str(plan.iterations),
    ]
    return sha256_text("\n".join(parts))


def _probe(cache: CacheState) -> frozenset:
    return frozenset((s, t) for s, t, by_program in cache.lines() if by_program)


def _collect(plan: ExperimentPlan, seed: int) -> List[ConfigEvidence]:
    cfg = plan.config
    program = plan.program
    training = [item for item in plan.training for _ in range(plan.training_runs)]
    predictor = train_predictor(program, training, cfg)
    first = run(program, plan.pair.s1, CacheState.empty(cfg.cache), predictor, cfg)
    configs = make_cache_configs(first.cache, plan.cache_configs, seed)
    rng = random.Random(seed)
    evidence = []
    for index, start in enumerate(configs):
        record = ConfigEvidence(index=index)
        if cfg.eviction_noise <= 0:
            # ノイズがなければ決定的なので1回の結果を全反復に使う
            p1 = _probe(run(program, plan.pair.s1, start, predictor, cfg).cache)
            p2 = _probe(run(program, plan.pair.s2, start, predictor, cfg).cache)
            record.runs1 = [p1] * plan.iterations
            record.runs2 = [p2] * plan.iterations
        else:
            for _ in range(plan.iterations):
                noisy = apply_eviction_noise(start, cfg.eviction_noise, rng)
                record.runs1.append(_probe(run(program, plan.pair.s1, noisy, predictor, cfg).cache))
                record.runs2.append(_probe(run(program, plan.pair.s2, noisy, predictor, cfg).cache))
        evidence.append(record)
    return evidence


def run_experiment(plan: ExperimentPlan) -> LeakVerdict:
    """
    1組の入力について実験を行い判定する。

    各キャッシュ構成・各反復で、2つの入力は同じキャッシュ状態と同じ予測器状態から実行する。
    判定不能なら追い出しの乱数の種を変えて1回だけやり直す。

    Args:
        plan (ExperimentPlan): 実験計画

    Returns:
        LeakVerdict: 判定と証拠

    Raises:
        ExperimentAbortedError: コミットされる経路でシミュレータが例外を出した場合
    """
    plan.validate()
    digest = plan_hash(plan)
    verdict = None
    for attempt in range(2):
        try:
            evidence = _collect(plan, plan.seed + attempt)
        except MachineFault as e:
            raise ExperimentAbortedError(f"シミュレーション中に例外が発生しました: {e}",
                                         code="simulator-fault") from e
        classification, lines = classify_evidence(evidence, plan.theta_present, plan.theta_agree)
        verdict = LeakVerdict(classification, evidence, lines, retried=attempt > 0, plan_hash=digest)
        if classification != Classification.INCONCLUSIVE:
            break
        if attempt == 0:
            logger.warning("判定不能のため追い出しの種を変えて再実行します")
    logger.info("実験結果: %s", verdict.classification.value)
    return verdict


@dataclass
class LeakContext:
    """リーク検査に必要なもの(組の供給元、訓練入力、プロファイル、プロトコルの設定)"""

    config: MicroConfig
    pairs: PairPool
    training_for: Callable[[StatePair], List[TrainingInput]] = lambda pair: []
    cache_configs: int = settings.CACHE_CONFIGS
    iterations: int = settings.ITERATIONS
    theta_present: float = settings.THETA_PRESENT
    theta_agree: float = settings.THETA_AGREE
    training_runs: int = settings.TRAINING_RUNS
    seed: int = settings.DEFAULT_SEED

    def plan(self, program: Program, pair: StatePair) -> ExperimentPlan:
        return ExperimentPlan(
            program=program, pair=pair, training=self.training_for(pair), config=self.config,
            cache_configs=self.cache_configs, iterations=self.iterations,
            theta_present=self.theta_present, theta_agree=self.theta_agree,
            seed=self.seed, training_runs=self.training_runs,
        )


@dataclass
class LeakQuery:
    leaks: bool
    verdicts: List[LeakVerdict] = field(default_factory=list)
    pairs_tested: int = 0
    inconclusive: int = 0
    reason: Optional[str] = None
    counterexample: Optional[int] = None

    @property
    def counterexamples(self) -> int:
        return sum(1 for v in self.verdicts if v.is_counterexample)


def has_side_channel_leakage(program: Program, budget: int, ctx: LeakContext) -> LeakQuery:
    """
    組を最大 budget 個試し、最初の反例で True を返す。

    判定不能の実験は数えるだけで結果は変えない。
    """
    if budget < 1:
        raise ValueError("ペア予算は1以上で指定してください")
    query = LeakQuery(leaks=False)
    for index in range(budget):
        pair = ctx.pairs.pair(index)
        if pair is None:
            if index == 0:
                query.reason = NO_PAIRS_REASON
                logger.info("区別可能な入力がありません")
            break
        verdict = run_experiment(ctx.plan(program, pair))
        query.verdicts.append(verdict)
        query.pairs_tested += 1
        if verdict.classification == Classification.INCONCLUSIVE:
            query.inconclusive += 1
        if verdict.is_counterexample:
            query.leaks = True
            query.counterexample = index
            break
    logger.info("リーク検査: %s (組 %d, 判定不能 %d)", "リークあり" if query.leaks else "リークなし",
                query.pairs_tested, query.inconclusive)
    return query
