"""
強化の最適化
全ポイント有効の状態から上から順に外し、外してもリークしないものだけを取り除く。
強化が不十分なら addr-slh、fence へと段階的に切り替える
"""

import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from config.settings import settings
from src.models.experiment import Classification, StatePair
from src.models.microarch import CacheState, MicroConfig, PredictorState
from src.models.program import MachineState, Program
from src.services.hardening import (
    HardenedProgram, HardeningKind, apply_slh, insert_fences, insert_hardening, remove_hardening,
)
from src.services.leak_tester import LeakContext, LeakQuery, has_side_channel_leakage, run_experiment
from src.services.simulator import apply_eviction_noise, run
from src.utils.exceptions import EscalationExhaustedError, HardeningError, HardeningInsufficientError

logger = logging.getLogger(__name__)


@dataclass
class CycleStats:
    max: float
    mean: float
    stddev: float

    def as_tuple(self) -> tuple:
        return self.max, self.mean, self.stddev


@dataclass
class OptimizationStep:
    point_id: int
    leaks: bool
    retained: bool
    pairs_tested: int = 0
    inconclusive: int = 0


@dataclass
class ValidationRecord:
    pair_index: int
    classification: Classification


@dataclass
class OrderSearchResult:
    ascending_retained: List[int]
    best_order: List[int]
    best_retained: List[int]

    @property
    def improved(self) -> bool:
        return len(self.best_retained) < len(self.ascending_retained)


@dataclass
class OptimizationResult:
    hardened: HardenedProgram
    optimized: HardenedProgram
    retained: List[int]
    removed: List[int]
    steps: List[OptimizationStep] = field(default_factory=list)
    cycles: Dict[str, CycleStats] = field(default_factory=dict)
    validation: List[ValidationRecord] = field(default_factory=list)
    budget: int = 0
    escalations: List[str] = field(default_factory=list)
    order_search: Optional[OrderSearchResult] = None
    leak_queries: int = 0


class LeakOracle:
    """有効なポイントの集合ごとに検査結果を覚えておくリーク検査"""

    def __init__(self, ctx: LeakContext, budget: int):
        self.ctx = ctx
        self.budget = budget
        self.memo: Dict[tuple, LeakQuery] = {}
        self.queries = 0

    def __call__(self, hp: HardenedProgram) -> LeakQuery:
        key = (hp.kind.value, tuple(p.site for p in hp.points), frozenset(hp.active))
        if key not in self.memo:
            self.queries += 1
            self.memo[key] = has_side_channel_leakage(hp.program, self.budget, self.ctx)
        return self.memo[key]


def _greedy(hp: HardenedProgram, oracle: LeakOracle, order: Sequence[int],
            steps: Optional[List[OptimizationStep]] = None) -> HardenedProgram:
    current = hp
    for point_id in order:
        candidate = remove_hardening(current, point_id)
        query = oracle(candidate)
        if query.leaks:
            # 外すとリークするので戻す
            current = insert_hardening(candidate, point_id)
            logger.info("ポイント %d は必要です", point_id)
        else:
            current = candidate
            logger.info("ポイント %d を外しました", point_id)
        if steps is not None:
            steps.append(OptimizationStep(point_id, query.leaks, query.leaks,
                                          query.pairs_tested, query.inconclusive))
    return current


def selective_slh(hp: HardenedProgram, ctx: LeakContext, budget: int = settings.PAIR_BUDGET,
                  oracle: Optional[LeakOracle] = None) -> OptimizationResult:
    """
    強化ポイントを番号の昇順に1つずつ外し、リークが見つかれば戻す。

    Args:
        hp (HardenedProgram): 全ポイントが有効な強化済みプログラム
        ctx (LeakContext): リーク検査の文脈(固定の種と組の供給元)
        budget (int): 1回の検査で試す組の数

    Returns:
        OptimizationResult: 残したポイントと外したポイント、各ステップの判定

    Raises:
        HardeningInsufficientError: 全ポイント有効でもリークする場合
    """
    if not hp.points:
        raise HardeningError("強化ポイントがありません", code="unknown-point")
    oracle = oracle if oracle is not None else LeakOracle(ctx, budget)
    full = hp.with_active(hp.point_ids)
    if oracle(full).leaks:
        raise HardeningInsufficientError(f"{hp.kind.value} を全て適用してもリークします",
                                         code="hardening-insufficient")
    steps: List[OptimizationStep] = []
    optimized = _greedy(full, oracle, sorted(full.point_ids), steps)
    if oracle(optimized).leaks:
        raise HardeningInsufficientError("最適化後のプログラムがリークします", code="hardening-insufficient")
    retained = sorted(optimized.active)
    removed = sorted(set(full.point_ids) - optimized.active)
    logger.info("最適化完了: 残す %s, 外す %s", retained, removed)
    return OptimizationResult(hardened=full, optimized=optimized, retained=retained, removed=removed,
                              steps=steps, budget=budget, leak_queries=oracle.queries)


def search_removal_orders(hp: HardenedProgram, oracle: LeakOracle,
                          max_points: int = settings.ORDER_SEARCH_MAX_POINTS) -> Optional[OrderSearchResult]:
    """ポイントが少ないときに全ての外す順序を試す(診断用)"""
    ids = sorted(hp.point_ids)
    if len(ids) > max_points:
        return None
    full = hp.with_active(ids)
    ascending = sorted(_greedy(full, oracle, ids).active)
    best_order, best = list(ids), ascending
    for order in itertools.permutations(ids):
        retained = sorted(_greedy(full, oracle, order).active)
        if len(retained) < len(best):
            best_order, best = list(order), retained
    return OrderSearchResult(ascending, best_order, best)


def validate_counterexamples(result: OptimizationResult, ctx: LeakContext,
                             pairs: Sequence[StatePair]) -> List[ValidationRecord]:
    """元のプログラムで反例になった組を最適化後のプログラムで再実行する"""
    records = []
    program = result.optimized.program
    for index, pair in enumerate(pairs):
        verdict = run_experiment(ctx.plan(program, pair))
        records.append(ValidationRecord(index, verdict.classification))
        if verdict.classification != Classification.NO_LEAK:
            logger.warning("反例 %d の再実行結果: %s", index, verdict.classification.value)
    result.validation = records
    return records


def measure_cycles(program: Union[Program, HardenedProgram], worst_case_input: MachineState,
                   cfg: MicroConfig, repetitions: int = settings.CYCLE_REPETITIONS,
                   seed: int = settings.DEFAULT_SEED) -> CycleStats:
    """
    最長パスを通る入力で繰り返し実行したサイクル数の最大・平均・標準偏差

    1回目の実行で温めたキャッシュから始め、ノイズが有効なら毎回ラインを追い出す。
    """
    if repetitions < 1:
        raise ValueError("繰り返し回数は1以上で指定してください")
    target = program.program if isinstance(program, HardenedProgram) else program
    warm = run(target, worst_case_input, CacheState.empty(cfg.cache), None, cfg).cache
    rng = random.Random(seed)
    samples = []
    for _ in range(repetitions):
        start = apply_eviction_noise(warm, cfg.eviction_noise, rng)
        samples.append(run(target, worst_case_input, start, PredictorState(cfg.predictor), cfg).cycles)
    series = pd.Series(samples, dtype=float)
    return CycleStats(max=float(series.max()), mean=float(series.mean()), stddev=float(series.std(ddof=0)))


def _ladder(selected_branches: Sequence[int]) -> List[tuple]:
    levels = [("value-slh", HardeningKind.VALUE_MASK, None), ("addr-slh", HardeningKind.ADDRESS_MASK, None)]
    if selected_branches:
        levels.append(("fence-selected", HardeningKind.FENCE, tuple(selected_branches)))
    levels.append(("fence-all", HardeningKind.FENCE, None))
    return levels


def harden_with_escalation(ctx: LeakContext, program: Program, budget: int = settings.PAIR_BUDGET,
                           start: Union[HardeningKind, str] = HardeningKind.VALUE_MASK,
                           selected_branches: Sequence[int] = ()) -> OptimizationResult:
    """
    value-slh → addr-slh → 選択分岐への fence → 全分岐への fence の順に試し、
    全ポイント有効でリークしない最初の方式で最適化する。

    Raises:
        EscalationExhaustedError: 全分岐に fence を入れてもリークする場合
    """
    start = HardeningKind(start)
    levels = _ladder(selected_branches)
    first = next(i for i, (_, kind, _) in enumerate(levels) if kind == start)
    tried: List[str] = []
    for name, kind, sites in levels[first:]:
        tried.append(name)
        try:
            if kind == HardeningKind.FENCE:
                hp = insert_fences(program, sites)
            else:
                hp = apply_slh(program, kind)
            if not hp.points:
                logger.warning("%s では強化ポイントが作れません", name)
                continue
            result = selective_slh(hp, ctx, budget)
        except HardeningInsufficientError:
            logger.warning("%s では不十分なため次の方式を試します", name)
            continue
        except HardeningError as e:
            logger.warning("%s を適用できません: %s", name, e)
            continue
        result.escalations = tried
        return result
    raise EscalationExhaustedError("全分岐に fence を挿入してもリークが残りました(シミュレータの不具合の可能性)",
                                   code="escalation-exhausted")
