"""
パイプライン
プログラムの読み込みから洗練、記号実行、関係合成、入力生成、リーク検査、強化と最適化までをつなぐ
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import pandas as pd

from config.settings import settings
from src.models.experiment import Classification, LeakVerdict, StatePair, TrainingInput
from src.models.microarch import MicroConfig
from src.models.program import Program, SecurityLabel, find_back_edge, register_index
from src.models.report import (
    CorpusRow, OptimizationRecord, PipelineConfig, Report, StateRecord, TestCaseRecord, TreeSummary,
    VerdictRecord,
)
from src.models.symbolic import SymbolicTree, dump_tree
from src.services.assembler import parse_program, print_program, program_hash
from src.services.data_manager import DataManager
from src.services.input_generator import (
    PairGenerator, PairPool, generate_training, leaf_of, worst_case_input,
)
from src.services.leak_tester import NO_PAIRS_REASON, LeakContext, LeakQuery, has_side_channel_leakage
from src.services.optimizer import (
    LeakOracle, OptimizationResult, measure_cycles, search_removal_orders, validate_counterexamples,
    harden_with_escalation,
)
from src.services.refinement import RefinementSpec, ShadowedProgram, apply_refinement, enumerate_refinements
from src.services.relation import (
    ObsModel, Relation, add_public_labels, distinguishing_constraint, locate_leaking_observations,
)
from src.services.simulator import get_profile
from src.services.solver import SatisfiabilityService, make_solver, to_smtlib
from src.services.symbolic_executor import sym_execute
from src.utils.exceptions import ConfigurationError, UnanalyzableProgramError
from src.utils.helpers import sha256_text

logger = logging.getLogger(__name__)

SINGLE_PATH_MESSAGE = "single-path after constant propagation"


class _NoPairs:
    """区別可能な入力がないときの組の供給元"""

    def next_pair(self) -> Optional[StatePair]:
        return None


@dataclass
class Session:
    """1つの洗練について、検査に必要なものをまとめたもの"""

    program: Program
    spec: Optional[RefinementSpec]
    shadowed: Optional[ShadowedProgram]
    tree: Optional[SymbolicTree]
    constraint: Optional[Relation]
    pool: PairPool
    leak_ctx: LeakContext
    query: Optional[LeakQuery] = None

    @property
    def selected_branches(self) -> Tuple[int, ...]:
        return self.spec.branches if self.spec is not None else ()


@dataclass
class Analysis:
    config: PipelineConfig
    program: Program
    micro: MicroConfig
    solver: SatisfiabilityService
    base_tree: SymbolicTree
    sessions: List[Session] = field(default_factory=list)
    reported: Optional[Session] = None


def load_labels(path: str) -> Dict[str, str]:
    """セキュリティラベルの上書き(JSON: 名前 → public / secret)を読む"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            labels = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"ラベルファイルを読み込めません: {e}", code="invalid-config") from e
    if not isinstance(labels, dict):
        raise ConfigurationError("ラベルファイルはオブジェクトで指定してください", code="invalid-config")
    return {str(k): str(v) for k, v in labels.items()}


def apply_labels(program: Program, labels: Dict[str, str]) -> Program:
    """ラベルを上書きしたプログラムを返す。未知の名前は ConfigurationError"""
    if not labels:
        return program
    security = dict(program.security)
    for name, label in labels.items():
        if program.data_item(name) is None:
            try:
                register_index(name)
            except ValueError as e:
                raise ConfigurationError(f"未知の名前にラベルが指定されました: {name}",
                                         code="invalid-config") from e
        security[name] = SecurityLabel(label)
    return dataclasses.replace(program, security=security)


def load_program(config: PipelineConfig) -> Program:
    path = Path(config.program_path)
    if not path.exists():
        raise ConfigurationError(f"プログラムが見つかりません: {path}", code="invalid-config")
    program = parse_program(path.read_text(encoding='utf-8'))
    return apply_labels(program, config.labels)


def explore(program: Program, solver: SatisfiabilityService) -> SymbolicTree:
    """
    元のプログラムを記号実行し、解析できる形かを確かめる。

    Raises:
        UnanalyzableProgramError: ループを含む場合(loop)、パスが1本しかない場合(single-path)
    """
    back_edge = find_back_edge(program)
    if back_edge is not None:
        raise UnanalyzableProgramError(f"命令 {back_edge} に戻り辺があります(ループは展開してください)",
                                       code="loop")
    tree = sym_execute(program, solver=solver)
    if len(tree.leaves) < 2:
        raise UnanalyzableProgramError(SINGLE_PATH_MESSAGE, code="single-path")
    logger.info("実行木を作成しました: 葉 %d", len(tree.leaves))
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("実行木:\n%s", dump_tree(tree))
    return tree


def select_refinements(program: Program, config: PipelineConfig,
                       solver: SatisfiabilityService) -> List[RefinementSpec]:
    if config.refinement == "explicit":
        return [RefinementSpec(branches=tuple(config.branches), d_shadow=config.d_shadow)]
    return enumerate_refinements(program, solver=solver, d_shadow=config.d_shadow)


def _training_source(base_tree: SymbolicTree, program: Program, solver: SatisfiabilityService,
                     seed: int, selected: Tuple[int, ...]) -> Callable[[StatePair], List[TrainingInput]]:
    cache: Dict[int, List[TrainingInput]] = {}

    def training_for(pair: StatePair) -> List[TrainingInput]:
        leaf = leaf_of(base_tree, pair.s1)
        if leaf is None:
            return []
        if leaf not in cache:
            item = generate_training(base_tree, leaf, solver, seed, program, selected)
            cache[leaf] = [item] if item is not None else []
        return cache[leaf]

    return training_for


def _leak_context(config: PipelineConfig, micro: MicroConfig, pool: PairPool,
                  training_for: Callable[[StatePair], List[TrainingInput]]) -> LeakContext:
    return LeakContext(
        config=micro, pairs=pool, training_for=training_for,
        cache_configs=config.cache_configs, iterations=config.iterations,
        theta_present=config.theta_present, theta_agree=config.theta_agree,
        training_runs=config.training_runs, seed=config.seed,
    )


def build_session(analysis: Analysis, spec: Optional[RefinementSpec]) -> Session:
    """洗練 spec の影プログラムから識別制約と組の供給元を作る(spec が None なら組なし)"""
    program, solver, config = analysis.program, analysis.solver, analysis.config
    selected = spec.branches if spec is not None else ()
    training_for = _training_source(analysis.base_tree, program, solver, config.seed, selected)
    if spec is None:
        pool = PairPool(_NoPairs())
        return Session(program, None, None, None, None, pool,
                       _leak_context(config, analysis.micro, pool, training_for))
    shadowed = apply_refinement(program, spec)
    tree = sym_execute(shadowed.program, solver=solver)
    constraint = distinguishing_constraint(tree, ObsModel.base(), ObsModel.top(tree))
    constraint = add_public_labels(constraint, program)
    generator = PairGenerator(constraint, solver, program, seed=config.seed, tree=tree,
                              geometry=analysis.micro.cache)
    pool = PairPool(generator)
    return Session(program, spec, shadowed, tree, constraint, pool,
                   _leak_context(config, analysis.micro, pool, training_for))


def _verdict_record(index: int, verdict: LeakVerdict) -> VerdictRecord:
    presence = []
    for evidence in verdict.evidence:
        n1, n2 = evidence.counts()
        presence.append([[s, t, n1.get((s, t), 0), n2.get((s, t), 0)] for s, t in sorted(evidence.union)])
    return VerdictRecord(
        pair_index=index,
        classification=verdict.classification.value,
        distinguishing_lines=[[s, t] for s, t in verdict.distinguishing_lines],
        retried=verdict.retried,
        plan_hash=verdict.plan_hash,
        presence=presence,
    )


def _status(query: Optional[LeakQuery]) -> str:
    if query is None:
        return "no-leak"
    if query.leaks:
        return "leak"
    if query.inconclusive:
        return "inconclusive"
    return "no-leak"


def analyze(config: PipelineConfig) -> Tuple[Report, Optional[Analysis]]:
    """
    解析を行い、レポートと(強化で再利用する)解析の状態を返す。

    自動選択では候補の洗練を順に試し、最初に反例が見つかったものを報告する。
    どれもリークしなければ最初の候補の結果を報告する。

    Returns:
        Tuple[Report, Optional[Analysis]]: 解析できないプログラムなら Analysis は None

    Raises:
        ConfigurationError: プロファイルやプログラムが見つからない場合
        AssemblyError: プログラムの構文エラー
    """
    report = Report(config=config)
    program = load_program(config)
    report.program_hash = program_hash(program)
    micro = get_profile(config.profile, config.profiles_path)
    solver = make_solver(config.solver)
    try:
        base_tree = explore(program, solver)
    except UnanalyzableProgramError as e:
        logger.error("解析できないプログラムです: %s", e.message)
        report.status = "error"
        report.error_code = e.code
        report.error_message = e.message
        return report, None

    analysis = Analysis(config, program, micro, solver, base_tree)
    specs = select_refinements(program, config, solver)
    if not specs:
        analysis.reported = build_session(analysis, None)
        report.tree = TreeSummary(leaves=len(base_tree.leaves), restarts=base_tree.restarts,
                                  impossible_paths=base_tree.impossible_paths)
        report.notes.append(NO_PAIRS_REASON)
        logger.info("使える洗練がありません")
        return report, analysis

    for spec in specs:
        session = build_session(analysis, spec)
        session.query = has_side_channel_leakage(program, config.pair_budget, session.leak_ctx)
        analysis.sessions.append(session)
        if session.query.leaks:
            break
    leaking = [s for s in analysis.sessions if s.query.leaks]
    analysis.reported = leaking[0] if leaking else analysis.sessions[0]
    _fill_report(report, analysis)
    return report, analysis


def _fill_report(report: Report, analysis: Analysis) -> None:
    session = analysis.reported
    tree = session.tree
    report.tree = TreeSummary(leaves=len(tree.leaves), restarts=tree.restarts,
                              impossible_paths=tree.impossible_paths, shadow_ids=list(tree.shadow_ids))
    report.refinement = session.spec.label
    report.relation_hash = sha256_text(to_smtlib(session.constraint.formula))
    report.pairs_generated = len(session.pool.pairs)
    report.verdicts = [_verdict_record(i, v) for i, v in enumerate(session.query.verdicts)]
    report.status = _status(session.query)
    if session.query.reason:
        report.notes.append(session.query.reason)
    if session.shadowed.flags:
        report.notes.extend(session.shadowed.flags)
    report.leaking_observations = locate_leaking_observations(tree, ObsModel.base(), analysis.solver,
                                                              analysis.program)
    logger.info("解析結果: %s (洗練 %s)", report.status, report.refinement)


def cmd_analyze(config: PipelineConfig, export_name: Optional[str] = None) -> Report:
    """解析し、export_name があれば生成した組をテストケースとして保存する"""
    report, analysis = analyze(config)
    if export_name and analysis is not None and analysis.reported is not None:
        manager = DataManager(settings.REPORT_DIR)
        records = export_test_cases(analysis, export_name)
        saved = sum(1 for record in records if manager.save_test_case(record))
        logger.info("テストケースを %d 件保存しました: %s", saved, manager.test_case_dir)
    return report


def _optimization_record(result: OptimizationResult) -> OptimizationRecord:
    order = None
    if result.order_search is not None:
        order = {
            "ascending_retained": result.order_search.ascending_retained,
            "best_order": result.order_search.best_order,
            "best_retained": result.order_search.best_retained,
            "improved": result.order_search.improved,
        }
    return OptimizationRecord(
        kind=result.optimized.kind.value,
        points=[{"id": p.id, "site": p.site, "kind": p.kind.value} for p in result.hardened.points],
        retained=result.retained,
        removed=result.removed,
        steps=[dataclasses.asdict(step) for step in result.steps],
        cycles={name: list(stats.as_tuple()) for name, stats in result.cycles.items()},
        validation=[record.classification.value for record in result.validation],
        escalations=result.escalations,
        budget=result.budget,
        order_search=order,
        optimized_program=print_program(result.optimized.program),
    )


def harden(config: PipelineConfig,
           analyzed: Optional[Tuple[Report, Optional[Analysis]]] = None) -> Tuple[Report, Optional[OptimizationResult]]:
    """
    解析でリークが見つかった(または force 指定の)プログラムを強化し、最適化する。

    最適化後のプログラムで元の反例を再実行し、最長パスでのサイクル数を3種類のプログラムで測る。

    Raises:
        EscalationExhaustedError: 全分岐に fence を入れてもリークする場合
    """
    report, analysis = analyzed if analyzed is not None else analyze(config)
    if analysis is None:
        return report, None
    original_status = report.status
    if original_status != "leak" and not config.force:
        report.notes.append("リークが見つからないため強化しません")
        logger.info("リークが見つからないため強化しません")
        return report, None

    session = analysis.reported
    kind = config.hardening or "value-slh"
    result = harden_with_escalation(session.leak_ctx, analysis.program, config.pair_budget, kind,
                                    selected_branches=session.selected_branches)
    if session.query is not None and session.query.counterexample is not None:
        pair = session.pool.pairs[session.query.counterexample]
        validate_counterexamples(result, session.leak_ctx, [pair])
    if config.order_search:
        result.order_search = search_removal_orders(result.hardened,
                                                    LeakOracle(session.leak_ctx, config.pair_budget))

    worst = worst_case_input(analysis.base_tree, analysis.program, analysis.solver, config.seed)
    if worst is not None:
        for name, target in (("original", analysis.program), ("hardened", result.hardened),
                             ("optimized", result.optimized)):
            result.cycles[name] = measure_cycles(target, worst, analysis.micro, seed=config.seed)

    report.optimization = _optimization_record(result)
    report.notes.append(f"original-status: {original_status}")
    failed = [v for v in result.validation if v.classification != Classification.NO_LEAK]
    report.status = "leak" if failed else "no-leak"
    logger.info("強化完了: %s, 残したポイント %s", report.optimization.kind, result.retained)
    return report, result


def cmd_harden(config: PipelineConfig) -> Report:
    report, result = harden(config)
    if result is not None and config.output_path:
        DataManager(settings.REPORT_DIR).save_program(print_program(result.optimized.program), config.output_path)
    return report


def export_test_cases(analysis: Analysis, name: str) -> List[TestCaseRecord]:
    """報告した洗練で生成した組をテストケースにする"""
    session = analysis.reported
    records = []
    for index, pair in enumerate(session.pool.pairs):
        training = [StateRecord.from_state(t.state, analysis.program, t.leaf_id)
                    for t in session.leak_ctx.training_for(pair)]
        records.append(TestCaseRecord(
            name=f"{name}-{index}",
            program_hash=program_hash(analysis.program),
            s1=StateRecord.from_state(pair.s1, analysis.program, pair.leaf_id),
            s2=StateRecord.from_state(pair.s2, analysis.program, pair.leaf_id),
            training=training,
            seed=pair.seed,
            model_ids=list(pair.model_ids),
        ))
    return records


def load_corpus_index(corpus_dir: Optional[str] = None) -> List[dict]:
    path = Path(corpus_dir or settings.CORPUS_DIR) / "index.json"
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"コーパスの索引を読み込めません: {e}", code="invalid-config") from e


def corpus_list(corpus_dir: Optional[str] = None) -> pd.DataFrame:
    rows = [{"name": c["name"], "file": c["file"], "shape": c.get("shape", ""),
             "supported": c.get("supported", True), "description": c.get("description", "")}
            for c in load_corpus_index(corpus_dir)]
    return pd.DataFrame(rows, columns=["name", "file", "shape", "supported", "description"])


def run_corpus_case(case: dict, profile: str, corpus_dir: Optional[str] = None,
                    budget: int = settings.CORPUS_PAIR_BUDGET, seed: int = settings.DEFAULT_SEED,
                    solver: str = settings.SOLVER_BACKEND, profiles_path: Optional[str] = None) -> CorpusRow:
    """1ケースを解析し、リークがあれば value-slh で強化する。失敗は行に記録する"""
    row = CorpusRow(case=case["name"], profile=profile, supported=case.get("supported", True))
    if not row.supported:
        row.status = "error"
        row.error = case.get("unsupported_reason", "unsupported")
        return row
    path = Path(corpus_dir or settings.CORPUS_DIR) / case["file"]
    config = PipelineConfig(program_path=str(path), profile=profile, pair_budget=budget, seed=seed,
                            solver=solver, profiles_path=profiles_path)
    try:
        report, analysis = analyze(config)
        row.status = report.status
        row.error = report.error_code
        row.counterexamples = sum(1 for v in report.verdicts
                                  if v.classification == Classification.COUNTEREXAMPLE.value)
        row.inconclusive = sum(1 for v in report.verdicts
                               if v.classification == Classification.INCONCLUSIVE.value)
        if report.status == "leak":
            hardened, result = harden(config, (report, analysis))
            if result is not None:
                row.slh_points = len(result.hardened.points)
                row.optimized_points = len(result.retained)
                row.cycles_original = hardened.optimization.cycles.get("original")
                row.cycles_hardened = hardened.optimization.cycles.get("hardened")
                row.cycles_optimized = hardened.optimization.cycles.get("optimized")
    except Exception as e:
        logger.error("ケース %s の実行に失敗しました: %s", case["name"], e)
        row.status = "error"
        row.error = getattr(e, "code", type(e).__name__)
    return row


def corpus_frame(rows: List[CorpusRow]) -> pd.DataFrame:
    """集計行を表にする(サイクルは 最大/平均/標準偏差 の文字列)"""
    def triple(values):
        return "-" if values is None else "/".join(f"{v:.1f}" for v in values)

    records = [{
        "case": r.case, "profile": r.profile, "status": r.status,
        "#C": r.counterexamples, "#I": r.inconclusive, "#SLH": r.slh_points, "#OpSLH": r.optimized_points,
        "cycles": triple(r.cycles_original), "cycles_slh": triple(r.cycles_hardened),
        "cycles_opslh": triple(r.cycles_optimized), "error": r.error or "",
    } for r in rows]
    columns = ["case", "profile", "status", "#C", "#I", "#SLH", "#OpSLH", "cycles", "cycles_slh",
               "cycles_opslh", "error"]
    return pd.DataFrame(records, columns=columns)


def cmd_corpus(action: str, profiles: Optional[List[str]] = None, corpus_dir: Optional[str] = None,
               budget: int = settings.CORPUS_PAIR_BUDGET, seed: int = settings.DEFAULT_SEED,
               solver: str = settings.SOLVER_BACKEND,
               profiles_path: Optional[str] = None) -> Tuple[pd.DataFrame, List[CorpusRow]]:
    """
    コーパスの一覧、または全ケースの実行。

    Args:
        action (str): list か run-all
        profiles (Optional[List[str]]): 実行するプロファイル(省略時は shortwin と longwin)

    Returns:
        Tuple[pd.DataFrame, List[CorpusRow]]: 表と集計行(list では行は空)
    """
    if action == "list":
        return corpus_list(corpus_dir), []
    if action != "run-all":
        raise ConfigurationError(f"未知の操作です: {action}", code="invalid-config")
    profiles = profiles or ["shortwin", "longwin"]
    rows = []
    for profile in profiles:
        for case in load_corpus_index(corpus_dir):
            logger.info("コーパス実行: %s (%s)", case["name"], profile)
            rows.append(run_corpus_case(case, profile, corpus_dir, budget, seed, solver, profiles_path))
    return corpus_frame(rows), rows
