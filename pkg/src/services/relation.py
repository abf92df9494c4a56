"""
関係の合成
実行木の自己合成による観測等価関係、識別制約、モデル束の近傍、公開ラベル制約
"""

import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, List, Optional, Sequence

from src.models.program import BASE_OBSERVATION_KINDS, ObservationKind, Program
from src.models.symbolic import (
    FALSE, SymExpr, SymObservation, SymbolicTree, TreeNode, and_, conjunction,
    disjunction, eq, implies, iter_selects, mem_sym, not_, prime, register_symbol, select,
    swap_names, ult, uge, const,
)
from src.services.assembler import program_hash
from src.utils.exceptions import RelationError

logger = logging.getLogger(__name__)

REFINED_KINDS = frozenset({
    ObservationKind.SHADOW_LOAD_ADDRESS,
    ObservationKind.SHADOW_STORE_ADDRESS,
    ObservationKind.REFINED_ANNOTATION,
})


@dataclass(frozen=True)
class ObsModel:
    """
    観測モデル(束の1点)。

    基本の観測種別に加え、shadow_ids に含まれる洗練観測だけを有効にする。
    universe は束の最上位で有効になる洗練観測の全体。
    """

    kinds: FrozenSet[ObservationKind] = BASE_OBSERVATION_KINDS
    shadow_ids: FrozenSet[int] = frozenset()
    universe: FrozenSet[int] = frozenset()
    name: Optional[str] = None

    @classmethod
    def base(cls, universe: Iterable[int] = ()) -> "ObsModel":
        return cls(universe=frozenset(universe), name="base")

    @classmethod
    def top(cls, tree: SymbolicTree) -> "ObsModel":
        ids = frozenset(tree.shadow_ids)
        return cls(kinds=BASE_OBSERVATION_KINDS | REFINED_KINDS, shadow_ids=ids, universe=ids, name="top")

    def with_shadow_ids(self, ids: Iterable[int]) -> "ObsModel":
        ids = frozenset(ids)
        kinds = BASE_OBSERVATION_KINDS | REFINED_KINDS if ids else self.kinds - REFINED_KINDS
        return ObsModel(kinds=kinds, shadow_ids=ids, universe=self.universe)

    @property
    def model_id(self) -> str:
        if self.name:
            return self.name
        if not self.shadow_ids:
            return "base"
        return "base+" + ",".join(str(i) for i in sorted(self.shadow_ids))

    def enables(self, obs: SymObservation) -> bool:
        if obs.kind in REFINED_KINDS:
            return obs.kind in self.kinds and obs.shadow_id in self.shadow_ids
        return obs.kind in self.kinds

    def extends(self, other: "ObsModel") -> bool:
        """self が other より真に多くの観測を有効にしているか"""
        if not other.kinds <= self.kinds or not other.shadow_ids <= self.shadow_ids:
            return False
        return bool(self.shadow_ids - other.shadow_ids) or (
            bool(self.kinds - other.kinds - REFINED_KINDS))


@dataclass(frozen=True)
class Relation:
    formula: SymExpr
    model_id: str
    program_hash: str
    heuristics: tuple = field(default=())


def swap_copies(expr: SymExpr) -> SymExpr:
    """プライム付きとなしの記号を入れ替える"""
    return swap_names(expr)


def _check_model(tree: SymbolicTree, model: ObsModel) -> None:
    unknown = set(model.shadow_ids) - set(tree.shadow_ids)
    if unknown:
        raise RelationError(f"実行木にない影観測が指定されました: {sorted(unknown)}",
                            code="unknown-shadow-index")


def _value_equal(a: SymExpr, b: SymExpr) -> SymExpr:
    return eq(a, b)


def trace_equal(left: Sequence[SymObservation], right: Sequence[SymObservation],
                model: ObsModel) -> SymExpr:
    """
    有効な観測だけを取り出した2つの観測列が等しいという条件。

    right はプライム付きの式を持つ観測列として扱う。
    """
    lhs = [o for o in left if model.enables(o)]
    rhs = [o for o in right if model.enables(o)]
    if len(lhs) != len(rhs):
        return FALSE
    parts = []
    for a, b in zip(lhs, rhs):
        if a.kind != b.kind or a.shadow_id != b.shadow_id:
            return FALSE
        parts.append(_value_equal(a.expr, b.expr))
    return conjunction(parts)


def _primed_trace(observations: Sequence[SymObservation]) -> List[SymObservation]:
    return [SymObservation(o.kind, prime(o.expr), o.pc, o.shadow_id) for o in observations]


def _tree_relation(node: TreeNode, model: ObsModel) -> SymExpr:
    segment = trace_equal(node.segment, _primed_trace(node.segment), model)
    if node.is_leaf:
        if node.path is None:
            return FALSE
        return and_(segment, node.path.condition, prime(node.path.condition))
    condition = node.condition
    return and_(
        segment,
        eq(condition, prime(condition)),
        implies(condition, _tree_relation(node.taken, model)),
        implies(not_(condition), _tree_relation(node.fallthrough, model)),
    )


def _general_relation(tree: SymbolicTree, model: ObsModel) -> SymExpr:
    paths = tree.paths
    primed = [(prime(p.condition), _primed_trace(p.observations)) for p in paths]
    parts = [disjunction(p.condition for p in paths), disjunction(c for c, _ in primed)]
    for path in paths:
        for condition, trace in primed:
            parts.append(implies(and_(path.condition, condition),
                                 trace_equal(path.observations, trace, model)))
    return conjunction(parts)


def synthesize_relation(tree: SymbolicTree, model: ObsModel) -> Relation:
    """
    自己合成により、モデル model の下で観測等価な初期状態の組を表す関係を作る。

    すべての分岐点が観測される実分岐なら木の形のまま(各分岐で cond ⇔ cond')、
    そうでなければ葉の組ごとの観測列の等価性で組み立てる。

    Args:
        tree (SymbolicTree): 実行木
        model (ObsModel): 観測モデル

    Returns:
        Relation: 2コピー(記号の接尾辞 _p)上の論理式

    Raises:
        RelationError: 実行木にない影観測をモデルが参照している場合
    """
    _check_model(tree, model)
    pre = and_(tree.precondition, prime(tree.precondition))
    if tree.unsat_precondition:
        body = FALSE
    elif ObservationKind.BRANCH_OUTCOME in model.kinds and tree.is_fully_observed():
        body = _tree_relation(tree.root, model)
    else:
        body = _general_relation(tree, model)
    formula = and_(pre, body)
    logger.info("関係を合成しました: モデル %s", model.model_id)
    return Relation(formula=formula, model_id=model.model_id, program_hash=program_hash(tree.program))


def distinguishing_constraint(tree: SymbolicTree, base: ObsModel, refined: ObsModel) -> Relation:
    """
    base では観測等価だが refined では区別できる初期状態の組の条件。

    片方のコピーだけが通る影観測(長さの違う観測列)も「異なる」に含まれる。

    Raises:
        RelationError: refined が base を真に拡張していない場合、または未知の影観測
    """
    _check_model(tree, refined)
    _check_model(tree, base)
    if not refined.extends(base):
        raise RelationError("洗練モデルが基本モデルに観測を追加していません", code="degenerate-refinement")
    base_relation = synthesize_relation(tree, base)
    differs = []
    paths = tree.paths
    primed = [(prime(p.condition), _primed_trace(p.observations)) for p in paths]
    for path in paths:
        for condition, trace in primed:
            differs.append(and_(path.condition, condition,
                                not_(trace_equal(path.observations, trace, refined))))
    formula = and_(base_relation.formula, disjunction(differs))
    model_id = f"{base.model_id}<{refined.model_id}"
    return Relation(formula=formula, model_id=model_id, program_hash=base_relation.program_hash)


def lattice_neighbors(model: ObsModel, direction: str) -> List[ObsModel]:
    """
    束の隣接点。down は有効な影観測を1つ外し、up は無効なものを1つ加える。
    """
    if direction == "down":
        return [model.with_shadow_ids(model.shadow_ids - {i}) for i in sorted(model.shadow_ids)]
    if direction == "up":
        return [model.with_shadow_ids(model.shadow_ids | {i})
                for i in sorted(model.universe - model.shadow_ids)]
    raise ValueError(f"direction は up か down で指定してください: {direction}")


def public_region(address: SymExpr, program: Program) -> SymExpr:
    """address が公開データのどこかを指すという条件"""
    return disjunction(and_(uge(address, const(item.address)), ult(address, const(item.end)))
                       for item in program.public_data())


def add_public_labels(relation: Relation, program: Program) -> Relation:
    """
    公開レジスタの一致と、関係が参照する公開メモリセルの一致を加える。

    どちらかのコピーの select が読むアドレス a ごとに、a が公開なら M[a] = M'[a] を課す。
    片方のコピーだけが読むセットでも、もう片方の初期メモリを同じアドレスで揃える。
    """
    parts = [relation.formula]
    for index in program.public_registers():
        symbol = register_symbol(index)
        parts.append(eq(symbol, prime(symbol)))
    if program.public_data():
        memory, memory_p = mem_sym(), prime(mem_sym())
        addresses = dict.fromkeys(node.args[1] for node in iter_selects(relation.formula))
        for address in addresses:
            parts.append(implies(public_region(address, program),
                                 eq(select(memory, address), select(memory_p, address))))
    return Relation(formula=conjunction(parts), model_id=relation.model_id,
                    program_hash=relation.program_hash, heuristics=relation.heuristics)


def locate_leaking_observations(tree: SymbolicTree, base: ObsModel, solver,
                                program: Optional[Program] = None) -> List[int]:
    """
    最下位モデルの上側の隣接点のうち、識別可能な入力組を持つものの影観測。

    Returns:
        List[int]: 識別に寄与できる影観測のインデックス(昇順)
    """
    start = ObsModel(kinds=base.kinds, shadow_ids=frozenset(), universe=frozenset(tree.shadow_ids))
    leaking = []
    for neighbor in lattice_neighbors(start, "up"):
        relation = distinguishing_constraint(tree, start, neighbor)
        if program is not None:
            relation = add_public_labels(relation, program)
        if solver.check(relation.formula).is_sat:
            leaking.extend(sorted(neighbor.shadow_ids - start.shadow_ids))
    logger.info("区別に寄与する影観測: %s", leaking)
    return leaking
