"""
レポートのデータモデル
パイプライン設定、テストケース、判定、最適化結果、コーパスの集計行
"""

from datetime import datetime
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_serializer, field_validator

from config.settings import settings
from src.models.program import MachineState, Program, Register, register_index


class PipelineConfig(BaseModel):
    """1回の実行の設定。レポートに埋め込み、これだけで再実行できるようにする"""

    model_config = ConfigDict()

    program_path: str
    profile: str = settings.DEFAULT_PROFILE
    profiles_path: Optional[str] = None
    solver: str = settings.SOLVER_BACKEND
    labels: Dict[str, str] = Field(default_factory=dict)
    refinement: str = "auto"
    branches: List[int] = Field(default_factory=list)
    d_shadow: int = settings.D_SHADOW
    pair_budget: int = settings.PAIR_BUDGET
    seed: int = settings.DEFAULT_SEED
    cache_configs: int = settings.CACHE_CONFIGS
    iterations: int = settings.ITERATIONS
    theta_present: float = settings.THETA_PRESENT
    theta_agree: float = settings.THETA_AGREE
    training_runs: int = settings.TRAINING_RUNS
    hardening: Optional[str] = None
    force: bool = False
    order_search: bool = False
    report_path: Optional[str] = None
    output_path: Optional[str] = None

    @field_validator('program_path')
    @classmethod
    def validate_program_path(cls, v):
        if not v or not v.strip():
            raise ValueError('プログラムのパスは必須です')
        return v

    @field_validator('solver')
    @classmethod
    def validate_solver(cls, v):
        if v not in ('z3', 'enumerate', 'external'):
            raise ValueError('ソルバーは z3, enumerate, external のいずれかです')
        return v

    @field_validator('labels')
    @classmethod
    def validate_labels(cls, v):
        for name, label in v.items():
            if label not in ('public', 'secret'):
                raise ValueError(f'{name} のラベルが不正です: {label}')
        return v

    @field_validator('refinement')
    @classmethod
    def validate_refinement(cls, v):
        if v not in ('auto', 'explicit'):
            raise ValueError('洗練の選択は auto か explicit です')
        return v

    @field_validator('pair_budget', 'd_shadow', 'cache_configs', 'iterations', 'training_runs')
    @classmethod
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError('予算と回数は1以上で指定してください')
        return v

    @field_validator('theta_present', 'theta_agree')
    @classmethod
    def validate_threshold(cls, v):
        if not 0 < v <= 1:
            raise ValueError('しきい値は0より大きく1以下で指定してください')
        return v

    @field_validator('hardening')
    @classmethod
    def validate_hardening(cls, v):
        if v is not None and v not in ('value-slh', 'addr-slh', 'fence'):
            raise ValueError('強化方式は value-slh, addr-slh, fence のいずれかです')
        return v


class StateRecord(BaseModel):
    """テストケースの1状態。0 でないレジスタと、ラベル付きデータのバイト列"""

    model_config = ConfigDict()

    registers: Dict[str, int] = Field(default_factory=dict)
    data: Dict[str, List[int]] = Field(default_factory=dict)
    leaf_id: Optional[int] = None

    @classmethod
    def from_state(cls, state: MachineState, program: Program, leaf_id: Optional[int] = None) -> "StateRecord":
        registers = {str(Register(i)): v for i, v in enumerate(state.registers) if v}
        data = {item.name: list(state.memory[item.address:item.end]) for item in program.data}
        return cls(registers=registers, data=data, leaf_id=leaf_id)

    def to_state(self, program: Program) -> MachineState:
        registers = {register_index(name): value for name, value in self.registers.items()}
        memory = {}
        for name, values in self.data.items():
            item = program.data_item(name)
            if item is None:
                raise ValueError(f'未知のデータ名です: {name}')
            for offset, value in enumerate(values[:item.size]):
                memory[item.address + offset] = value
        return MachineState.create(program, registers, memory)


class TestCaseRecord(BaseModel):
    """ランナーが読むテストケース"""

    model_config = ConfigDict()
    __test__ = False

    name: str
    program_hash: str
    s1: StateRecord
    s2: StateRecord
    training: List[StateRecord] = Field(default_factory=list)
    seed: int = settings.DEFAULT_SEED
    model_ids: List[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=lambda: datetime.now())

    @field_serializer('created_at')
    def serialize_datetime(self, value: datetime) -> str:
        return value.isoformat()

    @field_validator('name')
    @classmethod
    def validate_name(cls, v):
        if not v or not v.strip():
            raise ValueError('テストケース名は必須です')
        return v


class TreeSummary(BaseModel):
    leaves: int
    restarts: int = 0
    impossible_paths: int = 0
    shadow_ids: List[int] = Field(default_factory=list)


class VerdictRecord(BaseModel):
    pair_index: int
    classification: str
    distinguishing_lines: List[List[int]] = Field(default_factory=list)
    retried: bool = False
    plan_hash: str = ""
    presence: List[List[List[int]]] = Field(default_factory=list)   # 構成ごとの [set, tag, n1, n2]


class OptimizationRecord(BaseModel):
    kind: str
    points: List[Dict[str, object]] = Field(default_factory=list)
    retained: List[int] = Field(default_factory=list)
    removed: List[int] = Field(default_factory=list)
    steps: List[Dict[str, object]] = Field(default_factory=list)
    cycles: Dict[str, List[float]] = Field(default_factory=dict)
    validation: List[str] = Field(default_factory=list)
    escalations: List[str] = Field(default_factory=list)
    budget: int = 0
    order_search: Optional[Dict[str, object]] = None
    optimized_program: str = ""


class Report(BaseModel):
    """解析・強化の結果。status は leak / no-leak / inconclusive / error"""

    model_config = ConfigDict()

    schema_version: str = settings.REPORT_SCHEMA_VERSION
    tool_version: str = settings.APP_VERSION
    created_at: datetime = Field(default_factory=lambda: datetime.now())
    program_hash: str = ""
    config: PipelineConfig
    status: str = "no-leak"
    error_code: Optional[str] = None
    error_message: Optional[str] = None
    tree: Optional[TreeSummary] = None
    refinement: Optional[str] = None
    relation_hash: Optional[str] = None
    pairs_generated: int = 0
    verdicts: List[VerdictRecord] = Field(default_factory=list)
    leaking_observations: List[int] = Field(default_factory=list)
    optimization: Optional[OptimizationRecord] = None
    notes: List[str] = Field(default_factory=list)

    @field_serializer('created_at')
    def serialize_datetime(self, value: datetime) -> str:
        return value.isoformat()

    @field_validator('status')
    @classmethod
    def validate_status(cls, v):
        if v not in ('leak', 'no-leak', 'inconclusive', 'error'):
            raise ValueError('状態が不正です')
        return v

    @property
    def exit_code(self) -> int:
        return {
            'no-leak': settings.EXIT_NO_LEAK,
            'leak': settings.EXIT_LEAK,
            'inconclusive': settings.EXIT_INCONCLUSIVE,
        }.get(self.status, settings.EXIT_INTERNAL)


class CorpusRow(BaseModel):
    """コーパス集計の1行(反例数、判定不能数、強化ポイント数、サイクル数)"""

    model_config = ConfigDict()

    case: str
    profile: str
    supported: bool = True
    status: str = ""
    counterexamples: int = 0
    inconclusive: int = 0
    slh_points: int = 0
    optimized_points: int = 0
    cycles_original: Optional[List[float]] = None
    cycles_hardened: Optional[List[float]] = None
    cycles_optimized: Optional[List[float]] = None
    error: Optional[str] = None

    @field_validator('case')
    @classmethod
    def validate_case(cls, v):
        if not v or not v.strip():
            raise ValueError('ケース名は必須です')
        return v
