"""テスト設定とフィクスチャ"""

import os
import shutil
import sys
import tempfile
from pathlib import Path

import pytest

# プロジェクトルートを sys.path に追加
project_root = Path(__file__).parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from config.settings import settings
from src.models.microarch import CacheGeometry, MicroConfig, PredictorKind
from src.services.assembler import parse_program
from src.services.data_manager import DataManager
from src.services.solver import EnumerativeSolver

# 範囲チェックの後で範囲外を読める古典的な形
KOCHER_SOURCE = """\
.addrspace 8192
.word A_size 16
.array A 16
.array B 4096
.public r0
.public A
.public B

      load r3, [A_size]
      cmp r0, r3
      b.ge Lend
      load r4, [r0+A]
      shl r4, r4, 4
      load r5, [r4+B]
Lend: halt
"""

# 範囲内の値が k と等しいときだけ B[0] を読む
NESTED_SOURCE = """\
.addrspace 8192
.word A_size 16
.array A 16
.array B 4096
.public r0
.public r1
.public A
.public B

      load r3, [A_size]
      cmp r0, r3
      b.ge Lend
      load r4, [r0+A]
      cmp r4, r1
      b.ne Lend
      load r5, [B]
Lend: halt
"""

# 分岐だけの小さなプログラム(列挙ソルバーで扱える大きさ)
TINY_SOURCE = """\
.addrspace 64
.array T 16
.public T

      cmp r0, 4
      b.lt Small
      load r1, [T+1]
      halt
Small: load r1, [T]
      halt
"""


@pytest.fixture
def temp_data_dir() -> str:
    """テスト用の一時ディレクトリを作成"""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


@pytest.fixture
def data_manager(temp_data_dir) -> DataManager:
    """テスト用データマネージャー"""
    return DataManager(data_dir=temp_data_dir)


@pytest.fixture
def kocher_source() -> str:
    return KOCHER_SOURCE


@pytest.fixture
def nested_source() -> str:
    return NESTED_SOURCE


@pytest.fixture
def kocher_program():
    return parse_program(KOCHER_SOURCE)


@pytest.fixture
def nested_program():
    return parse_program(NESTED_SOURCE)


@pytest.fixture
def tiny_program():
    return parse_program(TINY_SOURCE)


@pytest.fixture
def write_program(temp_data_dir):
    """アセンブリテキストを一時ファイルに書いてパスを返すファクトリ"""
    def _write(text: str, name: str = "program.s") -> str:
        path = Path(temp_data_dir) / name
        path.write_text(text, encoding="utf-8")
        return str(path)
    return _write


@pytest.fixture
def corpus_dir() -> Path:
    return Path(settings.CORPUS_DIR)


@pytest.fixture
def enum_solver() -> EnumerativeSolver:
    """4ビットの定義域の列挙ソルバー"""
    return EnumerativeSolver(symbol_bits=4)


@pytest.fixture
def z3_solver():
    """z3 バックエンド(未インストールならスキップ)"""
    pytest.importorskip("z3")
    from src.services.solver import Z3Solver
    return Z3Solver()


@pytest.fixture
def longwin() -> MicroConfig:
    return MicroConfig(name="longwin", window=64)


@pytest.fixture
def shortwin() -> MicroConfig:
    return MicroConfig(name="shortwin", window=12)


@pytest.fixture
def mispredicting() -> MicroConfig:
    return MicroConfig(name="mispredict", window=64, predictor=PredictorKind.ALWAYS_MISPREDICT)


@pytest.fixture
def geometry() -> CacheGeometry:
    return CacheGeometry(sets=16, ways=2, line_bytes=16)


@pytest.fixture(autouse=True)
def setup_test_environment():
    """テスト環境のセットアップ"""
    # 環境変数のクリア
    test_env_vars = ['SPECTRE_LOG_LEVEL', 'SPECTRE_SOLVER_BACKEND', 'SPECTRE_SMT_SOLVER',
                     'SPECTRE_SOLVER_TIMEOUT_MS', 'SPECTRE_REPORT_DIR']
    original_values = {}

    for var in test_env_vars:
        original_values[var] = os.environ.get(var)
        if var in os.environ:
            del os.environ[var]

    yield

    # 環境変数の復元
    for var, value in original_values.items():
        if value is not None:
            os.environ[var] = value
