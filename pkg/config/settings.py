import os
from pathlib import Path
from dotenv import load_dotenv

# 環境変数の読み込み
load_dotenv()

PROJECT_ROOT = Path(__file__).resolve().parent.parent


class Settings:
    # アプリ設定
    APP_NAME = "specslh"
    APP_VERSION = "1.0.0"
    APP_DESCRIPTION = "関係テストによる投機的実行リークの検出と選択的SLH最適化ツール"
    REPORT_SCHEMA_VERSION = "1.0"

    # ログ設定
    LOG_LEVEL = os.getenv("SPECTRE_LOG_LEVEL", "WARNING")
    LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # データ設定
    CONFIG_DIR = PROJECT_ROOT / "config"
    PROFILES_PATH = CONFIG_DIR / "profiles.json"
    CORPUS_DIR = PROJECT_ROOT / "data" / "corpus"
    REPORT_DIR = os.getenv("SPECTRE_REPORT_DIR", str(PROJECT_ROOT / "data" / "reports"))

    # IR設定
    WORD_BITS = 32
    WORD_MASK = 0xFFFFFFFF
    REGISTER_COUNT = 32
    DEFAULT_ADDRSPACE = 4096
    MIN_ADDRSPACE = 16
    MAX_ADDRSPACE = 1 << 20
    DATA_ALIGNMENT = 16
    MAX_CONCRETE_STEPS = 10000

    # ソルバー設定
    SOLVER_BACKEND = os.getenv("SPECTRE_SOLVER_BACKEND", "z3")
    SMT_SOLVER_COMMAND = os.getenv("SPECTRE_SMT_SOLVER", "z3 -in -smt2")
    SOLVER_TIMEOUT_MS = int(os.getenv("SPECTRE_SOLVER_TIMEOUT_MS", "10000"))
    ENUM_SYMBOL_BITS = 8
    ENUM_MAX_NODES = 2_000_000

    # 記号実行の上限
    DEPTH_LIMIT = 512
    PATH_BUDGET = 256
    RESTART_BUDGET = 8

    # 観測の精緻化
    D_SHADOW = 32

    # 実験プロトコル
    CACHE_CONFIGS = 7
    ITERATIONS = 10
    THETA_PRESENT = 0.7
    THETA_AGREE = 0.8
    TRAINING_RUNS = 3
    PAIR_BUDGET = 50
    CORPUS_PAIR_BUDGET = 20
    DEFAULT_SEED = 1

    # マイクロアーキテクチャ
    DEFAULT_PROFILE = "longwin"

    # 最適化
    ORDER_SEARCH_MAX_POINTS = 6
    CYCLE_REPETITIONS = 7

    # CLI 終了コード
    EXIT_NO_LEAK = 0
    EXIT_LEAK = 10
    EXIT_INCONCLUSIVE = 20
    EXIT_USAGE = 1
    EXIT_INTERNAL = 2

    @classmethod
    def validate(cls):
        """設定の検証"""
        if not 0 < cls.THETA_PRESENT <= 1 or not 0 < cls.THETA_AGREE <= 1:
            raise ValueError("しきい値は 0 より大きく 1 以下で指定してください")
        if cls.ITERATIONS < 1 or cls.CACHE_CONFIGS < 1:
            raise ValueError("反復回数とキャッシュ構成数は 1 以上で指定してください")
        if cls.PAIR_BUDGET < 1 or cls.RESTART_BUDGET < 0:
            raise ValueError("ペア予算は 1 以上、再起動予算は 0 以上で指定してください")
        if not Path(cls.PROFILES_PATH).exists():
            raise ValueError(f"プロファイル設定ファイルが見つかりません: {cls.PROFILES_PATH}")
        return True


settings = Settings()
