"""
specslh コマンドラインツール
analyze: リーク検査 / harden: 強化と最適化 / corpus: ベンチマークの一覧と一括実行
"""

import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

# 環境変数の読み込み
load_dotenv()

from config.settings import settings  # noqa: E402
from src.models.report import PipelineConfig, Report  # noqa: E402
from src.services.data_manager import DataManager  # noqa: E402
from src.services.pipeline import cmd_analyze, cmd_corpus, cmd_harden, load_labels  # noqa: E402
from src.utils.exceptions import AssemblyError, ConfigurationError, ToolchainError  # noqa: E402

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("program", help="アセンブリテキストのパス")
    parser.add_argument("--profile", default=settings.DEFAULT_PROFILE, help="マイクロアーキテクチャのプロファイル名")
    parser.add_argument("--profiles", default=None, help="プロファイル定義の JSON")
    parser.add_argument("--solver", default=settings.SOLVER_BACKEND, choices=["z3", "enumerate", "external"])
    parser.add_argument("--budget", type=int, default=settings.PAIR_BUDGET, help="試す入力の組の数")
    parser.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    parser.add_argument("--labels", default=None, help="セキュリティラベルの上書き(JSON)")
    parser.add_argument("--branches", default=None,
                        help="誤予測させる分岐のインデックス(カンマ区切り、省略時は自動選択)")
    parser.add_argument("--d-shadow", type=int, default=settings.D_SHADOW)
    parser.add_argument("--report", default=None, help="レポートの出力先")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.APP_NAME, description=settings.APP_DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    parser.add_argument("--verbose", action="store_true", help="INFO ログを表示")
    parser.add_argument("--debug", action="store_true", help="DEBUG ログを表示")
    commands = parser.add_subparsers(dest="command", required=True)

    analyze = commands.add_parser("analyze", help="投機的実行によるリークを検査する")
    _add_common(analyze)
    analyze.add_argument("--export-tests", default=None, metavar="NAME",
                         help="生成した入力の組をテストケースとして保存する(NAME-0, NAME-1, ...)")

    harden = commands.add_parser("harden", help="強化して最適化する")
    _add_common(harden)
    harden.add_argument("--pass", dest="hardening", default="value-slh",
                        choices=["value-slh", "addr-slh", "fence"])
    harden.add_argument("--force", action="store_true", help="リークがなくても強化する")
    harden.add_argument("--order-search", action="store_true", help="外す順序を全通り試す(診断用)")
    harden.add_argument("--output", default=None, help="最適化後のプログラムの出力先")

    corpus = commands.add_parser("corpus", help="ベンチマークの一覧と一括実行")
    corpus.add_argument("action", choices=["list", "run-all"])
    corpus.add_argument("--profile", action="append", default=None, help="実行するプロファイル(複数指定可)")
    corpus.add_argument("--profiles", default=None, help="プロファイル定義の JSON")
    corpus.add_argument("--corpus-dir", default=None)
    corpus.add_argument("--budget", type=int, default=settings.CORPUS_PAIR_BUDGET)
    corpus.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    corpus.add_argument("--solver", default=settings.SOLVER_BACKEND, choices=["z3", "enumerate", "external"])
    corpus.add_argument("--save", action="store_true", help="集計を JSON で保存する")
    return parser


def configure_logging(args: argparse.Namespace) -> None:
    level = settings.LOG_LEVEL
    if args.verbose:
        level = "INFO"
    if args.debug:
        level = "DEBUG"
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.WARNING), format=settings.LOG_FORMAT)


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    labels = load_labels(args.labels) if args.labels else {}
    branches: List[int] = []
    if args.branches:
        try:
            branches = [int(b) for b in args.branches.split(",") if b.strip()]
        except ValueError as e:
            raise ConfigurationError(f"分岐の指定が不正です: {args.branches}", code="invalid-config") from e
    return PipelineConfig(
        program_path=args.program,
        profile=args.profile,
        profiles_path=args.profiles,
        solver=args.solver,
        labels=labels,
        refinement="explicit" if branches else "auto",
        branches=branches,
        d_shadow=args.d_shadow,
        pair_budget=args.budget,
        seed=args.seed,
        hardening=getattr(args, "hardening", None),
        force=getattr(args, "force", False),
        order_search=getattr(args, "order_search", False),
        report_path=args.report,
        output_path=getattr(args, "output", None),
    )


def print_report(report: Report) -> None:
    print(f"状態: {report.status}")
    if report.error_code:
        print(f"エラー: {report.error_code} ({report.error_message})")
    if report.refinement:
        print(f"洗練: {report.refinement} / 生成した組: {report.pairs_generated}")
    for verdict in report.verdicts:
        lines = " ".join(f"{s}:{t}" for s, t in verdict.distinguishing_lines)
        print(f"  組 {verdict.pair_index}: {verdict.classification} {lines}".rstrip())
    if report.leaking_observations:
        print(f"区別に寄与する影観測: {report.leaking_observations}")
    if report.optimization is not None:
        opt = report.optimization
        print(f"強化: {opt.kind} (段階: {' → '.join(opt.escalations)})")
        print(f"  ポイント {len(opt.points)} 個のうち残したもの: {opt.retained}")
        for name, values in opt.cycles.items():
            print(f"  サイクル {name}: 最大 {values[0]:.1f} 平均 {values[1]:.1f} 標準偏差 {values[2]:.2f}")
    for note in report.notes:
        print(f"  注記: {note}")


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return settings.EXIT_USAGE if e.code else settings.EXIT_NO_LEAK
    configure_logging(args)

    try:
        if args.command == "corpus":
            frame, rows = cmd_corpus(args.action, args.profile, args.corpus_dir, args.budget, args.seed,
                                     args.solver, args.profiles)
            print(frame.to_string(index=False))
            if args.save and rows:
                DataManager(settings.REPORT_DIR).save_corpus_summary(rows)
            return settings.EXIT_NO_LEAK

        config = config_from_args(args)
        if args.command == "harden":
            report = cmd_harden(config)
        else:
            report = cmd_analyze(config, args.export_tests)
        print_report(report)
        if config.report_path:
            DataManager(settings.REPORT_DIR).save_report(report, config.report_path)
        return report.exit_code
    except (ConfigurationError, AssemblyError, ValidationError) as e:
        logger.error("入力が不正です: %s", e)
        print(f"エラー: {e}", file=sys.stderr)
        return settings.EXIT_USAGE
    except ToolchainError as e:
        logger.error("処理に失敗しました [%s]: %s", e.code, e.message)
        print(f"エラー [{e.code}]: {e.message}", file=sys.stderr)
        return settings.EXIT_INTERNAL
    except Exception as e:
        logger.exception("予期せぬエラーが発生しました")
        print(f"予期せぬエラー: {e}", file=sys.stderr)
        return settings.EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
