"""
データ永続化
レポート、テストケース、コーパス集計、最適化後のプログラムの保存と読み込み
"""

import json
import logging
from pathlib import Path
from typing import List, Optional

from src.models.report import CorpusRow, Report, TestCaseRecord

logger = logging.getLogger(__name__)


class DataManager:
    def __init__(self, data_dir: str = "data/reports"):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.test_case_dir = self.data_dir / "test_cases"
        self.test_case_dir.mkdir(parents=True, exist_ok=True)
        self.corpus_file = self.data_dir / "corpus_summary.json"

        # JSONファイルの初期化・修復
        self._ensure_json_files()

    def _ensure_json_files(self):
        """JSONファイルが正しい形式で存在することを確認"""
        files_to_check = [
            (self.corpus_file, []),
        ]

        for file_path, default_content in files_to_check:
            if not file_path.exists():
                self._write_json(file_path, default_content)
                logger.info("作成されました: %s", file_path)
            else:
                # 壊れていれば _load_json_safely がバックアップして作り直す
                self._load_json_safely(file_path, default_content)

    def _resolve(self, path: str) -> Path:
        """存在するパスならそのまま、なければ data_dir からの相対パス"""
        candidate = Path(path)
        return candidate if candidate.is_absolute() or candidate.exists() else self.data_dir / candidate

    def _write_json(self, file_path: Path, content) -> None:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, 'w', encoding='utf-8') as f:
            json.dump(content, f, ensure_ascii=False, indent=2, default=str)

    def save_report(self, report: Report, path: Optional[str] = None) -> bool:
        """レポートを保存(パス省略時はプログラムのハッシュから名前を付ける)"""
        try:
            if report is None:
                logger.error("レポートがNoneです")
                return False
            if path:
                file_path = Path(path)
            else:
                file_path = self.data_dir / f"report-{report.program_hash[:12] or 'unknown'}.json"
            self._write_json(file_path, report.model_dump(mode='json'))
            return True
        except Exception as e:
            logger.error("レポートの保存中にエラーが発生しました: %s", e)
            return False

    def load_report(self, path: str) -> Optional[Report]:
        """レポートを読み込み"""
        try:
            file_path = self._resolve(path)
            if file_path.exists():
                data = self._load_json_safely(file_path, None)
                if data is not None:
                    return Report(**data)
        except Exception as e:
            logger.error("レポートの読み込み中にエラーが発生しました: %s", e)
        return None

    def save_test_case(self, record: TestCaseRecord) -> bool:
        """テストケースを保存"""
        try:
            if not record.name or record.name.strip() == "":
                logger.error("名前が空のテストケースは保存できません")
                return False
            self._write_json(self.test_case_dir / f"{record.name}.json", record.model_dump(mode='json'))
            return True
        except Exception as e:
            logger.error("テストケースの保存中にエラーが発生しました: %s", e)
            return False

    def load_test_case(self, name: str) -> Optional[TestCaseRecord]:
        """テストケースを読み込み"""
        file_path = self.test_case_dir / f"{name}.json"
        try:
            data = self._load_json_safely(file_path, None)
            if data is not None:
                return TestCaseRecord(**data)
        except Exception as e:
            logger.error("テストケースの読み込み中にエラーが発生しました: %s", e)
        return None

    def list_test_cases(self) -> List[str]:
        return sorted(p.stem for p in self.test_case_dir.glob("*.json"))

    def save_corpus_summary(self, rows: List[CorpusRow]) -> bool:
        """コーパス集計を保存"""
        try:
            self._write_json(self.corpus_file, [row.model_dump(mode='json') for row in rows])
            return True
        except Exception as e:
            logger.error("コーパス集計の保存中にエラーが発生しました: %s", e)
            return False

    def load_corpus_summary(self) -> List[CorpusRow]:
        """コーパス集計を読み込み"""
        try:
            rows = self._load_json_safely(self.corpus_file, [])
            return [CorpusRow(**row) for row in rows]
        except Exception as e:
            logger.error("コーパス集計の読み込み中にエラーが発生しました: %s", e)
            return []

    def save_program(self, text: str, path: str) -> bool:
        """アセンブリテキストを保存"""
        try:
            file_path = Path(path)
            file_path.parent.mkdir(parents=True, exist_ok=True)
            file_path.write_text(text, encoding='utf-8')
            return True
        except Exception as e:
            logger.error("プログラムの保存中にエラーが発生しました: %s", e)
            return False

    def _load_json_safely(self, file_path: Path, default_value):
        """JSONファイルを安全に読み込み"""
        if not file_path.exists():
            return default_value

        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                content = f.read()

            # 空ファイルの場合
            if not content.strip():
                return default_value

            return json.loads(content)

        except json.JSONDecodeError as e:
            logger.warning("データの読み込み中にエラーが発生しました: %s", e)

            # 破損したファイルをバックアップ
            backup_path = file_path.with_suffix('.corrupt')
            try:
                file_path.rename(backup_path)
                logger.warning("破損したファイルがバックアップされました: %s", backup_path)
            except OSError:
                pass

            if default_value is not None:
                self._write_json(file_path, default_value)
            return default_value
        except Exception as e:
            logger.error("予期せぬエラーが発生しました: %s", e)
            return default_value

    def clear_all_data(self):
        """保存済みのテストケースと集計を消去(デバッグ用)"""
        for file_path in self.test_case_dir.glob("*.json"):
            file_path.unlink()
        self._write_json(self.corpus_file, [])
        logger.info("クリア済み: %s", self.data_dir)
