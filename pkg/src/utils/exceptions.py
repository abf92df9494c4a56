"""
例外階層
ツールチェーン全体で使う例外と、安定した理由コード(英語)の定義
"""

from typing import Optional


class ToolchainError(Exception):
    """すべてのツールチェーン例外の基底クラス"""

    code = "toolchain-error"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message}


class ConfigurationError(ToolchainError):
    code = "invalid-config"


class AssemblyError(ToolchainError, ValueError):
    """アセンブリテキストの構文・意味エラー(行・列つき)"""

    code = "syntax"

    def __init__(self, message: str, line: int = 0, column: int = 0, code: Optional[str] = None):
        location = f"{line}行{column}列: " if line else ""
        super().__init__(f"{location}{message}", code)
        self.line = line
        self.column = column


class MachineFault(ToolchainError):
    code = "memory-fault"

    def __init__(self, message: str, address: int = 0, pc: int = 0):
        super().__init__(message)
        self.address = address
        self.pc = pc


class SolverError(ToolchainError):
    code = "solver-error"


class SymbolicExecutionError(ToolchainError):
    code = "symbolic-execution"


class RefinementError(ToolchainError):
    code = "invalid-branch"


class RelationError(ToolchainError):
    code = "unknown-shadow-index"


class HardeningError(ToolchainError):
    code = "unknown-point"


class HardeningInsufficientError(ToolchainError):
    code = "hardening-insufficient"


class EscalationExhaustedError(ToolchainError):
    code = "escalation-exhausted"


class ExperimentAbortedError(ToolchainError):
    code = "simulator-fault"


class UnanalyzableProgramError(ToolchainError):
    code = "unsupported"
