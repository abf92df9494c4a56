"""
アセンブリテキストの解析と正規形での出力
"""

import logging
import re
from typing import Dict, List, Optional, Tuple

from config.settings import settings
from src.models.program import (
    Address, BINARY_OPCODES, Condition, DataItem, Immediate, Instruction, NULLARY_OPCODES,
    ObsExpr, ObsTag, ObsTerm, Opcode, Program, Register, SecurityLabel, TAINT_REGISTER,
)
from src.utils.exceptions import AssemblyError
from src.utils.helpers import WORD_MASK, align_up, fits_word, sha256_text

logger = logging.getLogger(__name__)

NAME_PATTERN = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
REGISTER_PATTERN = re.compile(r"^(?:r(\d+)|taint)$")
NUMBER_PATTERN = re.compile(r"^-?(?:0x[0-9a-fA-F]+|\d+)$")
NOTE_PATTERN = re.compile(r"^HP\d+$")


class _Line:
    __slots__ = ("number", "text", "note")

    def __init__(self, number: int, text: str, note: Optional[str]):
        self.number = number
        self.text = text
        self.note = note


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.lines: List[_Line] = []
        self.data: List[DataItem] = []
        self.security: Dict[str, SecurityLabel] = {}
        self.initial: List[Tuple[str, _Line]] = []
        self.entry: Optional[Tuple[str, _Line]] = None
        self.addrspace = settings.DEFAULT_ADDRSPACE
        self.labels: Dict[str, int] = {}
        self.instructions: List[Instruction] = []
        self._next_address = 0

    # --- 補助 ---
    def error(self, line: _Line, message: str, token: str = "", code: str = "syntax") -> AssemblyError:
        column = line.text.find(token) + 1 if token and token in line.text else 1
        return AssemblyError(message, line=line.number, column=column, code=code)

    def split_lines(self) -> None:
        for number, raw in enumerate(self.source.splitlines(), start=1):
            text, _, comment = raw.partition(";")
            comment = comment.strip()
            note = comment if NOTE_PATTERN.match(comment) else None
            if text.strip() or note:
                self.lines.append(_Line(number, text.rstrip(), note))

    def register(self, token: str, line: _Line) -> Register:
        match = REGISTER_PATTERN.match(token)
        if not match:
            raise self.error(line, f"レジスタではありません: {token}", token)
        if match.group(1) is None:
            return Register(TAINT_REGISTER)
        index = int(match.group(1))
        if index >= settings.REGISTER_COUNT:
            raise self.error(line, f"レジスタ番号が範囲外です: {token}", token, code="register-range")
        return Register(index)

    def number(self, token: str, line: _Line) -> int:
        if not NUMBER_PATTERN.match(token):
            raise self.error(line, f"数値ではありません: {token}", token)
        digits = token.lstrip("-")
        value = int(digits, 16) if digits.lower().startswith("0x") else int(digits, 10)
        if token.startswith("-"):
            value = -value
        if not fits_word(value):
            raise self.error(line, f"即値がワード幅を超えています: {token}", token, code="immediate-range")
        return value

    def immediate(self, token: str, line: _Line) -> Immediate:
        token = token.strip()
        if NUMBER_PATTERN.match(token):
            return Immediate(self.number(token, line) & WORD_MASK)
        match = re.match(r"^([A-Za-z_][A-Za-z0-9_]*)\s*(?:([+-])\s*(0x[0-9a-fA-F]+|\d+))?$", token)
        if not match:
            raise self.error(line, f"即値を解釈できません: {token}", token)
        name, sign, amount = match.groups()
        item = next((d for d in self.data if d.name == name), None)
        if item is None:
            raise self.error(line, f"未定義のデータ名です: {name}", name, code="undefined-name")
        offset = 0
        if amount is not None:
            offset = self.number(amount, line) * (-1 if sign == "-" else 1)
        return Immediate((item.address + offset) & WORD_MASK, symbol=name, offset=offset)

    def operand(self, token: str, line: _Line):
        token = token.strip()
        if REGISTER_PATTERN.match(token):
            return self.register(token, line)
        return self.immediate(token, line)

    def address(self, token: str, line: _Line) -> Address:
        token = token.strip()
        if not (token.startswith("[") and token.endswith("]")):
            raise self.error(line, f"アドレス式は [..] で指定してください: {token}", token)
        inner = token[1:-1].strip()
        match = re.match(r"^(r\d+|taint)\s*(?:([+-])(.*))?$", inner)
        if match:
            base = self.register(match.group(1), line)
            if match.group(2) is None:
                return Address(base)
            rest = match.group(3).strip()
            disp = self.immediate(rest if match.group(2) == "+" else "-" + rest, line)
            return Address(base, disp)
        return Address(None, self.immediate(inner, line))

    def obs_expr(self, text: str, line: _Line) -> ObsExpr:
        terms = []
        for raw in text.split("+"):
            token = raw.strip()
            if not token:
                raise self.error(line, "obs 式が空です", text)
            if token == "nzcv":
                terms.append(ObsTerm(flags=True))
                continue
            reg_part, star, coefficient = token.partition("*")
            if REGISTER_PATTERN.match(reg_part.strip()):
                coef = self.number(coefficient.strip(), line) & WORD_MASK if star else 1
                terms.append(ObsTerm(register=self.register(reg_part.strip(), line), coefficient=coef))
            else:
                terms.append(ObsTerm(immediate=self.immediate(token, line)))
        return ObsExpr(tuple(terms))

    def declare(self, name: str, line: _Line) -> None:
        if not NAME_PATTERN.match(name) or REGISTER_PATTERN.match(name):
            raise self.error(line, f"名前として使えません: {name}", name)
        if any(d.name == name for d in self.data):
            raise self.error(line, f"データ名が重複しています: {name}", name, code="duplicate-name")

    # --- 第1パス: ディレクティブ ---
    def directives(self) -> List[_Line]:
        body: List[_Line] = []
        pending_labels: List[_Line] = []
        for line in self.lines:
            text = line.text.strip()
            if not text.startswith(".") or text.startswith(".obs base") or text.startswith(".obs refined"):
                body.append(line)
                continue
            parts = text.split()
            directive = parts[0]
            if directive == ".word":
                self._expect(parts, 3, line)
                self.declare(parts[1], line)
                value = self.number(parts[2], line)
                if not 0 <= value <= 0xFF:
                    raise self.error(line, f".word の値は1バイトで指定してください: {parts[2]}",
                                     parts[2], code="immediate-range")
                self._allocate(parts[1], 1, value)
            elif directive == ".array":
                self._expect(parts, 3, line)
                self.declare(parts[1], line)
                size = self.number(parts[2], line)
                if size <= 0:
                    raise self.error(line, "配列サイズは1以上で指定してください", parts[2])
                self._allocate(parts[1], size, None)
            elif directive in (".public", ".secret"):
                self._expect(parts, 2, line)
                pending_labels.append(line)
            elif directive == ".entry":
                self._expect(parts, 2, line)
                self.entry = (parts[1], line)
            elif directive == ".addrspace":
                self._expect(parts, 2, line)
                self.addrspace = self.number(parts[1], line)
                if not settings.MIN_ADDRSPACE <= self.addrspace <= settings.MAX_ADDRSPACE:
                    raise self.error(line, f"アドレス空間のサイズが範囲外です: {parts[1]}",
                                     parts[1], code="addrspace-range")
            elif directive == ".obs":
                self._expect(parts, 3, line)
                if parts[1] != "initial":
                    raise self.error(line, f"未知の obs タグです: {parts[1]}", parts[1])
                self.initial.append((parts[2], line))
            else:
                raise self.error(line, f"未知のディレクティブです: {directive}", directive)
        for line in pending_labels:
            directive, name = line.text.split()
            self._label_name(name, line)
            if name in self.security:
                raise self.error(line, f"セキュリティラベルが重複しています: {name}", name,
                                 code="duplicate-label")
            self.security[name] = SecurityLabel(directive[1:])
        for name, line in self.initial:
            self._label_name(name, line)
        return body

    def _expect(self, parts: List[str], count: int, line: _Line) -> None:
        if len(parts) != count:
            raise self.error(line, f"{parts[0]} の引数の数が正しくありません", parts[0])

    def _allocate(self, name: str, size: int, value: Optional[int]) -> None:
        address = align_up(self._next_address, settings.DATA_ALIGNMENT)
        self.data.append(DataItem(name=name, address=address, size=size, fixed_value=value))
        self._next_address = address + size

    def _label_name(self, name: str, line: _Line) -> None:
        if REGISTER_PATTERN.match(name):
            self.register(name, line)
            return
        if not any(d.name == name for d in self.data):
            raise self.error(line, f"未定義の名前です: {name}", name, code="undefined-name")

    # --- 第2パス: 命令 ---
    def body(self, lines: List[_Line]) -> None:
        pending: List[Tuple[str, _Line]] = []
        targets: List[Tuple[str, _Line]] = []
        for line in lines:
            text = line.text.strip()
            while True:
                match = re.match(r"^([A-Za-z_][A-Za-z0-9_]*)\s*:(.*)$", text)
                if not match:
                    break
                name = match.group(1)
                if name in self.labels or any(n == name for n, _ in pending) or \
                        any(d.name == name for d in self.data):
                    raise self.error(line, f"ラベルが重複しています: {name}", name, code="duplicate-name")
                pending.append((name, line))
                text = match.group(2).strip()
            if not text:
                continue
            instr = self.instruction(text, line)
            for name, _ in pending:
                self.labels[name] = len(self.instructions)
            pending = []
            if instr.target is not None:
                targets.append((instr.target, line))
            self.instructions.append(instr)
        if pending:
            name, line = pending[0]
            raise self.error(line, f"ラベル {name} の後に命令がありません", name, code="dangling-label")
        for name, line in targets:
            if name not in self.labels:
                raise self.error(line, f"未定義のラベルです: {name}", name, code="undefined-label")
        if self.entry is not None and self.entry[0] not in self.labels:
            raise self.error(self.entry[1], f"未定義のエントリラベルです: {self.entry[0]}",
                             self.entry[0], code="undefined-label")

    def instruction(self, text: str, line: _Line) -> Instruction:
        shadow = False
        if text.startswith("s."):
            shadow = True
            text = text[2:]
        mnemonic, _, rest = text.partition(" ")
        rest = rest.strip()
        if mnemonic == ".obs":
            mnemonic = "obs"
        if mnemonic == "obs":
            tag, _, expr = rest.partition(" ")
            if tag not in ("base", "refined"):
                raise self.error(line, f"obs のタグは base か refined です: {tag}", tag)
            return Instruction(Opcode.OBS, obs_tag=ObsTag(tag), obs_expr=self.obs_expr(expr, line),
                               shadow=shadow, note=line.note)
        args = self._split_operands(rest)
        if mnemonic.startswith("b."):
            try:
                cond = Condition(mnemonic[2:])
            except ValueError:
                raise self.error(line, f"未知の条件コードです: {mnemonic}", mnemonic)
            self._arity(args, 1, mnemonic, line)
            return Instruction(Opcode.BRANCH, cond=cond, target=self._target(args[0], line),
                               shadow=shadow, note=line.note)
        try:
            opcode = Opcode(mnemonic)
        except ValueError:
            raise self.error(line, f"未知の命令です: {mnemonic}", mnemonic)
        if opcode == Opcode.BRANCH:
            raise self.error(line, "分岐には条件コードが必要です", mnemonic)
        if opcode in NULLARY_OPCODES:
            self._arity(args, 0, mnemonic, line)
            return Instruction(opcode, shadow=shadow, note=line.note)
        if opcode == Opcode.JMP:
            self._arity(args, 1, mnemonic, line)
            return Instruction(opcode, target=self._target(args[0], line), shadow=shadow, note=line.note)
        if opcode == Opcode.LOAD:
            self._arity(args, 2, mnemonic, line)
            return Instruction(opcode, dest=self.register(args[0], line), address=self.address(args[1], line),
                               shadow=shadow, note=line.note)
        if opcode == Opcode.STORE:
            self._arity(args, 2, mnemonic, line)
            return Instruction(opcode, sources=(self.register(args[0], line),),
                               address=self.address(args[1], line), shadow=shadow, note=line.note)
        if opcode == Opcode.MOV:
            self._arity(args, 2, mnemonic, line)
            return Instruction(opcode, dest=self.register(args[0], line), sources=(self.operand(args[1], line),),
                               shadow=shadow, note=line.note)
        if opcode in BINARY_OPCODES:
            self._arity(args, 3, mnemonic, line)
            return Instruction(opcode, dest=self.register(args[0], line),
                               sources=(self.register(args[1], line), self.operand(args[2], line)),
                               shadow=shadow, note=line.note)
        if opcode == Opcode.CMP:
            self._arity(args, 2, mnemonic, line)
            return Instruction(opcode, sources=(self.register(args[0], line), self.operand(args[1], line)),
                               shadow=shadow, note=line.note)
        # csel rd, a, b, cc
        self._arity(args, 4, mnemonic, line)
        try:
            cond = Condition(args[3])
        except ValueError:
            raise self.error(line, f"未知の条件コードです: {args[3]}", args[3])
        return Instruction(opcode, dest=self.register(args[0], line),
                           sources=(self.operand(args[1], line), self.operand(args[2], line)),
                           cond=cond, shadow=shadow, note=line.note)

    @staticmethod
    def _split_operands(rest: str) -> List[str]:
        if not rest:
            return []
        parts, depth, current = [], 0, ""
        for ch in rest:
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
            if ch == "," and depth == 0:
                parts.append(current.strip())
                current = ""
            else:
                current += ch
        parts.append(current.strip())
        return parts

    def _arity(self, args: List[str], count: int, mnemonic: str, line: _Line) -> None:
        if len(args) != count:
            raise self.error(line, f"{mnemonic} のオペランド数は {count} です", mnemonic)

    def _target(self, token: str, line: _Line) -> str:
        if not NAME_PATTERN.match(token):
            raise self.error(line, f"ラベル名が不正です: {token}", token)
        return token

    def run(self) -> Program:
        self.split_lines()
        body = self.directives()
        self.body(body)
        if not self.instructions:
            raise AssemblyError("命令がありません", code="empty-program")
        if self._next_address > self.addrspace:
            raise AssemblyError(
                f"データ領域({self._next_address}バイト)がアドレス空間({self.addrspace}バイト)に収まりません",
                code="addrspace-range",
            )
        program = Program(
            instructions=tuple(self.instructions),
            labels=dict(self.labels),
            data=tuple(self.data),
            security=dict(self.security),
            entry=self.entry[0] if self.entry else None,
            addrspace=self.addrspace,
            initial_observations=tuple(name for name, _ in self.initial),
        )
        return program.validate()


def parse_program(text: str) -> Program:
    """
    アセンブリテキストを Program に変換する。

    Args:
        text (str): アセンブリテキスト

    Returns:
        Program: ラベル解決済みのプログラム

    Raises:
        TypeError: text が文字列でない場合
        AssemblyError: 構文エラー、未定義ラベル、重複名、アドレス空間の範囲外
    """
    # --- 型チェック ---
    if not isinstance(text, str):
        raise TypeError("アセンブリテキストは文字列で指定してください")
    program = _Parser(text).run()
    logger.debug("プログラムを解析しました: %d 命令, データ %d 項目", len(program), len(program.data))
    return program


def print_program(program: Program) -> str:
    """正規形のアセンブリテキスト。parse_program と往復して元に戻る"""
    lines = [f".addrspace {program.addrspace}"]
    for item in program.data:
        if item.fixed_value is not None:
            lines.append(f".word {item.name} {item.fixed_value}")
        else:
            lines.append(f".array {item.name} {item.size}")
    for name, label in program.security.items():
        lines.append(f".{label.value} {name}")
    for name in program.initial_observations:
        lines.append(f".obs initial {name}")
    if program.entry is not None:
        lines.append(f".entry {program.entry}")
    lines.append("")
    by_index: Dict[int, List[str]] = {}
    for name, index in program.labels.items():
        by_index.setdefault(index, []).append(name)
    for index, instr in enumerate(program.instructions):
        for name in by_index.get(index, []):
            lines.append(f"{name}:")
        lines.append(f"    {instr}")
    return "\n".join(lines) + "\n"


def program_hash(program: Program) -> str:
    return sha256_text(print_program(program))
