"""
汎用ヘルパー
機械語ワード演算・アライメント・ハッシュなど
"""

import hashlib

WORD_BITS = 32
WORD_MASK = (1 << WORD_BITS) - 1


def fits_word(value: int) -> bool:
    """値が符号付きまたは符号なしの32ビットに収まるか"""
    return -(1 << (WORD_BITS - 1)) <= value <= WORD_MASK


def is_power_of_two(value: int) -> bool:
    """
    2のべき乗かどうかを判定する。

    Args:
        value (int): 判定する値

    Returns:
        bool: 1, 2, 4, ... のとき True

    Raises:
        TypeError: value が整数でない場合
    """
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError("整数で指定してください")
    return value > 0 and (value & (value - 1)) == 0


def log2_exact(value: int) -> int:
    """
    2のべき乗の対数を返す。

    Raises:
        ValueError: value が2のべき乗でない場合
    """
    if not is_power_of_two(value):
        raise ValueError(f"2のべき乗ではありません: {value}")
    return value.bit_length() - 1


def align_up(value: int, alignment: int) -> int:
    """
    value を alignment の倍数に切り上げる。

    Args:
        value (int): 対象値(0以上)
        alignment (int): アライメント(2のべき乗)

    Returns:
        int: 切り上げ後の値

    Raises:
        ValueError: 値が負、またはアライメントが2のべき乗でない場合
    """
    if value < 0:
        raise ValueError("負の値は切り上げできません")
    if not is_power_of_two(alignment):
        raise ValueError("アライメントは2のべき乗で指定してください")
    return (value + alignment - 1) & ~(alignment - 1)


def sha256_text(text: str) -> str:
    """テキストの SHA-256 ハッシュ(16進)"""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def format_hex(value: int) -> str:
    """ワードを 0x 形式で表示する"""
    return f"0x{value & WORD_MASK:x}"
