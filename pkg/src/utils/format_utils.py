"""
Fixed, locale-independent number formatting for every artifact writer
"""
import json
from typing import Any, Iterable, Optional

FLOAT_DECIMALS = 6


def format_float(value: float, decimals: int = FLOAT_DECIMALS) -> str:
    """Format with a fixed number of decimals; -0 is written as 0."""
    text = f"{float(value):.{decimals}f}"
    if text.startswith("-") and float(text) == 0.0:
        text = text[1:]
    return text


def round_float(value: Optional[float], decimals: int = FLOAT_DECIMALS) -> Optional[float]:
    """Round a value destined for JSON so its repr is stable across runs."""
    if value is None:
        return None
    rounded = round(float(value), decimals)
    return 0.0 if rounded == 0.0 else rounded


def round_vector(values: Optional[Iterable[float]], decimals: int = FLOAT_DECIMALS) -> Optional[list]:
    if values is None:
        return None
    return [round_float(v, decimals) for v in values]


def dumps_stable(obj: Any, indent: Optional[int] = None) -> str:
    """JSON text with sorted keys and ASCII-only output."""
    return json.dumps(obj, sort_keys=True, indent=indent, ensure_ascii=True, allow_nan=False)


def format_duration(seconds: float) -> str:
    """Human display of a duration for CLI output, e.g. 1m 05.0s"""
    minutes, rest = divmod(float(seconds), 60.0)
    if minutes:
        return f"{int(minutes)}m {rest:04.1f}s"
    return f"{rest:.1f}s"
