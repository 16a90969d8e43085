"""
Field codecs shared by the record-file parsers and the run config.

A processor reads one raw field into a typed value when called and writes it back with
`to_text`. Blank input always reads as None; any failure surfaces as `ColumnError`.
"""
import math
import re
from typing import Any, Dict, Iterable, List, Optional

from unislam.constants import WHITESPACES
from unislam.exceptions import ColumnError, StopParsing

_INTEGER_PATTERN = re.compile(r'^-?\d+$')

TRUE_WORDS = frozenset({True, 'True', 'true', '1', 'yes', 'on'})
FALSE_WORDS = frozenset({False, 'False', 'false', '0', 'no', 'off'})


def is_blank(value: Any) -> bool:
    return value is None or (isinstance(value, str) and not value.strip(WHITESPACES))


def check_range(value: Any, low: Any, high: Any, closed_low: bool = True) -> Any:
    below = low is not None and (value < low if closed_low else value <= low)
    above = high is not None and value > high
    if below or above:
        raise ColumnError(f'{value} is not in range {"[" if closed_low else "("}{low}..{high}].')
    return value


class BaseProcessor:
    def process_value(self, value: Any) -> Any:
        return value

    def to_text(self, value: Any) -> str:
        return str(value)

    def __call__(self, value: Any) -> Any:
        if is_blank(value):
            return None
        try:
            return self.process_value(value)
        except (ColumnError, StopParsing):
            raise
        except Exception as e:  # noqa: B902
            raise ColumnError(str(e)) from e


class StringProcessor(BaseProcessor):
    def process_value(self, value: Any) -> str:
        return str(value).strip(WHITESPACES)


class IntegerProcessor(BaseProcessor):
    """Whole numbers in `[min_value, max_value]`; either bound may be left open."""

    def __init__(self, min_value: Optional[int] = None, max_value: Optional[int] = None) -> None:
        self.min_value = min_value
        self.max_value = max_value

    def process_value(self, value: Any) -> int:
        if isinstance(value, bool):
            number = None
        elif isinstance(value, int):
            number = value
        elif isinstance(value, float):
            number = int(value) if value.is_integer() else None
        else:
            text = str(value).strip(WHITESPACES)
            number = int(text) if _INTEGER_PATTERN.match(text) else None
        if number is None:
            raise ColumnError(f'{value} is not an integer.')
        return check_range(number, self.min_value, self.max_value)


class FloatProcessor(BaseProcessor):
    """
    Finite floats, decimal comma accepted.

    With bounds the range is `(min_value, max_value]`; `include_min` closes the lower end.
    """

    def __init__(
        self, min_value: Optional[float] = None, max_value: Optional[float] = None, include_min: bool = False,
    ) -> None:
        self.min_value = min_value
        self.max_value = max_value
        self.include_min = include_min

    def process_value(self, value: Any) -> float:
        if isinstance(value, bool):
            raise ColumnError(f'{value} is not a floating point number.')
        try:
            number = float(value) if isinstance(value, (int, float)) else float(str(value).strip().replace(',', '.'))
        except ValueError:
            raise ColumnError(f'{value} is not a floating point number.')
        if not math.isfinite(number):
            raise ColumnError(f'{value} is not a finite number.')
        return check_range(number, self.min_value, self.max_value, closed_low=self.include_min)

    def to_text(self, value: Any) -> str:
        return repr(float(value))


class BooleanProcessor(BaseProcessor):
    def __init__(self, true_values: Optional[Iterable] = None, false_values: Optional[Iterable] = None) -> None:
        self.true_values = frozenset(true_values) if true_values else TRUE_WORDS
        self.false_values = frozenset(false_values) if false_values else FALSE_WORDS

    def process_value(self, value: Any) -> bool:
        word = value.strip(WHITESPACES) if isinstance(value, str) else value
        if word in self.true_values:
            return True
        if word in self.false_values:
            return False
        expected = sorted(str(item) for item in self.true_values | self.false_values)
        raise ColumnError(f'{value} is not a flag, expected one of {expected}.')

    def to_text(self, value: Any) -> str:
        return 'true' if value else 'false'


class VectorProcessor(BaseProcessor):
    """Space or comma separated floats, optionally of a fixed length."""

    def __init__(self, length: Optional[int] = None) -> None:
        self.length = length
        self.item = FloatProcessor()

    def process_value(self, value: Any) -> List[float]:
        items = value.replace(',', ' ').split() if isinstance(value, str) else list(value)
        vector = [self.item(item) for item in items]
        if self.length is not None and len(vector) != self.length:
            raise ColumnError(f'Expected {self.length} numbers, got {len(vector)}.')
        return vector

    def to_text(self, value: Any) -> str:
        return ' '.join(self.item.to_text(item) for item in value)


class ChoiceProcessor(BaseProcessor):
    def __init__(self, choices: Dict[Any, Any], raw_value_processor: Optional[BaseProcessor] = None) -> None:
        self.choices = choices
        self.raw_value_processor = raw_value_processor or StringProcessor()

    def process_value(self, value: Any) -> Any:
        key = self.raw_value_processor(value)
        if key not in self.choices:
            raise ColumnError(f'Unknown value {key}, expected one of {sorted(self.choices)}.')
        return self.choices[key]

    def to_text(self, value: Any) -> str:
        keys = [key for key, choice in self.choices.items() if choice == value]
        return str(keys[0] if keys else value)


def choices(*values: str) -> Dict[str, str]:
    return {value: value for value in values}
