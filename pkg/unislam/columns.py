import dataclasses
import re
from typing import Any, Callable

from unislam.constants import COLUMN_NAME_PATTERN
from unislam.exceptions import ParserError


def keep_raw(value: Any) -> Any:
    return value


@dataclasses.dataclass(frozen=True)
class Column:
    """Position of one field in a record row, the codec that reads it and the row-level checks."""

    name: str
    index: int
    processor: Callable[[Any], Any] = keep_raw
    required: bool = False
    unique: bool = False

    def __post_init__(self) -> None:
        if not re.match(COLUMN_NAME_PATTERN, self.name):
            raise ParserError(f'Column name {self.name} does not match the pattern {COLUMN_NAME_PATTERN}.')
        if self.index < 0:
            raise ParserError(f'Column {self.name} has a negative index {self.index}.')
