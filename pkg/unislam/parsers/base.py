from __future__ import annotations

import collections
import pathlib
from typing import TYPE_CHECKING

from unislam.columns import Column
from unislam.exceptions import ColumnError, ParserError, SkipRow, StopParsing

if TYPE_CHECKING:
    from typing import IO, Any, DefaultDict, Dict, Iterator, List, Optional, Sequence, Tuple, Union

    Row = Sequence[Any]


class BaseParser:
    """
    Turns the rows of a record file into dictionaries keyed by column name.

    Subclasses declare `columns` and implement `iterate_file_rows`. A row whose columns fail
    their processors is skipped and its errors are collected; `raise_errors` turns the
    collected errors into one `ParserError` at the end.
    """

    columns: List[Column] = []
    skip_empty_rows: bool = True
    add_row_index: bool = True

    def __init__(
        self,
        file_path: Optional[Union[pathlib.Path, str]] = None,
        file_contents: Optional[IO] = None,
        encoding: str = 'utf-8',
    ) -> None:
        self.file_path = file_path
        self.file_contents = file_contents
        self.encoding = encoding
        self.cleaned_data: List[Dict[str, Any]] = []
        self.errors: List[str] = []
        self._seen_values: DefaultDict[str, Dict[Any, int]] = collections.defaultdict(dict)

    @property
    def has_errors(self) -> bool:
        return bool(self.errors)

    def iterate_file_rows(self) -> Iterator[Tuple[int, Row]]:
        raise NotImplementedError

    def parse_column(self, row: Row, column: Column, row_index: int) -> Any:
        value = row[column.index] if column.index < len(row) else None
        try:
            value = column.processor(value)
            value = self.clean_column(column, value)
            return self.clean_unique_value(column, value, row_index)
        except StopParsing:
            raise
        except Exception as e:  # noqa: B902
            raise ColumnError(getattr(e, 'messages', str(e))) from e

    def parse_row(self, row: Row, row_index: int) -> Dict[str, Any]:
        row_data = {}
        failed = False
        for column in self.columns:
            try:
                row_data[column.name] = self.parse_column(row, column, row_index)
            except ColumnError as e:
                self.add_errors(e.messages, row_index=row_index, col_index=column.index)
                failed = True
        if failed:
            raise SkipRow('Not processed because the line contains errors.')
        return self.clean_row(row_data, row, row_index)

    def clean_column(self, column: Column, value: Any) -> Any:
        hook = getattr(self, f'clean_column_{column.name}', None)
        return value if hook is None else hook(value)

    def clean_unique_value(self, column: Column, value: Any, row_index: int) -> Any:
        if value is None or not column.unique:
            return value
        seen = self._seen_values[column.name]
        if value in seen:
            raise ColumnError(f'value {value} is a duplicate of row {seen[value]}')
        seen[value] = row_index
        return value

    def clean_row(self, row_data: Dict[str, Any], row: Row, row_index: int) -> Dict[str, Any]:
        if self.skip_empty_rows and all(row_data.get(column.name) is None for column in self.columns):
            raise SkipRow
        row_data = self.clean_row_required_columns(row_data, row, row_index)
        if self.add_row_index:
            row_data['row_index'] = row_index
        return row_data

    def clean_row_required_columns(self, row_data: Dict[str, Any], row: Row, row_index: int) -> Dict[str, Any]:
        blank = [column for column in self.columns if column.required and row_data.get(column.name) is None]
        for column in blank:
            self.add_errors(f'Column {column.name} is required.', row_index=row_index, col_index=column.index)
        if blank:
            raise SkipRow(f'Row {row_index} contains blank columns.')
        return row_data

    def clean(self, data: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
        """Whole-file checks after every row is parsed."""
        return data

    def _location(self, row_index: Optional[int], col_index: Optional[int]) -> List[str]:
        parts = []
        if self.file_path is not None:
            parts.append(f'file: {self.file_path}')
        if row_index is not None:
            parts.append(f'row: {row_index}')
        if col_index is not None:
            parts.append(f'column: {col_index}')
        return parts

    def add_errors(
        self,
        messages: Union[str, List[str]],
        row_index: Optional[int] = None,
        col_index: Optional[int] = None,
    ) -> None:
        location = self._location(row_index, col_index)
        for message in messages if isinstance(messages, list) else [messages]:
            error = ', '.join(location + [message])
            self.errors.append(error)

    def _parse(self) -> None:
        data = []
        for row_index, row in self.iterate_file_rows():
            try:
                data.append(self.parse_row(row, row_index))
            except SkipRow:
                continue
        self.cleaned_data = self.clean(data)

    def __call__(self, raise_errors: bool = False) -> None:
        try:
            self._parse()
        except Exception as e:  # noqa: B902
            self.add_errors(getattr(e, 'messages', str(e)))
        if raise_errors and self.has_errors:
            raise ParserError(self.errors)
