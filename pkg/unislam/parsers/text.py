import io
from contextlib import contextmanager
from typing import Any, Iterator, List, Optional, Tuple

from unislam.exceptions import StopParsing
from unislam.parsers.base import BaseParser


class BaseTextParser(BaseParser):
    """
    Parser for whitespace separated text tables such as TUM index files and trajectories.

    Lines starting with `comment_prefix` and blank lines are skipped; `expected_fields`
    (when set) rejects lines with another number of fields.
    """

    comment_prefix: str = '#'
    expected_fields: Optional[int] = None

    @contextmanager
    def open_file(self) -> Iterator:
        if self.file_path:
            try:
                file_obj = open(self.file_path, 'r', encoding=self.encoding)
            except (TypeError, IOError) as e:
                raise StopParsing(f'Unable to open {self.file_path}: {e}')
            try:
                yield file_obj
            finally:
                file_obj.close()
        elif self.file_contents:
            data = self.file_contents.read()
            if isinstance(data, bytes):
                yield io.StringIO(data.decode(self.encoding))
            else:
                yield io.StringIO(data)
        else:
            raise StopParsing('Neither a file path nor file contents were given.')

    def iterate_file_rows(self) -> Iterator[Tuple[int, List[Any]]]:
        with self.open_file() as text_file:
            for row_index, line in enumerate(text_file):
                stripped = line.strip()
                if not stripped or stripped.startswith(self.comment_prefix):
                    continue
                row = stripped.split()
                if self.expected_fields is not None and len(row) != self.expected_fields:
                    self.add_errors(
                        f'expected {self.expected_fields} fields, got {len(row)}', row_index=row_index,
                    )
                    continue

                yield row_index, row
