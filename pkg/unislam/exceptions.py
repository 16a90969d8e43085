from typing import List, Optional, Union, Dict, Any


class SlamError(Exception):
    def __init__(self, messages: Optional[Union[List, str]] = None) -> None:
        super().__init__(messages)
        if messages is None:
            messages = []
        elif not isinstance(messages, list):
            messages = [messages]
        self.messages = messages

    def __str__(self) -> str:
        return '\n'.join(self.messages)


class ParserError(SlamError):
    pass


class ColumnError(ParserError):
    pass


class SkipRow(ParserError):
    pass


class StopParsing(ParserError):
    pass


class ConfigError(SlamError):
    pass


class DatasetError(SlamError):
    pass


class GradientError(SlamError):
    pass


class NonFiniteLossError(GradientError):
    def __init__(self, term: str, value: float) -> None:
        super().__init__(f'Loss term {term} is not finite ({value}).')
        self.term = term


class AllMaskedBatch(SlamError):
    def __init__(self, messages: Optional[Union[List, str]] = None, available_terms: Optional[Dict[str, Any]] = None):
        super().__init__(messages or 'Every ray of the batch is masked by the confidence function.')
        self.available_terms = available_terms or {}


class RenderingError(SlamError):
    pass


class RayMissError(RenderingError):
    pass


class MeshError(SlamError):
    pass


class EvaluationError(SlamError):
    pass


class CheckpointError(SlamError):
    pass
