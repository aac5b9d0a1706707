"""teacher-extract: pool contextual-encoder vectors into teacher records."""

from .extract import ExtractStats, extract
from .records import Record, RecordWriter, ValidationReport, validate
from .windows import Vocab, pack_position, tokenize

__version__ = "0.1.0"

__all__ = [
    "ExtractStats",
    "Record",
    "RecordWriter",
    "ValidationReport",
    "Vocab",
    "extract",
    "pack_position",
    "tokenize",
    "validate",
]
