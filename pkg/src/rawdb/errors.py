"""Exception hierarchy shared across the engine."""


class RawDbError(Exception):
    """Base class for all engine errors."""


class StorageError(RawDbError):
    """Block store failures (full disk, unwritable root, partial writes)."""


class NotHereError(StorageError):
    """The addressed node does not hold a replica of the block."""


class CorruptBlockError(StorageError):
    """Stored bytes do not match the registered checksum."""


class RecordTooLargeError(StorageError):
    """A single record exceeds the target block size."""


class MetadataDecodeError(RawDbError):
    """A metadata file failed structural decoding.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MetadataInconsistencyError(RawDbError):
    """Metadata disagrees with the data block it describes."""


class ConfigError(RawDbError):
    """Invalid decorator or engine configuration."""


class IngestError(RawDbError):
    """A tuple or input file was rejected during a write."""


class CatalogError(RawDbError):
    """Unknown or duplicate table / node registrations."""


class SqlError(RawDbError):
    """Base for query-language errors."""


class ParseError(SqlError):
    """Syntax error with position information."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnsupportedSqlError(SqlError):
    """Recognized but deliberately unsupported construct."""


class PlanError(SqlError):
    """Semantic planning failure (unknown table/attribute, bad mix)."""


class QueryError(RawDbError):
    """Runtime query failure (fragment exhausted replicas, merge gap)."""


class ClusterError(RawDbError):
    """Coordinator/worker communication failure."""
