"""Exception types shared across the package."""


class ShuffleError(Exception):
    """Base class for all streamshuffle errors."""


class MalformedEncoding(ShuffleError):
    """A binary buffer is truncated, carries an unknown tag, or overruns
    its declared lengths. Signals transport or storage corruption."""


class MissingKeyColumn(ShuffleError):
    """A requested key column is absent from the rowset's name table."""


class TableNotFound(ShuffleError):
    pass


class SchemaMismatch(ShuffleError):
    pass


class TrimmedRange(ShuffleError):
    """A read touched rows below the trim horizon. In this system a reader
    falling behind trimming indicates an exactly-once violation, so this is
    an error, never a silent skip."""


class InvalidToken(ShuffleError):
    """Continuation token is corrupt or belongs to a different source kind."""


class SourceUnavailable(ShuffleError):
    """Transient input-source failure; callers retry on the next cycle."""


class StateUnavailable(ShuffleError):
    """Transient state-store failure during worker bootstrap."""


class RpcError(ShuffleError):
    pass


class RpcTimeout(RpcError):
    pass


class RpcUnreachable(RpcError):
    pass


class JournalDisabled(ShuffleError):
    """Write-amplification metering requires the store journal to be on."""


class DeadlockError(ShuffleError):
    """Virtual time advanced past the progress bound with work still
    pending and no fault event left that could unblock it."""


class SpecError(ShuffleError):
    """A scenario/processor spec file failed validation; the message names
    the offending field."""
