"""streamshuffle: a streaming MapReduce shuffle stage on a transactional store.

Mappers ingest partitioned sources into rolling in-memory windows, bucket
rows per reducer, and serve them through idempotent pull RPCs; reducers
commit consumed positions and user state in one transaction, giving
exactly-once output under crashes, restarts, duplicated workers, and
network faults. Everything runs on a deterministic discrete-event
simulator so failure schedules replay bit-identically from a seed.
"""

__version__ = "0.1.0"

from .errors import ShuffleError  # noqa: F401
