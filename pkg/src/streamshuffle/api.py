"""User-facing pipeline contract: Map and Reduce callbacks.

The runtime owns batching, shuffle numbering, retries, and the
exactly-once bookkeeping; user code supplies two deterministic pieces:

* ``Mapper.map_row`` — applied to one input row at a time, so shuffle
  numbering is independent of how reads happened to be batched. A
  restarted mapper that re-reads the same input rows therefore emits
  bit-identical shuffle rows with identical indexes even when its batch
  boundaries differ from the previous incarnation's.
* ``Reducer.reduce`` — receives a batch of shuffled rows plus a
  :class:`ReduceContext` whose writes join the runtime's commit, making
  user effects and progress bookkeeping atomic.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .rows import Row, Rowset
from .store import StateStore, Transaction


class Mapper(ABC):
    """Deterministic per-row map: one input row to zero or more rows.

    ``output_columns`` names the emitted rows' columns; every returned
    :class:`Row` is positional over that list.
    """

    output_columns: Sequence[str] = ()

    @abstractmethod
    def map_row(self, rowset: Rowset, row: Row) -> List[Row]:
        """Map one row. ``rowset`` is passed for named value access only
        (``rowset.value(row, name)``); implementations must not depend on
        the other rows in the batch.
        """


class Reducer(ABC):
    """Processes one combined batch of shuffled rows.

    Writes go through ``ctx``; they commit atomically with the runtime's
    progress state. Implementations may raise — the round is retried and
    the batch re-served, so effects must only happen through ``ctx``.
    """

    @abstractmethod
    def reduce(self, ctx: "ReduceContext", batch: Rowset) -> None:
        ...


class ReduceContext:
    """Transactional window a reducer's user code writes through.

    The transaction is created lazily on first access so a read-only or
    row-skipping round costs nothing; the runtime commits it together
    with its own progress row.
    """

    def __init__(self, store: StateStore, reducer_index: int):
        self.store = store
        self.reducer_index = reducer_index
        self._tx: Optional[Transaction] = None

    @property
    def tx(self) -> Transaction:
        if self._tx is None:
            self._tx = self.store.begin()
        return self._tx

    def peek_tx(self) -> Optional[Transaction]:
        return self._tx

    def get(self, table: str, key: tuple) -> Optional[Row]:
        return self.store.tx_read(self.tx, table, key)

    def put(self, table: str, key: tuple, row: Row) -> None:
        self.store.tx_write(self.tx, table, key, row)

    def delete(self, table: str, key: tuple) -> None:
        self.store.tx_delete(self.tx, table, key)


@dataclass
class TableSpec:
    """A sorted table a pipeline needs (created by the harness)."""

    name: str
    key_columns: Tuple[str, ...]
    value_columns: Tuple[str, ...] = ()


@dataclass
class Pipeline:
    """Everything the runtime needs to know about one job.

    ``key_columns`` drive hash partitioning of mapped rows across
    reducers. ``user_tables`` are created alongside the runtime's own
    state tables. ``make_mapper``/``make_reducer`` are factories so each
    worker instance gets fresh callback objects.

    ``control_column`` opts the pipeline into control strings: a String
    value ``!directive`` in that column makes the worker about to process
    the row fire the trigger point ``control:directive`` — tests bind
    one-shot fault actions to exact row positions instead of timings.
    """

    name: str
    input_columns: Tuple[str, ...]
    key_columns: Tuple[str, ...]
    make_mapper: callable = None
    make_reducer: callable = None
    user_tables: Tuple[TableSpec, ...] = ()
    control_column: Optional[str] = None

    def mapper(self) -> Mapper:
        return self.make_mapper()

    def reducer(self) -> Reducer:
        return self.make_reducer()


_REGISTRY: Dict[str, callable] = {}


def register_pipeline(name: str):
    """Class/function decorator: register a zero-arg Pipeline factory."""

    def wrap(factory):
        if name in _REGISTRY:
            raise ValueError("pipeline %r already registered" % name)
        _REGISTRY[name] = factory
        return factory

    return wrap


def pipeline_by_name(name: str) -> Pipeline:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(
            "unknown pipeline %r (have: %s)"
            % (name, ", ".join(sorted(_REGISTRY)) or "none")
        ) from None
    return factory()


def registered_pipelines() -> List[str]:
    return sorted(_REGISTRY)
