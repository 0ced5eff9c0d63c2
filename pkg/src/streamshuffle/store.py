"""Embedded transactional state store.

Sorted tables hold keyed rows with per-key versions and support
multi-row, multi-table transactions under optimistic concurrency: reads
record the observed version, commit validates every recorded version and
applies the write buffer atomically, returning ``CONFLICT_ABORT`` (a
result, not a fault) when any read key was committed past in the
meantime. Ordered tables are append-only queues with absolute indexes
and monotone idempotent trim; reading below the trim point raises
``TrimmedRange`` because in this system that means a reader fell behind
trimming — an exactly-once violation, never something to paper over.

Every committed transaction and ordered append is recorded in
``commit_log`` (for the harness's atomicity/serializability checkers)
and, when a journal is attached, as one length-prefixed journal record
(for the write-amplification meter).
"""

from __future__ import annotations

import enum
import itertools
import threading
from typing import Dict, Iterable, Optional, Sequence, Tuple

from .errors import SchemaMismatch, TableNotFound, TrimmedRange
from .rows import NameTable, Row, Rowset, remap_rows

DELETE = object()  # write-set marker for row deletion


class TxState(enum.Enum):
    OPEN = "open"
    COMMITTED = "committed"
    ABORTED = "aborted"


class CommitResult(enum.Enum):
    COMMITTED = "committed"
    CONFLICT_ABORT = "conflict_abort"


class Transaction:
    """Client-side read/write buffers; holds no locks until commit."""

    __slots__ = ("id", "read_set", "write_set", "state", "owner")

    def __init__(self, tx_id: int):
        self.id = tx_id
        # (table, key) -> version observed on first read; later reads of
        # the same key keep the first version so any intervening commit
        # still fails validation.
        self.read_set: Dict[Tuple[str, tuple], int] = {}
        self.write_set: Dict[Tuple[str, tuple], object] = {}
        self.state = TxState.OPEN
        # Optional committer identity (worker guid); purely diagnostic —
        # the checkers use it to attribute commit-log entries.
        self.owner: Optional[str] = None


class SortedTable:
    __slots__ = ("name", "key_columns", "value_table", "rows", "versions")

    def __init__(self, name: str, key_columns: Sequence[str],
                 value_table: NameTable):
        self.name = name
        self.key_columns = tuple(key_columns)
        self.value_table = value_table
        self.rows: Dict[tuple, Row] = {}
        # Versions outlive deletions so a read-after-delete still records
        # a version that conflicts with the deleting transaction.
        self.versions: Dict[tuple, int] = {}

    def version(self, key: tuple) -> int:
        return self.versions.get(key, 0)


class OrderedTable:
    __slots__ = ("name", "name_table", "_rows", "_first", "trimmed_up_to")

    def __init__(self, name: str, name_table: Optional[NameTable] = None):
        self.name = name
        self.name_table = name_table if name_table is not None else NameTable()
        self._rows: list = []
        self._first = 0  # absolute index of _rows[0]
        self.trimmed_up_to = 0

    @property
    def end_index(self) -> int:
        return self._first + len(self._rows)


class CommitRecord:
    """One entry of the store's commit log (checker food, not durability)."""

    __slots__ = ("sequence", "tx_id", "reads", "writes", "appends", "owner")

    def __init__(self, sequence, tx_id, reads, writes, appends=(), owner=None):
        self.sequence = sequence
        self.tx_id = tx_id
        self.reads = reads      # tuple of (table, key, observed_version)
        self.writes = writes    # tuple of (table, key, row_or_None, new_version)
        self.appends = appends  # tuple of (table, first_index, row_count)
        self.owner = owner      # committing worker guid, if stamped


class StateStore:
    """In-memory store shared by every worker in a scenario."""

    def __init__(self, journal=None):
        self._lock = threading.RLock()
        self._sorted: Dict[str, SortedTable] = {}
        self._ordered: Dict[str, OrderedTable] = {}
        self._tx_ids = itertools.count(1)
        self._sequence = itertools.count(1)
        self.journal = journal
        self.commit_log: list = []

    # -- table management -------------------------------------------------

    def create_sorted_table(self, name: str, key_columns: Sequence[str],
                            value_columns: Iterable[str] = ()) -> SortedTable:
        with self._lock:
            if name in self._sorted or name in self._ordered:
                raise ValueError("table %r already exists" % name)
            table = SortedTable(name, key_columns, NameTable(value_columns))
            self._sorted[name] = table
            return table

    def create_ordered_table(self, name: str,
                             columns: Iterable[str] = ()) -> OrderedTable:
        with self._lock:
            if name in self._sorted or name in self._ordered:
                raise ValueError("table %r already exists" % name)
            table = OrderedTable(name, NameTable(columns))
            self._ordered[name] = table
            return table

    def sorted_table(self, name: str) -> SortedTable:
        table = self._sorted.get(name)
        if table is None:
            raise TableNotFound("no sorted table %r" % name)
        return table

    def ordered_table(self, name: str) -> OrderedTable:
        table = self._ordered.get(name)
        if table is None:
            raise TableNotFound("no ordered table %r" % name)
        return table

    def sorted_table_names(self) -> tuple:
        return tuple(self._sorted)

    def ordered_table_names(self) -> tuple:
        return tuple(self._ordered)

    # -- transactions -------------------------------------------------------

    def begin(self) -> Transaction:
        return Transaction(next(self._tx_ids))

    def tx_read(self, tx: Transaction, table_name: str, key: tuple):
        """Committed row (or None), with read-your-writes inside the tx."""
        if tx.state is not TxState.OPEN:
            raise ValueError("transaction %d is %s" % (tx.id, tx.state.value))
        table = self.sorted_table(table_name)
        self._check_key(table, key)
        with self._lock:
            slot = (table_name, key)
            tx.read_set.setdefault(slot, table.version(key))
            if slot in tx.write_set:
                buffered = tx.write_set[slot]
                return None if buffered is DELETE else buffered
            return table.rows.get(key)

    def tx_write(self, tx: Transaction, table_name: str, key: tuple, row: Row):
        if tx.state is not TxState.OPEN:
            raise ValueError("transaction %d is %s" % (tx.id, tx.state.value))
        table = self.sorted_table(table_name)
        self._check_key(table, key)
        if len(row.values) > len(table.value_table):
            raise SchemaMismatch(
                "row has %d values but table %r has %d value columns"
                % (len(row.values), table_name, len(table.value_table))
            )
        tx.write_set[(table_name, key)] = row

    def tx_delete(self, tx: Transaction, table_name: str, key: tuple):
        if tx.state is not TxState.OPEN:
            raise ValueError("transaction %d is %s" % (tx.id, tx.state.value))
        table = self.sorted_table(table_name)
        self._check_key(table, key)
        tx.write_set[(table_name, key)] = DELETE

    def commit(self, tx: Transaction) -> CommitResult:
        if tx.state is not TxState.OPEN:
            raise ValueError("transaction %d is %s" % (tx.id, tx.state.value))
        with self._lock:
            for (table_name, key), observed in tx.read_set.items():
                if self.sorted_table(table_name).version(key) != observed:
                    tx.state = TxState.ABORTED
                    return CommitResult.CONFLICT_ABORT
            writes = []
            for (table_name, key), row in tx.write_set.items():
                table = self.sorted_table(table_name)
                version = table.version(key) + 1
                table.versions[key] = version
                if row is DELETE:
                    table.rows.pop(key, None)
                    writes.append((table_name, key, None, version))
                else:
                    table.rows[key] = row
                    writes.append((table_name, key, row, version))
            tx.state = TxState.COMMITTED
            record = CommitRecord(
                next(self._sequence),
                tx.id,
                tuple((t, k, v) for (t, k), v in tx.read_set.items()),
                tuple(writes),
                owner=tx.owner,
            )
            self.commit_log.append(record)
            if self.journal is not None:
                self.journal.write_commit(record)
            return CommitResult.COMMITTED

    def abort(self, tx: Transaction):
        if tx.state is TxState.OPEN:
            tx.state = TxState.ABORTED

    def read(self, table_name: str, key: tuple):
        """Non-transactional committed read (checker/CLI convenience)."""
        table = self.sorted_table(table_name)
        self._check_key(table, key)
        with self._lock:
            return table.rows.get(key)

    @staticmethod
    def _check_key(table: SortedTable, key: tuple):
        if len(key) != len(table.key_columns):
            raise SchemaMismatch(
                "key has %d values but table %r keys on %d columns"
                % (len(key), table.name, len(table.key_columns))
            )

    # -- ordered tables -------------------------------------------------------

    def append_rows(self, table_name: str, rowset: Rowset) -> int:
        table = self.ordered_table(table_name)
        with self._lock:
            first = table.end_index
            rows = remap_rows(rowset, table.name_table)
            table._rows.extend(rows)
            record = CommitRecord(
                next(self._sequence), 0, (), (),
                appends=((table_name, first, len(rows)),),
            )
            self.commit_log.append(record)
            if self.journal is not None and rows:
                self.journal.write_append(record.sequence, table_name,
                                          first, rows)
            return first

    def read_range(self, table_name: str, begin: int, end: int) -> Rowset:
        if begin > end:
            raise ValueError("begin %d > end %d" % (begin, end))
        table = self.ordered_table(table_name)
        with self._lock:
            if begin < table.trimmed_up_to:
                raise TrimmedRange(
                    "read at %d but table %r is trimmed to %d"
                    % (begin, table_name, table.trimmed_up_to)
                )
            end = min(end, table.end_index)
            if end <= begin:
                return Rowset(table.name_table, ())
            lo = begin - table._first
            hi = end - table._first
            return Rowset(table.name_table, table._rows[lo:hi])

    def trim_table(self, table_name: str, up_to: int):
        table = self.ordered_table(table_name)
        with self._lock:
            up_to = min(up_to, table.end_index)
            if up_to <= table.trimmed_up_to:
                return
            table.trimmed_up_to = up_to
            # Actually release the prefix; absolute indexes are preserved
            # by advancing _first.
            drop = up_to - table._first
            if drop > 0:
                del table._rows[:drop]
                table._first = up_to

    def table_end_index(self, table_name: str) -> int:
        return self.ordered_table(table_name).end_index

    def table_trimmed_up_to(self, table_name: str) -> int:
        return self.ordered_table(table_name).trimmed_up_to

    # -- whole-store helpers ----------------------------------------------

    def snapshot_sorted(self, table_name: str) -> dict:
        """Point-in-time copy of a sorted table's rows (atomic)."""
        table = self.sorted_table(table_name)
        with self._lock:
            return dict(table.rows)
