"""Mapper worker: ingestion window, per-reducer buckets, GetRows serving.

The mapper's job is to make the shuffle replayable. All mapped rows live
in a RAM-only rolling window; the only durable facts are three values in
one state-table row — the input row index, shuffle row index, and source
continuation token *below which everything has been consumed by every
reducer*. After a crash, a fresh instance re-reads the source from that
token; because the map is per-row deterministic, the re-mapped rows get
bit-identical shuffle indexes, so reducers' committed indexes remain
valid against the new incarnation.

Window bookkeeping (the load-bearing invariant): each window entry's
``bucket_pointer_count`` is the number of reducer buckets whose *head*
row currently lives in that entry. An entry whose count is zero and that
sits at the front of the window is fully consumed — every row in it (and
in every entry before it) has been popped by the owning reducer — so the
front run of zero-count entries can be discarded and the *local* state
advanced to the last discarded entry's after-the-end indexes and token.
A periodic task then publishes the local state to the store
transactionally (which doubles as split-brain detection) and only after
that commit trims the source.

Restart defense: an impostor with the same mapper index advances the
state row; this instance's next ingestion-time state fetch (or its trim
transaction) sees a value it did not persist and restarts from the
committed state instead of double-consuming the source.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Callable, List, Optional

from . import wire
from .errors import (
    InvalidToken,
    SourceUnavailable,
    StateUnavailable,
    TrimmedRange,
)
from .rows import (
    Kind,
    NameTable,
    Row,
    Rowset,
    encoded_size,
    encode_rowset,
    hash_partition,
    int64,
    remap_rows,
    string,
    uint64,
)
from .net import StoreClient, Worker
from .sim import Future
from .sources import PartitionReader, serialize_token, deserialize_token
from .store import CommitResult, StateStore

STATE_KEY_COLUMNS = ("mapper_index",)
STATE_VALUE_COLUMNS = (
    "input_unread_row_index",
    "shuffle_unread_row_index",
    "continuation_token",
)


def create_mapper_state_table(store: StateStore, name: str = "mapper_state"):
    return store.create_sorted_table(name, STATE_KEY_COLUMNS,
                                     STATE_VALUE_COLUMNS)


class MapperState:
    """The durable triple: everything below these cursors is consumed."""

    __slots__ = ("input_unread_row_index", "shuffle_unread_row_index",
                 "token_bytes")

    def __init__(self, input_unread_row_index: int,
                 shuffle_unread_row_index: int, token_bytes: bytes):
        self.input_unread_row_index = input_unread_row_index
        self.shuffle_unread_row_index = shuffle_unread_row_index
        self.token_bytes = token_bytes

    def __eq__(self, other):
        if not isinstance(other, MapperState):
            return NotImplemented
        return (
            self.input_unread_row_index == other.input_unread_row_index
            and self.shuffle_unread_row_index == other.shuffle_unread_row_index
            and self.token_bytes == other.token_bytes
        )

    def __repr__(self):
        return "MapperState(input=%d, shuffle=%d, token=%r)" % (
            self.input_unread_row_index,
            self.shuffle_unread_row_index,
            self.token_bytes,
        )

    def to_row(self) -> Row:
        return Row((
            int64(self.input_unread_row_index),
            int64(self.shuffle_unread_row_index),
            string(self.token_bytes),
        ))

    @classmethod
    def from_row(cls, row: Optional[Row],
                 default: "MapperState") -> "MapperState":
        """Decode a state row; an absent row means the default (fresh)."""
        if row is None:
            return default
        input_idx, shuffle_idx, token = row.values
        return cls(input_idx.payload, shuffle_idx.payload, token.payload)


def state_key(mapper_index: int) -> tuple:
    return (uint64(mapper_index),)


class WindowEntry:
    """One ingested batch: mapped rows plus the index/token frontier.

    ``input_end``/``shuffle_end``/``token_bytes`` describe the state
    *after* this batch — they become the new local state when the entry
    is trimmed. ``bucket_pointer_count`` counts buckets whose head row is
    inside this entry.
    """

    __slots__ = ("rowset", "partition_indexes", "input_begin", "input_end",
                 "shuffle_begin", "shuffle_end", "token_bytes",
                 "bucket_pointer_count", "byte_size")

    def __init__(self, rowset: Rowset, partition_indexes, input_begin: int,
                 input_end: int, shuffle_begin: int, shuffle_end: int,
                 token_bytes: bytes):
        self.rowset = rowset
        self.partition_indexes = tuple(partition_indexes)
        self.input_begin = input_begin
        self.input_end = input_end
        self.shuffle_begin = shuffle_begin
        self.shuffle_end = shuffle_end
        self.token_bytes = token_bytes
        self.bucket_pointer_count = 0
        self.byte_size = encoded_size(rowset)


class BucketState:
    """Per-reducer queue of shuffle row indexes awaiting that reducer."""

    __slots__ = ("queue", "first_window_entry_index")

    def __init__(self):
        self.queue: List[int] = []
        self._reset_head()

    def _reset_head(self):
        # Absolute window-entry index holding the queue head; None when
        # the bucket is empty (no count is held anywhere).
        self.first_window_entry_index: Optional[int] = None


class ServedBatch:
    __slots__ = ("rowset", "last_shuffle_row_index")

    def __init__(self, rowset: Rowset, last_shuffle_row_index: Optional[int]):
        self.rowset = rowset
        self.last_shuffle_row_index = last_shuffle_row_index

    def __len__(self):
        return len(self.rowset)


class MapperCore:
    """Synchronous window/bucket state machine (no I/O, no clock).

    The worker drives it; tests drive it directly against the
    hand-simulated traces.
    """

    def __init__(self, reducer_count: int):
        if reducer_count < 1:
            raise ValueError("need at least one reducer")
        self.reducer_count = reducer_count
        self.window: List[WindowEntry] = []
        self.first_window_abs_index = 0
        self.buckets = [BucketState() for _ in range(reducer_count)]
        self.local_state: Optional[MapperState] = None
        self.persisted_state: Optional[MapperState] = None
        self.input_cursor = 0
        self.shuffle_cursor = 0
        self.token_bytes = b""
        self.memory_usage = 0

    # -- lifecycle -----------------------------------------------------------

    def bootstrap(self, state: MapperState):
        """(Re)initialise from a durable state; drops all window state."""
        self.window.clear()
        self.first_window_abs_index = 0
        self.buckets = [BucketState() for _ in range(self.reducer_count)]
        self.local_state = state
        self.persisted_state = state
        self.input_cursor = state.input_unread_row_index
        self.shuffle_cursor = state.shuffle_unread_row_index
        self.token_bytes = state.token_bytes
        self.memory_usage = 0

    # -- ingestion -----------------------------------------------------------

    def append_batch(self, mapped: Rowset, partition_indexes,
                     input_row_count: int, next_token_bytes: bytes) -> WindowEntry:
        """Window a mapped batch and index its rows into the buckets.

        A batch whose map produced zero rows still becomes a (zero-size)
        entry: its end indexes and token must eventually advance the
        durable state, and only trimmed entries do that.
        """
        entry = WindowEntry(
            mapped, partition_indexes,
            input_begin=self.input_cursor,
            input_end=self.input_cursor + input_row_count,
            shuffle_begin=self.shuffle_cursor,
            shuffle_end=self.shuffle_cursor + len(mapped),
            token_bytes=next_token_bytes,
        )
        abs_index = self.first_window_abs_index + len(self.window)
        self.window.append(entry)
        self.memory_usage += entry.byte_size
        for offset, reducer_index in enumerate(entry.partition_indexes):
            bucket = self.buckets[reducer_index]
            if not bucket.queue:
                # First element of an empty bucket: this entry now holds
                # the bucket's head, so it carries the pointer count.
                entry.bucket_pointer_count += 1
                bucket.first_window_entry_index = abs_index
            bucket.queue.append(entry.shuffle_begin + offset)
        self.input_cursor = entry.input_end
        self.shuffle_cursor = entry.shuffle_end
        self.token_bytes = next_token_bytes
        return entry

    # -- GetRows -------------------------------------------------------------

    def _entry_at(self, abs_index: int) -> WindowEntry:
        return self.window[abs_index - self.first_window_abs_index]

    def pop_committed(self, reducer_index: int,
                      committed_row_index: int) -> bool:
        """Drop bucket rows the reducer has durably processed.

        Returns True when some entry's pointer count reached zero (the
        caller should then run :meth:`trim_window_entries`).
        """
        bucket = self.buckets[reducer_index]
        if not bucket.queue or bucket.queue[0] > committed_row_index:
            return False
        old_abs = bucket.first_window_entry_index
        pop_to = 0
        while pop_to < len(bucket.queue) and \
                bucket.queue[pop_to] <= committed_row_index:
            pop_to += 1
        del bucket.queue[:pop_to]
        old_entry = self._entry_at(old_abs)
        if not bucket.queue:
            old_entry.bucket_pointer_count -= 1
            bucket._reset_head()
            return old_entry.bucket_pointer_count == 0
        # The new head may live in a later entry; walk forward from the
        # old one and move the pointer count if it does.
        new_abs = old_abs
        head = bucket.queue[0]
        while self._entry_at(new_abs).shuffle_end <= head:
            new_abs += 1
        if new_abs == old_abs:
            return False
        old_entry.bucket_pointer_count -= 1
        self._entry_at(new_abs).bucket_pointer_count += 1
        bucket.first_window_entry_index = new_abs
        return old_entry.bucket_pointer_count == 0

    def serve(self, reducer_index: int, count: int) -> ServedBatch:
        """Up to ``count`` rows from the bucket head, *without* popping.

        Idempotent by construction: rows leave the bucket only via
        :meth:`pop_committed`, so a retried request re-serves the same
        rows.
        """
        bucket = self.buckets[reducer_index]
        if count <= 0 or not bucket.queue:
            return ServedBatch(Rowset(NameTable(), ()), None)
        picked = []  # (entry, row) in queue order
        abs_index = bucket.first_window_entry_index
        last_index = None
        for shuffle_index in itertools.islice(bucket.queue, count):
            while self._entry_at(abs_index).shuffle_end <= shuffle_index:
                abs_index += 1
            entry = self._entry_at(abs_index)
            picked.append(
                (entry, entry.rowset.rows[shuffle_index - entry.shuffle_begin])
            )
            last_index = shuffle_index
        first_names = picked[0][0].rowset.name_table.names
        if all(e.rowset.name_table.names == first_names for e, _ in picked):
            rowset = Rowset(picked[0][0].rowset.name_table,
                            [row for _, row in picked])
        else:
            # Entries produced under different map versions may disagree
            # on columns; re-seat everything onto a merged table.
            target = NameTable()
            rows = []
            for entry, row in picked:
                rows.extend(
                    remap_rows(Rowset(entry.rowset.name_table, (row,)), target)
                )
            rowset = Rowset(target, rows)
        return ServedBatch(rowset, last_index)

    # -- trimming ------------------------------------------------------------

    def trim_window_entries(self) -> int:
        """Pop the front run of zero-count entries; returns bytes freed.

        The last popped entry's after-the-end indexes and token become
        the new local state — the publishable consumption frontier.
        """
        freed = 0
        last: Optional[WindowEntry] = None
        while self.window and self.window[0].bucket_pointer_count == 0:
            last = self.window.pop(0)
            self.first_window_abs_index += 1
            freed += last.byte_size
            self.memory_usage -= last.byte_size
        if last is not None:
            self.local_state = MapperState(
                last.input_end, last.shuffle_end, last.token_bytes
            )
        return freed

    # -- diagnostics -----------------------------------------------------------

    def check_invariants(self):
        """Recompute pointer counts from scratch; assert they match."""
        expected = [0] * len(self.window)
        for bucket in self.buckets:
            if not bucket.queue:
                assert bucket.first_window_entry_index is None
                continue
            head = bucket.queue[0]
            abs_index = bucket.first_window_entry_index
            entry = self._entry_at(abs_index)
            assert entry.shuffle_begin <= head < entry.shuffle_end
            expected[abs_index - self.first_window_abs_index] += 1
            assert list(bucket.queue) == sorted(bucket.queue)
        actual = [entry.bucket_pointer_count for entry in self.window]
        assert actual == expected, (actual, expected)
        assert self.memory_usage == sum(e.byte_size for e in self.window)


class IngestOutcome(enum.Enum):
    APPENDED = "appended"
    EMPTY = "empty"
    TRANSIENT_ERROR = "transient_error"
    SPLIT_BRAIN_RESTART = "split_brain_restart"
    DEAD = "dead"


class TrimOutcome(enum.Enum):
    ADVANCED = "advanced"
    NO_PROGRESS = "no_progress"
    SPLIT_BRAIN_DETECTED = "split_brain_detected"
    UNAVAILABLE = "unavailable"
    DEAD = "dead"


@dataclass
class MapperConfig:
    max_batch_rows: int = 1024
    ingest_backoff_us: int = 100_000        # after empty/failed reads
    split_brain_delay_us: int = 5_000_000   # sit out before re-bootstrap
    trim_period_us: int = 2_000_000         # durable-state publish cadence
    memory_limit_bytes: int = 4 << 20
    bootstrap_backoff_us: int = 100_000


class MapperWorker(Worker):
    """Owns one input partition; serves its shuffle output to reducers."""

    kind = "mapper"

    def __init__(self, sim, index: int, guid: str, *,
                 store_client: StoreClient,
                 reader: PartitionReader,
                 pipeline,
                 reducer_count: int,
                 state_table: str = "mapper_state",
                 config: Optional[MapperConfig] = None,
                 trigger_hook: Optional[Callable] = None):
        super().__init__(sim, index, guid)
        self.client = store_client
        self.reader = reader
        self.pipeline = pipeline
        self.mapper = pipeline.mapper()
        self.config = config or MapperConfig()
        self.state_table = state_table
        self.core = MapperCore(reducer_count)
        self.trigger_hook = trigger_hook
        self._output_table = NameTable(self.mapper.output_columns)
        self._default_state: Optional[MapperState] = None
        self._memory_waiters: List = []
        # (virtual time, label) for commit/detection ordering checks.
        self.events: List[tuple] = []
        self.stats = {
            "batches_appended": 0,
            "rows_in": 0,
            "rows_mapped": 0,
            "empty_reads": 0,
            "transient_errors": 0,
            "split_brain_restarts": 0,
            "getrows_served": 0,
            "getrows_stale_guid": 0,
            "rows_served": 0,
            "trims_committed": 0,
            "trim_no_progress": 0,
            "trim_split_brain": 0,
            "trim_conflicts": 0,
            "memory_stalls": 0,
            "window_bytes_peak": 0,
        }

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        self.spawn(self._main_loop(), "mapper-%d-main" % self.index)
        self.spawn(self._trim_loop(), "mapper-%d-trim" % self.index)

    def _fire(self, point: str):
        if self.trigger_hook is not None:
            self.trigger_hook(self, point)

    def _scan_controls(self, rowset: Rowset):
        """Fire ``control:<directive>`` for magic ``!...`` values about to
        be processed (the §control-strings test technique)."""
        column = self.pipeline.control_column
        if column is None or self.trigger_hook is None:
            return
        for row in rowset.rows:
            value = rowset.value(row, column)
            if value.kind == Kind.STRING and value.payload.startswith(b"!"):
                self._fire("control:" + value.payload[1:].decode("utf-8"))
                if not self.alive:
                    return

    # -- main process ------------------------------------------------------------

    def _main_loop(self):
        while True:
            state = yield from self._bootstrap()
            if state is None:         # killed mid-bootstrap
                return
            self.core.bootstrap(state)
            while True:
                outcome = yield from self._ingestion_step()
                if outcome is IngestOutcome.DEAD:
                    return
                if outcome is IngestOutcome.SPLIT_BRAIN_RESTART:
                    self.stats["split_brain_restarts"] += 1
                    self.events.append((self.sim.now, "split-brain"))
                    yield self.sim.sleep(self.config.split_brain_delay_us)
                    break           # back to bootstrap with fresh state
                if outcome is not IngestOutcome.APPENDED:
                    if outcome is IngestOutcome.TRANSIENT_ERROR:
                        self.stats["transient_errors"] += 1
                    else:
                        self.stats["empty_reads"] += 1
                    yield self.sim.sleep(self.config.ingest_backoff_us)

    def _bootstrap(self):
        """Fetch (or default) the durable state; retries while the store
        is unavailable. Returns None only if the worker died."""
        if self._default_state is None:
            self._default_state = MapperState(
                0, 0, serialize_token(self.reader.initial_token())
            )
        while True:
            try:
                row = yield self.client.read(
                    self.state_table, state_key(self.index)
                )
            except StateUnavailable:
                yield self.sim.sleep(self.config.bootstrap_backoff_us)
                continue
            if not self.alive:
                return None
            return MapperState.from_row(row, self._default_state)

    def _fetch_remote_state(self):
        row = yield self.client.read(self.state_table, state_key(self.index))
        return MapperState.from_row(row, self._default_state)

    def _ingestion_step(self):
        core = self.core
        # Read a batch at the unread cursor.
        try:
            result = yield self.client.call(lambda: self.reader.read(
                core.input_cursor,
                core.input_cursor + self.config.max_batch_rows,
                deserialize_token(core.token_bytes),
            ))
        except SourceUnavailable:
            return IngestOutcome.TRANSIENT_ERROR
        except (TrimmedRange, InvalidToken):
            # Someone trimmed past our cursor — almost certainly an
            # impostor that advanced the durable state. Confirm below.
            result = None
        if not self.alive:
            return IngestOutcome.DEAD

        # Compare the durable state with what we believe we persisted;
        # any difference means another incarnation is (or was) active.
        try:
            remote = yield from self._fetch_remote_state()
        except StateUnavailable:
            return IngestOutcome.TRANSIENT_ERROR
        if not self.alive:
            return IngestOutcome.DEAD
        if remote != core.persisted_state:
            return IngestOutcome.SPLIT_BRAIN_RESTART
        if result is None:
            # Trimmed/invalid read yet the state matches: transient
            # inconsistency (e.g. trim landed before its state read).
            return IngestOutcome.TRANSIENT_ERROR
        if len(result.rowset) == 0:
            return IngestOutcome.EMPTY

        input_rowset = result.rowset
        self._scan_controls(input_rowset)
        if not self.alive:
            return IngestOutcome.DEAD
        mapped_rows: List[Row] = []
        partition_indexes: List[int] = []
        for row in input_rowset.rows:
            for out_row in self.mapper.map_row(input_rowset, row):
                mapped_rows.append(out_row)
        mapped = Rowset(self._output_table, mapped_rows)
        for row in mapped.rows:
            partition_indexes.append(hash_partition(
                mapped, row, self.pipeline.key_columns,
                self.core.reducer_count,
            ))
        core.append_batch(
            mapped, partition_indexes, len(input_rowset),
            serialize_token(result.next_token),
        )
        self.stats["batches_appended"] += 1
        self.stats["rows_in"] += len(input_rowset)
        self.stats["rows_mapped"] += len(mapped)
        self.stats["window_bytes_peak"] = max(
            self.stats["window_bytes_peak"], core.memory_usage
        )
        self._fire("post-append")
        if not self.alive:
            return IngestOutcome.DEAD

        # Backpressure: hold ingestion (and only ingestion) until trims
        # bring the window back under the limit.
        while core.memory_usage > self.config.memory_limit_bytes:
            waiter = Future()
            self._memory_waiters.append(waiter)
            self.stats["memory_stalls"] += 1
            yield waiter
            if not self.alive:
                return IngestOutcome.DEAD
        return IngestOutcome.APPENDED

    # -- GetRows server ----------------------------------------------------------

    def handle_request(self, sender, data: bytes) -> bytes:
        try:
            message = wire.decode_message(data)
        except Exception:
            return wire.encode_message(
                wire.WireError(wire.ERR_BAD_REQUEST, "undecodable request")
            )
        if not isinstance(message, wire.GetRowsRequest):
            return wire.encode_message(
                wire.WireError(wire.ERR_BAD_REQUEST, "expected GetRowsRequest")
            )
        if message.mapper_id != self.guid:
            # The caller looked us up through stale discovery; it is
            # talking to a different incarnation than it thinks.
            self.stats["getrows_stale_guid"] += 1
            return wire.encode_message(wire.WireError(
                wire.ERR_STALE_MAPPER_ID,
                "request for %s but this is %s" % (message.mapper_id, self.guid),
            ))
        if not 0 <= message.reducer_index < self.core.reducer_count:
            return wire.encode_message(wire.WireError(
                wire.ERR_BAD_REQUEST,
                "reducer index %d out of range" % message.reducer_index,
            ))
        zero_hit = self.core.pop_committed(
            message.reducer_index, message.committed_row_index
        )
        if zero_hit:
            self._trim_window()
        served = self.core.serve(message.reducer_index, message.count)
        self.stats["getrows_served"] += 1
        self.stats["rows_served"] += len(served)
        attachments = []
        if len(served):
            attachments.append(encode_rowset(served.rowset))
        return wire.encode_message(
            wire.GetRowsResponse(
                row_count=len(served),
                last_shuffle_row_index=served.last_shuffle_row_index,
                attachments=attachments,
            )
        )

    def _trim_window(self):
        freed = self.core.trim_window_entries()
        if freed and self.core.memory_usage <= self.config.memory_limit_bytes:
            waiters, self._memory_waiters = self._memory_waiters, []
            for waiter in waiters:
                if not waiter.done:
                    waiter.set_result(None)

    # -- durable-state publisher ---------------------------------------------------

    def _trim_loop(self):
        while True:
            yield self.sim.sleep(self.config.trim_period_us)
            outcome = yield from self._trim_input_rows()
            if outcome is TrimOutcome.DEAD:
                return
            if outcome is TrimOutcome.SPLIT_BRAIN_DETECTED:
                self.stats["trim_split_brain"] += 1
            elif outcome is TrimOutcome.ADVANCED:
                self.stats["trims_committed"] += 1
            else:
                self.stats["trim_no_progress"] += 1

    def _trim_input_rows(self):
        core = self.core
        local = core.local_state          # snapshot: may advance under us
        persisted = core.persisted_state
        if local is None or local == persisted:
            return TrimOutcome.NO_PROGRESS
        tx = self.client.begin()
        tx.owner = self.guid
        try:
            row = yield self.client.tx_read(
                tx, self.state_table, state_key(self.index)
            )
        except StateUnavailable:
            return TrimOutcome.UNAVAILABLE
        if not self.alive:
            return TrimOutcome.DEAD
        committed = MapperState.from_row(row, self._default_state)
        if committed != persisted:
            # Another incarnation has published state. Do not commit —
            # our window numbering may disagree with the source now.
            self.events.append((self.sim.now, "split-brain"))
            return TrimOutcome.SPLIT_BRAIN_DETECTED
        self.client.tx_write(
            tx, self.state_table, state_key(self.index), local.to_row()
        )
        self._fire("pre-trim-commit")
        if not self.alive:
            return TrimOutcome.DEAD
        try:
            result = yield self.client.commit(tx)
        except StateUnavailable:
            return TrimOutcome.UNAVAILABLE
        if not self.alive:
            return TrimOutcome.DEAD
        if result is not CommitResult.COMMITTED:
            self.stats["trim_conflicts"] += 1
            return TrimOutcome.NO_PROGRESS
        self.events.append((self.sim.now, "state-commit"))
        core.persisted_state = local
        # Only now is it safe to destroy source rows below the frontier.
        self.reader.trim(
            local.input_unread_row_index,
            deserialize_token(local.token_bytes),
        )
        self._fire("post-trim-commit")
        return TrimOutcome.ADVANCED
