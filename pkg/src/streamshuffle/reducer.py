"""Reducer worker: poll every mapper, reduce, commit effects atomically.

A round is one fetch-reduce-commit cycle. The reducer's durable state is
a single row holding one committed shuffle index per mapper (sentinel -1
before anything committed). Exactly-once follows from three facts:

* the mapper serves rows *after* the committed index it is handed, and
  a retried/duplicated request re-serves the same rows (idempotent);
* user effects are buffered in the same transaction that advances the
  committed indexes, so they land atomically or not at all;
* the state row is re-read inside that transaction and the commit
  validates its version — an impostor reducer that advanced the row
  first (split brain) aborts this instance's commit, and the round's
  user writes evaporate with it.

Unavailable mappers never block progress: their entries are simply left
unchanged for the round and their rows are picked up once reachable.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from . import wire
from .api import Pipeline, ReduceContext
from .errors import MalformedEncoding, StateUnavailable
from .net import Discovery, Endpoint, Fabric, StoreClient, Worker
from .rows import (
    Kind,
    NameTable,
    Row,
    Rowset,
    decode_rowset,
    decode_values,
    encode_values,
    int64,
    remap_rows,
    string,
    uint64,
)
from .store import CommitResult, StateStore

STATE_KEY_COLUMNS = ("reducer_index",)
STATE_VALUE_COLUMNS = ("committed_row_indices",)

NOTHING_COMMITTED = -1


def create_reducer_state_table(store: StateStore,
                               name: str = "reducer_state"):
    return store.create_sorted_table(name, STATE_KEY_COLUMNS,
                                     STATE_VALUE_COLUMNS)


class ReducerState:
    """One committed shuffle index per mapper, -1 = nothing committed."""

    __slots__ = ("committed",)

    def __init__(self, committed):
        self.committed = tuple(committed)

    def __eq__(self, other):
        if not isinstance(other, ReducerState):
            return NotImplemented
        return self.committed == other.committed

    def __repr__(self):
        return "ReducerState(%r)" % (self.committed,)

    def to_row(self) -> Row:
        payload = encode_values(tuple(int64(i) for i in self.committed))
        return Row((string(payload),))

    @classmethod
    def from_row(cls, row: Optional[Row], mapper_count: int) -> "ReducerState":
        if row is None:
            return cls((NOTHING_COMMITTED,) * mapper_count)
        payload = row.values[0].payload
        values, end = decode_values(payload, 0)
        if end != len(payload):
            raise MalformedEncoding("trailing bytes in reducer state")
        if len(values) != mapper_count:
            raise MalformedEncoding(
                "reducer state has %d entries for %d mappers"
                % (len(values), mapper_count)
            )
        return cls(tuple(v.payload for v in values))


def state_key(reducer_index: int) -> tuple:
    return (uint64(reducer_index),)


class RoundOutcome(enum.Enum):
    COMMITTED = "committed"
    NOTHING_TO_DO = "nothing_to_do"
    SPLIT_BRAIN_SKIP = "split_brain_skip"
    TRANSIENT_ERROR = "transient_error"
    DEAD = "dead"


@dataclass
class ReducerConfig:
    max_rows_per_mapper_per_round: int = 512
    round_backoff_us: int = 100_000     # after any non-committing round
    rpc_timeout_us: Optional[int] = None  # None → fabric default


class ReducerWorker(Worker):
    """Pulls shuffled rows from every mapper and applies user Reduce."""

    kind = "reducer"

    def __init__(self, sim, index: int, guid: str, *,
                 fabric: Fabric,
                 discovery: Discovery,
                 store: StateStore,
                 store_client: StoreClient,
                 pipeline: Pipeline,
                 mapper_count: int,
                 mapper_group: str = "mappers",
                 state_table: str = "reducer_state",
                 config: Optional[ReducerConfig] = None,
                 trigger_hook: Optional[Callable] = None):
        super().__init__(sim, index, guid)
        self.fabric = fabric
        self.discovery = discovery
        self.store = store
        self.client = store_client
        self.pipeline = pipeline
        self.reducer = pipeline.reducer()
        self.mapper_count = mapper_count
        self.mapper_group = mapper_group
        self.state_table = state_table
        self.config = config or ReducerConfig()
        self.trigger_hook = trigger_hook
        # (virtual time, label) for commit/detection ordering checks.
        self.events: List[tuple] = []
        # One entry per finished round: (virtual time, outcome, committed
        # indexes as known at round end) — progress-rate analysis food.
        self.round_log: List[tuple] = []
        self._round_committed: Optional[Tuple[int, ...]] = None
        self.stats = {
            "rounds": 0,
            "commits": 0,
            "rows_reduced": 0,
            "nothing_to_do": 0,
            "split_brain_skips": 0,
            "transient_errors": 0,
            "user_errors": 0,
            "fetch_errors": 0,
            "stale_mapper_errors": 0,
            "commit_conflicts": 0,
        }

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        self.spawn(self._main_loop(), "reducer-%d-main" % self.index)

    def _fire(self, point: str):
        if self.trigger_hook is not None:
            self.trigger_hook(self, point)

    def _scan_controls(self, rowset: Rowset):
        """Fire ``control:<directive>`` for magic ``!...`` values about to
        be reduced (the §control-strings test technique)."""
        column = self.pipeline.control_column
        if column is None or self.trigger_hook is None:
            return
        for row in rowset.rows:
            value = rowset.value(row, column)
            if value.kind == Kind.STRING and value.payload.startswith(b"!"):
                self._fire("control:" + value.payload[1:].decode("utf-8"))
                if not self.alive:
                    return

    # -- main loop ---------------------------------------------------------------

    def _main_loop(self):
        while True:
            outcome = yield from self._round()
            if outcome is RoundOutcome.DEAD:
                return
            self.stats["rounds"] += 1
            self.round_log.append(
                (self.sim.now, outcome.value, self._round_committed)
            )
            if outcome is RoundOutcome.COMMITTED:
                self.stats["commits"] += 1
                continue  # keep draining while rows are flowing
            if outcome is RoundOutcome.NOTHING_TO_DO:
                self.stats["nothing_to_do"] += 1
            elif outcome is RoundOutcome.SPLIT_BRAIN_SKIP:
                self.stats["split_brain_skips"] += 1
            else:
                self.stats["transient_errors"] += 1
            yield self.sim.sleep(self.config.round_backoff_us)

    def _pick_endpoints(self) -> Dict[int, Endpoint]:
        """Newest known endpoint per mapper index (discovery may lag)."""
        picked: Dict[int, Tuple[Tuple, Endpoint]] = {}
        for endpoint, attributes in self.discovery.list_group(
                self.mapper_group):
            rank = (attributes.get("registered_us", -1), endpoint.guid)
            current = picked.get(endpoint.index)
            if current is None or rank > current[0]:
                picked[endpoint.index] = (rank, endpoint)
        return {index: ep for index, (_, ep) in picked.items()}

    def _round(self):
        self._round_committed = None
        # (2) Fetch the durable state: the round's baseline snapshot.
        try:
            row = yield self.client.read(
                self.state_table, state_key(self.index)
            )
        except StateUnavailable:
            return RoundOutcome.TRANSIENT_ERROR
        if not self.alive:
            return RoundOutcome.DEAD
        try:
            state = ReducerState.from_row(row, self.mapper_count)
        except MalformedEncoding:
            return RoundOutcome.TRANSIENT_ERROR
        self._round_committed = state.committed

        # (3) One GetRows per mapper index, all in flight together.
        endpoints = self._pick_endpoints()
        indexes: List[int] = []
        calls = []
        for mapper_index in sorted(endpoints):
            if mapper_index >= self.mapper_count:
                continue
            endpoint = endpoints[mapper_index]
            request = wire.GetRowsRequest(
                count=self.config.max_rows_per_mapper_per_round,
                reducer_index=self.index,
                committed_row_index=state.committed[mapper_index],
                mapper_id=endpoint.guid,
            )
            calls.append(self.fabric.call(
                self, endpoint, wire.encode_message(request),
                self.config.rpc_timeout_us,
            ))
            indexes.append(mapper_index)
        settled = yield self.sim.gather_settled(calls)
        if not self.alive:
            return RoundOutcome.DEAD

        # (4) Fold responses; failed/empty mappers keep their entry.
        new_committed = list(state.committed)
        fetched: List[Tuple[int, Rowset]] = []
        total_rows = 0
        for mapper_index, (payload, error) in zip(indexes, settled):
            if error is not None:
                self.stats["fetch_errors"] += 1
                continue
            try:
                message = wire.decode_message(payload)
            except MalformedEncoding:
                self.stats["fetch_errors"] += 1
                continue
            if isinstance(message, wire.WireError):
                if message.code == wire.ERR_STALE_MAPPER_ID:
                    self.stats["stale_mapper_errors"] += 1
                else:
                    self.stats["fetch_errors"] += 1
                continue
            if not isinstance(message, wire.GetRowsResponse) or \
                    message.row_count == 0:
                continue
            try:
                rowset = decode_rowset(message.attachments[0])
            except (MalformedEncoding, IndexError):
                self.stats["fetch_errors"] += 1
                continue
            if len(rowset) != message.row_count or \
                    message.last_shuffle_row_index is None:
                self.stats["fetch_errors"] += 1
                continue
            new_committed[mapper_index] = message.last_shuffle_row_index
            fetched.append((mapper_index, rowset))
            total_rows += len(rowset)
        if total_rows == 0:
            return RoundOutcome.NOTHING_TO_DO

        # (5) Combine ascending (mapperIndex, shuffleRowIndex): responses
        # are already shuffle-ordered, and ``fetched`` is mapper-ordered.
        batch = _concat_rowsets([rowset for _, rowset in fetched])
        self._scan_controls(batch)
        if not self.alive:
            return RoundOutcome.DEAD

        ctx = ReduceContext(self.store, self.index)
        try:
            self.reducer.reduce(ctx, batch)
        except Exception:
            self.stats["user_errors"] += 1
            return RoundOutcome.TRANSIENT_ERROR

        # (6) The user's transaction (if any) is the commit vehicle.
        tx = ctx.peek_tx()
        if tx is None:
            tx = self.client.begin()
        tx.owner = self.guid

        # (7) Re-read the state inside the transaction: a mismatch means
        # another incarnation committed since our snapshot.
        try:
            row = yield self.client.tx_read(
                tx, self.state_table, state_key(self.index)
            )
        except StateUnavailable:
            return RoundOutcome.TRANSIENT_ERROR
        if not self.alive:
            return RoundOutcome.DEAD
        try:
            current = ReducerState.from_row(row, self.mapper_count)
        except MalformedEncoding:
            return RoundOutcome.TRANSIENT_ERROR
        if current != state:
            self.events.append((self.sim.now, "split-brain"))
            return RoundOutcome.SPLIT_BRAIN_SKIP

        # (8) Meta-state and user effects commit or abort together.
        self.client.tx_write(
            tx, self.state_table, state_key(self.index),
            ReducerState(new_committed).to_row(),
        )
        self._fire("pre-reduce-commit")
        if not self.alive:
            return RoundOutcome.DEAD
        try:
            result = yield self.client.commit(tx)
        except StateUnavailable:
            return RoundOutcome.TRANSIENT_ERROR
        if not self.alive:
            return RoundOutcome.DEAD
        if result is not CommitResult.COMMITTED:
            self.stats["commit_conflicts"] += 1
            return RoundOutcome.TRANSIENT_ERROR
        self.stats["rows_reduced"] += total_rows
        self.events.append((self.sim.now, "state-commit"))
        self._round_committed = tuple(new_committed)
        self._fire("post-reduce-commit")
        return RoundOutcome.COMMITTED


def _concat_rowsets(rowsets: List[Rowset]) -> Rowset:
    first = rowsets[0]
    if all(r.name_table.names == first.name_table.names for r in rowsets):
        rows = []
        for rowset in rowsets:
            rows.extend(rowset.rows)
        return Rowset(first.name_table, rows)
    target = NameTable()
    rows = []
    for rowset in rowsets:
        rows.extend(remap_rows(rowset, target))
    return Rowset(target, rows)
