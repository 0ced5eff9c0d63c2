"""Demo pipelines with independent oracles and negative controls.

Each pipeline carries three extra hooks the harness and the verifier
use:

* ``generate_input(seed, begin, end)`` — deterministic input rows for
  positions [begin, end), so feeders can trickle input in any batching;
* ``expected_user_tables(input_rowset)`` — a brute-force recomputation
  of what the user tables must contain once everything is processed
  (written without reference to the runtime: plain dict arithmetic);
* an ``effects`` table the reducers maintain *inside their commit
  transaction*: one row per input row id with the number of times that
  row's effect was applied. Exactly-once holds iff every mapped row's
  counter is exactly 1.

The ``-dup`` and ``-loss`` variants are deliberately broken reducers
(user effects committed outside the runtime transaction; silently
dropped batch tails). They exist so the verifier's alarms can be tested
against true positives.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Dict

from .api import Mapper, Pipeline, Reducer, ReduceContext, TableSpec, \
    register_pipeline
from .rows import (
    NameTable,
    Row,
    Rowset,
    encode_rowset,
    int64,
    null,
    string,
    uint64,
)
from .store import CommitResult

EFFECTS_TABLE = TableSpec("effects", ("row_id",), ("count",))


@dataclass
class DemoPipeline(Pipeline):
    generate_input: Callable = None       # (seed, begin, end) -> Rowset
    expected_user_tables: Callable = None  # (input_rowset) -> {table: {key: row}}


def _bump_effect(ctx: ReduceContext, row_id: int):
    key = (uint64(row_id),)
    existing = ctx.get("effects", key)
    count = existing.values[0].payload if existing is not None else 0
    ctx.put("effects", key, Row((int64(count + 1),)))


# -- count-by-key ---------------------------------------------------------------

COUNT_COLUMNS = ("row_id", "k", "v")


class CountMapper(Mapper):
    output_columns = COUNT_COLUMNS

    def map_row(self, rowset, row):
        return [row]


class CountReducer(Reducer):
    """Per-key row count and value total, plus per-row effect counters."""

    def reduce(self, ctx, batch):
        for row in batch.rows:
            key = (batch.value(row, "k"),)
            existing = ctx.get("tally_counts", key)
            if existing is None:
                count, total = 0, 0
            else:
                count = existing.values[0].payload
                total = existing.values[1].payload
            value = batch.value(row, "v").payload
            ctx.put("tally_counts", key,
                    Row((int64(count + 1), int64(total + value))))
            _bump_effect(ctx, batch.value(row, "row_id").payload)


def count_generate_input(seed: int, begin: int, end: int) -> Rowset:
    nt = NameTable(COUNT_COLUMNS)
    rows = []
    for i in range(begin, end):
        rng = random.Random("%d/%d" % (seed, i))  # position-stable
        rows.append(Row((uint64(i), int64(rng.randrange(16)),
                         int64(rng.randrange(1000)))))
    return Rowset(nt, rows)


def count_expected_tables(input_rowset: Rowset) -> Dict[str, dict]:
    tally: Dict[tuple, list] = {}
    effects: Dict[tuple, Row] = {}
    for row in input_rowset.rows:
        key = (input_rowset.value(row, "k"),)
        entry = tally.setdefault(key, [0, 0])
        entry[0] += 1
        entry[1] += input_rowset.value(row, "v").payload
        effects[(input_rowset.value(row, "row_id"),)] = Row((int64(1),))
    return {
        "tally_counts": {
            key: Row((int64(count), int64(total)))
            for key, (count, total) in tally.items()
        },
        "effects": effects,
    }


def _count_pipeline(name: str, make_reducer) -> DemoPipeline:
    return DemoPipeline(
        name=name,
        input_columns=COUNT_COLUMNS,
        key_columns=("k",),
        make_mapper=CountMapper,
        make_reducer=make_reducer,
        user_tables=(
            TableSpec("tally_counts", ("k",), ("count", "total")),
            EFFECTS_TABLE,
        ),
        generate_input=count_generate_input,
        expected_user_tables=count_expected_tables,
        control_column="k",
    )


@register_pipeline("count-by-key")
def count_by_key() -> DemoPipeline:
    return _count_pipeline("count-by-key", CountReducer)


# -- access-tally (log sessions: drop rows without a user) ------------------------

ACCESS_COLUMNS = ("row_id", "user", "cluster", "timestamp", "weight")


class AccessMapper(Mapper):
    """Keeps only attributable accesses: rows with no user are dropped."""

    output_columns = ACCESS_COLUMNS

    def map_row(self, rowset, row):
        user = rowset.value(row, "user")
        if user.payload in (None, b""):  # Null or empty user
            return []
        return [row]


class AccessReducer(Reducer):
    """Per (user, cluster): access count, weight sum, last-access time."""

    def reduce(self, ctx, batch):
        for row in batch.rows:
            key = (batch.value(row, "user"), batch.value(row, "cluster"))
            existing = ctx.get("tally_access", key)
            if existing is None:
                count, weight_total, last = 0, 0, -1
            else:
                count = existing.values[0].payload
                weight_total = existing.values[1].payload
                last = existing.values[2].payload
            timestamp = batch.value(row, "timestamp").payload
            ctx.put("tally_access", key, Row((
                int64(count + 1),
                int64(weight_total + batch.value(row, "weight").payload),
                int64(max(last, timestamp)),
            )))
            _bump_effect(ctx, batch.value(row, "row_id").payload)


_ACCESS_USERS = 12
_ACCESS_CLUSTERS = ("east", "west", "north")


def access_generate_input(seed: int, begin: int, end: int) -> Rowset:
    nt = NameTable(ACCESS_COLUMNS)
    rows = []
    for i in range(begin, end):
        rng = random.Random("%d/%d" % (seed, i))
        if rng.random() < 0.125:   # unattributable access
            user = null()
        else:
            user = string("u%02d" % rng.randrange(_ACCESS_USERS))
        rows.append(Row((
            uint64(i),
            user,
            string(rng.choice(_ACCESS_CLUSTERS)),
            int64(1_000_000 + i * 10 + rng.randrange(5)),
            int64(rng.randrange(100)),
        )))
    return Rowset(nt, rows)


def access_expected_tables(input_rowset: Rowset) -> Dict[str, dict]:
    tally: Dict[tuple, list] = {}
    effects: Dict[tuple, Row] = {}
    for row in input_rowset.rows:
        user = input_rowset.value(row, "user")
        if user.payload in (None, b""):
            continue  # the map drops these
        key = (user, input_rowset.value(row, "cluster"))
        entry = tally.setdefault(key, [0, 0, -1])
        entry[0] += 1
        entry[1] += input_rowset.value(row, "weight").payload
        entry[2] = max(entry[2], input_rowset.value(row, "timestamp").payload)
        effects[(input_rowset.value(row, "row_id"),)] = Row((int64(1),))
    return {
        "tally_access": {
            key: Row((int64(c), int64(w), int64(t)))
            for key, (c, w, t) in tally.items()
        },
        "effects": effects,
    }


@register_pipeline("access-tally")
def access_tally() -> DemoPipeline:
    return DemoPipeline(
        name="access-tally",
        input_columns=ACCESS_COLUMNS,
        key_columns=("user", "cluster"),
        make_mapper=AccessMapper,
        make_reducer=AccessReducer,
        user_tables=(
            TableSpec("tally_access", ("user", "cluster"),
                      ("count", "total_weight", "last_access")),
            EFFECTS_TABLE,
        ),
        generate_input=access_generate_input,
        expected_user_tables=access_expected_tables,
    )


# -- negative controls -----------------------------------------------------------


class DupModeReducer(CountReducer):
    """BROKEN on purpose: commits user effects in its own transaction.

    The runtime's meta-state then commits separately; any failure (or a
    crash) between the two re-serves rows whose effects already landed —
    the classic duplicate. The verifier must flag this variant.
    """

    def reduce(self, ctx, batch):
        side = ReduceContext(ctx.store, ctx.reducer_index)
        super().reduce(side, batch)
        tx = side.peek_tx()
        if tx is not None and ctx.store.commit(tx) is not \
                CommitResult.COMMITTED:
            raise RuntimeError("side commit conflicted")
        # Leave ctx untouched: the runtime commits meta-state alone.


class LossModeReducer(CountReducer):
    """BROKEN on purpose: silently drops the tail of every large batch,
    while the runtime still advances the committed indexes over it."""

    def reduce(self, ctx, batch):
        keep = max(1, len(batch.rows) - 3) if len(batch.rows) > 3 \
            else len(batch.rows)
        trimmed = Rowset(batch.name_table, batch.rows[:keep])
        super().reduce(ctx, trimmed)


@register_pipeline("count-by-key-dup")
def count_by_key_dup() -> DemoPipeline:
    return _count_pipeline("count-by-key-dup", DupModeReducer)


@register_pipeline("count-by-key-loss")
def count_by_key_loss() -> DemoPipeline:
    return _count_pipeline("count-by-key-loss", LossModeReducer)


# -- strawman: persist every shuffled row (write-amplification foil) ---------------


class StrawmanReducer(CountReducer):
    """Correct results, pathological writes: spills each served row into
    a durable side table inside the commit transaction, the way a
    persist-everything shuffle would."""

    def __init__(self):
        self._spill_seq = 0

    def reduce(self, ctx, batch):
        super().reduce(ctx, batch)
        for row in batch.rows:
            key = (uint64(ctx.reducer_index), uint64(self._spill_seq))
            self._spill_seq += 1
            payload = encode_rowset(Rowset(batch.name_table, (row,)))
            ctx.put("spill", key, Row((string(payload),)))


@register_pipeline("count-by-key-strawman")
def count_by_key_strawman() -> DemoPipeline:
    pipeline = _count_pipeline("count-by-key-strawman", StrawmanReducer)
    pipeline.user_tables = pipeline.user_tables + (
        TableSpec("spill", ("reducer_index", "seq"), ("payload",)),
    )
    return pipeline


# -- blob-count: count-by-key with a wide payload column (meter workloads) ---------

BLOB_COLUMNS = ("row_id", "k", "v", "payload")


class BlobMapper(Mapper):
    output_columns = BLOB_COLUMNS

    def map_row(self, rowset, row):
        return [row]


def _blob_generate_input(width: int) -> Callable:
    def generate(seed: int, begin: int, end: int) -> Rowset:
        nt = NameTable(BLOB_COLUMNS)
        rows = []
        for i in range(begin, end):
            rng = random.Random("%d/%d" % (seed, i))
            rows.append(Row((uint64(i), int64(rng.randrange(16)),
                             int64(rng.randrange(1000)),
                             string(rng.randbytes(width)))))
        return Rowset(nt, rows)
    return generate


def _blob_pipeline(name: str, width: int,
                   make_reducer=CountReducer) -> DemoPipeline:
    # Tallies ignore the payload entirely, so the count oracle still
    # applies; only the bytes moved through the shuffle change.
    return DemoPipeline(
        name=name,
        input_columns=BLOB_COLUMNS,
        key_columns=("k",),
        make_mapper=BlobMapper,
        make_reducer=make_reducer,
        user_tables=(
            TableSpec("tally_counts", ("k",), ("count", "total")),
            EFFECTS_TABLE,
        ),
        generate_input=_blob_generate_input(width),
        expected_user_tables=count_expected_tables,
        control_column="k",
    )


@register_pipeline("blob-count-100")
def blob_count_100() -> DemoPipeline:
    return _blob_pipeline("blob-count-100", 100)


@register_pipeline("blob-count-1000")
def blob_count_1000() -> DemoPipeline:
    return _blob_pipeline("blob-count-1000", 1000)


@register_pipeline("blob-count-1000-strawman")
def blob_count_1000_strawman() -> DemoPipeline:
    pipeline = _blob_pipeline("blob-count-1000-strawman", 1000,
                              StrawmanReducer)
    pipeline.user_tables = pipeline.user_tables + (
        TableSpec("spill", ("reducer_index", "seq"), ("payload",)),
    )
    return pipeline
