"""Mapper window/bucket state machine and worker lifecycle tests.

Core tests hand-simulate the pointer-count rules; worker tests run the
full ingestion/serve/trim cycle on the simulator against an ordered
store table, including crash/restart numbering stability and impostor
(split-brain) defense.
"""

import pytest

from streamshuffle import wire
from streamshuffle.api import Mapper, Pipeline
from streamshuffle.mapper import (
    IngestOutcome,
    MapperConfig,
    MapperCore,
    MapperState,
    MapperWorker,
    TrimOutcome,
    create_mapper_state_table,
    state_key,
)
from streamshuffle.net import StoreClient
from streamshuffle.rows import (
    NameTable,
    Row,
    Rowset,
    decode_rowset,
    hash_partition,
    int64,
    string,
)
from streamshuffle.sim import Simulator
from streamshuffle.sources import (
    IndexToken,
    OrderedTablePartitionReader,
    serialize_token,
)
from streamshuffle.store import StateStore

# -- core helpers -------------------------------------------------------------

OUT_NT_NAMES = ("k", "v")


def out_rowset(shuffle_values):
    """One mapped row per value; row payload records its intended index."""
    nt = NameTable(OUT_NT_NAMES)
    rows = [Row((int64(v % 3), int64(v))) for v in shuffle_values]
    return Rowset(nt, rows)


def fresh_core(reducer_count=2, shuffle_start=0):
    core = MapperCore(reducer_count)
    core.bootstrap(MapperState(0, shuffle_start, b"t0"))
    return core


def append(core, partitions, input_rows=1, token=b"t"):
    begin = core.shuffle_cursor
    rowset = out_rowset(range(begin, begin + len(partitions)))
    return core.append_batch(rowset, partitions, input_rows, token)


# -- ingestion step-6 rules ---------------------------------------------------


def test_append_bucket_rules_spec_example():
    # Two input rows, Map emits three rows for reducers [0, 1, 0]; both
    # buckets were empty, so the new entry holds both heads: count == 2.
    core = fresh_core(reducer_count=2)
    entry = append(core, [0, 1, 0], input_rows=2, token=b"t1")
    assert len(core.window) == 1
    assert core.buckets[0].queue == [0, 2]
    assert core.buckets[1].queue == [1]
    assert entry.bucket_pointer_count == 2
    assert core.buckets[0].first_window_entry_index == 0
    assert core.buckets[1].first_window_entry_index == 0
    assert (core.input_cursor, core.shuffle_cursor) == (2, 3)
    assert core.token_bytes == b"t1"
    core.check_invariants()


def test_append_to_nonempty_bucket_adds_no_count():
    core = fresh_core(reducer_count=2)
    first = append(core, [0, 0])
    second = append(core, [0, 1])
    # Bucket 0's head still lives in the first entry; only bucket 1's
    # first-ever element adds a count (to the second entry).
    assert first.bucket_pointer_count == 1
    assert second.bucket_pointer_count == 1
    assert core.buckets[0].queue == [0, 1, 2]
    assert core.buckets[0].first_window_entry_index == 0
    assert core.buckets[1].first_window_entry_index == 1
    core.check_invariants()


def test_zero_row_entry_starts_at_count_zero():
    core = fresh_core()
    entry = append(core, [], input_rows=5, token=b"t9")
    assert entry.bucket_pointer_count == 0
    assert (entry.input_begin, entry.input_end) == (0, 5)
    assert entry.shuffle_begin == entry.shuffle_end == 0
    assert core.input_cursor == 5
    core.check_invariants()


# -- GetRows pop/serve --------------------------------------------------------


def test_pop_then_serve_spec_example():
    # Bucket holds shuffle indexes [5, 7, 8]; count=2, committed=5 →
    # index 5 is popped and rows 7, 8 are served (idempotently).
    core = fresh_core(reducer_count=2, shuffle_start=5)
    append(core, [1, 0, 1, 1], input_rows=4)  # shuffle 5..8; bucket1=[5,7,8]
    assert core.buckets[1].queue == [5, 7, 8]

    zero_hit = core.pop_committed(1, 5)
    assert not zero_hit  # head moved 5 → 7, same entry
    assert core.buckets[1].queue == [7, 8]

    served = core.serve(1, 2)
    assert len(served) == 2
    assert served.last_shuffle_row_index == 8
    values = [row.values[1].payload for row in served.rowset.rows]
    assert values == [7, 8]

    again = core.serve(1, 2)  # not deleted: the same rows come back
    assert again.rowset == served.rowset
    assert again.last_shuffle_row_index == 8
    core.check_invariants()


def test_serve_empty_bucket_and_zero_count():
    core = fresh_core()
    append(core, [0, 0])
    assert len(core.serve(1, 10)) == 0
    assert core.serve(1, 10).last_shuffle_row_index is None
    assert len(core.serve(0, 0)) == 0
    core.check_invariants()


def test_pop_moves_pointer_count_across_entries():
    core = fresh_core(reducer_count=1)
    first = append(core, [0, 0])    # shuffle 0, 1
    second = append(core, [0])      # shuffle 2
    assert (first.bucket_pointer_count, second.bucket_pointer_count) == (1, 0)

    zero_hit = core.pop_committed(0, 1)  # head 0 → 2: crosses entries
    assert zero_hit  # first entry's count fell to zero
    assert (first.bucket_pointer_count, second.bucket_pointer_count) == (0, 1)
    assert core.buckets[0].first_window_entry_index == 1
    core.check_invariants()


def test_pop_drains_bucket_completely():
    core = fresh_core(reducer_count=2)
    entry = append(core, [0, 1])
    assert entry.bucket_pointer_count == 2
    zero_hit = core.pop_committed(0, 99)  # committed beyond everything
    assert not zero_hit  # bucket 1 still points here
    assert core.buckets[0].queue == []
    assert core.buckets[0].first_window_entry_index is None
    zero_hit = core.pop_committed(1, 99)
    assert zero_hit
    assert entry.bucket_pointer_count == 0
    core.check_invariants()


def test_pop_below_head_is_noop():
    core = fresh_core(reducer_count=2, shuffle_start=5)
    append(core, [1, 1])
    assert not core.pop_committed(1, -1)
    assert not core.pop_committed(1, 4)
    assert core.buckets[1].queue == [5, 6]
    core.check_invariants()


# -- window trimming ----------------------------------------------------------


def test_trim_counts_002_advances_to_second_entry():
    # Entries with counts [0, 0, 2]: the two zero-count entries pop and
    # the local state becomes the second entry's end state.
    core = fresh_core(reducer_count=2)
    first = append(core, [], input_rows=3, token=b"t1")       # counts 0
    second = append(core, [], input_rows=2, token=b"t2")      # counts 0
    third = append(core, [0, 1], input_rows=1, token=b"t3")   # counts 2
    assert [e.bucket_pointer_count for e in core.window] == [0, 0, 2]

    freed = core.trim_window_entries()
    assert freed == first.byte_size + second.byte_size
    assert core.window == [third]
    assert core.first_window_abs_index == 2
    assert core.local_state == MapperState(
        second.input_end, second.shuffle_end, b"t2"
    )
    core.check_invariants()


def test_trim_stops_at_nonzero_count():
    core = fresh_core(reducer_count=1)
    append(core, [0])
    assert core.trim_window_entries() == 0
    assert len(core.window) == 1
    assert core.local_state == MapperState(0, 0, b"t0")  # unchanged


def test_trim_exhaustion_empties_window():
    core = fresh_core(reducer_count=1)
    append(core, [0], input_rows=2, token=b"t1")
    last = append(core, [0, 0], input_rows=3, token=b"t2")
    core.pop_committed(0, 2)  # drain the bucket entirely
    freed = core.trim_window_entries()
    assert freed > 0
    assert core.window == []
    assert core.memory_usage == 0
    assert core.local_state == MapperState(
        last.input_end, last.shuffle_end, b"t2"
    )
    core.check_invariants()


def test_memory_accounting_tracks_entry_sizes():
    core = fresh_core(reducer_count=2)
    append(core, [0, 1, 0], input_rows=2)
    append(core, [1])
    assert core.memory_usage == sum(e.byte_size for e in core.window)
    assert core.memory_usage > 0
    core.pop_committed(0, 99)
    core.pop_committed(1, 99)
    core.trim_window_entries()
    assert core.memory_usage == 0


# -- full worker on the simulator --------------------------------------------


class PassThroughMapper(Mapper):
    output_columns = ("k", "v")

    def map_row(self, rowset, row):
        return [row]


PIPE = Pipeline(
    name="passthrough",
    input_columns=("k", "v"),
    key_columns=("k",),
    make_mapper=PassThroughMapper,
)


def input_rowset(indexes):
    nt = NameTable(("k", "v"))
    return Rowset(nt, [Row((int64(i % 5), int64(i))) for i in indexes])


def quick_config(**overrides):
    base = dict(
        max_batch_rows=8,
        ingest_backoff_us=5_000,
        split_brain_delay_us=20_000,
        trim_period_us=10_000,
        memory_limit_bytes=1 << 20,
        bootstrap_backoff_us=5_000,
    )
    base.update(overrides)
    return MapperConfig(**base)


def build_worker(sim, store, *, index=0, guid=None, reducer_count=2,
                 config=None, input_table="input0"):
    reader = OrderedTablePartitionReader(
        store, input_table, defer=lambda fn: sim.schedule(1_000, fn)
    )
    client = StoreClient(sim, store, latency_us=500)
    worker = MapperWorker(
        sim, index, guid or ("m-%d" % index),
        store_client=client, reader=reader, pipeline=PIPE,
        reducer_count=reducer_count, config=config or quick_config(),
    )
    worker.start()
    return worker


def scenario(row_count=20, **worker_kwargs):
    sim = Simulator(seed=11)
    store = StateStore()
    store.create_ordered_table("input0", ("k", "v"))
    create_mapper_state_table(store)
    if row_count:
        store.append_rows("input0", input_rowset(range(row_count)))
    worker = build_worker(sim, store, **worker_kwargs)
    return sim, store, worker


def get_rows(worker, reducer_index, count, committed, mapper_id=None):
    request = wire.GetRowsRequest(
        count=count, reducer_index=reducer_index,
        committed_row_index=committed,
        mapper_id=worker.guid if mapper_id is None else mapper_id,
    )
    raw = worker.handle_request(None, wire.encode_message(request))
    return wire.decode_message(raw)


def walk_bucket(worker, reducer_index, commit=True):
    """Enumerate (shuffle_index, row) one request at a time.

    With ``commit`` each returned index is acknowledged on the next
    request (the reducer protocol); without it, growing prefixes are
    requested so nothing pops.
    """
    pairs = []
    committed = -1
    while True:
        count = 1 if commit else len(pairs) + 1
        response = get_rows(worker, reducer_index, count, committed)
        assert isinstance(response, wire.GetRowsResponse)
        if response.row_count == 0:
            return pairs
        rowset = decode_rowset(response.attachments[0])
        if not commit and response.row_count < count:
            return pairs  # bucket exhausted
        pairs.append((response.last_shuffle_row_index, rowset.rows[-1]))
        if commit:
            committed = response.last_shuffle_row_index


def expected_partitions(row_count, reducer_count=2):
    """Oracle: shuffle index -> (reducer, row) for the identity map."""
    rowset = input_rowset(range(row_count))
    out = {}
    for index, row in enumerate(rowset.rows):
        out[index] = (
            hash_partition(rowset, row, ("k",), reducer_count), row
        )
    return out


def test_worker_ingests_and_serves_all_rows():
    sim, store, worker = scenario(row_count=20)
    sim.run(until_time=200_000)
    oracle = expected_partitions(20)
    for reducer_index in (0, 1):
        pairs = walk_bucket(worker, reducer_index, commit=False)
        expected = [
            (i, row) for i, (r, row) in sorted(oracle.items())
            if r == reducer_index
        ]
        assert pairs == expected
    assert worker.stats["rows_in"] == 20
    assert worker.stats["rows_mapped"] == 20
    worker.core.check_invariants()


def test_stale_guid_rejected_without_state_change():
    sim, store, worker = scenario(row_count=6)
    sim.run(until_time=100_000)
    before = list(worker.core.buckets[0].queue)
    response = get_rows(worker, 0, 5, committed=3, mapper_id="imp-0")
    assert isinstance(response, wire.WireError)
    assert response.code == wire.ERR_STALE_MAPPER_ID
    # Neither the pop nor the serve happened.
    assert list(worker.core.buckets[0].queue) == before
    assert worker.stats["getrows_stale_guid"] == 1


def test_bad_reducer_index_rejected():
    sim, store, worker = scenario(row_count=2)
    sim.run(until_time=50_000)
    response = get_rows(worker, 7, 1, committed=-1)
    assert isinstance(response, wire.WireError)
    assert response.code == wire.ERR_BAD_REQUEST


def test_commit_all_then_trim_publishes_state_and_trims_source():
    sim, store, worker = scenario(row_count=12)
    sim.run(until_time=100_000)
    for reducer_index in (0, 1):
        walk_bucket(worker, reducer_index, commit=True)
    # Buckets drained → window fully trimmed; wait out a trim period so
    # the state commit and the (deferred) source trim land.
    sim.run(until_time=sim.now + 50_000)
    state_row = store.read("mapper_state", state_key(0))
    assert state_row is not None
    state = MapperState.from_row(state_row, None)
    assert state.input_unread_row_index == 12
    assert state.shuffle_unread_row_index == 12
    assert store.table_trimmed_up_to("input0") == 12
    assert serialize_token(IndexToken(12)) == state.token_bytes
    assert worker.stats["trims_committed"] >= 1
    assert worker.core.memory_usage == 0


def test_served_rows_match_oracle_after_restart():
    # Numbering stability: a fresh incarnation re-reading from the
    # committed state assigns the same shuffle indexes to the same rows.
    sim, store, worker = scenario(row_count=24)
    sim.run(until_time=300_000)
    first_run = {}
    for reducer_index in (0, 1):
        for index, row in walk_bucket(worker, reducer_index, commit=False):
            first_run[index] = (reducer_index, row)
    assert first_run == expected_partitions(24)

    # Drain reducer 0 only up to its first few rows, persist, crash.
    bucket0 = list(worker.core.buckets[0].queue)
    committed_prefix = bucket0[2]
    get_rows(worker, 0, 0, committed=committed_prefix)
    worker.kill()

    replacement = build_worker(sim, store, index=0, guid="m-0b")
    sim.run(until_time=sim.now + 300_000)
    second_run = {}
    for reducer_index in (0, 1):
        for index, row in walk_bucket(replacement, reducer_index,
                                      commit=False):
            second_run[index] = (reducer_index, row)
    # Nothing was durably trimmed (reducer 1 never consumed), so the
    # replacement re-serves everything — with identical numbering.
    assert second_run == first_run
    replacement.core.check_invariants()


def test_restart_resumes_from_persisted_state():
    sim, store, worker = scenario(row_count=16)
    sim.run(until_time=200_000)
    oracle = expected_partitions(16)
    full = {}
    for reducer_index in (0, 1):
        for index, row in walk_bucket(worker, reducer_index, commit=True):
            full[index] = (reducer_index, row)
    assert full == oracle
    sim.run(until_time=sim.now + 60_000)  # let trim publish + apply
    persisted = MapperState.from_row(
        store.read("mapper_state", state_key(0)), None
    )
    assert persisted.shuffle_unread_row_index == 16
    worker.kill()

    # Append more input; the replacement must start numbering at 16.
    store.append_rows("input0", input_rowset(range(16, 24)))
    replacement = build_worker(sim, store, index=0, guid="m-0c")
    sim.run(until_time=sim.now + 200_000)
    tail = {}
    for reducer_index in (0, 1):
        for index, row in walk_bucket(replacement, reducer_index,
                                      commit=False):
            tail[index] = (reducer_index, row)
    assert sorted(tail) == list(range(16, 24))
    oracle = expected_partitions(24)
    for index, pair in tail.items():
        assert pair == oracle[index]
        assert pair[1].values[1].payload == index


def test_impostor_state_forces_split_brain_restart():
    sim, store, worker = scenario(row_count=10)
    sim.run(until_time=100_000)
    assert worker.stats["split_brain_restarts"] == 0

    impostor_state = MapperState(4, 4, serialize_token(IndexToken(4)))
    tx = store.begin()
    store.tx_write(tx, "mapper_state", state_key(0), impostor_state.to_row())
    from streamshuffle.store import CommitResult
    assert store.commit(tx) is CommitResult.COMMITTED

    sim.run(until_time=sim.now + 100_000)
    assert worker.stats["split_brain_restarts"] >= 1
    # After the sit-out the worker re-bootstrapped from the impostor's
    # state and re-ingested rows 4.. — its persisted copy now matches.
    assert worker.core.persisted_state == impostor_state
    assert worker.core.input_cursor > 4


def test_trim_detects_impostor_without_committing():
    sim, store, worker = scenario(row_count=8)
    sim.run(until_time=100_000)
    for reducer_index in (0, 1):
        walk_bucket(worker, reducer_index, commit=True)
    # The window is drained, so localState is ahead — but an impostor
    # publishes different state before the next trim tick.
    impostor_state = MapperState(99, 99, b"bogus")
    tx = store.begin()
    store.tx_write(tx, "mapper_state", state_key(0), impostor_state.to_row())
    from streamshuffle.store import CommitResult
    assert store.commit(tx) is CommitResult.COMMITTED

    sim.run(until_time=sim.now + 30_000)
    assert worker.stats["trim_split_brain"] >= 1
    # The impostor's row was not overwritten by this instance...
    current = MapperState.from_row(
        store.read("mapper_state", state_key(0)), None
    )
    assert current == impostor_state
    # ...and the source was never trimmed with our local frontier.
    assert store.table_trimmed_up_to("input0") == 0


def test_memory_stall_blocks_ingestion_but_not_serving():
    sim, store, worker = scenario(
        row_count=32,
        config=quick_config(max_batch_rows=4, memory_limit_bytes=1),
    )
    sim.run(until_time=100_000)
    # Only the first batch fit; ingestion is stalled on the limit.
    assert worker.stats["batches_appended"] == 1
    assert worker.stats["memory_stalls"] == 1
    assert worker.core.input_cursor == 4

    # GetRows still answers while stalled, and committing everything in
    # the window releases it: ingestion resumes batch by batch.
    for reducer_index in (0, 1):
        response = get_rows(worker, reducer_index, 100, committed=-1)
        assert isinstance(response, wire.GetRowsResponse)

    progressed = {"count": 0}

    def reducer_sim():
        committed = [-1, -1]
        while worker.core.input_cursor < 32 or worker.core.window:
            for reducer_index in (0, 1):
                response = get_rows(worker, reducer_index, 100,
                                    committed[reducer_index])
                if isinstance(response, wire.GetRowsResponse) and \
                        response.row_count:
                    committed[reducer_index] = \
                        response.last_shuffle_row_index
                    progressed["count"] += 1
            yield sim.sleep(2_000)

    sim.spawn(reducer_sim(), name="reducer-sim")
    sim.run(until_time=sim.now + 2_000_000)
    assert worker.core.input_cursor == 32
    assert worker.stats["rows_in"] == 32
    assert progressed["count"] > 0
    assert worker.stats["memory_stalls"] >= 2
    worker.core.check_invariants()


def test_source_unavailable_is_transient():
    sim = Simulator(seed=13)
    store = StateStore()
    store.create_ordered_table("input0", ("k", "v"))
    create_mapper_state_table(store)
    store.append_rows("input0", input_rowset(range(4)))

    from streamshuffle.errors import SourceUnavailable

    failures = {"left": 3}

    def flaky():
        if failures["left"] > 0:
            failures["left"] -= 1
            raise SourceUnavailable("injected")

    reader = OrderedTablePartitionReader(store, "input0", fault_hook=flaky)
    client = StoreClient(sim, store, latency_us=500)
    worker = MapperWorker(
        sim, 0, "m-0", store_client=client, reader=reader, pipeline=PIPE,
        reducer_count=2, config=quick_config(),
    )
    worker.start()
    sim.run(until_time=200_000)
    assert worker.stats["transient_errors"] == 3
    assert worker.stats["rows_in"] == 4
