"""Reducer round-cycle tests against scripted mappers.

The fake mapper mirrors the real serving contract exactly — rows above
the handed-in committed index, idempotently — which lets each test pin
the reducer's fold/commit behavior without a live ingestion pipeline.
"""

import pytest

from streamshuffle import wire
from streamshuffle.api import pipeline_by_name
from streamshuffle.errors import MalformedEncoding
from streamshuffle.net import Discovery, Fabric, StoreClient, Worker
from streamshuffle.pipelines import COUNT_COLUMNS
from streamshuffle.reducer import (
    NOTHING_COMMITTED,
    ReducerConfig,
    ReducerState,
    ReducerWorker,
    create_reducer_state_table,
    state_key,
)
from streamshuffle.rows import (
    NameTable,
    Row,
    Rowset,
    encode_rowset,
    int64,
    string,
    uint64,
)
from streamshuffle.sim import Simulator
from streamshuffle.store import CommitResult, StateStore

COUNT_NT = NameTable(COUNT_COLUMNS)


def count_row(row_id, k, v):
    return Row((uint64(row_id), int64(k), int64(v)))


class ScriptedMapper(Worker):
    kind = "mapper"

    def __init__(self, sim, index, guid, script):
        super().__init__(sim, index, guid)
        self.script = script

    def handle_request(self, sender, data):
        request = wire.decode_message(data)
        return wire.encode_message(self.script(request))


def serving_script(pairs, on_request=None):
    """Idempotent mapper semantics over fixed (shuffle_index, row) pairs."""

    def script(request):
        if on_request is not None:
            on_request(request)
        remaining = [(i, row) for i, row in pairs
                     if i > request.committed_row_index]
        take = remaining[: request.count]
        if not take:
            return wire.GetRowsResponse(0, None, [])
        rowset = Rowset(COUNT_NT, [row for _, row in take])
        return wire.GetRowsResponse(
            len(take), take[-1][0], [encode_rowset(rowset)]
        )

    return script


def empty_script(request):
    return wire.GetRowsResponse(0, None, [])


def make_env(scripts, pipeline_name="count-by-key", seed=5,
             trigger_hook=None, backoff_us=5_000):
    sim = Simulator(seed=seed)
    store = StateStore()
    create_reducer_state_table(store)
    pipeline = pipeline_by_name(pipeline_name)
    for spec in pipeline.user_tables:
        store.create_sorted_table(spec.name, spec.key_columns,
                                  spec.value_columns)
    fabric = Fabric(sim)
    discovery = Discovery(sim, propagation_delay_us=1_000)
    mappers = []
    for index, script in enumerate(scripts):
        mapper = ScriptedMapper(sim, index, "sm-%d" % index, script)
        fabric.bind(mapper)
        discovery.register("mappers", mapper.endpoint,
                           {"registered_us": sim.now})
        mappers.append(mapper)
    reducer = ReducerWorker(
        sim, 0, "r-0", fabric=fabric, discovery=discovery, store=store,
        store_client=StoreClient(sim, store, latency_us=500),
        pipeline=pipeline, mapper_count=len(scripts),
        config=ReducerConfig(round_backoff_us=backoff_us),
        trigger_hook=trigger_hook,
    )
    fabric.bind(reducer)
    reducer.start()
    return sim, store, reducer, mappers


def committed_indices(store, reducer_index=0, mapper_count=2):
    row = store.read("reducer_state", state_key(reducer_index))
    return ReducerState.from_row(row, mapper_count).committed


def effect_counts(store):
    return {
        key[0].payload: row.values[0].payload
        for key, row in store.snapshot_sorted("effects").items()
    }


# -- state codec ----------------------------------------------------------------


def test_state_row_roundtrip():
    state = ReducerState((5, -1, 123456789))
    back = ReducerState.from_row(state.to_row(), 3)
    assert back == state
    assert back.committed == (5, -1, 123456789)


def test_absent_state_row_is_all_sentinel():
    state = ReducerState.from_row(None, 4)
    assert state.committed == (NOTHING_COMMITTED,) * 4


def test_state_row_arity_mismatch_rejected():
    state = ReducerState((1, 2))
    with pytest.raises(MalformedEncoding):
        ReducerState.from_row(state.to_row(), 3)


# -- round folding ----------------------------------------------------------------


def test_partial_fold_unreachable_mapper_entry_unchanged():
    # Spec example: mapper 0 returns 3 rows (last index 12), mapper 1 is
    # unreachable → newReducerState = [12, unchanged(-1)].
    pairs = [(10, count_row(0, 1, 10)), (11, count_row(1, 1, 20)),
             (12, count_row(2, 2, 30))]
    sim, store, reducer, mappers = make_env(
        [serving_script(pairs), empty_script]
    )
    mappers[1].kill()
    sim.run(until_time=2_000_000)
    assert committed_indices(store) == (12, NOTHING_COMMITTED)
    assert reducer.stats["commits"] == 1
    assert reducer.stats["fetch_errors"] >= 1  # the unreachable mapper
    tally = store.snapshot_sorted("tally_counts")
    assert tally[(int64(1),)] == Row((int64(2), int64(30)))
    assert tally[(int64(2),)] == Row((int64(1), int64(30)))
    assert effect_counts(store) == {0: 1, 1: 1, 2: 1}


def test_all_mappers_empty_is_nothing_to_do():
    sim, store, reducer, _ = make_env([empty_script, empty_script])
    sim.run(until_time=500_000)
    assert reducer.stats["commits"] == 0
    assert reducer.stats["nothing_to_do"] >= 1
    assert store.read("reducer_state", state_key(0)) is None


def test_combined_batch_ascending_mapper_then_shuffle_order():
    pairs0 = [(3, count_row(100, 1, 1)), (9, count_row(101, 1, 1))]
    pairs1 = [(2, count_row(200, 1, 1)), (5, count_row(201, 1, 1))]
    seen = []

    class SpyReducer:
        def reduce(self, ctx, batch):
            seen.append([batch.value(r, "row_id").payload
                         for r in batch.rows])

    sim, store, reducer, _ = make_env(
        [serving_script(pairs0), serving_script(pairs1)]
    )
    reducer.reducer = SpyReducer()
    sim.run(until_time=1_000_000)
    # Mapper 0's rows (both of them, shuffle-ascending) precede mapper
    # 1's, even though mapper 1's shuffle indexes are numerically lower.
    assert seen[0] == [100, 101, 200, 201]


def test_user_exception_aborts_round_then_retry_is_exactly_once():
    pairs = [(0, count_row(0, 3, 5)), (1, count_row(1, 3, 7))]
    boom = {"left": 2}
    sim, store, reducer, _ = make_env([serving_script(pairs)])
    inner = reducer.reducer

    class FlakyReducer:
        def reduce(self, ctx, batch):
            if boom["left"] > 0:
                boom["left"] -= 1
                raise RuntimeError("user bug")
            inner.reduce(ctx, batch)

    reducer.reducer = FlakyReducer()
    sim.run(until_time=2_000_000)
    assert reducer.stats["user_errors"] == 2
    assert reducer.stats["commits"] == 1
    # The failed rounds left nothing behind; the retry applied once.
    assert effect_counts(store) == {0: 1, 1: 1}
    assert committed_indices(store, mapper_count=1) == (1,)
    tally = store.snapshot_sorted("tally_counts")
    assert tally[(int64(3),)] == Row((int64(2), int64(12)))


def test_impostor_ahead_causes_split_brain_skip():
    # An impostor already committed [12]; this instance's in-transaction
    # re-read sees it and skips — user tables stay untouched.
    pairs = [(10, count_row(0, 1, 10)), (12, count_row(1, 1, 20))]
    injected = {"done": False}
    holder = {}

    def impostor(request):
        # Fires while the round's fetches are in flight: after the
        # baseline state read, before the in-transaction re-read.
        if injected["done"]:
            return
        injected["done"] = True
        store = holder["store"]
        tx = store.begin()
        store.tx_write(tx, "reducer_state", state_key(0),
                       ReducerState((12,)).to_row())
        assert store.commit(tx) is CommitResult.COMMITTED

    sim, store, reducer, _ = make_env(
        [serving_script(pairs, on_request=impostor)]
    )
    holder["store"] = store
    sim.run(until_time=1_000_000)
    assert reducer.stats["split_brain_skips"] >= 1
    assert reducer.stats["commits"] == 0
    assert store.snapshot_sorted("tally_counts") == {}
    assert store.snapshot_sorted("effects") == {}
    # The impostor's state stands.
    assert committed_indices(store, mapper_count=1) == (12,)


def test_pre_commit_conflict_is_transient_then_exactly_once():
    # A concurrent writer bumps the state row's version between our
    # in-transaction re-read and commit: optimistic validation aborts
    # the round, the rows are re-served, and effects land exactly once.
    pairs = [(0, count_row(0, 2, 4)), (1, count_row(1, 2, 6))]
    fired = {"done": False}
    holder = {}

    def conflict_hook(worker, point):
        if point != "pre-reduce-commit" or fired["done"]:
            return
        fired["done"] = True
        store = holder["store"]
        tx = store.begin()
        # Same value the round read (absent → [-1]); the *version* bump
        # is what matters.
        store.tx_write(tx, "reducer_state", state_key(0),
                       ReducerState((NOTHING_COMMITTED,)).to_row())
        assert store.commit(tx) is CommitResult.COMMITTED

    sim, store, reducer, _ = make_env(
        [serving_script(pairs)], trigger_hook=conflict_hook
    )
    holder["store"] = store
    sim.run(until_time=2_000_000)
    assert reducer.stats["commit_conflicts"] == 1
    assert reducer.stats["commits"] == 1
    assert effect_counts(store) == {0: 1, 1: 1}
    assert committed_indices(store, mapper_count=1) == (1,)


def test_commits_touching_effects_also_write_meta_state():
    # Atomicity at the commit-log level: no committed transaction writes
    # user effects without the reducer's meta-state in the same commit.
    pairs = [(i, count_row(i, i % 3, i)) for i in range(6)]
    sim, store, reducer, _ = make_env([serving_script(pairs)])
    sim.run(until_time=2_000_000)
    assert reducer.stats["commits"] >= 1
    effect_commits = 0
    for record in store.commit_log:
        tables = {table for table, _key, _row, _version in record.writes}
        if "effects" in tables:
            assert "reducer_state" in tables
            effect_commits += 1
    assert effect_commits >= 1


def test_dup_mode_reducer_double_applies_under_conflict():
    # Negative control: the dup-mode reducer commits user effects in its
    # own transaction; when the runtime's meta commit then conflicts,
    # the re-served rows are applied a second time.
    pairs = [(0, count_row(0, 1, 3)), (1, count_row(1, 1, 5))]
    fired = {"done": False}
    holder = {}

    def conflict_hook(worker, point):
        if point != "pre-reduce-commit" or fired["done"]:
            return
        fired["done"] = True
        store = holder["store"]
        tx = store.begin()
        store.tx_write(tx, "reducer_state", state_key(0),
                       ReducerState((NOTHING_COMMITTED,)).to_row())
        assert store.commit(tx) is CommitResult.COMMITTED

    sim, store, reducer, _ = make_env(
        [serving_script(pairs)], pipeline_name="count-by-key-dup",
        trigger_hook=conflict_hook,
    )
    holder["store"] = store
    sim.run(until_time=2_000_000)
    counts = effect_counts(store)
    assert counts and all(c >= 2 for c in counts.values())


def test_loss_mode_reducer_drops_tail_rows():
    # Negative control: committed indexes advance over rows whose
    # effects were never applied.
    pairs = [(i, count_row(i, 1, 1)) for i in range(8)]
    sim, store, reducer, _ = make_env(
        [serving_script(pairs)], pipeline_name="count-by-key-loss"
    )
    sim.run(until_time=2_000_000)
    assert committed_indices(store, mapper_count=1) == (7,)
    counts = effect_counts(store)
    assert set(counts) != set(range(8))  # some rows' effects are missing
    assert all(c == 1 for c in counts.values())


def test_stale_mapper_id_counts_and_leaves_entry():
    def stale_script(request):
        return wire.WireError(wire.ERR_STALE_MAPPER_ID, "not me")

    sim, store, reducer, _ = make_env([stale_script])
    sim.run(until_time=500_000)
    assert reducer.stats["stale_mapper_errors"] >= 1
    assert reducer.stats["commits"] == 0
    assert store.read("reducer_state", state_key(0)) is None
