"""Scenario harness: spawn workers, feed input, apply faults, verify.

``run_processor`` owns one complete job in virtual time: it builds the
world (store, optional journal, fabric, discovery, input partitions),
spawns one mapper per partition and the configured reducers, trickles
generated input, and interprets a :class:`~.faults.FaultPlan` — kills
respawn the slot with a fresh GUID after a restart delay (the dead
registration lingers until its lease expires, so stale-discovery paths
stay exercised), pauses freeze a worker's event processing, duplicates
spawn a second instance on the same index (split brain on purpose).

The run stops when the job has provably converged — all input fed,
every partition trimmed to its end (which transitively means every
shuffle row was committed by its reducer), and every reducer idle for K
consecutive rounds — then verification compares the user tables against
the pipeline's brute-force oracle and checks the per-row effect
counters (exactly-once iff every counter is 1). Two commit-log checkers
run on every scenario: atomicity (no commit touches user tables without
the worker state row) and serializability (every committed read saw
the latest committed version). Lack of progress past a bound with no
fault event pending raises :class:`~.errors.DeadlockError`.

Determinism: every random draw comes from the simulator's named seeded
streams, so (spec, plan, seed) fully determines the ScenarioReport —
byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from . import pipelines  # noqa: F401  (registers the built-in pipelines)
from .api import Pipeline, pipeline_by_name
from .errors import (
    DeadlockError,
    JournalDisabled,
    SourceUnavailable,
    SpecError,
    StateUnavailable,
)
from .faults import FaultPlan
from .journal import JournalWriter, bytes_by_table
from .mapper import MapperConfig, MapperWorker, create_mapper_state_table
from .net import Discovery, Fabric, StoreClient, Worker
from .reducer import ReducerConfig, ReducerWorker, create_reducer_state_table
from .rows import NULL, Row, Rowset, encoded_size, string
from .sim import Simulator
from .sources import (
    OffsetLogPartition,
    OffsetLogPartitionReader,
    OrderedTablePartitionReader,
)
from .store import StateStore

SOURCE_FLAVORS = ("index", "offset")
MAPPER_GROUP = "mappers"


@dataclass
class ProcessorSpec:
    """Everything static about one processor run (faults live in the plan)."""

    pipeline: str = "count-by-key"
    processor_guid: str = "proc"
    mapper_count: int = 2           # one input partition per mapper
    reducer_count: int = 2
    input_rows: int = 1000
    source_flavor: str = "index"
    sub_streams: int = 3            # offset flavor only
    feed_batch_rows: int = 256
    feed_interval_us: int = 20_000
    # per-worker config
    max_batch_rows: int = 1024
    memory_limit_bytes: int = 4 << 20
    ingest_backoff_us: int = 50_000
    split_brain_delay_us: int = 500_000
    trim_period_us: int = 500_000
    max_rows_per_mapper_per_round: int = 512
    round_backoff_us: int = 50_000
    # environment
    store_latency_us: int = 500
    discovery_propagation_us: int = 20_000
    restart_delay_us: int = 1_000_000   # controller respawn after a kill
    lease_expiry_us: int = 400_000      # dead registration lingers this long
    trim_apply_delay_us: int = 2_000    # source trims apply lazily
    mapper_state_table: str = "mapper_state"
    reducer_state_table: str = "reducer_state"
    # harness bounds
    convergence_rounds: int = 3         # K consecutive NothingToDo rounds
    check_interval_us: int = 100_000
    deadlock_timeout_us: int = 30_000_000
    max_virtual_us: int = 600_000_000
    # input-position -> control directive (requires a control column)
    control_rows: Dict[int, str] = field(default_factory=dict)
    seed: int = 0

    _INT_FIELDS = (
        "mapper_count", "reducer_count", "input_rows", "sub_streams",
        "feed_batch_rows", "feed_interval_us", "max_batch_rows",
        "memory_limit_bytes", "ingest_backoff_us", "split_brain_delay_us",
        "trim_period_us", "max_rows_per_mapper_per_round",
        "round_backoff_us", "store_latency_us", "discovery_propagation_us",
        "restart_delay_us", "lease_expiry_us", "trim_apply_delay_us",
        "convergence_rounds", "check_interval_us", "deadlock_timeout_us",
        "max_virtual_us", "seed",
    )
    _STR_FIELDS = (
        "pipeline", "processor_guid", "source_flavor",
        "mapper_state_table", "reducer_state_table",
    )

    def validate(self) -> "ProcessorSpec":
        for name in self._INT_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise SpecError("%s: expected an integer, got %r"
                                % (name, value))
        for name in self._STR_FIELDS:
            if not isinstance(getattr(self, name), str):
                raise SpecError("%s: expected a string" % name)
        if self.mapper_count < 1:
            raise SpecError("mapper_count: must be >= 1")
        if self.reducer_count < 1:
            raise SpecError("reducer_count: must be >= 1")
        if self.input_rows < 0:
            raise SpecError("input_rows: must be >= 0")
        if self.source_flavor not in SOURCE_FLAVORS:
            raise SpecError("source_flavor: %r not in %r"
                            % (self.source_flavor, SOURCE_FLAVORS))
        if self.sub_streams < 1:
            raise SpecError("sub_streams: must be >= 1")
        for name in ("feed_batch_rows", "max_batch_rows",
                     "max_rows_per_mapper_per_round", "memory_limit_bytes",
                     "convergence_rounds"):
            if getattr(self, name) < 1:
                raise SpecError("%s: must be >= 1" % name)
        for name in ("feed_interval_us", "ingest_backoff_us",
                     "split_brain_delay_us", "trim_period_us",
                     "round_backoff_us", "store_latency_us",
                     "discovery_propagation_us", "restart_delay_us",
                     "lease_expiry_us", "trim_apply_delay_us",
                     "check_interval_us", "deadlock_timeout_us",
                     "max_virtual_us"):
            if getattr(self, name) < 0:
                raise SpecError("%s: must be >= 0" % name)
        if not isinstance(self.control_rows, dict):
            raise SpecError("control_rows: expected an object")
        for position, directive in self.control_rows.items():
            if not isinstance(position, int) or not (
                    0 <= position < max(self.input_rows, 1)):
                raise SpecError("control_rows: position %r out of range"
                                % (position,))
            if not isinstance(directive, str) or not directive:
                raise SpecError("control_rows[%d]: empty directive"
                                % position)
        if self.mapper_state_table == self.reducer_state_table:
            raise SpecError("reducer_state_table: clashes with mapper's")
        return self

    def to_json(self) -> str:
        payload = {}
        for name in self._INT_FIELDS + self._STR_FIELDS:
            payload[name] = getattr(self, name)
        payload["control_rows"] = {
            str(position): directive
            for position, directive in self.control_rows.items()
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProcessorSpec":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError("spec is not valid JSON: %s" % exc) from exc
        if not isinstance(payload, dict):
            raise SpecError("spec: expected a JSON object")
        known = set(cls._INT_FIELDS) | set(cls._STR_FIELDS) | {"control_rows"}
        for key in payload:
            if key not in known:
                raise SpecError("unknown spec field %r" % key)
        kwargs = {k: v for k, v in payload.items() if k != "control_rows"}
        control_rows = {}
        for raw_position, directive in payload.get("control_rows",
                                                   {}).items():
            if not isinstance(raw_position, str) or not raw_position.isdigit():
                raise SpecError("control_rows: position %r is not a"
                                " non-negative integer" % (raw_position,))
            control_rows[int(raw_position)] = directive
        return cls(control_rows=control_rows, **kwargs).validate()


# -- verification ---------------------------------------------------------------


@dataclass
class VerificationResult:
    duplicates: int = 0        # effect rows applied more than once
    losses: int = 0            # effect rows applied less than once
    table_mismatches: int = 0  # user tables differing from the oracle
    details: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (self.duplicates == 0 and self.losses == 0
                and self.table_mismatches == 0)


def verify_exactly_once(store: StateStore, pipeline: Pipeline,
                        input_rowset: Rowset) -> VerificationResult:
    """Final user tables vs. the pipeline's brute-force oracle.

    The ``effects`` table gets per-row treatment: its counters were
    maintained inside the reducers' transactions, so exactly-once holds
    iff every expected counter is exactly 1 — above counts a duplicate,
    below (or absent) a loss. Every other user table must match the
    oracle structurally.
    """
    expected = pipeline.expected_user_tables(input_rowset)
    result = VerificationResult()
    for table_name in sorted(expected):
        expected_rows = expected[table_name]
        actual = store.snapshot_sorted(table_name)
        if table_name == "effects":
            for key, row in expected_rows.items():
                want = row.values[0].payload
                got_row = actual.get(key)
                got = got_row.values[0].payload if got_row is not None else 0
                if got > want:
                    result.duplicates += 1
                    result.details.append(
                        "effects%r applied %d times" % (key, got))
                elif got < want:
                    result.losses += 1
                    result.details.append(
                        "effects%r applied %d of %d times" % (key, got, want))
            phantom = len(set(actual) - set(expected_rows))
            if phantom:
                result.duplicates += phantom
                result.details.append("%d phantom effect rows" % phantom)
        elif actual != expected_rows:
            result.table_mismatches += 1
            missing = len(set(expected_rows) - set(actual))
            extra = len(set(actual) - set(expected_rows))
            differing = sum(
                1 for key, row in expected_rows.items()
                if key in actual and actual[key] != row
            )
            result.details.append(
                "%s: %d missing, %d extra, %d differing rows"
                % (table_name, missing, extra, differing))
    return result


def check_commit_atomicity(store: StateStore, state_tables: set,
                           user_tables: set) -> List[str]:
    """No committed transaction may touch user tables without also
    writing a worker-state row — otherwise a crash between the two
    writes would split an effect from its bookkeeping."""
    violations = []
    for record in store.commit_log:
        touched = {table for table, _k, _r, _v in record.writes}
        if touched & user_tables and not touched & state_tables:
            violations.append(
                "commit %d writes %s without any state row"
                % (record.sequence, sorted(touched & user_tables)))
    return violations


def check_serializability(store: StateStore) -> List[str]:
    """Replay the commit log: every committed read must have observed the
    version produced by the latest prior commit of that key (no commit
    mixes an old snapshot with new writes)."""
    versions: Dict[tuple, int] = {}
    violations = []
    for record in store.commit_log:
        for table, key, observed in record.reads:
            current = versions.get((table, key), 0)
            if observed != current:
                violations.append(
                    "commit %d read %s%r@v%d but latest was v%d"
                    % (record.sequence, table, key, observed, current))
        for table, key, _row, new_version in record.writes:
            slot = (table, key)
            if new_version != versions.get(slot, 0) + 1:
                violations.append(
                    "commit %d skipped %s%r to v%d"
                    % (record.sequence, table, key, new_version))
            versions[slot] = new_version
    return violations


def measure_write_amplification(journal_path: Optional[str],
                                spec: ProcessorSpec,
                                payload_bytes: int) -> dict:
    """meta/payload byte ratio from the journal.

    Meta is every byte the shuffle machinery persisted — the worker
    state tables, plus the strawman's spill table when present (that
    mode persists every shuffled row, which is exactly the baseline the
    design avoids). Payload is the encoded size of the input actually
    fed. User output tables count toward neither side.
    """
    if journal_path is None:
        raise JournalDisabled("attach a journal to meter write"
                              " amplification")
    totals = bytes_by_table(journal_path)
    meta_tables = {spec.mapper_state_table, spec.reducer_state_table, "spill"}
    meta_bytes = sum(totals.get(name, 0) for name in meta_tables)
    ratio = None if payload_bytes == 0 else meta_bytes / payload_bytes
    return {
        "meta_bytes": meta_bytes,
        "payload_bytes": payload_bytes,
        "amplification": ratio,
        "bytes_by_table": totals,
    }


# -- report ---------------------------------------------------------------------


@dataclass
class ScenarioReport:
    """Deterministic structured summary of one run; PASS iff no
    duplicates, no losses, and the user tables equal the oracle."""

    seed: int
    pipeline: str
    mapper_count: int
    reducer_count: int
    input_rows: int
    fed_rows: int
    verdict: str
    duplicates: int
    losses: int
    table_mismatches: int
    atomicity_violations: int
    serializability_violations: int
    split_brain_detections: int
    impostor_overcommits: int
    restarts: Dict[str, int]
    rounds_to_convergence: int
    virtual_time_us: int
    max_window_bytes: Dict[str, int]
    meta_bytes: Optional[int]
    payload_bytes: int
    meta_bytes_per_commit: Optional[float]
    amplification: Optional[float]
    fabric: Dict[str, int]
    worker_stats: Dict[str, dict]
    details: List[str]

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"


# -- scenario -------------------------------------------------------------------


class Scenario:
    """One wired-up world; ``run()`` drives it to convergence."""

    def __init__(self, spec: ProcessorSpec, plan: Optional[FaultPlan] = None,
                 seed: Optional[int] = None,
                 journal_path: Optional[str] = None):
        self.spec = spec.validate()
        self.plan = (plan or FaultPlan()).validate()
        self.seed = spec.seed if seed is None else seed
        self.journal_path = journal_path
        try:
            self.pipeline = pipeline_by_name(spec.pipeline)
        except KeyError as exc:
            raise SpecError("pipeline: %s" % exc.args[0]) from None
        if spec.control_rows and self.pipeline.control_column is None:
            raise SpecError("control_rows: pipeline %r has no control column"
                            % spec.pipeline)
        self._built = False
        self.finished = False

    # -- construction ---------------------------------------------------------

    def build(self):
        if self._built:
            raise RuntimeError("scenario already built")
        self._built = True
        spec, plan = self.spec, self.plan
        self.sim = Simulator(self.seed)
        self.journal = (JournalWriter(self.journal_path)
                        if self.journal_path else None)
        self.store = StateStore(journal=self.journal)
        create_mapper_state_table(self.store, spec.mapper_state_table)
        create_reducer_state_table(self.store, spec.reducer_state_table)
        for table in self.pipeline.user_tables:
            self.store.create_sorted_table(
                table.name, table.key_columns, table.value_columns)
        self.fabric = Fabric(
            self.sim,
            drop_probability=plan.message_drop_probability,
            duplicate_probability=plan.message_duplicate_probability,
            delay_min_us=plan.delay_min_us,
            delay_max_us=plan.delay_max_us,
            rpc_timeout_us=plan.rpc_timeout_us,
        )
        self.discovery = Discovery(
            self.sim, propagation_delay_us=spec.discovery_propagation_us)
        for a, b in plan.partitioned_pairs:
            self.fabric.partition(tuple(a), tuple(b))

        self.input_tables = ["input-%d" % i for i in range(spec.mapper_count)]
        self.offset_partitions: List[OffsetLogPartition] = []
        if spec.source_flavor == "index":
            for name in self.input_tables:
                self.store.create_ordered_table(
                    name, self.pipeline.input_columns)
        else:
            for index in range(spec.mapper_count):
                self.offset_partitions.append(OffsetLogPartition(
                    spec.sub_streams,
                    seed=self.seed * 1009 + index,
                    columns=self.pipeline.input_columns,
                ))

        self.mappers: Dict[int, MapperWorker] = {}
        self.reducers: Dict[int, ReducerWorker] = {}
        self.all_workers: List[Worker] = []
        self.restarts = {
            "mapper-%d" % i: 0 for i in range(spec.mapper_count)
        }
        self.restarts.update(
            ("reducer-%d" % i, 0) for i in range(spec.reducer_count))
        self.pending_respawns = 0
        self.fed_rows = 0
        self.fed_per_partition = [0] * spec.mapper_count
        self.payload_bytes = 0
        self.feeding_done = False
        # (time_us, mapper_index, window_bytes, input_lag_rows)
        self.telemetry: List[Tuple[int, int, int, int]] = []
        self._armed_triggers = dict(plan.trigger_actions)
        self.last_event_time = max(
            (event.time_us for event in plan.events), default=0)

        self._source_fault = self._probability_hook(
            plan.source_unavailable_probability, "source-faults",
            SourceUnavailable)
        self._state_fault = self._probability_hook(
            plan.state_unavailable_probability, "state-faults",
            StateUnavailable)

        for event in plan.events:
            self.sim.schedule(event.time_us,
                              lambda e=event: self._apply_event(e))
        for index in range(spec.mapper_count):
            self._spawn("mapper", index)
        for index in range(spec.reducer_count):
            self._spawn("reducer", index)
        self.sim.spawn(self._feeder(), "feeder")
        self.sim.spawn(self._monitor(), "monitor")

    def _probability_hook(self, probability: float, stream: str,
                          error) -> Optional[Callable]:
        if probability <= 0.0:
            return None
        rng = self.sim.rng(stream)

        def hook():
            if rng.random() < probability:
                raise error("injected (p=%g)" % probability)

        return hook

    def _store_client(self) -> StoreClient:
        return StoreClient(self.sim, self.store,
                           latency_us=self.spec.store_latency_us,
                           fault_hook=self._state_fault)

    def _reader(self, index: int):
        defer = lambda fn: self.sim.schedule(  # noqa: E731
            self.spec.trim_apply_delay_us, fn)
        if self.spec.source_flavor == "index":
            return OrderedTablePartitionReader(
                self.store, self.input_tables[index],
                defer=defer, fault_hook=self._source_fault)
        return OffsetLogPartitionReader(
            self.offset_partitions[index],
            defer=defer, fault_hook=self._source_fault)

    # -- worker lifecycle -------------------------------------------------------

    def _spawn(self, kind: str, index: int) -> Worker:
        spec = self.spec
        if kind == "mapper":
            worker = MapperWorker(
                self.sim, index, self.fabric.new_guid("m%d" % index),
                store_client=self._store_client(),
                reader=self._reader(index),
                pipeline=self.pipeline,
                reducer_count=spec.reducer_count,
                state_table=spec.mapper_state_table,
                config=MapperConfig(
                    max_batch_rows=spec.max_batch_rows,
                    ingest_backoff_us=spec.ingest_backoff_us,
                    split_brain_delay_us=spec.split_brain_delay_us,
                    trim_period_us=spec.trim_period_us,
                    memory_limit_bytes=spec.memory_limit_bytes,
                    bootstrap_backoff_us=spec.ingest_backoff_us,
                ),
                trigger_hook=self._trigger,
            )
            self.fabric.bind(worker)
            self.discovery.register(MAPPER_GROUP, worker.endpoint,
                                    {"registered_us": self.sim.now})
            self.mappers[index] = worker
        else:
            worker = ReducerWorker(
                self.sim, index, self.fabric.new_guid("r%d" % index),
                fabric=self.fabric,
                discovery=self.discovery,
                store=self.store,
                store_client=self._store_client(),
                pipeline=self.pipeline,
                mapper_count=spec.mapper_count,
                mapper_group=MAPPER_GROUP,
                state_table=spec.reducer_state_table,
                config=ReducerConfig(
                    max_rows_per_mapper_per_round=(
                        spec.max_rows_per_mapper_per_round),
                    round_backoff_us=spec.round_backoff_us,
                ),
                trigger_hook=self._trigger,
            )
            self.fabric.bind(worker)
            self.reducers[index] = worker
        self.all_workers.append(worker)
        worker.start()
        return worker

    def _apply_event(self, event):
        if event.action == "partition":
            self.fabric.partition(*event.pair)
        elif event.action == "heal":
            self.fabric.heal(*event.pair)
        else:
            self._apply_worker_action(event.action, event.kind, event.index)

    def _apply_worker_action(self, action: str, kind: str, index: int):
        registry = self.mappers if kind == "mapper" else self.reducers
        current = registry.get(index)
        if action == "kill":
            if current is not None and current.alive:
                current.kill()
                self._schedule_respawn(current)
        elif action == "pause":
            if current is not None:
                current.pause()
        elif action == "resume":
            if current is not None:
                current.resume()
        elif action == "duplicate":
            self._spawn(kind, index)

    def _schedule_respawn(self, dead: Worker):
        self.restarts["%s-%d" % (dead.kind, dead.index)] += 1
        self.pending_respawns += 1
        if dead.kind == "mapper":
            # The registration outlives the worker until its lease runs
            # out — callers must survive the stale window.
            self.sim.schedule(
                self.spec.lease_expiry_us,
                lambda: self.discovery.deregister(MAPPER_GROUP,
                                                  dead.endpoint))

        def respawn():
            self.pending_respawns -= 1
            self._spawn(dead.kind, dead.index)

        self.sim.schedule(self.spec.restart_delay_us, respawn)

    def _trigger(self, worker: Worker, point: str):
        """One-shot fault actions bound to protocol points; the action
        applies to the worker that reached the point."""
        action = self._armed_triggers.get(point)
        if action is None:
            return
        if action.get("kind") not in (None, worker.kind):
            return
        if action.get("index") not in (None, worker.index):
            return
        del self._armed_triggers[point]
        verb = action["action"]
        if verb == "kill":
            worker.kill()
            self._schedule_respawn(worker)
        elif verb == "pause":
            worker.pause()
        elif verb == "resume":
            worker.resume()
        elif verb == "duplicate":
            self._spawn(worker.kind, worker.index)

    # -- feeding ---------------------------------------------------------------

    def generate_input(self, begin: int, end: int) -> Rowset:
        """Pipeline input with the spec's control rows overlaid — this is
        also what the oracle sees, so directives stay in the workload."""
        rowset = self.pipeline.generate_input(self.seed, begin, end)
        overrides = {
            position: directive
            for position, directive in self.spec.control_rows.items()
            if begin <= position < end
        }
        if not overrides:
            return rowset
        column = rowset.name_table.index_of(self.pipeline.control_column)
        rows = list(rowset.rows)
        for position, directive in overrides.items():
            values = list(rows[position - begin].values)
            while len(values) <= column:
                values.append(NULL)
            values[column] = string("!" + directive)
            rows[position - begin] = Row(tuple(values))
        return Rowset(rowset.name_table, rows)

    def _feeder(self):
        spec = self.spec
        rng = self.sim.rng("feeder")
        position = 0
        while position < spec.input_rows:
            end = min(position + spec.feed_batch_rows, spec.input_rows)
            rowset = self.generate_input(position, end)
            self.payload_bytes += encoded_size(rowset)
            per_partition: List[List[Row]] = [
                [] for _ in range(spec.mapper_count)]
            for offset, row in enumerate(rowset.rows):
                per_partition[(position + offset) % spec.mapper_count].append(
                    row)
            for index, rows in enumerate(per_partition):
                if not rows:
                    continue
                self.fed_per_partition[index] += len(rows)
                if spec.source_flavor == "index":
                    self.store.append_rows(
                        self.input_tables[index],
                        Rowset(rowset.name_table, rows))
                else:
                    partition = self.offset_partitions[index]
                    for row in rows:
                        partition.append(
                            rng.randrange(spec.sub_streams),
                            Rowset(rowset.name_table, (row,)))
            position = end
            self.fed_rows = position
            yield self.sim.sleep(spec.feed_interval_us)
        self.feeding_done = True

    def _monitor(self):
        while not self.finished:
            for index, worker in sorted(self.mappers.items()):
                lag = self.fed_per_partition[index] - worker.core.input_cursor
                self.telemetry.append(
                    (self.sim.now, index, worker.core.memory_usage, lag))
            yield self.sim.sleep(self.spec.check_interval_us)

    # -- convergence --------------------------------------------------------------

    def _inputs_trimmed(self) -> bool:
        if self.spec.source_flavor == "index":
            return all(
                self.store.table_trimmed_up_to(name)
                == self.store.table_end_index(name)
                for name in self.input_tables
            )
        return all(p.total_entries() == 0 for p in self.offset_partitions)

    def _events_done(self) -> bool:
        return (self.pending_respawns == 0
                and self.sim.now > self.last_event_time)

    def _converged(self) -> bool:
        if not (self.feeding_done or self.spec.input_rows == 0):
            return False
        if not self._events_done():
            return False
        if not self._inputs_trimmed():
            return False
        k = self.spec.convergence_rounds
        for worker in self.reducers.values():
            if not worker.alive:
                return False
            tail = worker.round_log[-k:]
            if len(tail) < k or any(
                    outcome != "nothing_to_do" for _, outcome, _ in tail):
                return False
        return True

    def _progress_fingerprint(self) -> tuple:
        trims = (
            tuple(self.store.table_trimmed_up_to(n)
                  for n in self.input_tables)
            if self.spec.source_flavor == "index"
            else tuple(tuple(p.removed_below) for p in self.offset_partitions)
        )
        return (self.fed_rows, len(self.store.commit_log), trims)

    def run(self) -> "Scenario":
        if not self._built:
            self.build()
        spec = self.spec
        last_progress = None
        last_progress_time = 0
        try:
            while True:
                status = self.sim.run(
                    until_time=self.sim.now + spec.check_interval_us)
                if self._converged():
                    break
                progress = self._progress_fingerprint()
                if progress != last_progress:
                    last_progress = progress
                    last_progress_time = self.sim.now
                elif (self._events_done()
                      and self.sim.now - last_progress_time
                      > spec.deadlock_timeout_us):
                    raise DeadlockError(
                        "no progress for %dus at t=%dus: %r"
                        % (spec.deadlock_timeout_us, self.sim.now, progress))
                if status == "quiescent":
                    raise DeadlockError(
                        "simulator drained before convergence at t=%dus"
                        % self.sim.now)
                if self.sim.now > spec.max_virtual_us:
                    raise DeadlockError(
                        "virtual horizon %dus exceeded" % spec.max_virtual_us)
        finally:
            self.finished = True
            if self.journal is not None:
                self.journal.close()
        return self

    # -- reporting ---------------------------------------------------------------

    def _instances(self, kind: str) -> Dict[int, List[Worker]]:
        grouped: Dict[int, List[Worker]] = {}
        for worker in self.all_workers:
            if worker.kind == kind:
                grouped.setdefault(worker.index, []).append(worker)
        return grouped

    def impostor_overcommits(self) -> int:
        """Worst case, over every split-brain detection, of how many state
        commits the detecting instance landed after the counterpart
        instance's latest commit — the design bounds this at one."""
        worst = 0
        for kind in ("mapper", "reducer"):
            for instances in self._instances(kind).values():
                if len(instances) < 2:
                    continue
                for instance in instances:
                    other_commits = [
                        time for other in instances if other is not instance
                        for time, label in other.events
                        if label == "state-commit"
                    ]
                    if not other_commits:
                        continue
                    for detected_at, label in instance.events:
                        if label != "split-brain":
                            continue
                        fence = max(
                            (t for t in other_commits if t <= detected_at),
                            default=None)
                        if fence is None:
                            continue
                        landed = sum(
                            1 for time, lbl in instance.events
                            if lbl == "state-commit"
                            and fence <= time <= detected_at)
                        worst = max(worst, landed)
        return worst

    def report(self) -> ScenarioReport:
        spec = self.spec
        verification = verify_exactly_once(
            self.store, self.pipeline,
            self.generate_input(0, spec.input_rows))
        state_tables = {spec.mapper_state_table, spec.reducer_state_table}
        user_tables = {table.name for table in self.pipeline.user_tables
                       if table.name != "spill"}
        atomicity = check_commit_atomicity(self.store, state_tables,
                                           user_tables)
        serializability = check_serializability(self.store)

        worker_stats: Dict[str, dict] = {}
        split_brain = 0
        for kind in ("mapper", "reducer"):
            for index, instances in sorted(self._instances(kind).items()):
                merged: Dict[str, int] = {}
                for instance in instances:
                    for name, value in instance.stats.items():
                        merged[name] = merged.get(name, 0) + value
                merged["instances"] = len(instances)
                worker_stats["%s-%d" % (kind, index)] = merged
                split_brain += merged.get("split_brain_restarts", 0)
                split_brain += merged.get("trim_split_brain", 0)
                split_brain += merged.get("split_brain_skips", 0)

        max_window = {
            "mapper-%d" % index: max(
                instance.stats["window_bytes_peak"]
                for instance in instances)
            for index, instances in self._instances("mapper").items()
        }
        rounds = max(
            (stats["rounds"] for slot, stats in worker_stats.items()
             if slot.startswith("reducer-")),
            default=0,
        )

        meta_bytes = None
        amplification = None
        meta_per_commit = None
        if self.journal_path is not None:
            meter = measure_write_amplification(
                self.journal_path, spec, self.payload_bytes)
            meta_bytes = meter["meta_bytes"]
            amplification = meter["amplification"]
            meta_commits = sum(
                1 for record in self.store.commit_log
                if any(table in state_tables or table == "spill"
                       for table, _k, _r, _v in record.writes)
            )
            if meta_commits:
                meta_per_commit = meta_bytes / meta_commits

        verdict = "PASS" if verification.passed else "FAIL"
        return ScenarioReport(
            seed=self.seed,
            pipeline=spec.pipeline,
            mapper_count=spec.mapper_count,
            reducer_count=spec.reducer_count,
            input_rows=spec.input_rows,
            fed_rows=self.fed_rows,
            verdict=verdict,
            duplicates=verification.duplicates,
            losses=verification.losses,
            table_mismatches=verification.table_mismatches,
            atomicity_violations=len(atomicity),
            serializability_violations=len(serializability),
            split_brain_detections=split_brain,
            impostor_overcommits=self.impostor_overcommits(),
            restarts=dict(self.restarts),
            rounds_to_convergence=rounds,
            virtual_time_us=self.sim.now,
            max_window_bytes=max_window,
            meta_bytes=meta_bytes,
            payload_bytes=self.payload_bytes,
            meta_bytes_per_commit=meta_per_commit,
            amplification=amplification,
            fabric=dict(self.fabric.stats),
            worker_stats=worker_stats,
            details=(verification.details + atomicity + serializability)[:50],
        )


def run_processor(spec: ProcessorSpec, plan: Optional[FaultPlan] = None,
                  seed: Optional[int] = None,
                  journal_path: Optional[str] = None) -> ScenarioReport:
    """Run one scenario to convergence and report on it."""
    return Scenario(spec, plan, seed=seed, journal_path=journal_path) \
        .run().report()
