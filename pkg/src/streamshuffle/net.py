"""Simulated RPC fabric, worker lifecycle, and discovery.

Addressing: each worker binds the slot ``(kind, index)``. A respawned or
duplicated worker binds the same slot and, as with a real port takeover,
the newest live binder receives traffic. Callers therefore cannot tell a
fresh instance from the one discovery told them about — that is exactly
why GetRows carries the target's GUID and the mapper rejects mismatches.

Fault semantics (all evaluated on seeded RNG streams, so replays are
bit-identical):

* partitioned pair or no live binder at send time → ``RpcUnreachable``;
* dropped request/response legs or a paused/killed target → the caller's
  deadline fires → ``RpcTimeout``;
* per-leg delivery delays are drawn uniformly from the configured range;
* a response arriving after the deadline is discarded (the transport is
  at-most-once; idempotent GetRows makes retries safe).

Discovery is deliberately stale: registrations and removals become
visible only after the propagation delay, so a reducer can hold an
endpoint whose worker is dead (→ Unreachable) or replaced (→ GUID
mismatch error) — both paths the workers must survive.
"""

from __future__ import annotations

import enum
from typing import Callable, Dict, List, Optional, Tuple

from .errors import RpcTimeout, RpcUnreachable
from .sim import Future, Simulator

DEFAULT_RPC_TIMEOUT_US = 200_000
DEFAULT_PROPAGATION_DELAY_US = 500_000


class Endpoint:
    __slots__ = ("kind", "index", "guid")

    def __init__(self, kind: str, index: int, guid: str):
        self.kind = kind
        self.index = index
        self.guid = guid

    @property
    def slot(self) -> Tuple[str, int]:
        return (self.kind, self.index)

    def __eq__(self, other):
        return isinstance(other, Endpoint) and (
            (self.kind, self.index, self.guid)
            == (other.kind, other.index, other.guid)
        )

    def __hash__(self):
        return hash((self.kind, self.index, self.guid))

    def __repr__(self):
        return "Endpoint(%s:%d, guid=%s)" % (self.kind, self.index, self.guid)


class WorkerState(enum.Enum):
    RUNNING = "running"
    PAUSED = "paused"
    KILLED = "killed"


class Worker:
    """Base class: lifecycle + dispatch gate for all worker activity.

    Every resume step of the worker's processes and every inbound RPC
    delivery goes through ``dispatch``: dropped when killed, queued when
    paused (and replayed in order on resume), scheduled normally when
    running. Pausing therefore freezes the worker mid-protocol without
    losing its in-flight steps — the SIGSTOP analogue.
    """

    kind = "worker"

    def __init__(self, sim: Simulator, index: int, guid: str):
        self.sim = sim
        self.index = index
        self.guid = guid
        self.endpoint = Endpoint(self.kind, index, guid)
        self.state = WorkerState.RUNNING
        self._pending: List[Callable] = []

    # -- dispatch gate ------------------------------------------------------

    def dispatch(self, step: Callable):
        if self.state is WorkerState.KILLED:
            return
        if self.state is WorkerState.PAUSED:
            self._pending.append(step)
            return
        self.sim.call_soon(step)

    def spawn(self, generator, name: str):
        return self.sim.spawn(generator, name=name, dispatcher=self.dispatch)

    # -- lifecycle ------------------------------------------------------------

    def pause(self):
        if self.state is WorkerState.RUNNING:
            self.state = WorkerState.PAUSED

    def resume(self):
        if self.state is not WorkerState.PAUSED:
            return
        self.state = WorkerState.RUNNING
        pending, self._pending = self._pending, []
        for step in pending:
            self.sim.call_soon(step)

    def kill(self):
        self.state = WorkerState.KILLED
        self._pending.clear()

    @property
    def alive(self) -> bool:
        return self.state is not WorkerState.KILLED

    # -- RPC server side ------------------------------------------------------

    def handle_request(self, sender: Endpoint, data: bytes) -> bytes:
        raise NotImplementedError


class Fabric:
    """Routes byte messages between workers under a fault policy."""

    def __init__(self, sim: Simulator,
                 drop_probability: float = 0.0,
                 duplicate_probability: float = 0.0,
                 delay_min_us: int = 100,
                 delay_max_us: int = 2000,
                 rpc_timeout_us: int = DEFAULT_RPC_TIMEOUT_US):
        self.sim = sim
        self.drop_probability = drop_probability
        self.duplicate_probability = duplicate_probability
        self.delay_min_us = delay_min_us
        self.delay_max_us = delay_max_us
        self.rpc_timeout_us = rpc_timeout_us
        self._rng = sim.rng("fabric")
        self._guid_rng = sim.rng("guids")
        self._binders: Dict[Tuple[str, int], List[Worker]] = {}
        self._partitions: set = set()
        self.stats = {"calls": 0, "dropped": 0, "unreachable": 0,
                      "timeouts": 0, "duplicated": 0}

    # -- identity -------------------------------------------------------------

    def new_guid(self, prefix: str) -> str:
        return "%s-%08x" % (prefix, self._guid_rng.getrandbits(32))

    # -- binding --------------------------------------------------------------

    def bind(self, worker: Worker):
        self._binders.setdefault(worker.endpoint.slot, []).append(worker)

    def live_binder(self, slot: Tuple[str, int]) -> Optional[Worker]:
        binders = self._binders.get(slot, ())
        for worker in reversed(binders):
            if worker.alive:
                return worker
        return None

    # -- partitions -----------------------------------------------------------

    @staticmethod
    def _pair(a: Tuple[str, int], b: Tuple[str, int]) -> frozenset:
        return frozenset((a, b))

    def partition(self, a: Tuple[str, int], b: Tuple[str, int]):
        self._partitions.add(self._pair(a, b))

    def heal(self, a: Tuple[str, int], b: Tuple[str, int]):
        self._partitions.discard(self._pair(a, b))

    def is_partitioned(self, a: Tuple[str, int], b: Tuple[str, int]) -> bool:
        return self._pair(a, b) in self._partitions

    # -- calls ----------------------------------------------------------------

    def _leg_delay(self) -> int:
        if self.delay_max_us <= self.delay_min_us:
            return self.delay_min_us
        return self._rng.randint(self.delay_min_us, self.delay_max_us)

    def call(self, caller: Worker, target: Endpoint, request: bytes,
             timeout_us: Optional[int] = None) -> Future:
        """Send ``request`` to the live binder of ``target``'s slot.

        Resolves with the response bytes, or fails with RpcUnreachable /
        RpcTimeout. Resolution is routed through the caller's dispatch
        gate, so paused callers see completions only after resuming.
        """
        self.stats["calls"] += 1
        future = Future()

        def finish_ok(payload: bytes):
            if not future.done:
                caller.dispatch(lambda: None if future.done
                                else future.set_result(payload))

        def finish_err(exc: Exception):
            if not future.done:
                caller.dispatch(lambda: None if future.done
                                else future.set_exception(exc))

        binder = self.live_binder(target.slot)
        if binder is None:
            self.stats["unreachable"] += 1
            self.sim.call_soon(
                lambda: finish_err(RpcUnreachable("no live %s:%d"
                                                  % target.slot))
            )
            return future
        if self.is_partitioned(caller.endpoint.slot, target.slot):
            self.stats["unreachable"] += 1
            self.sim.call_soon(
                lambda: finish_err(
                    RpcUnreachable(
                        "%s:%d cannot reach %s:%d (partitioned)"
                        % (caller.endpoint.slot + target.slot)
                    )
                )
            )
            return future

        deadline = timeout_us if timeout_us is not None else self.rpc_timeout_us

        def fire_timeout():
            if future.done:
                return
            self.stats["timeouts"] += 1
            finish_err(RpcTimeout("no response from %s:%d within %dus"
                                  % (target.slot + (deadline,))))

        timeout_event = self.sim.schedule(deadline, fire_timeout)

        def deliver_request():
            # Binder may have died in flight; the message just vanishes
            # and the caller's deadline fires.
            worker = self.live_binder(target.slot)
            if worker is None:
                return
            worker.dispatch(lambda: handle_on(worker))

        def handle_on(worker: Worker):
            response = worker.handle_request(caller.endpoint, request)
            if response is None:
                return
            if not self._roll_drop():
                self.sim.schedule(self._leg_delay(),
                                  lambda: deliver_response(response))
            if self._roll_duplicate():
                self.stats["duplicated"] += 1
                self.sim.schedule(self._leg_delay(),
                                  lambda: deliver_response(response))

        def deliver_response(response: bytes):
            if future.done:
                return  # deadline already fired; discard late response
            timeout_event.cancel()
            finish_ok(response)

        legs = 1 + (1 if self._roll_duplicate() else 0)
        if legs == 2:
            self.stats["duplicated"] += 1
        delivered = False
        for _ in range(legs):
            if self._roll_drop():
                continue
            delivered = True
            self.sim.schedule(self._leg_delay(), deliver_request)
        if not delivered:
            self.stats["dropped"] += 1
        return future

    def _roll_drop(self) -> bool:
        return (self.drop_probability > 0.0
                and self._rng.random() < self.drop_probability)

    def _roll_duplicate(self) -> bool:
        return (self.duplicate_probability > 0.0
                and self._rng.random() < self.duplicate_probability)


class StoreClient:
    """Store access with simulated latency and transient-fault injection.

    The underlying operation executes when the latency elapses (not at
    call time), so concurrent clients interleave at the store in virtual
    time — this is what makes optimistic-concurrency conflicts and
    crash-with-commit-in-flight scenarios reachable in simulation.
    ``tx_write`` stays synchronous: it only buffers into the transaction.
    """

    def __init__(self, sim: Simulator, store,
                 latency_us: int = 500,
                 fault_hook: Optional[Callable] = None):
        self.sim = sim
        self.store = store
        self.latency_us = latency_us
        self.fault_hook = fault_hook

    def deferred(self, fn: Callable, inject_fault: bool = True) -> Future:
        future = Future()
        hook = self.fault_hook if inject_fault else None

        def run():
            try:
                if hook is not None:
                    hook()
                future.set_result(fn())
            except Exception as exc:
                future.set_exception(exc)

        self.sim.schedule(self.latency_us, run)
        return future

    def begin(self):
        return self.store.begin()  # client-side, no I/O

    def tx_read(self, tx, table: str, key: tuple) -> Future:
        return self.deferred(lambda: self.store.tx_read(tx, table, key))

    def tx_write(self, tx, table: str, key: tuple, row):
        self.store.tx_write(tx, table, key, row)  # buffered client-side

    def commit(self, tx) -> Future:
        return self.deferred(lambda: self.store.commit(tx))

    def read(self, table: str, key: tuple) -> Future:
        return self.deferred(lambda: self.store.read(table, key))

    def call(self, fn: Callable) -> Future:
        """Run an arbitrary synchronous reader action with latency only;
        state-store fault injection stays on the store operations."""
        return self.deferred(fn, inject_fault=False)


class Discovery:
    """Group membership with deliberate staleness on both edges."""

    def __init__(self, sim: Simulator,
                 propagation_delay_us: int = DEFAULT_PROPAGATION_DELAY_US):
        self.sim = sim
        self.propagation_delay_us = propagation_delay_us
        self._groups: Dict[str, List[Tuple[Endpoint, dict]]] = {}

    def register(self, group: str, endpoint: Endpoint,
                 attributes: Optional[dict] = None):
        attributes = dict(attributes or {})

        def apply():
            entries = self._groups.setdefault(group, [])
            entries[:] = [(e, a) for e, a in entries if e != endpoint]
            entries.append((endpoint, attributes))

        self.sim.schedule(self.propagation_delay_us, apply)

    def deregister(self, group: str, endpoint: Endpoint):
        def apply():
            entries = self._groups.get(group, [])
            entries[:] = [(e, a) for e, a in entries if e != endpoint]

        self.sim.schedule(self.propagation_delay_us, apply)

    def list_group(self, group: str) -> List[Tuple[Endpoint, dict]]:
        entries = list(self._groups.get(group, ()))
        entries.sort(key=lambda pair: (pair[0].kind, pair[0].index,
                                       pair[0].guid))
        return entries
