"""Deterministic discrete-event simulator.

Virtual time is an integer microsecond counter. Events are dispatched
from a heap ordered by (time, sequence-number), so simultaneous events
run in scheduling order and a run is a pure function of the seed and the
code — no wall-clock, thread, or hash-order dependence anywhere.

Worker logic is written as generator processes that yield Futures:

    def worker(sim):
        yield sim.sleep(1000)            # wait 1 ms of virtual time
        reply = yield fabric.call(...)   # wait for a completion

Named RNG streams (``sim.rng("faults")``) are derived from the root seed
so independent components draw independent but reproducible randomness.
"""

from __future__ import annotations

import heapq
import random
from typing import Callable, Dict, Iterable, List, Optional

US_PER_MS = 1000
US_PER_SECOND = 1000_000


class Future:
    """Single-assignment result container with completion callbacks."""

    __slots__ = ("_done", "_result", "_exception", "_callbacks")

    def __init__(self):
        self._done = False
        self._result = None
        self._exception = None
        self._callbacks: List[Callable] = []

    @property
    def done(self) -> bool:
        return self._done

    def result(self):
        if not self._done:
            raise RuntimeError("future not resolved")
        if self._exception is not None:
            raise self._exception
        return self._result

    def exception(self):
        if not self._done:
            raise RuntimeError("future not resolved")
        return self._exception

    def set_result(self, value):
        if self._done:
            raise RuntimeError("future already resolved")
        self._done = True
        self._result = value
        self._fire()

    def set_exception(self, exc: BaseException):
        if self._done:
            raise RuntimeError("future already resolved")
        self._done = True
        self._exception = exc
        self._fire()

    def add_done_callback(self, fn: Callable):
        if self._done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _fire(self):
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)


class Event:
    """A scheduled callback; cancel() makes the dispatcher skip it."""

    __slots__ = ("time", "seq", "fn", "cancelled")

    def __init__(self, time: int, seq: int, fn: Callable):
        self.time = time
        self.seq = seq
        self.fn = fn
        self.cancelled = False

    def cancel(self):
        self.cancelled = True

    def __lt__(self, other):
        return (self.time, self.seq) < (other.time, other.seq)


class Process(Future):
    """A generator driven by the simulator; resolves with its return value."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        super().__init__()
        self.name = name


class Simulator:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.now = 0
        self.steps = 0
        self._heap: List[Event] = []
        self._seq = 0
        self._stopped = False
        self._rngs: Dict[str, random.Random] = {}

    # -- randomness ---------------------------------------------------------

    def rng(self, name: str) -> random.Random:
        """Named RNG stream, stable w.r.t. the root seed."""
        stream = self._rngs.get(name)
        if stream is None:
            stream = random.Random("%d/%s" % (self.seed, name))
            self._rngs[name] = stream
        return stream

    # -- scheduling ---------------------------------------------------------

    def schedule(self, delay_us: int, fn: Callable) -> Event:
        if delay_us < 0:
            raise ValueError("negative delay")
        event = Event(self.now + delay_us, self._seq, fn)
        self._seq += 1
        heapq.heappush(self._heap, event)
        return event

    def call_soon(self, fn: Callable) -> Event:
        return self.schedule(0, fn)

    def sleep(self, delay_us: int) -> Future:
        future = Future()
        self.schedule(delay_us, lambda: future.set_result(None))
        return future

    # -- processes ------------------------------------------------------------

    def spawn(self, generator, name: str = "proc",
              dispatcher: Optional[Callable] = None) -> Process:
        """Drive ``generator`` as a process.

        ``dispatcher`` receives every pending resume step as a zero-arg
        callable and decides whether/when to run it — workers use this to
        implement pause (queue the step) and kill (drop it). The default
        runs steps on the next scheduler tick.
        """
        process = Process(name)
        self._dispatch(
            dispatcher,
            lambda: self._step_process(process, generator, None, None,
                                       dispatcher),
        )
        return process

    def _dispatch(self, dispatcher: Optional[Callable], step: Callable):
        if dispatcher is None:
            self.call_soon(step)
        else:
            dispatcher(step)

    def _step_process(self, process: Process, generator, value, exc,
                      dispatcher):
        if process.done:
            return  # e.g. externally failed/cancelled
        try:
            if exc is not None:
                yielded = generator.throw(exc)
            else:
                yielded = generator.send(value)
        except StopIteration as stop:
            process.set_result(stop.value)
            return
        except BaseException as failure:
            process.set_exception(failure)
            return
        if not isinstance(yielded, Future):
            process.set_exception(
                TypeError(
                    "process %r yielded %r, expected a Future"
                    % (process.name, yielded)
                )
            )
            return
        yielded.add_done_callback(
            lambda future: self._resume(process, generator, future, dispatcher)
        )

    def _resume(self, process: Process, generator, future: Future, dispatcher):
        # Resume on a fresh dispatch so completion callbacks never reenter
        # worker code within the resolver's stack frame.
        self._dispatch(
            dispatcher,
            lambda: self._step_process(
                process, generator,
                future._result if future._exception is None else None,
                future._exception,
                dispatcher,
            ),
        )

    # -- helpers --------------------------------------------------------------

    def gather_settled(self, futures: Iterable[Future]) -> Future:
        """Resolve with a list of (result, exception) pairs; never raises."""
        futures = list(futures)
        gathered = Future()
        remaining = [len(futures)]
        settled: List = [None] * len(futures)
        if not futures:
            gathered.set_result([])
            return gathered

        def on_done(index):
            def callback(future: Future):
                settled[index] = (future._result, future._exception)
                remaining[0] -= 1
                if remaining[0] == 0:
                    gathered.set_result(settled)
            return callback

        for i, future in enumerate(futures):
            future.add_done_callback(on_done(i))
        return gathered

    # -- main loop ------------------------------------------------------------

    def stop(self):
        self._stopped = True

    def run(self, until_time: Optional[int] = None,
            max_steps: Optional[int] = None) -> str:
        """Dispatch events until quiescence, a bound, or stop().

        Returns one of "quiescent", "until_time", "max_steps", "stopped".
        """
        self._stopped = False
        while self._heap:
            if self._stopped:
                return "stopped"
            event = self._heap[0]
            if event.cancelled:
                heapq.heappop(self._heap)
                continue
            if until_time is not None and event.time > until_time:
                self.now = until_time
                return "until_time"
            if max_steps is not None and self.steps >= max_steps:
                return "max_steps"
            heapq.heappop(self._heap)
            self.now = event.time
            self.steps += 1
            event.fn()
        if until_time is not None:
            self.now = max(self.now, until_time)
        return "stopped" if self._stopped else "quiescent"
