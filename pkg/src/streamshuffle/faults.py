"""Declarative fault plans.

A plan fixes everything nondeterministic about a scenario's failures:
message drop/duplicate probabilities, the delivery-delay range, statically
partitioned slot pairs, a schedule of lifecycle events keyed by virtual
time, and trigger actions — one-shot lifecycle actions bound to named
code points (``worker.trigger("reducer:pre-user-commit")``), which let
tests kill a worker between two specific protocol steps deterministically
instead of fishing for the interleaving with timing.

Same plan + same seed ⇒ identical simulation, byte for byte.

Event actions: ``kill`` | ``pause`` | ``resume`` | ``duplicate`` (spawn a
second instance with the same index — split-brain) | ``partition`` /
``heal`` (slot pairs). Targets are (kind, index) slots.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import SpecError

ACTIONS = ("kill", "pause", "resume", "duplicate", "partition", "heal")


@dataclass
class FaultEvent:
    time_us: int
    action: str
    kind: Optional[str] = None     # kill/pause/resume/duplicate target
    index: Optional[int] = None
    pair: Optional[Tuple[Tuple[str, int], Tuple[str, int]]] = None

    def validate(self):
        if self.action not in ACTIONS:
            raise SpecError("events[].action: unknown action %r" % self.action)
        if self.action in ("partition", "heal"):
            if self.pair is None:
                raise SpecError("events[].pair: required for %r" % self.action)
        elif self.kind is None or self.index is None:
            raise SpecError(
                "events[].kind/index: required for %r" % self.action
            )
        if self.time_us < 0:
            raise SpecError("events[].time_us: negative")


@dataclass
class FaultPlan:
    message_drop_probability: float = 0.0
    message_duplicate_probability: float = 0.0
    delay_min_us: int = 100
    delay_max_us: int = 2000
    rpc_timeout_us: int = 200_000
    source_unavailable_probability: float = 0.0
    state_unavailable_probability: float = 0.0
    partitioned_pairs: List[Tuple[Tuple[str, int], Tuple[str, int]]] = field(
        default_factory=list
    )
    events: List[FaultEvent] = field(default_factory=list)
    # trigger name -> action dict {"action": ..., "kind": ..., "index": ...}
    trigger_actions: Dict[str, dict] = field(default_factory=dict)

    def validate(self):
        for name, probability in (
            ("message_drop_probability", self.message_drop_probability),
            ("message_duplicate_probability",
             self.message_duplicate_probability),
            ("source_unavailable_probability",
             self.source_unavailable_probability),
            ("state_unavailable_probability",
             self.state_unavailable_probability),
        ):
            if not 0.0 <= probability < 1.0:
                raise SpecError("%s: must be in [0, 1), got %r"
                                % (name, probability))
        if self.delay_min_us < 0 or self.delay_max_us < self.delay_min_us:
            raise SpecError("delay_min_us/delay_max_us: invalid range")
        if self.rpc_timeout_us <= 0:
            raise SpecError("rpc_timeout_us: must be positive")
        for event in self.events:
            event.validate()
        for trigger, action in self.trigger_actions.items():
            if action.get("action") not in ("kill", "pause", "resume",
                                            "duplicate"):
                raise SpecError(
                    "trigger_actions[%r].action: unknown %r"
                    % (trigger, action.get("action"))
                )
        return self

    # -- JSON ----------------------------------------------------------------

    def to_json(self) -> str:
        def event_dict(event: FaultEvent) -> dict:
            out = {"time_us": event.time_us, "action": event.action}
            if event.pair is not None:
                out["pair"] = [list(event.pair[0]), list(event.pair[1])]
            else:
                out["kind"] = event.kind
                out["index"] = event.index
            return out

        payload = {
            "message_drop_probability": self.message_drop_probability,
            "message_duplicate_probability":
                self.message_duplicate_probability,
            "delay_min_us": self.delay_min_us,
            "delay_max_us": self.delay_max_us,
            "rpc_timeout_us": self.rpc_timeout_us,
            "source_unavailable_probability":
                self.source_unavailable_probability,
            "state_unavailable_probability":
                self.state_unavailable_probability,
            "partitioned_pairs": [
                [list(a), list(b)] for a, b in self.partitioned_pairs
            ],
            "events": [event_dict(e) for e in self.events],
            "trigger_actions": self.trigger_actions,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FaultPlan":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError("fault plan is not valid JSON: %s" % exc) from exc
        if not isinstance(payload, dict):
            raise SpecError("fault plan: expected a JSON object")
        known = {
            "message_drop_probability", "message_duplicate_probability",
            "delay_min_us", "delay_max_us", "rpc_timeout_us",
            "source_unavailable_probability",
            "state_unavailable_probability", "partitioned_pairs",
            "events", "trigger_actions",
        }
        for key in payload:
            if key not in known:
                raise SpecError("unknown fault plan field %r" % key)

        def parse_slot(raw, where):
            if (not isinstance(raw, (list, tuple)) or len(raw) != 2
                    or not isinstance(raw[0], str)
                    or not isinstance(raw[1], int)):
                raise SpecError("%s: expected [kind, index]" % where)
            return (raw[0], raw[1])

        events = []
        for i, raw in enumerate(payload.get("events", [])):
            where = "events[%d]" % i
            if not isinstance(raw, dict):
                raise SpecError("%s: expected object" % where)
            pair = raw.get("pair")
            events.append(
                FaultEvent(
                    time_us=raw.get("time_us", 0),
                    action=raw.get("action", ""),
                    kind=raw.get("kind"),
                    index=raw.get("index"),
                    pair=(
                        None if pair is None else (
                            parse_slot(pair[0], where + ".pair[0]"),
                            parse_slot(pair[1], where + ".pair[1]"),
                        )
                    ),
                )
            )
        pairs = [
            (parse_slot(raw[0], "partitioned_pairs[%d][0]" % i),
             parse_slot(raw[1], "partitioned_pairs[%d][1]" % i))
            for i, raw in enumerate(payload.get("partitioned_pairs", []))
        ]
        plan = cls(
            message_drop_probability=payload.get(
                "message_drop_probability", 0.0),
            message_duplicate_probability=payload.get(
                "message_duplicate_probability", 0.0),
            delay_min_us=payload.get("delay_min_us", 100),
            delay_max_us=payload.get("delay_max_us", 2000),
            rpc_timeout_us=payload.get("rpc_timeout_us", 200_000),
            source_unavailable_probability=payload.get(
                "source_unavailable_probability", 0.0),
            state_unavailable_probability=payload.get(
                "state_unavailable_probability", 0.0),
            partitioned_pairs=pairs,
            events=events,
            trigger_actions=payload.get("trigger_actions", {}),
        )
        return plan.validate()


def kill_each_worker_once(mapper_count: int, reducer_count: int,
                          first_kill_us: int, spacing_us: int) -> FaultPlan:
    """A staggered kill of every worker exactly once."""
    events = []
    time_us = first_kill_us
    for index in range(mapper_count):
        events.append(FaultEvent(time_us, "kill", "mapper", index))
        time_us += spacing_us
    for index in range(reducer_count):
        events.append(FaultEvent(time_us, "kill", "reducer", index))
        time_us += spacing_us
    return FaultPlan(events=events).validate()


def random_plan(seed: int, mapper_count: int, reducer_count: int,
                horizon_us: int, intensity: float = 1.0) -> FaultPlan:
    """Seeded random chaos: kills, pauses, duplicates, partitions, drops."""
    rng = random.Random(seed)
    events: List[FaultEvent] = []
    workers = [("mapper", i) for i in range(mapper_count)] + [
        ("reducer", i) for i in range(reducer_count)
    ]
    event_count = max(1, int(intensity * (len(workers) + 2)))
    for _ in range(event_count):
        kind, index = rng.choice(workers)
        time_us = rng.randrange(horizon_us // 10, horizon_us)
        roll = rng.random()
        if roll < 0.5:
            events.append(FaultEvent(time_us, "kill", kind, index))
        elif roll < 0.8:
            pause_for = rng.randrange(horizon_us // 20, horizon_us // 4)
            events.append(FaultEvent(time_us, "pause", kind, index))
            events.append(
                FaultEvent(time_us + pause_for, "resume", kind, index)
            )
        elif roll < 0.9 and kind == "mapper":
            events.append(FaultEvent(time_us, "duplicate", kind, index))
        else:
            other = rng.choice([w for w in workers if w != (kind, index)])
            heal_after = rng.randrange(horizon_us // 20, horizon_us // 4)
            events.append(
                FaultEvent(time_us, "partition", pair=((kind, index), other))
            )
            events.append(
                FaultEvent(time_us + heal_after, "heal",
                           pair=((kind, index), other))
            )
    events.sort(key=lambda e: e.time_us)
    return FaultPlan(
        message_drop_probability=min(0.3, 0.1 * intensity),
        delay_min_us=100,
        delay_max_us=5000,
        events=events,
    ).validate()
