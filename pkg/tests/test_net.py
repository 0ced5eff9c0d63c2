"""Fabric, worker lifecycle, discovery, and fault-plan tests."""

import pytest

from streamshuffle.errors import RpcTimeout, RpcUnreachable, SpecError
from streamshuffle.faults import FaultEvent, FaultPlan, random_plan
from streamshuffle.net import Discovery, Endpoint, Fabric, Worker
from streamshuffle.sim import Simulator


class EchoWorker(Worker):
    kind = "mapper"

    def handle_request(self, sender, data):
        return b"echo:" + data


class SilentWorker(Worker):
    kind = "mapper"

    def handle_request(self, sender, data):
        return None  # never answers


class ClientWorker(Worker):
    kind = "reducer"

    def handle_request(self, sender, data):
        return b""


def make_pair(sim, **fabric_kwargs):
    fabric = Fabric(sim, **fabric_kwargs)
    server = EchoWorker(sim, 0, fabric.new_guid("m0"))
    client = ClientWorker(sim, 0, fabric.new_guid("r0"))
    fabric.bind(server)
    fabric.bind(client)
    return fabric, server, client


def run_call(sim, fabric, client, target, payload, timeout_us=None):
    outcome = {}

    def proc():
        try:
            outcome["response"] = yield fabric.call(client, target, payload,
                                                    timeout_us)
        except Exception as exc:
            outcome["error"] = exc

    client.spawn(proc(), "call")
    sim.run()
    return outcome


def test_no_faults_delivers_handler_bytes():
    sim = Simulator(seed=1)
    fabric, server, client = make_pair(sim)
    outcome = run_call(sim, fabric, client, server.endpoint, b"ping")
    assert outcome == {"response": b"echo:ping"}


def test_killed_target_unreachable():
    sim = Simulator(seed=2)
    fabric, server, client = make_pair(sim)
    server.kill()
    outcome = run_call(sim, fabric, client, server.endpoint, b"ping")
    assert isinstance(outcome["error"], RpcUnreachable)


def test_partitioned_pair_unreachable_until_heal():
    sim = Simulator(seed=3)
    fabric, server, client = make_pair(sim)
    fabric.partition(("reducer", 0), ("mapper", 0))
    outcome = run_call(sim, fabric, client, server.endpoint, b"x")
    assert isinstance(outcome["error"], RpcUnreachable)
    fabric.heal(("mapper", 0), ("reducer", 0))  # unordered pair
    outcome = run_call(sim, fabric, client, server.endpoint, b"x")
    assert outcome == {"response": b"echo:x"}


def test_unresponsive_target_times_out():
    sim = Simulator(seed=4)
    fabric = Fabric(sim)
    server = SilentWorker(sim, 0, "m0")
    client = ClientWorker(sim, 0, "r0")
    fabric.bind(server)
    fabric.bind(client)
    outcome = run_call(sim, fabric, client, server.endpoint, b"x",
                       timeout_us=10_000)
    assert isinstance(outcome["error"], RpcTimeout)
    assert sim.now >= 10_000


def test_paused_target_times_out_then_answers_after_resume():
    sim = Simulator(seed=5)
    fabric, server, client = make_pair(sim)
    server.pause()
    outcome = run_call(sim, fabric, client, server.endpoint, b"x",
                       timeout_us=5_000)
    assert isinstance(outcome["error"], RpcTimeout)
    server.resume()
    outcome = run_call(sim, fabric, client, server.endpoint, b"y")
    assert outcome == {"response": b"echo:y"}


def test_drop_retry_loop_is_replay_deterministic():
    def run(seed):
        sim = Simulator(seed=seed)
        fabric, server, client = make_pair(
            sim, drop_probability=0.3, delay_min_us=10, delay_max_us=100
        )
        attempts = [0]
        result = {}

        def retrying():
            while True:
                attempts[0] += 1
                try:
                    result["value"] = yield fabric.call(
                        client, server.endpoint, b"r", timeout_us=1_000
                    )
                    return
                except (RpcTimeout, RpcUnreachable):
                    yield sim.sleep(500)

        client.spawn(retrying(), "retry")
        sim.run()
        return attempts[0], result["value"], sim.now

    first = run(1234)
    assert first == run(1234)  # bit-identical replay
    assert first[1] == b"echo:r"
    # With a 30% drop rate some attempt eventually lands.
    assert first[0] >= 1


def test_newest_binder_takes_over_slot():
    sim = Simulator(seed=6)
    fabric, old, client = make_pair(sim)
    replacement = EchoWorker(sim, 0, "m0-new")
    fabric.bind(replacement)
    # Newest live binder receives traffic even when addressed via the old
    # endpoint (port takeover).
    seen = []
    replacement.handle_request = lambda sender, data: (
        seen.append(data) or b"new"
    )
    outcome = run_call(sim, fabric, client, old.endpoint, b"q")
    assert outcome == {"response": b"new"}
    assert seen == [b"q"]
    # If the replacement dies, the older instance serves again.
    replacement.kill()
    outcome = run_call(sim, fabric, client, old.endpoint, b"q2")
    assert outcome == {"response": b"echo:q2"}


def test_pause_queues_dispatch_in_order():
    sim = Simulator(seed=7)
    worker = EchoWorker(sim, 0, "m")
    log = []
    worker.pause()
    worker.dispatch(lambda: log.append(1))
    worker.dispatch(lambda: log.append(2))
    sim.run()
    assert log == []
    worker.resume()
    sim.run()
    assert log == [1, 2]
    worker.pause()
    worker.dispatch(lambda: log.append(3))
    worker.kill()
    worker.resume()  # no-op on killed worker
    sim.run()
    assert log == [1, 2]


def test_discovery_staleness_window():
    sim = Simulator(seed=8)
    discovery = Discovery(sim, propagation_delay_us=1000)
    endpoint = Endpoint("mapper", 0, "g1")
    discovery.register("mappers", endpoint, {"guid": "g1"})
    assert discovery.list_group("mappers") == []  # within the delay
    sim.run(until_time=999)
    assert discovery.list_group("mappers") == []
    sim.run(until_time=1001)
    assert discovery.list_group("mappers") == [(endpoint, {"guid": "g1"})]
    # Removal is equally stale.
    discovery.deregister("mappers", endpoint)
    assert discovery.list_group("mappers") != []
    sim.run(until_time=2002)
    assert discovery.list_group("mappers") == []


def test_discovery_reregister_replaces_entry():
    sim = Simulator(seed=9)
    discovery = Discovery(sim, propagation_delay_us=10)
    endpoint = Endpoint("mapper", 1, "g2")
    discovery.register("m", endpoint, {"v": 1})
    discovery.register("m", endpoint, {"v": 2})
    sim.run()
    assert discovery.list_group("m") == [(endpoint, {"v": 2})]


def test_stale_entry_to_dead_worker_is_unreachable():
    sim = Simulator(seed=10)
    fabric, server, client = make_pair(sim)
    discovery = Discovery(sim, propagation_delay_us=100)
    discovery.register("mappers", server.endpoint, {"guid": server.guid})
    sim.run(until_time=200)
    server.kill()
    discovery.deregister("mappers", server.endpoint)
    # Within the staleness window the dead endpoint is still listed...
    listed = discovery.list_group("mappers")
    assert listed and listed[0][0] == server.endpoint
    # ...and calling it yields Unreachable.
    outcome = run_call(sim, fabric, client, listed[0][0], b"x")
    assert isinstance(outcome["error"], RpcUnreachable)


# -- fault plans ---------------------------------------------------------------


def test_fault_plan_json_round_trip():
    plan = FaultPlan(
        message_drop_probability=0.25,
        delay_min_us=10,
        delay_max_us=500,
        partitioned_pairs=[(("mapper", 0), ("reducer", 1))],
        events=[
            FaultEvent(1000, "kill", "mapper", 0),
            FaultEvent(2000, "partition",
                       pair=(("mapper", 1), ("reducer", 0))),
        ],
        trigger_actions={"reducer:pre-user-commit":
                         {"action": "kill", "kind": "reducer", "index": 0}},
    ).validate()
    text = plan.to_json()
    back = FaultPlan.from_json(text)
    assert back == plan
    assert back.to_json() == text  # canonical form is stable


def test_fault_plan_rejects_unknown_and_invalid_fields():
    with pytest.raises(SpecError) as excinfo:
        FaultPlan.from_json('{"drop": 0.5}')
    assert "drop" in str(excinfo.value)
    with pytest.raises(SpecError) as excinfo:
        FaultPlan.from_json('{"message_drop_probability": 1.5}')
    assert "message_drop_probability" in str(excinfo.value)
    with pytest.raises(SpecError) as excinfo:
        FaultPlan.from_json('{"events": [{"time_us": 5, "action": "frob"}]}')
    assert "action" in str(excinfo.value)
    with pytest.raises(SpecError):
        FaultPlan.from_json('{"events": [{"time_us": 5, "action": "kill"}]}')
    with pytest.raises(SpecError):
        FaultPlan.from_json("not json")


def test_random_plan_is_seed_stable():
    a = random_plan(5, mapper_count=2, reducer_count=2, horizon_us=1_000_000)
    b = random_plan(5, mapper_count=2, reducer_count=2, horizon_us=1_000_000)
    assert a == b
    assert a.events  # produces something
    assert all(e.time_us <= n.time_us for e, n in zip(a.events, a.events[1:]))
