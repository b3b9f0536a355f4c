"""Deterministic discrete-event simulation of a replica cluster.

Virtual time is an integer tick counter. Every source of randomness comes
from one seed, fanned out into independent per-subsystem streams keyed by
stable labels, and event ordering is a priority queue keyed by delivery
time with a global sequence number as the tiebreak, so a configuration and
seed pin the entire execution: running twice yields byte-identical trace
files.

The network reorders, delays, drops, and duplicates (at most one extra
copy) inter-replica messages; replicas can crash-stop at scheduled times
and groups can be partitioned for a window. Messages a replica addresses
to itself take one reliable tick. Clients are closed-loop: each runs a
generated script and issues the next operation one tick after the previous
response.

While it runs, the simulator cross-checks execution invariants that the
protocol promises: acceptor payloads and round numbers only grow, each
acceptor's acknowledged payloads are monotonic, a proposer never broadcasts
two votes for the same request round, and every learned state is dominated
by a quorum of current acceptor payloads at the moment it is learned.
"""

from __future__ import annotations

import heapq
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .crdt import (
    CausalTaggedState,
    GCounter,
    GSet,
    QueryCommand,
    SemilatticeValue,
)
from .history import OpRecord, TraceEvent, write_history, write_trace
from .messages import Ack, UpdateOp, Vote
from .protocol import (
    ClientQuery,
    ClientReply,
    ClientUpdate,
    MajorityQuorum,
    ProtocolConfig,
    Replica,
    TimerFire,
)

__all__ = [
    "ConfigError",
    "InvariantViolation",
    "Metrics",
    "SimConfig",
    "SimResult",
    "Simulation",
    "sim_run",
    "workload_generate",
]


class ConfigError(Exception):
    """The simulation configuration is not runnable."""


class InvariantViolation(AssertionError):
    """A protocol execution invariant failed during simulation."""


@dataclass(slots=True)
class SimConfig:
    n_replicas: int = 3
    n_clients: int = 1
    crdt: str = "gcounter"  # "gcounter" | "gset"
    update_fraction: float = 0.5
    ops_per_client: int = 10
    drop_probability: float = 0.0
    duplicate_probability: float = 0.0
    delay_min: int = 1
    delay_max: int = 1
    timeout_ticks: int | None = None  # default: 4x the round-trip upper bound
    max_retries: int | None = 50
    batching: bool = False
    instrument: bool = True
    check_invariants: bool = True
    record_trace: bool = True
    require_progress: bool = False
    seed: int = 0
    max_virtual_time: int = 1_000_000
    crash_schedule: tuple[tuple[int, int], ...] = ()
    partition_schedule: tuple[tuple[tuple[tuple[int, ...], ...], int, int], ...] = ()

    def effective_timeout(self) -> int:
        if self.timeout_ticks is not None:
            return self.timeout_ticks
        return 8 * self.delay_max

    def validate(self) -> None:
        if self.n_replicas < 1:
            raise ConfigError("n_replicas must be at least 1")
        if self.n_clients < 0 or self.ops_per_client < 0:
            raise ConfigError("client counts cannot be negative")
        if self.crdt not in ("gcounter", "gset"):
            raise ConfigError(f"unknown crdt {self.crdt!r}")
        if not 0.0 <= self.update_fraction <= 1.0:
            raise ConfigError("update_fraction must lie in [0, 1]")
        for name, p in (("drop", self.drop_probability), ("duplicate", self.duplicate_probability)):
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} probability must lie in [0, 1)")
        if self.delay_min < 1:
            raise ConfigError("delay_min must be at least 1 tick")
        if self.delay_max < self.delay_min:
            raise ConfigError("delay_max must be >= delay_min")
        if self.effective_timeout() <= 2 * self.delay_max:
            raise ConfigError("timeout must exceed one round trip of maximum delay")
        if self.max_retries is not None and self.max_retries < 0:
            raise ConfigError("max_retries cannot be negative")
        if self.max_virtual_time < 1:
            raise ConfigError("max_virtual_time must be positive")
        replicas = set(range(1, self.n_replicas + 1))
        for rid, t in self.crash_schedule:
            if rid not in replicas:
                raise ConfigError(f"crash schedule names unknown replica {rid}")
            if not 0 <= t <= self.max_virtual_time:
                raise ConfigError(f"crash time {t} outside the run horizon")
        if self.require_progress:
            quorum = MajorityQuorum(self.n_replicas)
            budget = self.n_replicas - quorum.min_size
            if len({rid for rid, _ in self.crash_schedule}) > budget:
                raise ConfigError(
                    f"progress requires at most {budget} crashed replicas"
                )
        for groups, t0, t1 in self.partition_schedule:
            seen: set[int] = set()
            for group in groups:
                for rid in group:
                    if rid not in replicas:
                        raise ConfigError(f"partition names unknown replica {rid}")
                    if rid in seen:
                        raise ConfigError(f"replica {rid} appears in two partition groups")
                    seen.add(rid)
            if not 0 <= t0 < t1:
                raise ConfigError("partition window must satisfy 0 <= start < end")


def _stream(seed: int, label: str) -> random.Random:
    # string seeding hashes the whole key, so streams never collide and new
    # subsystems do not perturb existing ones
    return random.Random(f"{seed}:{label}")


def workload_generate(config: SimConfig) -> list[list[str]]:
    """Per-client operation scripts: "update" / "query" kinds only.

    Targets and payloads are chosen at invocation time from separate
    streams so that scripts stay stable under fault-schedule changes.
    """
    rng = _stream(config.seed, "workload")
    scripts = []
    for _ in range(config.n_clients):
        script = [
            "update" if rng.random() < config.update_fraction else "query"
            for _ in range(config.ops_per_client)
        ]
        scripts.append(script)
    return scripts


def _percentile(sorted_values: list[int], q: float) -> int | None:
    if not sorted_values:
        return None
    idx = max(0, min(len(sorted_values) - 1, int(q * (len(sorted_values) - 1) + 0.5)))
    return sorted_values[idx]


@dataclass(slots=True)
class Metrics:
    messages_sent: Counter = field(default_factory=Counter)
    delivered: int = 0
    dropped: Counter = field(default_factory=Counter)  # by reason
    duplicated: int = 0
    max_payload_bytes: int = 0
    ops: Counter = field(default_factory=Counter)  # (kind, outcome) -> count
    round_trips: Counter = field(default_factory=Counter)  # (kind, n) -> count
    latencies: dict = field(default_factory=lambda: {"update": [], "query": []})
    final_time: int = 0
    quiescent: bool = True

    def note_op(self, kind: str, outcome: str | None, round_trips: int | None, latency: int | None):
        self.ops[(kind, outcome or "pending")] += 1
        if outcome == "ok" and round_trips is not None:
            self.round_trips[(kind, round_trips)] += 1
        if outcome == "ok" and latency is not None:
            self.latencies[kind].append(latency)

    def stalled(self) -> int:
        return self.ops[("update", "pending")] + self.ops[("query", "pending")]

    def rows(self) -> list[tuple[str, object]]:
        rows: list[tuple[str, object]] = [("schema_version", 1)]
        rows.append(("final_time", self.final_time))
        rows.append(("quiescent", int(self.quiescent)))
        rows.append(("messages_delivered", self.delivered))
        rows.append(("messages_duplicated", self.duplicated))
        rows.append(("max_payload_bytes", self.max_payload_bytes))
        for mtype in sorted(self.messages_sent):
            rows.append((f"messages_sent_{mtype}", self.messages_sent[mtype]))
        for reason in sorted(self.dropped):
            rows.append((f"messages_dropped_{reason}", self.dropped[reason]))
        for kind, outcome in sorted(self.ops):
            rows.append((f"ops_{kind}_{outcome}", self.ops[(kind, outcome)]))
        for kind, n in sorted(self.round_trips):
            rows.append((f"round_trips_{kind}_{n}", self.round_trips[(kind, n)]))
        for kind in ("update", "query"):
            values = sorted(self.latencies[kind])
            p50 = _percentile(values, 0.50)
            p95 = _percentile(values, 0.95)
            if p50 is not None:
                rows.append((f"latency_{kind}_p50", p50))
                rows.append((f"latency_{kind}_p95", p95))
        return rows

    def write_csv(self, fp) -> None:
        fp.write("metric,value\n")
        for key, value in self.rows():
            fp.write(f"{key},{value}\n")


@dataclass(slots=True)
class SimResult:
    config: SimConfig
    trace: list[TraceEvent]
    history: list[OpRecord]
    metrics: Metrics

    def write_outputs(self, outdir: str | Path) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        if self.config.record_trace:
            with open(outdir / "trace.jsonl", "w") as fp:
                write_trace(self.trace, fp)
        with open(outdir / "history.jsonl", "w") as fp:
            write_history(self.history, fp)
        with open(outdir / "metrics.csv", "w") as fp:
            self.metrics.write_csv(fp)


@dataclass(slots=True)
class _ClientState:
    script: list[str]
    next_op: int = 0
    waiting: bool = False


class Simulation:
    """One configured run. Build, optionally inject extra faults, then run."""

    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self._crash_schedule = list(config.crash_schedule)
        self._partitions = [
            (tuple(tuple(g) for g in groups), t0, t1)
            for groups, t0, t1 in config.partition_schedule
        ]
        self._ran = False

    def inject_crash(self, replica: int, t: int) -> None:
        if self._ran:
            raise ConfigError("cannot inject faults after the run started")
        if not 1 <= replica <= self.config.n_replicas:
            raise ConfigError(f"unknown replica id {replica}")
        if not 0 <= t <= self.config.max_virtual_time:
            raise ConfigError(f"crash time {t} outside the run horizon")
        self._crash_schedule.append((replica, t))

    def inject_partition(self, groups, t_start: int, t_end: int) -> None:
        if self._ran:
            raise ConfigError("cannot inject faults after the run started")
        probe = SimConfig(
            n_replicas=self.config.n_replicas,
            partition_schedule=((tuple(tuple(g) for g in groups), t_start, t_end),),
        )
        probe.validate()
        self._partitions.append((tuple(tuple(g) for g in groups), t_start, t_end))

    # -- run

    def run(self) -> SimResult:
        if self._ran:
            raise ConfigError("a Simulation object runs once")
        self._ran = True
        cfg = self.config

        self._delay_rng = _stream(cfg.seed, "delays")
        self._drop_rng = _stream(cfg.seed, "drops")
        self._dup_rng = _stream(cfg.seed, "duplicates")
        self._target_rng = _stream(cfg.seed, "targets")

        proto = ProtocolConfig(
            n_replicas=cfg.n_replicas,
            quorum=MajorityQuorum(cfg.n_replicas),
            batching=cfg.batching,
            max_retries=cfg.max_retries,
            expose_learned=True,  # the monitor and history need learned states
        )
        self.replicas = {
            rid: Replica(rid, proto, self._initial_state())
            for rid in range(1, cfg.n_replicas + 1)
        }
        self.crashed: set[int] = set()
        self.clients = [_ClientState(script) for script in workload_generate(cfg)]

        self.trace: list[TraceEvent] = []
        self.metrics = Metrics()
        self.records: dict[int, OpRecord] = {}
        self._retry_times: dict[bytes, list[tuple[int, str]]] = defaultdict(list)
        self._next_op_id = 0
        self._seq = 0
        self._heap: list = []
        self._now = 0

        # invariant monitor state
        self._last_acked: dict[int, SemilatticeValue] = {}
        self._votes_broadcast: set[tuple[bytes, object]] = set()

        for rid, t in sorted(self._crash_schedule):
            self._push(t, "crash", (rid,))
        for cid in range(len(self.clients)):
            self._push(0, "invoke", (cid,))

        horizon_hit = False
        while self._heap:
            t, _seq, kind, data = heapq.heappop(self._heap)
            if t > cfg.max_virtual_time:
                horizon_hit = True
                break
            self._now = t
            if kind == "deliver":
                self._process_deliver(t, *data)
            elif kind == "timer":
                self._process_timer(t, *data)
            elif kind == "invoke":
                self._process_invoke(t, *data)
            elif kind == "crash":
                self._process_crash(t, *data)

        self.metrics.final_time = self._now
        self.metrics.quiescent = not horizon_hit
        # updates still in flight (stalled or behind a crash) have applied at
        # their origin, so their tags can surface in learned states; recover
        # them for the checker
        for replica in self.replicas.values():
            for req in replica.requests.values():
                if req.kind != "update":
                    continue
                for _client, token, cmd in req.ops:
                    rec = self.records.get(token)
                    if rec is not None and rec.tag is None:
                        rec.tag = cmd.tag
        history = [self.records[op_id] for op_id in sorted(self.records)]
        for rec in history:
            if rec.outcome is None:
                self.metrics.note_op(rec.kind, None, None, None)
        return SimResult(self.config, self.trace, history, self.metrics)

    # -- internals

    def _initial_state(self) -> SemilatticeValue:
        base: SemilatticeValue
        if self.config.crdt == "gcounter":
            base = GCounter.zero(self.config.n_replicas)
        else:
            base = GSet.empty()
        if self.config.instrument:
            return CausalTaggedState.initial(base)
        return base

    def _push(self, t: int, kind: str, data: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, data))

    def _trace(self, t: int, kind: str, detail: tuple[tuple[str, object], ...]) -> None:
        if self.config.record_trace:
            self._seq += 1
            self.trace.append(TraceEvent(t=t, seq=self._seq, kind=kind, detail=detail))

    # -- event processing

    def _process_crash(self, t: int, rid: int) -> None:
        if rid in self.crashed:
            return
        self.crashed.add(rid)
        self._trace(t, "crash", (("replica", rid),))

    def _process_timer(self, t: int, rid: int, request_id: bytes, generation: int) -> None:
        if rid in self.crashed:
            return
        self._trace(t, "timer", (("replica", rid), ("request_id", request_id.hex()),))
        self._step_replica(t, rid, TimerFire(request_id, generation))

    def _process_invoke(self, t: int, cid: int) -> None:
        client = self.clients[cid]
        if client.next_op >= len(client.script):
            return
        alive = [r for r in range(1, self.config.n_replicas + 1) if r not in self.crashed]
        if not alive:
            return  # nowhere to send: the client halts
        target = self._target_rng.choice(alive)
        kind = client.script[client.next_op]
        client.next_op += 1
        self._next_op_id += 1
        op_id = self._next_op_id
        if kind == "update":
            if self.config.crdt == "gcounter":
                op = UpdateOp.increment()
                op_desc = {"kind": "increment"}
            else:
                element = f"e{op_id}".encode()  # unique per op by construction
                op = UpdateOp.set_add(element)
                op_desc = {"kind": "set_add", "element": element}
            event = ClientUpdate(op, client=cid, token=op_id)
        else:
            if self.config.crdt == "gcounter":
                query = QueryCommand.counter_value()
                op_desc = {"kind": "counter_value"}
            else:
                query = QueryCommand.set_elements()
                op_desc = {"kind": "set_elements"}
            event = ClientQuery(query, client=cid, token=op_id)
        self.records[op_id] = OpRecord(
            op_id=op_id, client=cid, replica=target, kind=kind, op=op_desc, invoke_t=t
        )
        self._trace(
            t,
            "invoke",
            (("op_id", op_id), ("client", cid), ("replica", target), ("op", kind)),
        )
        self._step_replica(t, target, event)

    def _process_deliver(self, t: int, src: int, dst: int, msg) -> None:
        mtype = type(msg).__name__
        if dst in self.crashed:
            self.metrics.dropped["crashed"] += 1
            self._trace(t, "drop", (("reason", "crashed"), ("src", src), ("dst", dst), ("msg", mtype)))
            return
        if self._partitioned(src, dst, t):
            self.metrics.dropped["partition"] += 1
            self._trace(t, "drop", (("reason", "partition"), ("src", src), ("dst", dst), ("msg", mtype)))
            return
        self.metrics.delivered += 1
        self._trace(
            t,
            "deliver",
            (("src", src), ("dst", dst), ("msg", mtype), ("request_id", msg.request_id.hex())),
        )
        self._step_replica(t, dst, msg)

    def _partitioned(self, src: int, dst: int, t: int) -> bool:
        if src == dst:
            return False
        for groups, t0, t1 in self._partitions:
            if not t0 <= t < t1:
                continue
            membership: dict[int, int] = {}
            for idx, group in enumerate(groups):
                for rid in group:
                    membership[rid] = idx
            # replicas outside every named group are isolated singletons
            if membership.get(src, -src) != membership.get(dst, -dst):
                return True
        return False

    # -- replica stepping and output routing

    def _step_replica(self, t: int, rid: int, event) -> None:
        if rid in self.crashed:
            return
        replica = self.replicas[rid]
        before_state = replica.acceptor.state
        before_nr = replica.acceptor.round.nr
        out = replica.step(event)
        if self.config.check_invariants:
            self._check_step_invariants(rid, replica, before_state, before_nr, out)
        for request_id, generation in ((tr.request_id, tr.generation) for tr in out.timers):
            self._push(t + self.config.effective_timeout(), "timer", (rid, request_id, generation))
        for retry in out.retries:
            self._retry_times[retry.request_id].append((t, retry.kind))
        for dst, msg in out.sends:
            self._send(t, rid, dst, msg)
        for reply in out.replies:
            self._deliver_reply(t, reply)

    def _send(self, t: int, src: int, dst: int, msg) -> None:
        mtype = type(msg).__name__
        self.metrics.messages_sent[mtype] += 1
        state = getattr(msg, "state", None)
        if state is not None:
            size = state.canonical_size()
            if size > self.metrics.max_payload_bytes:
                self.metrics.max_payload_bytes = size
        if dst == src:
            # local hop: reliable, never duplicated, one tick
            self._push(t + 1, "deliver", (src, dst, msg))
            return
        copies = 1
        if self._dup_rng.random() < self.config.duplicate_probability:
            copies = 2
            self.metrics.duplicated += 1
            self._trace(t, "duplicate", (("src", src), ("dst", dst), ("msg", mtype)))
        for _ in range(copies):
            if self._drop_rng.random() < self.config.drop_probability:
                self.metrics.dropped["loss"] += 1
                self._trace(t, "drop", (("reason", "loss"), ("src", src), ("dst", dst), ("msg", mtype)))
                continue
            delay = self._delay_rng.randint(self.config.delay_min, self.config.delay_max)
            self._push(t + delay, "deliver", (src, dst, msg))

    def _deliver_reply(self, t: int, reply: ClientReply) -> None:
        rec = self.records[reply.token]
        rec.response_t = t
        rec.outcome = "ok" if reply.ok else "failed"
        rec.result = reply.result
        rec.round_trips = reply.round_trips
        rec.retries = reply.retries
        if reply.kind == "update":
            rec.tag = reply.tag
        if reply.ok and reply.kind == "query" and isinstance(reply.learned, CausalTaggedState):
            rec.learned_tags = tuple(sorted(reply.learned.tags))
            rec.learned_value = reply.learned.value.render()
        rec.incremental_retry_times = tuple(
            rt for rt, kind in self._retry_times.get(reply.request_id, ()) if kind == "incremental"
        )
        self.metrics.note_op(rec.kind, rec.outcome, rec.round_trips, t - rec.invoke_t)
        self._trace(
            t,
            "respond",
            (("op_id", rec.op_id), ("outcome", rec.outcome), ("round_trips", reply.round_trips)),
        )
        self._push(t + 1, "invoke", (rec.client,))

    # -- execution invariants

    def _check_step_invariants(self, rid, replica, before_state, before_nr, out) -> None:
        after = replica.acceptor.state
        if not before_state.compare(after):
            raise InvariantViolation(f"replica {rid} acceptor payload shrank")
        if replica.acceptor.round.nr < before_nr:
            raise InvariantViolation(f"replica {rid} acceptor round number went backwards")
        vote_keys = set()
        for _dst, msg in out.sends:
            if isinstance(msg, Ack):
                last = self._last_acked.get(rid)
                if last is not None and not last.compare(msg.state):
                    raise InvariantViolation(f"replica {rid} acknowledged a smaller payload")
                self._last_acked[rid] = msg.state
            elif isinstance(msg, Vote):
                vote_keys.add((msg.request_id, msg.round))
        for key in vote_keys:
            if key in self._votes_broadcast:
                raise InvariantViolation("second vote broadcast for one request round")
            self._votes_broadcast.add(key)
        for reply in out.replies:
            if reply.ok and reply.kind == "query" and reply.learned is not None:
                dominating = {
                    r
                    for r, rep in self.replicas.items()
                    if reply.learned.compare(rep.acceptor.state)
                }
                if not self.replicas[rid].config.quorum.is_quorum(dominating):
                    raise InvariantViolation(
                        "learned state not dominated by any quorum of acceptor payloads"
                    )


def sim_run(config: SimConfig) -> SimResult:
    return Simulation(config).run()
