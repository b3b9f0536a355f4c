"""Proposer and acceptor handlers for quorum-replicated CRDT state.

Every replica runs both roles. Updates apply at the proposer's co-located
acceptor and spread through a single merge round; queries learn a state
through incremental prepares, either directly when a quorum answers with
equivalent payloads or through one vote round when the quorum agrees on a
round. Rejected or timed-out queries retry with an incremental prepare
carrying the least upper bound of every payload received so far, which
bounds retries once writes quiesce.

Handlers are pure state machines: no I/O, no clocks, no randomness. The
same ``Replica`` runs under the simulator and the networked service; the
runtime routes outbound messages, delivers timer expiries, and decides what
a timer's duration means.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import AbstractSet, Iterable

from .crdt import (
    CausalTag,
    CommandError,
    QueryCommand,
    SemilatticeValue,
    UpdateCommand,
    apply_query,
    apply_update,
)
from .messages import (
    BOTTOM_ID,
    BOTTOM_NR,
    Ack,
    Merge,
    Merged,
    Nack,
    Prepare,
    ReplicaMessage,
    Round,
    RoundId,
    UpdateOp,
    Vote,
    Voted,
    incremental_round,
)

_REQ_ID = struct.Struct(">QQ")


class ProtocolError(Exception):
    """Misuse of the protocol layer (not a peer misbehaving)."""


class QuorumSystem(ABC):
    """Decides which sets of replica ids may learn or commit.

    Any two quorums must intersect; the stock majority system guarantees
    that by size.
    """

    @abstractmethod
    def is_quorum(self, ids: AbstractSet[int]) -> bool: ...

    @property
    @abstractmethod
    def min_size(self) -> int: ...


class MajorityQuorum(QuorumSystem):
    def __init__(self, n_replicas: int):
        if n_replicas < 1:
            raise ProtocolError(f"cluster needs at least one replica, got {n_replicas}")
        self._n = n_replicas
        self._threshold = n_replicas // 2 + 1

    def is_quorum(self, ids: AbstractSet[int]) -> bool:
        return len(ids) >= self._threshold

    @property
    def min_size(self) -> int:
        return self._threshold

    def __repr__(self) -> str:
        return f"MajorityQuorum({self._n})"


@dataclass(frozen=True, slots=True)
class ProtocolConfig:
    n_replicas: int
    quorum: QuorumSystem
    batching: bool = False
    max_retries: int | None = 50
    expose_learned: bool = False  # attach learned states to query replies


# ------------------------------------------------------------------ events


@dataclass(frozen=True, slots=True)
class ClientUpdate:
    op: UpdateOp
    client: object
    token: object


@dataclass(frozen=True, slots=True)
class ClientQuery:
    query: QueryCommand
    client: object
    token: object


@dataclass(frozen=True, slots=True)
class TimerFire:
    request_id: bytes
    generation: int


Event = "ClientUpdate | ClientQuery | TimerFire | ReplicaMessage"


@dataclass(frozen=True, slots=True)
class ClientReply:
    client: object
    token: object
    kind: str  # "update" | "query"
    ok: bool
    request_id: bytes
    result: object = None
    tag: CausalTag | None = None
    learned: SemilatticeValue | None = None
    round_trips: int = 0
    retries: int = 0
    reason: str | None = None


@dataclass(frozen=True, slots=True)
class TimerRequest:
    """(Re)arm the per-request timer; the runtime chooses the duration."""

    request_id: bytes
    generation: int


@dataclass(frozen=True, slots=True)
class RequestRetry:
    """Reported when a request starts another round; kinds: incremental,
    fixed, merge-resend."""

    request_id: bytes
    kind: str


@dataclass(slots=True)
class StepOutput:
    sends: list[tuple[int, ReplicaMessage]] = field(default_factory=list)
    replies: list[ClientReply] = field(default_factory=list)
    timers: list[TimerRequest] = field(default_factory=list)
    retries: list[RequestRetry] = field(default_factory=list)


# ------------------------------------------------------------------ acceptor


class Acceptor:
    """Round-tracking holder of the replica's CRDT payload.

    The payload only ever grows: updates inflate it, merges fold remote
    payloads in. Applying an update or a merge blanks the round id so that
    votes prepared before the change can no longer succeed.
    """

    __slots__ = ("rid", "round", "state")

    def __init__(self, rid: int, initial: SemilatticeValue):
        self.rid = rid
        self.round = Round(0, BOTTOM_ID)
        self.state = initial

    def apply_update(self, cmd: UpdateCommand) -> SemilatticeValue:
        self.state = apply_update(cmd, self.state)
        self.round = Round(self.round.nr, BOTTOM_ID)
        return self.state

    def on_merge(self, m: Merge) -> Merged:
        self.state = self.state.merge(m.state)
        self.round = Round(self.round.nr, BOTTOM_ID)
        return Merged(sender=self.rid, request_id=m.request_id)

    def on_prepare(self, m: Prepare) -> Ack | Nack:
        self.state = self.state.merge(m.state)
        r = m.round
        if r.nr == BOTTOM_NR:
            # incremental prepare: one past whatever this acceptor has seen
            r = Round(self.round.nr + 1, r.rid)
        if r.nr > self.round.nr:
            self.round = r
            return Ack(self.rid, m.request_id, self.round, self.state)
        return Nack(self.rid, m.request_id, self.round, self.state, reject_id=m.round.rid)

    def on_vote(self, m: Vote) -> Voted | Nack:
        # merge first: even a refused vote's payload must not be lost
        self.state = self.state.merge(m.state)
        if m.round == self.round:
            return Voted(self.rid, m.request_id, m.round)
        return Nack(self.rid, m.request_id, self.round, self.state, reject_id=m.round.rid)


# ------------------------------------------------------------------ proposer


@dataclass(slots=True)
class ProposerRequest:
    """One in-flight protocol run, serving one or more client operations."""

    request_id: bytes
    kind: str  # "update" | "query"
    ops: list[tuple[object, object, object]]  # (client, token, command)
    phase: str  # "merging" | "preparing" | "voting" | "done"
    round: Round = Round(BOTTOM_NR, BOTTOM_ID)
    attempt_id: RoundId = BOTTOM_ID  # round id of the live prepare/vote attempt
    acks: dict[int, tuple[Round, SemilatticeValue]] = field(default_factory=dict)
    merged: set[int] = field(default_factory=set)
    voted: set[int] = field(default_factory=set)
    proposed: SemilatticeValue | None = None  # set exactly while phase == "voting"
    gathered: SemilatticeValue | None = None  # LUB of every payload seen so far
    merge_state: SemilatticeValue | None = None
    retries: int = 0
    round_trips: int = 0
    timer_generation: int = 0


class Replica:
    """Protocol state machine for one replica: acceptor plus proposer.

    Feed it events through :meth:`step`; it answers with messages to send,
    client replies, and timer requests. Messages addressed to the replica's
    own id must be delivered back through ``step`` by the runtime (reliably,
    it is a local hop). Handlers never block and never talk to a clock.
    """

    def __init__(self, rid: int, config: ProtocolConfig, initial: SemilatticeValue):
        if not 1 <= rid <= config.n_replicas:
            raise ProtocolError(f"replica id {rid} outside 1..{config.n_replicas}")
        self.rid = rid
        self.config = config
        self.acceptor: Acceptor | None = None
        self.init_acceptor(initial)
        self.requests: dict[bytes, ProposerRequest] = {}
        self._round_counter = 0
        self._request_counter = 0
        self._update_seq = 0
        self._pending_updates: list[tuple[object, object, UpdateOp]] = []
        self._pending_queries: list[tuple[object, object, QueryCommand]] = []
        self._inflight_update: bytes | None = None
        self._inflight_query: bytes | None = None

    # -- identity helpers

    def init_acceptor(self, initial: SemilatticeValue) -> None:
        if self.acceptor is not None:
            raise ProtocolError("acceptor is initialized once, at process start")
        self.acceptor = Acceptor(self.rid, initial)

    def new_round_id(self) -> RoundId:
        self._round_counter += 1
        return (self._round_counter, self.rid)

    def _new_request_id(self) -> bytes:
        self._request_counter += 1
        return _REQ_ID.pack(self.rid, self._request_counter)

    def _next_tag(self) -> CausalTag:
        self._update_seq += 1
        return (self.rid, self._update_seq)

    def _peers(self) -> Iterable[int]:
        return (r for r in range(1, self.config.n_replicas + 1) if r != self.rid)

    def _everyone(self) -> Iterable[int]:
        return range(1, self.config.n_replicas + 1)

    # -- event entry point

    def step(self, event) -> StepOutput:
        out = StepOutput()
        match event:
            case ClientUpdate():
                self.on_client_update(event.op, event.client, event.token, out)
            case ClientQuery():
                self.on_client_query(event.query, event.client, event.token, out)
            case TimerFire():
                self.on_timeout(event.request_id, event.generation, out)
            case Merge() | Prepare() | Vote():
                self._acceptor_dispatch(event, out)
            case Merged():
                self.on_merged(event, out)
            case Ack():
                self.on_ack(event, out)
            case Voted():
                self.on_voted(event, out)
            case Nack():
                self.on_nack(event, out)
            case _:
                raise ProtocolError(f"unknown event {event!r}")
        return out

    def _acceptor_dispatch(self, m, out: StepOutput) -> None:
        if not 1 <= m.sender <= self.config.n_replicas:
            return
        if isinstance(m, Merge):
            reply = self.acceptor.on_merge(m)
        elif isinstance(m, Prepare):
            reply = self.acceptor.on_prepare(m)
        else:
            reply = self.acceptor.on_vote(m)
        out.sends.append((m.sender, reply))

    # -- client operations and batching

    def on_client_update(self, op: UpdateOp, client, token, out: StepOutput) -> None:
        if not self.config.batching:
            self._start_update([(client, token, op)], out)
            return
        self._pending_updates.append((client, token, op))
        if self._inflight_update is None:
            self._flush_updates(out)

    def on_client_query(self, query: QueryCommand, client, token, out: StepOutput) -> None:
        if not self.config.batching:
            self._start_query([(client, token, query)], out)
            return
        self._pending_queries.append((client, token, query))
        if self._inflight_query is None:
            self._flush_queries(out)

    def _flush_updates(self, out: StepOutput) -> None:
        if not self._pending_updates:
            return
        items, self._pending_updates = self._pending_updates, []
        req = self._start_update(items, out)
        # a single-replica cluster completes the merge synchronously
        live = req is not None and req.request_id in self.requests
        self._inflight_update = req.request_id if live else None

    def _flush_queries(self, out: StepOutput) -> None:
        if not self._pending_queries:
            return
        items, self._pending_queries = self._pending_queries, []
        req = self._start_query(items, out)
        live = req.request_id in self.requests
        self._inflight_query = req.request_id if live else None

    def _start_update(self, items, out: StepOutput) -> ProposerRequest | None:
        request_id = self._new_request_id()
        bound: list[tuple[object, object, UpdateCommand]] = []
        for client, token, op in items:
            try:
                cmd = self._bind_update(op)
                self.acceptor.apply_update(cmd)
            except CommandError as exc:
                out.replies.append(
                    ClientReply(
                        client=client, token=token, kind="update", ok=False,
                        request_id=request_id, reason=str(exc),
                    )
                )
                continue
            bound.append((client, token, cmd))
        if not bound:
            return None
        req = ProposerRequest(
            request_id=request_id,
            kind="update",
            ops=bound,
            phase="merging",
            merged={self.rid},
            merge_state=self.acceptor.state,
            round_trips=1,
        )
        self.requests[request_id] = req
        for peer in self._peers():
            out.sends.append((peer, Merge(self.rid, request_id, req.merge_state)))
        self._arm_timer(req, out)
        self._check_merge_quorum(req, out)
        return req

    def _bind_update(self, op: UpdateOp) -> UpdateCommand:
        if op.kind == "increment":
            return UpdateCommand.increment(self.rid - 1, self._next_tag())
        if op.kind == "set_add":
            if op.element is None:
                raise CommandError("set_add without an element")
            return UpdateCommand.set_add(op.element, self._next_tag())
        raise CommandError(f"unknown update kind {op.kind!r}")

    def _start_query(self, items, out: StepOutput) -> ProposerRequest:
        request_id = self._new_request_id()
        rid = self.new_round_id()
        payload = self.acceptor.state  # start from the local payload, not bottom
        req = ProposerRequest(
            request_id=request_id,
            kind="query",
            ops=list(items),
            phase="preparing",
            round=incremental_round(rid),
            attempt_id=rid,
            gathered=payload,
            round_trips=1,
        )
        self.requests[request_id] = req
        for dst in self._everyone():
            out.sends.append((dst, Prepare(self.rid, request_id, req.round, payload)))
        self._arm_timer(req, out)
        return req

    # -- proposer message handlers

    def on_merged(self, m: Merged, out: StepOutput) -> None:
        req = self.requests.get(m.request_id)
        if req is None or req.kind != "update" or req.phase != "merging":
            return
        if not 1 <= m.sender <= self.config.n_replicas:
            return
        req.merged.add(m.sender)
        self._check_merge_quorum(req, out)

    def _check_merge_quorum(self, req: ProposerRequest, out: StepOutput) -> None:
        if not self.config.quorum.is_quorum(req.merged):
            return
        req.phase = "done"
        for client, token, cmd in req.ops:
            out.replies.append(
                ClientReply(
                    client=client, token=token, kind="update", ok=True,
                    request_id=req.request_id, tag=cmd.tag,
                    round_trips=req.round_trips, retries=req.retries,
                )
            )
        self._finish(req, out)

    def on_ack(self, m: Ack, out: StepOutput) -> None:
        req = self.requests.get(m.request_id)
        if req is None or req.kind != "query" or req.phase != "preparing":
            return
        if not 1 <= m.sender <= self.config.n_replicas:
            return
        req.gathered = req.gathered.merge(m.state)
        if m.round.rid != req.attempt_id:
            return  # an earlier attempt's ack: keep the payload, not the vote
        if m.sender not in req.acks:
            req.acks[m.sender] = (m.round, m.state)
        if not self.config.quorum.is_quorum(req.acks.keys()):
            return
        entries = sorted(req.acks.items())  # stable across runs
        states = [s for _, (_, s) in entries]
        rounds = [r for _, (r, _) in entries]
        lub = states[0]
        for s in states[1:]:
            lub = lub.merge(s)
        if all(lub.compare(s) for s in states):
            # equivalent payloads: the quorum already agrees on this state
            self._complete_query(req, lub, out)
        elif all(r == rounds[0] for r in rounds[1:]):
            # same round everywhere: ask the quorum to adopt the LUB
            req.phase = "voting"
            req.proposed = lub
            req.round = rounds[0]
            req.voted = set()
            req.round_trips += 1
            for dst in self._everyone():
                out.sends.append((dst, Vote(self.rid, req.request_id, req.round, lub)))
            self._arm_timer(req, out)
        else:
            # mixed rounds: outbid them all with a fixed prepare
            nr = max(r.nr for r in rounds) + 1
            rid = self.new_round_id()
            req.round = Round(nr, rid)
            req.attempt_id = rid
            req.acks = {}
            req.retries += 1
            req.round_trips += 1
            out.retries.append(RequestRetry(req.request_id, "fixed"))
            if self._retries_exhausted(req, out):
                return
            for dst in self._everyone():
                out.sends.append((dst, Prepare(self.rid, req.request_id, req.round, lub)))
            self._arm_timer(req, out)

    def on_voted(self, m: Voted, out: StepOutput) -> None:
        req = self.requests.get(m.request_id)
        if req is None or req.kind != "query" or req.phase != "voting":
            return
        if m.round != req.round:
            return  # vote for an abandoned round
        if not 1 <= m.sender <= self.config.n_replicas:
            return
        req.voted.add(m.sender)
        if self.config.quorum.is_quorum(req.voted):
            self._complete_query(req, req.proposed, out)

    def on_nack(self, m: Nack, out: StepOutput) -> None:
        req = self.requests.get(m.request_id)
        if req is None or req.kind != "query" or req.phase == "done":
            return
        req.gathered = req.gathered.merge(m.state)
        if m.reject_id != req.attempt_id:
            return  # refusal of an attempt already superseded
        self._retry_incremental(req, out)

    def on_timeout(self, request_id: bytes, generation: int, out: StepOutput) -> None:
        req = self.requests.get(request_id)
        if req is None or generation != req.timer_generation:
            return
        if req.kind == "update":
            req.retries += 1
            if self._retries_exhausted(req, out):
                return
            req.round_trips += 1
            out.retries.append(RequestRetry(req.request_id, "merge-resend"))
            for peer in self._peers():
                if peer not in req.merged:
                    out.sends.append((peer, Merge(self.rid, request_id, req.merge_state)))
            self._arm_timer(req, out)
        else:
            self._retry_incremental(req, out)

    def _retry_incremental(self, req: ProposerRequest, out: StepOutput) -> None:
        req.retries += 1
        if self._retries_exhausted(req, out):
            return
        rid = self.new_round_id()
        req.phase = "preparing"
        req.round = incremental_round(rid)
        req.attempt_id = rid
        req.acks = {}
        req.proposed = None
        req.round_trips += 1
        out.retries.append(RequestRetry(req.request_id, "incremental"))
        for dst in self._everyone():
            out.sends.append((dst, Prepare(self.rid, req.request_id, req.round, req.gathered)))
        self._arm_timer(req, out)

    def _retries_exhausted(self, req: ProposerRequest, out: StepOutput) -> bool:
        limit = self.config.max_retries
        if limit is None or req.retries <= limit:
            return False
        req.phase = "done"
        for client, token, cmd in req.ops:
            # a failed update may still take effect: its payload already merged
            # into the local acceptor, so surface the tentative tag
            tag = cmd.tag if req.kind == "update" else None
            out.replies.append(
                ClientReply(
                    client=client, token=token, kind=req.kind, ok=False,
                    request_id=req.request_id, reason="max-retries", tag=tag,
                    round_trips=req.round_trips, retries=req.retries,
                )
            )
        self._finish(req, out)
        return True

    def _complete_query(self, req: ProposerRequest, learned: SemilatticeValue, out: StepOutput) -> None:
        req.phase = "done"
        req.proposed = None
        exposed = learned if self.config.expose_learned else None
        for client, token, query in req.ops:
            try:
                result = apply_query(query, learned)
            except CommandError as exc:
                out.replies.append(
                    ClientReply(
                        client=client, token=token, kind="query", ok=False,
                        request_id=req.request_id, reason=str(exc),
                        round_trips=req.round_trips, retries=req.retries,
                    )
                )
                continue
            out.replies.append(
                ClientReply(
                    client=client, token=token, kind="query", ok=True,
                    request_id=req.request_id, result=result, learned=exposed,
                    round_trips=req.round_trips, retries=req.retries,
                )
            )
        self._finish(req, out)

    def _finish(self, req: ProposerRequest, out: StepOutput) -> None:
        self.requests.pop(req.request_id, None)
        if not self.config.batching:
            return
        if self._inflight_update == req.request_id:
            self._inflight_update = None
            self._flush_updates(out)
        elif self._inflight_query == req.request_id:
            self._inflight_query = None
            self._flush_queries(out)

    def _arm_timer(self, req: ProposerRequest, out: StepOutput) -> None:
        if req.phase == "done":
            return
        req.timer_generation += 1
        out.timers.append(TimerRequest(req.request_id, req.timer_generation))
