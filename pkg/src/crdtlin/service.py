"""Networked replica daemon and a blocking client for it.

One daemon hosts both protocol roles for its replica id. All protocol state
lives on a single asyncio event loop: connection handlers and timer
callbacks feed events into the state machine synchronously, so no two
handlers ever interleave inside it. Peer links are outbound queues with
reconnect-and-backoff; when a peer is down or slow its queue overflows and
frames are dropped, which the protocol is built to absorb.

Replicas keep no durable state. A killed daemon is a crash-stop: the rest
of the cluster carries on while a quorum survives, and bringing the same
id back requires restarting the cluster.

Clients speak the same framed protocol over a plain TCP connection:
requests carry a client-chosen 16-byte request id, responses echo it.
:class:`ReplicaClient` wraps that in a blocking call-per-operation API and
can record an operation history suitable for the offline checker.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .crdt import CausalTaggedState, GCounter, GSet, QueryCommand, SemilatticeValue
from .history import OpRecord
from .messages import (
    Failed,
    Merge,
    Merged,
    Message,
    Query,
    QueryDone,
    Update,
    UpdateDone,
    UpdateOp,
)
from .protocol import (
    ClientQuery,
    ClientReply,
    ClientUpdate,
    MajorityQuorum,
    ProtocolConfig,
    Replica,
    TimerFire,
)
from .wire import MAX_FRAME, FrameError, encode, try_decode

__all__ = [
    "ClusterConfig",
    "ClusterConfigError",
    "QueryOutcome",
    "ReplicaClient",
    "ReplicaDaemon",
    "ReplicaEndpoint",
    "RequestFailed",
    "UpdateOutcome",
    "load_cluster_config",
]

log = logging.getLogger(__name__)

_PEER_QUEUE_LIMIT = 1000
_RECONNECT_DELAY = 0.2


class ClusterConfigError(Exception):
    """The cluster description is missing, malformed, or inconsistent."""


class RequestFailed(Exception):
    """The contacted replica reported the operation as failed."""

    def __init__(self, kind: str, reason: str):
        self.kind = kind
        self.reason = reason
        super().__init__(f"{kind} failed: {reason}")


@dataclass(frozen=True, slots=True)
class ReplicaEndpoint:
    id: int
    host: str
    port: int


@dataclass(frozen=True, slots=True)
class ClusterConfig:
    replicas: tuple[ReplicaEndpoint, ...]
    crdt: str = "gcounter"
    batching: bool = False
    timeout: float = 0.5
    max_retries: int | None = 50
    instrument: bool = True

    def validate(self) -> None:
        n = len(self.replicas)
        if n < 1:
            raise ClusterConfigError("a cluster needs at least one replica")
        ids = sorted(r.id for r in self.replicas)
        if ids != list(range(1, n + 1)):
            raise ClusterConfigError(f"replica ids must be exactly 1..{n}, got {ids}")
        endpoints = {(r.host, r.port) for r in self.replicas}
        if len(endpoints) != n:
            raise ClusterConfigError("two replicas share a host:port endpoint")
        if self.crdt not in ("gcounter", "gset"):
            raise ClusterConfigError(f"unknown crdt {self.crdt!r}")
        if self.timeout <= 0:
            raise ClusterConfigError("timeout must be positive")
        if self.max_retries is not None and self.max_retries < 0:
            raise ClusterConfigError("max_retries cannot be negative")

    def endpoint(self, replica_id: int) -> ReplicaEndpoint:
        for r in self.replicas:
            if r.id == replica_id:
                return r
        raise ClusterConfigError(f"no replica with id {replica_id} in the cluster")

    def initial_state(self) -> SemilatticeValue:
        base: SemilatticeValue
        if self.crdt == "gcounter":
            base = GCounter.zero(len(self.replicas))
        else:
            base = GSet.empty()
        if self.instrument:
            return CausalTaggedState.initial(base)
        return base


def load_cluster_config(path: str | Path) -> ClusterConfig:
    try:
        with open(path) as fp:
            raw = json.load(fp)
    except OSError as exc:
        raise ClusterConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ClusterConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("replicas"), list):
        raise ClusterConfigError(f"{path} must be an object with a 'replicas' list")
    replicas = []
    for entry in raw["replicas"]:
        try:
            replicas.append(
                ReplicaEndpoint(int(entry["id"]), str(entry["host"]), int(entry["port"]))
            )
        except (TypeError, KeyError, ValueError) as exc:
            raise ClusterConfigError(f"bad replica entry {entry!r}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(ClusterConfig)}
    extras = {k: v for k, v in raw.items() if k != "replicas"}
    unknown = set(extras) - known
    if unknown:
        raise ClusterConfigError(f"unknown config keys: {sorted(unknown)}")
    max_retries = extras.pop("max_retries", 50)
    config = ClusterConfig(
        replicas=tuple(replicas),
        crdt=str(extras.pop("crdt", "gcounter")),
        batching=bool(extras.pop("batching", False)),
        timeout=float(extras.pop("timeout", 0.5)),
        max_retries=None if max_retries is None else int(max_retries),
        instrument=bool(extras.pop("instrument", True)),
    )
    config.validate()
    return config


# -------------------------------------------------------------------- daemon


class ReplicaDaemon:
    """One replica process: listens for peers and clients, runs the protocol."""

    def __init__(self, config: ClusterConfig, replica_id: int):
        config.validate()
        self.config = config
        self.endpoint = config.endpoint(replica_id)
        self.replica = Replica(
            replica_id,
            ProtocolConfig(
                n_replicas=len(config.replicas),
                quorum=MajorityQuorum(len(config.replicas)),
                batching=config.batching,
                max_retries=config.max_retries,
                expose_learned=config.instrument,
            ),
            config.initial_state(),
        )
        self._peer_queues: dict[int, asyncio.Queue] = {}
        self._client_writers: dict[bytes, asyncio.StreamWriter] = {}
        self._timers: set[asyncio.TimerHandle] = set()
        self._tasks: set[asyncio.Task] = set()
        self._stop = asyncio.Event()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server: asyncio.Server | None = None
        # threading.Event so a controlling thread can wait for the bind
        self.bound = threading.Event()

    async def serve(self) -> None:
        """Run until :meth:`request_stop`; raises if the listen bind fails."""
        self._loop = asyncio.get_running_loop()
        self._server = await asyncio.start_server(
            self._on_connection, self.endpoint.host, self.endpoint.port
        )
        self.bound.set()
        log.info(
            "replica %d serving on %s:%d", self.endpoint.id, self.endpoint.host, self.endpoint.port
        )
        for peer in self.config.replicas:
            if peer.id == self.endpoint.id:
                continue
            queue: asyncio.Queue = asyncio.Queue(maxsize=_PEER_QUEUE_LIMIT)
            self._peer_queues[peer.id] = queue
            self._spawn(self._peer_sender(peer, queue))
        try:
            await self._stop.wait()
        finally:
            self._server.close()
            await self._server.wait_closed()
            for handle in self._timers:
                handle.cancel()
            for task in self._tasks:
                task.cancel()
            await asyncio.gather(*self._tasks, return_exceptions=True)
            log.info("replica %d stopped", self.endpoint.id)

    def request_stop(self) -> None:
        """Ask the daemon to shut down; safe to call from any thread."""
        if self._loop is None:
            self._stop.set()
        else:
            self._loop.call_soon_threadsafe(self._stop.set)

    def _spawn(self, coro) -> None:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    # -- protocol event routing; synchronous, so handlers never interleave

    def _dispatch(self, event) -> None:
        pending = [event]
        while pending:
            out = self.replica.step(pending.pop(0))
            for dst, msg in out.sends:
                if dst == self.endpoint.id:
                    pending.append(msg)  # local hop: delivered reliably, in order
                else:
                    self._enqueue_peer(dst, msg)
            for timer in out.timers:
                self._arm_timer(timer.request_id, timer.generation)
            for reply in out.replies:
                self._answer_client(reply)

    def _arm_timer(self, request_id: bytes, generation: int) -> None:
        loop = asyncio.get_running_loop()
        handle: asyncio.TimerHandle | None = None

        def fire() -> None:
            self._timers.discard(handle)
            self._dispatch(TimerFire(request_id, generation))

        handle = loop.call_later(self.config.timeout, fire)
        self._timers.add(handle)

    def _enqueue_peer(self, dst: int, msg) -> None:
        queue = self._peer_queues.get(dst)
        if queue is None:
            return
        try:
            queue.put_nowait(msg)
        except asyncio.QueueFull:
            # a dead or slow peer must not stall the loop; the protocol
            # treats the lost frame like any other drop
            log.debug("replica %d: queue to peer %d full, dropping frame", self.endpoint.id, dst)

    def _answer_client(self, reply: ClientReply) -> None:
        writer = self._client_writers.pop(reply.token, None)
        if writer is None:
            return  # the client went away; nothing to route
        rid = self.endpoint.id
        msg: Message
        if not reply.ok:
            msg = Failed(rid, reply.token, reply.kind, reply.reason or "failed", reply.tag)
        elif reply.kind == "update":
            msg = UpdateDone(rid, reply.token, reply.tag, reply.round_trips, reply.retries)
        else:
            msg = QueryDone(
                rid, reply.token, reply.result, reply.learned, reply.round_trips, reply.retries
            )
        try:
            writer.write(encode(msg))
        except Exception:
            log.debug("replica %d: client reply write failed", rid, exc_info=True)

    # -- inbound connections (peers and clients share the listener)

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        peer_name = writer.get_extra_info("peername")
        try:
            while True:
                header = await reader.readexactly(4)
                (length,) = struct.unpack(">I", header)
                if length + 4 > MAX_FRAME:
                    raise FrameError(f"declared frame of {length + 4} bytes exceeds the cap")
                payload = await reader.readexactly(length)
                self._handle_message(try_decode(header + payload), writer)
        except asyncio.IncompleteReadError:
            pass  # clean disconnect
        except FrameError as exc:
            log.warning("replica %d: dropping %s: %s", self.endpoint.id, peer_name, exc)
        except ConnectionError:
            pass
        finally:
            stale = [rid for rid, w in self._client_writers.items() if w is writer]
            for rid in stale:
                del self._client_writers[rid]
            writer.close()

    def _handle_message(self, decoded, writer: asyncio.StreamWriter) -> None:
        msg, _consumed = decoded
        match msg:
            case Update():
                self._client_writers[msg.request_id] = writer
                self._dispatch(ClientUpdate(msg.op, client=msg.sender, token=msg.request_id))
            case Query():
                self._client_writers[msg.request_id] = writer
                self._dispatch(ClientQuery(msg.query, client=msg.sender, token=msg.request_id))
            case UpdateDone() | QueryDone() | Failed():
                raise FrameError(f"{type(msg).__name__} is a reply, not a request")
            case _:
                self._dispatch(msg)

    # -- outbound peer links

    async def _peer_sender(self, peer: ReplicaEndpoint, queue: asyncio.Queue) -> None:
        while True:
            try:
                _reader, writer = await asyncio.open_connection(peer.host, peer.port)
            except OSError:
                await asyncio.sleep(_RECONNECT_DELAY)
                continue
            log.debug("replica %d: connected to peer %d", self.endpoint.id, peer.id)
            try:
                while True:
                    msg = await queue.get()
                    writer.write(encode(msg))
                    await writer.drain()
            except (ConnectionError, OSError):
                log.debug("replica %d: link to peer %d dropped", self.endpoint.id, peer.id)
                writer.close()
                await asyncio.sleep(_RECONNECT_DELAY)


# -------------------------------------------------------------------- client


@dataclass(frozen=True, slots=True)
class UpdateOutcome:
    tag: tuple[int, int]
    round_trips: int
    retries: int


@dataclass(frozen=True, slots=True)
class QueryOutcome:
    result: object
    learned_tags: tuple | None
    round_trips: int
    retries: int


class ReplicaClient:
    """Blocking single-connection client; one outstanding request at a time.

    With ``record=True`` every call is appended to :attr:`history` as an
    :class:`OpRecord` timestamped with a monotonic nanosecond clock, ready
    for the offline checker.
    """

    def __init__(
        self,
        host: str,
        port: int,
        *,
        timeout: float = 10.0,
        client_id: int = 0,
        record: bool = False,
        connect_retries: int = 25,
    ):
        last: OSError | None = None
        for _ in range(max(1, connect_retries)):
            try:
                self._sock = socket.create_connection((host, port), timeout=timeout)
                break
            except OSError as exc:
                last = exc
                time.sleep(0.1)
        else:
            raise ConnectionError(f"cannot reach replica at {host}:{port}: {last}")
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = bytearray()
        self.client_id = client_id
        self.record = record
        self.history: list[OpRecord] = []
        self._op_counter = 0
        self._replica_hint = 0

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> "ReplicaClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- operations

    def increment(self) -> UpdateOutcome:
        reply, rec = self._roundtrip(
            lambda rid: Update(self.client_id, rid, UpdateOp.increment()),
            {"kind": "increment"},
            "update",
        )
        return self._update_outcome(reply, rec)

    def add(self, element: bytes) -> UpdateOutcome:
        reply, rec = self._roundtrip(
            lambda rid: Update(self.client_id, rid, UpdateOp.set_add(element)),
            {"kind": "set_add", "element": element},
            "update",
        )
        return self._update_outcome(reply, rec)

    def value(self) -> QueryOutcome:
        return self._query(QueryCommand.counter_value(), {"kind": "counter_value"})

    def contains(self, element: bytes) -> QueryOutcome:
        return self._query(
            QueryCommand.set_contains(element), {"kind": "set_contains", "element": element}
        )

    def elements(self) -> QueryOutcome:
        return self._query(QueryCommand.set_elements(), {"kind": "set_elements"})

    # -- plumbing

    def _query(self, command: QueryCommand, op_desc: dict) -> QueryOutcome:
        reply, rec = self._roundtrip(
            lambda rid: Query(self.client_id, rid, command), op_desc, "query"
        )
        learned_tags = None
        learned_value = None
        if isinstance(reply.learned, CausalTaggedState):
            learned_tags = tuple(sorted(reply.learned.tags))
            learned_value = reply.learned.value.render()
        if rec is not None:
            rec.outcome = "ok"
            rec.result = reply.result
            rec.learned_tags = learned_tags
            rec.learned_value = learned_value
            rec.round_trips = reply.round_trips
            rec.retries = reply.retries
        return QueryOutcome(reply.result, learned_tags, reply.round_trips, reply.retries)

    def _update_outcome(self, reply, rec) -> UpdateOutcome:
        if rec is not None:
            rec.outcome = "ok"
            rec.tag = reply.tag
            rec.round_trips = reply.round_trips
            rec.retries = reply.retries
        return UpdateOutcome(reply.tag, reply.round_trips, reply.retries)

    def _roundtrip(self, build, op_desc: dict, kind: str):
        request_id = os.urandom(16)
        rec = None
        if self.record:
            self._op_counter += 1
            rec = OpRecord(
                op_id=self._op_counter,
                client=self.client_id,
                replica=self._replica_hint,
                kind=kind,
                op=op_desc,
                invoke_t=time.monotonic_ns(),
            )
            self.history.append(rec)
        self._sock.sendall(encode(build(request_id)))
        while True:
            reply = self._next_frame()
            if reply.request_id != request_id:
                continue  # a stray frame for someone else's request
            if rec is not None:
                rec.response_t = time.monotonic_ns()
                rec.replica = self._replica_hint = reply.sender
            if isinstance(reply, Failed):
                if rec is not None:
                    rec.outcome = "failed"
                    rec.tag = reply.tag
                raise RequestFailed(reply.kind, reply.reason)
            return reply, rec

    def _next_frame(self) -> Message:
        while True:
            out = try_decode(self._buf)
            if out is not None:
                msg, consumed = out
                del self._buf[:consumed]
                return msg
            chunk = self._sock.recv(65536)
            if not chunk:
                raise ConnectionError("replica closed the connection")
            self._buf += chunk
