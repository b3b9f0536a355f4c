"""Rounds and the message vocabulary shared by every transport.

A round is a pair of a round number and a round id. Ordering between rounds
compares numbers alone; two rounds are the same round only when both number
and id match. Either half can be the distinguished bottom value: a bottom
number marks an incremental prepare whose effective number each acceptor
computes locally, and a bottom id marks a round invalidated by an update
or merge (or the acceptor's initial round).
"""

from __future__ import annotations

from dataclasses import dataclass

from .crdt import CausalTag, QueryCommand, SemilatticeValue

# Round ids are (per-process counter, process id). Counters start at 1 and
# process ids at 1, so (0, 0) stays reserved for bottom.
RoundId = tuple[int, int]

BOTTOM_NR = -1
BOTTOM_ID: RoundId = (0, 0)


@dataclass(frozen=True, slots=True)
class Round:
    nr: int
    rid: RoundId

    def is_incremental(self) -> bool:
        return self.nr == BOTTOM_NR

    def describe(self) -> str:
        nr = "_" if self.nr == BOTTOM_NR else str(self.nr)
        rid = "_" if self.rid == BOTTOM_ID else f"{self.rid[0]}.{self.rid[1]}"
        return f"({nr},{rid})"


ROUND_START = Round(0, BOTTOM_ID)
ROUND_BOTTOM = Round(BOTTOM_NR, BOTTOM_ID)


def incremental_round(rid: RoundId) -> Round:
    return Round(BOTTOM_NR, rid)


@dataclass(frozen=True, slots=True)
class UpdateOp:
    """Client-side write request; the proposer binds slot and causal tag."""

    kind: str
    element: bytes | None = None

    @classmethod
    def increment(cls) -> "UpdateOp":
        return cls(kind="increment")

    @classmethod
    def set_add(cls, element: bytes) -> "UpdateOp":
        return cls(kind="set_add", element=element)


# ----------------------------------------------------------- replica to replica


@dataclass(frozen=True, slots=True)
class Merge:
    sender: int
    request_id: bytes
    state: SemilatticeValue


@dataclass(frozen=True, slots=True)
class Merged:
    sender: int
    request_id: bytes


@dataclass(frozen=True, slots=True)
class Prepare:
    sender: int
    request_id: bytes
    round: Round
    state: SemilatticeValue


@dataclass(frozen=True, slots=True)
class Ack:
    sender: int
    request_id: bytes
    round: Round
    state: SemilatticeValue


@dataclass(frozen=True, slots=True)
class Vote:
    sender: int
    request_id: bytes
    round: Round
    state: SemilatticeValue


@dataclass(frozen=True, slots=True)
class Voted:
    # No payload: the proposer kept the proposed state. The round names the
    # vote being answered so late votes from an abandoned round never count.
    sender: int
    request_id: bytes
    round: Round


@dataclass(frozen=True, slots=True)
class Nack:
    sender: int
    request_id: bytes
    round: Round  # the acceptor's current round
    state: SemilatticeValue  # the acceptor's current payload
    reject_id: RoundId  # round id of the refused prepare or vote


# ----------------------------------------------------------- client to replica


@dataclass(frozen=True, slots=True)
class Update:
    sender: int
    request_id: bytes
    op: UpdateOp


@dataclass(frozen=True, slots=True)
class Query:
    sender: int
    request_id: bytes
    query: QueryCommand


@dataclass(frozen=True, slots=True)
class UpdateDone:
    sender: int
    request_id: bytes
    tag: CausalTag
    round_trips: int
    retries: int


@dataclass(frozen=True, slots=True)
class QueryDone:
    sender: int
    request_id: bytes
    result: object
    learned: SemilatticeValue | None
    round_trips: int
    retries: int


@dataclass(frozen=True, slots=True)
class Failed:
    sender: int
    request_id: bytes
    kind: str  # "update" | "query"
    reason: str
    # a failed update's payload already merged locally, so its tentative tag
    # travels with the failure; None for queries
    tag: CausalTag | None = None


ReplicaMessage = Merge | Merged | Prepare | Ack | Vote | Voted | Nack
ClientMessage = Update | Query | UpdateDone | QueryDone | Failed
Message = ReplicaMessage | ClientMessage
