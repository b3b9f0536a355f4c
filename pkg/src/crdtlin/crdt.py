"""Join-semilattice values and the commands that read and inflate them.

The replication layer is generic over ``SemilatticeValue``: anything with a
partial-order ``compare``, a least-upper-bound ``merge``, and a canonical
byte form. Two concrete value types ship here, a grow-only counter and a
grow-only set. ``CausalTaggedState`` wraps any value with the set of update
tags that produced it; instrumented runs use the tags for history checking
while production payloads stay untagged.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass

__all__ = [
    "CausalTag",
    "CausalTaggedState",
    "CommandError",
    "CrdtError",
    "GCounter",
    "GSet",
    "QueryCommand",
    "QueryResult",
    "SemilatticeValue",
    "SerializationError",
    "ShapeError",
    "UpdateCommand",
    "apply_query",
    "apply_update",
    "state_from_bytes",
    "state_to_bytes",
]

# (issuing replica id, per-replica update sequence number)
CausalTag = tuple[int, int]

QueryResult = "int | bool | tuple[bytes, ...]"

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_TAG = struct.Struct(">QQ")


class CrdtError(Exception):
    """Base class for value and command errors."""


class ShapeError(CrdtError):
    """Operands are structurally incompatible (type or width mismatch)."""


class CommandError(CrdtError):
    """Command does not fit the state it was applied to."""


class SerializationError(CrdtError):
    """Canonical byte form is malformed."""


class SemilatticeValue(ABC):
    """A value in a join semilattice.

    ``compare`` is the partial order (self below-or-equal other) and
    ``merge`` the least upper bound. Implementations are immutable; merge
    and updates return fresh values.
    """

    __slots__ = ()

    @abstractmethod
    def compare(self, other: "SemilatticeValue") -> bool:
        """True when self is dominated by ``other`` in the lattice order."""

    @abstractmethod
    def merge(self, other: "SemilatticeValue") -> "SemilatticeValue":
        """Least upper bound of self and ``other``."""

    @abstractmethod
    def canonical_bytes(self) -> bytes:
        """Self-describing canonical encoding; equal values encode equally."""

    @abstractmethod
    def canonical_size(self) -> int:
        """Length of ``canonical_bytes()`` without building it."""

    @abstractmethod
    def render(self) -> str:
        """Short human-readable form for logs and debug output."""

    def equivalent(self, other: "SemilatticeValue") -> bool:
        return self.compare(other) and other.compare(self)


@dataclass(frozen=True, slots=True)
class GCounter(SemilatticeValue):
    """Grow-only counter with one slot per replica.

    The slot count is fixed at cluster creation; merging counters of
    different widths is a shape error, not a silent resize.
    """

    counts: tuple[int, ...]

    @classmethod
    def zero(cls, width: int) -> "GCounter":
        if width < 1:
            raise ShapeError(f"counter needs at least one slot, got {width}")
        return cls((0,) * width)

    def _check(self, other: "SemilatticeValue") -> "GCounter":
        if not isinstance(other, GCounter):
            raise ShapeError(f"cannot combine GCounter with {type(other).__name__}")
        if len(other.counts) != len(self.counts):
            raise ShapeError(
                f"counter width mismatch: {len(self.counts)} vs {len(other.counts)}"
            )
        return other

    def compare(self, other: "SemilatticeValue") -> bool:
        other = self._check(other)
        return all(a <= b for a, b in zip(self.counts, other.counts))

    def merge(self, other: "SemilatticeValue") -> "GCounter":
        other = self._check(other)
        return GCounter(tuple(max(a, b) for a, b in zip(self.counts, other.counts)))

    def increment(self, slot: int) -> "GCounter":
        if not 0 <= slot < len(self.counts):
            raise CommandError(f"slot {slot} out of range for width {len(self.counts)}")
        counts = list(self.counts)
        counts[slot] += 1
        return GCounter(tuple(counts))

    def value(self) -> int:
        return sum(self.counts)

    def canonical_bytes(self) -> bytes:
        return b"C" + _U32.pack(len(self.counts)) + struct.pack(
            f">{len(self.counts)}Q", *self.counts
        )

    def canonical_size(self) -> int:
        return 5 + 8 * len(self.counts)

    def render(self) -> str:
        return "[" + ",".join(str(c) for c in self.counts) + "]"


@dataclass(frozen=True, slots=True)
class GSet(SemilatticeValue):
    """Grow-only set of opaque byte strings."""

    elements: frozenset[bytes]

    @classmethod
    def empty(cls) -> "GSet":
        return cls(frozenset())

    @classmethod
    def of(cls, *elements: bytes) -> "GSet":
        return cls(frozenset(elements))

    def _check(self, other: "SemilatticeValue") -> "GSet":
        if not isinstance(other, GSet):
            raise ShapeError(f"cannot combine GSet with {type(other).__name__}")
        return other

    def compare(self, other: "SemilatticeValue") -> bool:
        return self.elements <= self._check(other).elements

    def merge(self, other: "SemilatticeValue") -> "GSet":
        return GSet(self.elements | self._check(other).elements)

    def add(self, element: bytes) -> "GSet":
        if not isinstance(element, bytes):
            raise CommandError(f"set elements are bytes, got {type(element).__name__}")
        return GSet(self.elements | {element})

    def contains(self, element: bytes) -> bool:
        return element in self.elements

    def sorted_elements(self) -> tuple[bytes, ...]:
        return tuple(sorted(self.elements))

    def canonical_bytes(self) -> bytes:
        parts = [b"S", _U32.pack(len(self.elements))]
        for el in sorted(self.elements):
            parts.append(_U32.pack(len(el)))
            parts.append(el)
        return b"".join(parts)

    def canonical_size(self) -> int:
        return 5 + sum(4 + len(el) for el in self.elements)

    def render(self) -> str:
        shown = ",".join(el.decode("utf-8", "backslashreplace") for el in sorted(self.elements))
        return "{" + shown + "}"


@dataclass(frozen=True, slots=True)
class CausalTaggedState(SemilatticeValue):
    """A value plus the tags of every update folded into it.

    Ordering and merging are driven by the wrapped value so that tagged runs
    behave exactly like untagged ones; tags ride along as bookkeeping.
    """

    value: SemilatticeValue
    tags: frozenset[CausalTag]

    @classmethod
    def initial(cls, value: SemilatticeValue) -> "CausalTaggedState":
        return cls(value, frozenset())

    def _check(self, other: "SemilatticeValue") -> "CausalTaggedState":
        if not isinstance(other, CausalTaggedState):
            raise ShapeError("cannot combine tagged state with an untagged value")
        return other

    def compare(self, other: "SemilatticeValue") -> bool:
        return self.value.compare(self._check(other).value)

    def merge(self, other: "SemilatticeValue") -> "CausalTaggedState":
        other = self._check(other)
        return CausalTaggedState(self.value.merge(other.value), self.tags | other.tags)

    def canonical_bytes(self) -> bytes:
        parts = [b"T", self.value.canonical_bytes(), _U32.pack(len(self.tags))]
        for tag in sorted(self.tags):
            parts.append(_TAG.pack(*tag))
        return b"".join(parts)

    def canonical_size(self) -> int:
        return 1 + self.value.canonical_size() + 4 + 16 * len(self.tags)

    def render(self) -> str:
        return f"{self.value.render()}+{len(self.tags)}t"


@dataclass(frozen=True, slots=True)
class UpdateCommand:
    """An inflationary write: incrementing a counter slot or adding a set element.

    Every command carries a globally unique causal tag assigned by the
    proposer that issued it.
    """

    kind: str
    tag: CausalTag
    slot: int = 0
    element: bytes | None = None

    @classmethod
    def increment(cls, slot: int, tag: CausalTag) -> "UpdateCommand":
        return cls(kind="increment", tag=tag, slot=slot)

    @classmethod
    def set_add(cls, element: bytes, tag: CausalTag) -> "UpdateCommand":
        return cls(kind="set_add", tag=tag, element=element)


@dataclass(frozen=True, slots=True)
class QueryCommand:
    """A read of the full replicated state: no side effects, a plain result."""

    kind: str
    element: bytes | None = None

    @classmethod
    def counter_value(cls) -> "QueryCommand":
        return cls(kind="counter_value")

    @classmethod
    def set_contains(cls, element: bytes) -> "QueryCommand":
        return cls(kind="set_contains", element=element)

    @classmethod
    def set_elements(cls) -> "QueryCommand":
        return cls(kind="set_elements")


def apply_update(cmd: UpdateCommand, state: SemilatticeValue) -> SemilatticeValue:
    """Apply an update command, returning an inflated copy of ``state``."""
    if isinstance(state, CausalTaggedState):
        return CausalTaggedState(apply_update(cmd, state.value), state.tags | {cmd.tag})
    if cmd.kind == "increment":
        if not isinstance(state, GCounter):
            raise CommandError("increment targets a counter state")
        return state.increment(cmd.slot)
    if cmd.kind == "set_add":
        if not isinstance(state, GSet):
            raise CommandError("set_add targets a set state")
        if cmd.element is None:
            raise CommandError("set_add without an element")
        return state.add(cmd.element)
    raise CommandError(f"unknown update kind {cmd.kind!r}")


def apply_query(cmd: QueryCommand, state: SemilatticeValue):
    """Evaluate a query command against a (possibly tagged) state."""
    if isinstance(state, CausalTaggedState):
        return apply_query(cmd, state.value)
    if cmd.kind == "counter_value":
        if not isinstance(state, GCounter):
            raise CommandError("counter_value targets a counter state")
        return state.value()
    if cmd.kind == "set_contains":
        if not isinstance(state, GSet):
            raise CommandError("set_contains targets a set state")
        if cmd.element is None:
            raise CommandError("set_contains without an element")
        return state.contains(cmd.element)
    if cmd.kind == "set_elements":
        if not isinstance(state, GSet):
            raise CommandError("set_elements targets a set state")
        return state.sorted_elements()
    raise CommandError(f"unknown query kind {cmd.kind!r}")


def state_to_bytes(state: SemilatticeValue) -> bytes:
    return state.canonical_bytes()


def state_from_bytes(data: bytes) -> SemilatticeValue:
    state, used = _parse_state(data, 0)
    if used != len(data):
        raise SerializationError(f"{len(data) - used} trailing bytes after state")
    return state


def _need(data: bytes, offset: int, n: int) -> int:
    end = offset + n
    if end > len(data):
        raise SerializationError("truncated state encoding")
    return end


def _parse_state(data: bytes, offset: int) -> tuple[SemilatticeValue, int]:
    end = _need(data, offset, 1)
    lead = data[offset:end]
    offset = end
    if lead == b"C":
        end = _need(data, offset, 4)
        (width,) = _U32.unpack(data[offset:end])
        offset = end
        end = _need(data, offset, 8 * width)
        counts = struct.unpack(f">{width}Q", data[offset:end])
        return GCounter(counts), end
    if lead == b"S":
        end = _need(data, offset, 4)
        (count,) = _U32.unpack(data[offset:end])
        offset = end
        elements = []
        for _ in range(count):
            end = _need(data, offset, 4)
            (length,) = _U32.unpack(data[offset:end])
            offset = end
            end = _need(data, offset, length)
            elements.append(data[offset:end])
            offset = end
        return GSet(frozenset(elements)), offset
    if lead == b"T":
        inner, offset = _parse_state(data, offset)
        if isinstance(inner, CausalTaggedState):
            raise SerializationError("nested tagged state")
        end = _need(data, offset, 4)
        (count,) = _U32.unpack(data[offset:end])
        offset = end
        tags = []
        for _ in range(count):
            end = _need(data, offset, 16)
            tags.append(_TAG.unpack(data[offset:end]))
            offset = end
        return CausalTaggedState(inner, frozenset(tags)), offset
    raise SerializationError(f"unknown state lead byte {lead!r}")
