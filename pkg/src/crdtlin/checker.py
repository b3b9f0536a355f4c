"""Offline safety and linearizability checking for recorded histories.

The checks work on causal tag-sets rather than replicated payloads: two
instrumented states carry the same tag-set exactly when they are the join
of the same updates, so set inclusion is a faithful, payload-agnostic
stand-in for the lattice order, and it stays exact even when a query
response only carries a projection of the state.

Five conditions define safe query behavior:

- validity: every tag a query learns belongs to an update invoked before
  the query's response;
- stability: of two non-overlapping queries, the later learns a superset;
- consistency: all learned tag-sets are pairwise ordered by inclusion;
- update stability: if update A finished before update B was invoked, no
  learned state may hold B's tag without A's;
- update visibility: a query invoked after an update finished must learn
  that update's tag.

``linearize`` turns a history that passes all five into an explicit total
order and verifies it is legal (each query's learned tag-set equals the set
of updates ordered before it) and consistent with real-time precedence.
``linearizability_oracle`` answers the same legality question for small
histories by exhaustive search, sharing no machinery with ``linearize``,
so each can catch the other lying.

Failed updates are treated as still-pending: the proposer gave up, but the
payload already merged into at least one acceptor, so the effect may
surface later. Failed or unanswered queries learned nothing and constrain
nothing; they are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

from .history import OpRecord

__all__ = [
    "GLA_CONDITIONS",
    "CheckError",
    "PreconditionFailed",
    "SequentialWitness",
    "UnsupportedInput",
    "Verdict",
    "Witness",
    "check_all",
    "check_consistency",
    "check_stability",
    "check_update_stability",
    "check_update_visibility",
    "check_validity",
    "linearize",
    "linearizability_oracle",
    "subhistory",
]

GLA_CONDITIONS = (
    "validity",
    "stability",
    "consistency",
    "update-stability",
    "update-visibility",
)


class CheckError(Exception):
    """The checker itself hit an inconsistency it cannot explain."""


class UnsupportedInput(Exception):
    """The history lacks what this check needs (instrumentation, size bound)."""


class PreconditionFailed(Exception):
    """linearize() was given a history that fails a safety condition."""

    def __init__(self, verdict: "Verdict"):
        self.verdict = verdict
        super().__init__(
            f"history fails the {verdict.condition} check: {verdict.witness.message}"
        )


@dataclass(frozen=True, slots=True)
class Witness:
    """Smallest set of operations that reproduces the violation on its own."""

    op_ids: tuple[int, ...]
    message: str


@dataclass(frozen=True, slots=True)
class Verdict:
    condition: str
    passed: bool
    witness: Witness | None = None


@dataclass(frozen=True, slots=True)
class SequentialWitness:
    """A legal total order over the extended history.

    ``order`` lists op ids; updates that never got a response appear after
    every query that excludes them. ``levels`` is the learned tag-set chain
    the order was built around, smallest first.
    """

    order: tuple[int, ...]
    levels: tuple[frozenset, ...]


def subhistory(history: list[OpRecord], op_ids) -> list[OpRecord]:
    wanted = set(op_ids)
    return [rec for rec in history if rec.op_id in wanted]


# --------------------------------------------------------------- extraction


def _updates(history: list[OpRecord]) -> list[OpRecord]:
    out = []
    for rec in history:
        if rec.kind != "update":
            continue
        if rec.outcome == "ok" and rec.tag is None:
            raise UnsupportedInput(
                f"update op {rec.op_id} completed without a causal tag; "
                "the history was not recorded with instrumentation on"
            )
        if rec.tag is not None:
            out.append(rec)
    return out


def _learned_queries(history: list[OpRecord]) -> list[OpRecord]:
    out = []
    for rec in history:
        if rec.kind != "query" or rec.outcome != "ok":
            continue
        if rec.learned_tags is None:
            raise UnsupportedInput(
                f"query op {rec.op_id} has no learned tag-set; "
                "the history was not recorded with instrumentation on"
            )
        out.append(rec)
    return out


def _update_effective(rec: OpRecord) -> bool:
    # a failed update may still take effect later; only "ok" pins a response
    return rec.outcome == "ok"


# --------------------------------------------------------------- the checks


def check_validity(history: list[OpRecord]) -> Verdict:
    updates = _updates(history)
    by_tag = {rec.tag: rec for rec in updates}
    for q in _learned_queries(history):
        for tag in q.learned_tags:
            u = by_tag.get(tag)
            if u is None:
                return Verdict(
                    "validity",
                    False,
                    Witness(
                        (q.op_id,),
                        f"query op {q.op_id} learned tag {tag} that no invoked update carries",
                    ),
                )
            if q.response_t < u.invoke_t:
                # strict interval precedence: a response at the same instant
                # as the invocation counts as concurrent, not earlier
                return Verdict(
                    "validity",
                    False,
                    Witness(
                        (u.op_id, q.op_id),
                        f"query op {q.op_id} learned tag {tag} before update op "
                        f"{u.op_id} was invoked",
                    ),
                )
    return Verdict("validity", True)


def check_stability(history: list[OpRecord]) -> Verdict:
    queries = sorted(_learned_queries(history), key=lambda r: r.response_t)
    # q1 precedes q2 iff q1.response_t < q2.invoke_t; sweeping in response
    # order, it is enough to compare each query against the accumulated
    # union of everything that finished before it was invoked
    events = sorted(queries, key=lambda r: r.invoke_t)
    idx = 0
    settled: set = set()
    for q in events:
        while idx < len(queries) and queries[idx].response_t < q.invoke_t:
            settled |= set(queries[idx].learned_tags)
            idx += 1
        missing = settled - set(q.learned_tags)
        if missing:
            # name one concrete predecessor that learned a missing tag
            tag = min(missing)
            for prev in queries[:idx]:
                if prev.response_t < q.invoke_t and tag in prev.learned_tags:
                    return Verdict(
                        "stability",
                        False,
                        Witness(
                            (prev.op_id, q.op_id),
                            f"query op {q.op_id} lost tag {tag} that the earlier "
                            f"query op {prev.op_id} had learned",
                        ),
                    )
            raise CheckError("stability sweep lost track of a predecessor")
    return Verdict("stability", True)


def check_consistency(history: list[OpRecord]) -> Verdict:
    queries = _learned_queries(history)
    first_with: dict[frozenset, OpRecord] = {}
    for q in queries:
        first_with.setdefault(frozenset(q.learned_tags), q)
    chain = sorted(first_with, key=len)
    for small, big in zip(chain, chain[1:]):
        if not small <= big:
            qa, qb = first_with[small], first_with[big]
            sample = min(small - big)
            return Verdict(
                "consistency",
                False,
                Witness(
                    (qa.op_id, qb.op_id),
                    f"query ops {qa.op_id} and {qb.op_id} learned incomparable "
                    f"states (tag {sample} in one but not the other)",
                ),
            )
    return Verdict("consistency", True)


def check_update_stability(history: list[OpRecord]) -> Verdict:
    updates = _updates(history)
    queries = _learned_queries(history)
    by_tag = {rec.tag: rec for rec in updates}
    finished = sorted((u for u in updates if _update_effective(u)), key=lambda r: r.response_t)
    seen: set[frozenset] = set()
    for q in queries:
        learned = frozenset(q.learned_tags)
        if learned in seen:
            continue
        seen.add(learned)
        # latest invocation among members: any update finished before it
        # must already be a member
        members = [by_tag[t] for t in learned if t in by_tag]
        if not members:
            continue
        latest = max(members, key=lambda r: r.invoke_t)
        for u1 in finished:
            if u1.response_t >= latest.invoke_t:
                break
            if u1.tag not in learned:
                return Verdict(
                    "update-stability",
                    False,
                    Witness(
                        (u1.op_id, latest.op_id, q.op_id),
                        f"query op {q.op_id} learned update op {latest.op_id} "
                        f"but not op {u1.op_id}, which finished first",
                    ),
                )
    return Verdict("update-stability", True)


def check_update_visibility(history: list[OpRecord]) -> Verdict:
    finished = sorted(
        (u for u in _updates(history) if _update_effective(u)),
        key=lambda r: r.response_t,
    )
    queries = sorted(_learned_queries(history), key=lambda r: r.invoke_t)
    idx = 0
    must: set = set()
    for q in queries:
        while idx < len(finished) and finished[idx].response_t < q.invoke_t:
            must.add(finished[idx].tag)
            idx += 1
        missing = must - set(q.learned_tags)
        if missing:
            tag = min(missing)
            u = next(u for u in finished[:idx] if u.tag == tag)
            return Verdict(
                "update-visibility",
                False,
                Witness(
                    (u.op_id, q.op_id),
                    f"query op {q.op_id} started after update op {u.op_id} "
                    f"finished but did not learn its tag",
                ),
            )
    return Verdict("update-visibility", True)


_CHECKS = {
    "validity": check_validity,
    "stability": check_stability,
    "consistency": check_consistency,
    "update-stability": check_update_stability,
    "update-visibility": check_update_visibility,
}


def check_all(history: list[OpRecord]) -> dict[str, Verdict]:
    return {name: fn(history) for name, fn in _CHECKS.items()}


# ------------------------------------------------------------- linearization


def _inv_key(rec: OpRecord) -> tuple:
    # invocation order; virtual-time ties broken by (client, op id)
    return (rec.invoke_t, rec.client, rec.op_id)


def linearize(history: list[OpRecord]) -> SequentialWitness:
    """Build and validate the explicit total order for a safe history.

    Raises :class:`PreconditionFailed` naming the first failing safety
    condition: the construction is only meaningful once all five hold.
    """
    for name in GLA_CONDITIONS:
        verdict = _CHECKS[name](history)
        if not verdict.passed:
            raise PreconditionFailed(verdict)

    updates = _updates(history)
    queries = _learned_queries(history)

    # learned tag-sets form a chain (consistency just passed); its distinct
    # values, smallest first, are the levels of the order
    distinct = sorted({frozenset(q.learned_tags) for q in queries}, key=len)
    levels = tuple(distinct)
    level_of = {tags: i for i, tags in enumerate(levels)}

    # an update slots in just before the first level that contains its tag;
    # tags never learned go after every query
    first_level: dict = {}
    prev: frozenset = frozenset()
    for i, tags in enumerate(levels):
        for tag in tags - prev:
            first_level[tag] = i
        prev = tags
    sentinel = len(levels)

    def sort_key(rec: OpRecord) -> tuple:
        if rec.kind == "update":
            return (first_level.get(rec.tag, sentinel), 0, _inv_key(rec))
        return (level_of[frozenset(rec.learned_tags)], 1, _inv_key(rec))

    ordered = sorted(updates + queries, key=sort_key)

    # legality: at each query, the updates placed before it are exactly the
    # tags it learned
    applied: set = set()
    for rec in ordered:
        if rec.kind == "update":
            applied.add(rec.tag)
        elif applied != set(rec.learned_tags):
            raise CheckError(
                f"constructed order is illegal at query op {rec.op_id}: "
                f"applied {sorted(applied)} vs learned {sorted(rec.learned_tags)}"
            )

    # real-time precedence: nothing may be placed after an operation that
    # was invoked only once it had already finished
    max_invoke = None
    max_invoke_op = None
    for rec in ordered:
        if rec.outcome == "ok" and max_invoke is not None and rec.response_t < max_invoke:
            raise CheckError(
                f"constructed order puts op {rec.op_id} after op "
                f"{max_invoke_op}, which it precedes in real time"
            )
        if max_invoke is None or rec.invoke_t > max_invoke:
            max_invoke = rec.invoke_t
            max_invoke_op = rec.op_id

    return SequentialWitness(order=tuple(r.op_id for r in ordered), levels=levels)


def linearizability_oracle(history: list[OpRecord], bound: int = 12) -> bool:
    """Exhaustive search for any legal order; independent of linearize()."""
    updates = _updates(history)
    queries = _learned_queries(history)
    ops = updates + queries
    if len(ops) > bound:
        raise UnsupportedInput(f"{len(ops)} operations exceed the oracle bound of {bound}")

    n = len(ops)
    resp = [
        rec.response_t if rec.outcome == "ok" else None  # None: pending, no upper edge
        for rec in ops
    ]
    inv = [rec.invoke_t for rec in ops]
    # i must come before j whenever i finished before j was invoked
    must_precede = [
        frozenset(
            i for i in range(n) if i != j and resp[i] is not None and resp[i] < inv[j]
        )
        for j in range(n)
    ]
    learned = [
        frozenset(rec.learned_tags) if rec.kind == "query" else None for rec in ops
    ]
    tags = [rec.tag if rec.kind == "update" else None for rec in ops]

    seen: set[frozenset] = set()

    def search(placed: frozenset, applied: frozenset) -> bool:
        if len(placed) == n:
            return True
        if placed in seen:
            return False
        seen.add(placed)
        for j in range(n):
            if j in placed or not must_precede[j] <= placed:
                continue
            if learned[j] is not None:
                if learned[j] != applied:
                    continue
                if search(placed | {j}, applied):
                    return True
            else:
                if search(placed | {j}, applied | {tags[j]}):
                    return True
        return False

    return search(frozenset(), frozenset())
