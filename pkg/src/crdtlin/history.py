"""Operation histories and execution traces, and their on-disk forms.

Histories are line-delimited JSON, one operation per line; traces are
line-delimited JSON, one event per line. Both carry a schema version so
tooling can refuse files it does not understand. Byte strings (set
elements) are base64 in JSON.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import IO, Iterable

from .crdt import CausalTag

SCHEMA_VERSION = 1


class HistoryFormatError(Exception):
    """A history or trace file does not parse under this schema."""


@dataclass(slots=True)
class OpRecord:
    """One client operation: its invocation, and its response if any.

    ``outcome`` is "ok", "failed", or None while the operation is still
    pending (no response was ever observed). ``learned_tags`` is populated
    for instrumented query responses only.
    """

    op_id: int
    client: int
    replica: int
    kind: str  # "update" | "query"
    op: dict
    invoke_t: int
    tag: CausalTag | None = None
    response_t: int | None = None
    outcome: str | None = None
    result: object = None
    learned_tags: tuple[CausalTag, ...] | None = None
    learned_value: str | None = None
    round_trips: int | None = None
    retries: int | None = None
    incremental_retry_times: tuple[int, ...] = ()

    def completed(self) -> bool:
        return self.outcome == "ok"


@dataclass(frozen=True, slots=True)
class TraceEvent:
    t: int
    seq: int
    kind: str  # deliver | drop | duplicate | timer | crash | invoke | respond
    detail: tuple[tuple[str, object], ...] = field(default_factory=tuple)


def _encode_result(result) -> object:
    if result is None or isinstance(result, (bool, int)):
        return result
    if isinstance(result, (tuple, list)):
        return {"elements": [base64.b64encode(e).decode("ascii") for e in result]}
    raise HistoryFormatError(f"unencodable result {result!r}")


def _decode_result(obj) -> object:
    if isinstance(obj, dict) and "elements" in obj:
        return tuple(base64.b64decode(e) for e in obj["elements"])
    return obj


def _encode_op(op: dict) -> dict:
    out = dict(op)
    if isinstance(out.get("element"), bytes):
        out["element"] = base64.b64encode(out["element"]).decode("ascii")
    return out


def _decode_op(obj: dict) -> dict:
    out = dict(obj)
    if "element" in out and out["element"] is not None:
        out["element"] = base64.b64decode(out["element"])
    return out


def record_to_json(rec: OpRecord) -> str:
    obj = {
        "v": SCHEMA_VERSION,
        "op_id": rec.op_id,
        "client": rec.client,
        "replica": rec.replica,
        "kind": rec.kind,
        "op": _encode_op(rec.op),
        "invoke_t": rec.invoke_t,
        "tag": list(rec.tag) if rec.tag is not None else None,
        "response_t": rec.response_t,
        "outcome": rec.outcome,
        "result": _encode_result(rec.result),
        "learned_tags": (
            [list(t) for t in rec.learned_tags] if rec.learned_tags is not None else None
        ),
        "learned_value": rec.learned_value,
        "round_trips": rec.round_trips,
        "retries": rec.retries,
        "incremental_retry_times": list(rec.incremental_retry_times),
    }
    return json.dumps(obj, separators=(",", ":"))


def record_from_json(line: str) -> OpRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise HistoryFormatError(f"bad history line: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("v") != SCHEMA_VERSION:
        raise HistoryFormatError(f"unsupported history schema: {obj.get('v')!r}")
    try:
        return OpRecord(
            op_id=obj["op_id"],
            client=obj["client"],
            replica=obj["replica"],
            kind=obj["kind"],
            op=_decode_op(obj["op"]),
            invoke_t=obj["invoke_t"],
            tag=tuple(obj["tag"]) if obj.get("tag") is not None else None,
            response_t=obj.get("response_t"),
            outcome=obj.get("outcome"),
            result=_decode_result(obj.get("result")),
            learned_tags=(
                tuple(tuple(t) for t in obj["learned_tags"])
                if obj.get("learned_tags") is not None
                else None
            ),
            learned_value=obj.get("learned_value"),
            round_trips=obj.get("round_trips"),
            retries=obj.get("retries"),
            incremental_retry_times=tuple(obj.get("incremental_retry_times", ())),
        )
    except (KeyError, TypeError) as exc:
        raise HistoryFormatError(f"bad history record: {exc}") from exc


def write_history(records: Iterable[OpRecord], fp: IO[str]) -> None:
    for rec in records:
        fp.write(record_to_json(rec))
        fp.write("\n")


def read_history(fp: IO[str]) -> list[OpRecord]:
    return [record_from_json(line) for line in fp if line.strip()]


def trace_event_to_json(ev: TraceEvent) -> str:
    obj = {"v": SCHEMA_VERSION, "t": ev.t, "seq": ev.seq, "kind": ev.kind}
    for key, value in ev.detail:
        obj[key] = value
    return json.dumps(obj, separators=(",", ":"))


def write_trace(events: Iterable[TraceEvent], fp: IO[str]) -> None:
    for ev in events:
        fp.write(trace_event_to_json(ev))
        fp.write("\n")
