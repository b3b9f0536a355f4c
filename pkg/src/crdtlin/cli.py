"""Command-line entry points.

Subcommands: ``replica`` (run a daemon), ``client`` (one operation against
a running replica), ``sim`` (deterministic simulation runs and seed
sweeps), ``check`` (safety and linearizability verdicts over a recorded
history), ``bench`` (round-trip/latency CSV, simulated or live), and
``summary`` (digest a bench CSV).

Exit codes: 0 success, 1 a check or operation failed, 2 usage or
configuration problem, 3 cannot reach the cluster.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from .bench import bench_live, bench_sim, read_bench_csv, summarize, write_bench_csv
from .checker import (
    PreconditionFailed,
    UnsupportedInput,
    check_all,
    linearize,
)
from .history import HistoryFormatError, read_history
from .service import (
    ClusterConfigError,
    ReplicaClient,
    ReplicaDaemon,
    RequestFailed,
    load_cluster_config,
)
from .sim import ConfigError, SimConfig, Simulation

log = logging.getLogger(__name__)

_USAGE_ERROR = 2
_CHECK_FAILED = 1
_CONNECT_ERROR = 3


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"endpoint {text!r} is not host:port")
    try:
        return host, int(port)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}") from exc


def _parse_crash(text: str) -> tuple[int, int]:
    try:
        replica, t = text.split("@")
        return int(replica), int(t)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"crash spec {text!r} is not REPLICA@TICK") from exc


def _parse_partition(text: str) -> tuple[tuple[tuple[int, ...], ...], int, int]:
    # e.g. "1|2,3@50..200": groups split by |, members by comma
    try:
        groups_text, window = text.split("@")
        start, end = window.split("..")
        groups = tuple(
            tuple(int(m) for m in group.split(",")) for group in groups_text.split("|")
        )
        return groups, int(start), int(end)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"partition spec {text!r} is not G1|G2@START..END"
        ) from exc


def _parse_seeds(text: str) -> range:
    try:
        if ".." in text:
            first, last = text.split("..")
            return range(int(first), int(last) + 1)
        single = int(text)
        return range(single, single + 1)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed range {text!r} is not A..B") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crdtlin",
        description="Replicated CRDTs with linearizable queries: daemon, sim, checker, bench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replica", help="run one replica daemon until interrupted")
    p.add_argument("config", type=Path, help="cluster config JSON")
    p.add_argument("id", type=int, help="replica id from the config")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("client", help="run one operation against a replica")
    p.add_argument("endpoint", type=_parse_endpoint, help="host:port of any replica")
    p.add_argument(
        "op", choices=["incr", "get", "add", "contains", "elements"], help="operation"
    )
    p.add_argument("element", nargs="?", help="element for add/contains (utf-8)")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("sim", help="run the deterministic simulator")
    p.add_argument("--replicas", type=int, default=3)
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--ops", type=int, default=25, help="operations per client")
    p.add_argument("--mix", type=float, default=0.5, help="update fraction in [0,1]")
    p.add_argument("--crdt", choices=["gcounter", "gset"], default="gcounter")
    p.add_argument("--drop", type=float, default=0.0)
    p.add_argument("--duplicate", type=float, default=0.0)
    p.add_argument("--delay-min", type=int, default=1)
    p.add_argument("--delay-max", type=int, default=1)
    p.add_argument("--timeout-ticks", type=int, default=None)
    p.add_argument("--max-retries", type=int, default=50)
    p.add_argument("--batching", action="store_true")
    p.add_argument("--no-instrument", action="store_true")
    p.add_argument("--no-invariants", action="store_true")
    p.add_argument("--no-trace", action="store_true")
    p.add_argument("--horizon", type=int, default=1_000_000, help="virtual time limit")
    p.add_argument("--crash", type=_parse_crash, action="append", default=[],
                   metavar="REPLICA@TICK")
    p.add_argument("--partition", type=_parse_partition, action="append", default=[],
                   metavar="G1|G2@START..END")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=_parse_seeds, default=None, metavar="A..B",
                   help="sweep mode: one metrics row per seed")
    p.add_argument("--out", type=Path, default=None, help="output directory")

    p = sub.add_parser("check", help="verify a recorded history")
    p.add_argument("history", type=Path, help="history JSONL file")
    p.add_argument("--mode", choices=["gla", "lin", "both"], default="both")

    p = sub.add_parser("bench", help="measure round trips and latency")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--sim", action="store_true", help="run against the simulator")
    source.add_argument("--config", type=Path, help="cluster config JSON of a live cluster")
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--mix", type=float, default=0.1, help="update fraction in [0,1]")
    p.add_argument("--batching", choices=["on", "off"], default="off",
                   help="sim mode only; a live cluster fixes this in its config")
    p.add_argument("--ops", type=int, default=200, help="operations per client")
    p.add_argument("--duration", type=float, default=None,
                   help="cap: virtual ticks (sim) or seconds (live)")
    p.add_argument("--replicas", type=int, default=3, help="sim mode only")
    p.add_argument("--drop", type=float, default=0.0, help="sim mode only")
    p.add_argument("--delay-max", type=int, default=1, help="sim mode only")
    p.add_argument("--crdt", choices=["gcounter", "gset"], default="gcounter",
                   help="sim mode only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="CSV path (default stdout)")

    p = sub.add_parser("summary", help="digest a bench CSV")
    p.add_argument("csv", type=Path)

    return parser


# ------------------------------------------------------------------ commands


def _cmd_replica(args) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    config = load_cluster_config(args.config)
    daemon = ReplicaDaemon(config, args.id)
    try:
        asyncio.run(daemon.serve())
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_client(args) -> int:
    if args.op in ("add", "contains") and args.element is None:
        print(f"error: {args.op} needs an element", file=sys.stderr)
        return _USAGE_ERROR
    host, port = args.endpoint
    element = args.element.encode() if args.element is not None else None
    with ReplicaClient(host, port, timeout=args.timeout, connect_retries=3) as client:
        if args.op == "incr":
            outcome = client.increment()
            payload = {
                "tag": list(outcome.tag),
                "round_trips": outcome.round_trips,
                "retries": outcome.retries,
            }
            print(json.dumps(payload) if args.json else f"ok tag={outcome.tag}")
            return 0
        if args.op == "add":
            outcome = client.add(element)
            payload = {
                "tag": list(outcome.tag),
                "round_trips": outcome.round_trips,
                "retries": outcome.retries,
            }
            print(json.dumps(payload) if args.json else f"ok tag={outcome.tag}")
            return 0
        if args.op == "get":
            outcome = client.value()
        elif args.op == "contains":
            outcome = client.contains(element)
        else:
            outcome = client.elements()
        if args.json:
            result = outcome.result
            if isinstance(result, tuple):
                result = [e.decode("utf-8", "backslashreplace") for e in result]
            print(
                json.dumps(
                    {
                        "result": result,
                        "round_trips": outcome.round_trips,
                        "retries": outcome.retries,
                        "learned_tags": [list(t) for t in outcome.learned_tags]
                        if outcome.learned_tags is not None
                        else None,
                    }
                )
            )
        elif args.op == "elements":
            for item in outcome.result:
                print(item.decode("utf-8", "backslashreplace"))
        elif args.op == "contains":
            print("true" if outcome.result else "false")
        else:
            print(outcome.result)
        return 0


def _sim_config(args, seed: int, record_trace: bool) -> SimConfig:
    return SimConfig(
        n_replicas=args.replicas,
        n_clients=args.clients,
        crdt=args.crdt,
        update_fraction=args.mix,
        ops_per_client=args.ops,
        drop_probability=args.drop,
        duplicate_probability=args.duplicate,
        delay_min=args.delay_min,
        delay_max=args.delay_max,
        timeout_ticks=args.timeout_ticks,
        max_retries=args.max_retries if args.max_retries >= 0 else None,
        batching=args.batching,
        instrument=not args.no_instrument,
        check_invariants=not args.no_invariants,
        record_trace=record_trace,
        seed=seed,
        max_virtual_time=args.horizon,
        crash_schedule=tuple(args.crash),
        partition_schedule=tuple(args.partition),
    )


_SWEEP_COLUMNS = (
    "seed",
    "update_ok",
    "update_failed",
    "query_ok",
    "query_failed",
    "pending",
    "final_time",
    "quiescent",
)


def _cmd_sim(args) -> int:
    if args.seeds is not None:
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            out = open(args.out / "sweep.csv", "w")
        else:
            out = sys.stdout
        try:
            out.write(",".join(_SWEEP_COLUMNS) + "\n")
            for seed in args.seeds:
                result = Simulation(_sim_config(args, seed, record_trace=False)).run()
                m = result.metrics
                row = (
                    seed,
                    m.ops[("update", "ok")],
                    m.ops[("update", "failed")],
                    m.ops[("query", "ok")],
                    m.ops[("query", "failed")],
                    m.stalled(),
                    m.final_time,
                    int(m.quiescent),
                )
                out.write(",".join(str(v) for v in row) + "\n")
        finally:
            if out is not sys.stdout:
                out.close()
        return 0

    result = Simulation(_sim_config(args, args.seed, record_trace=not args.no_trace)).run()
    metrics = result.metrics
    if args.out:
        result.write_outputs(args.out)
    else:
        metrics.write_csv(sys.stdout)
    ok = metrics.ops[("update", "ok")] + metrics.ops[("query", "ok")]
    print(
        f"completed {ok} ops in {metrics.final_time} ticks"
        f" ({'quiescent' if metrics.quiescent else 'horizon hit'},"
        f" {metrics.stalled()} stalled)",
        file=sys.stderr,
    )
    return 0


def _cmd_check(args) -> int:
    with open(args.history) as fp:
        history = read_history(fp)
    failed = False
    if args.mode in ("gla", "both"):
        for name, verdict in check_all(history).items():
            if verdict.passed:
                print(f"{name}: pass")
            else:
                failed = True
                print(f"{name}: FAIL")
                print(
                    json.dumps(
                        {
                            "condition": name,
                            "op_ids": list(verdict.witness.op_ids),
                            "message": verdict.witness.message,
                        }
                    )
                )
    if args.mode in ("lin", "both") and not failed:
        try:
            witness = linearize(history)
        except PreconditionFailed as exc:
            failed = True
            print("linearizable: FAIL")
            print(
                json.dumps(
                    {
                        "condition": exc.verdict.condition,
                        "op_ids": list(exc.verdict.witness.op_ids),
                        "message": exc.verdict.witness.message,
                    }
                )
            )
        else:
            print(f"linearizable: pass ({len(witness.order)} operations ordered)")
    return _CHECK_FAILED if failed else 0


def _cmd_bench(args) -> int:
    if args.sim:
        rows = bench_sim(
            clients=args.clients,
            mix=args.mix,
            batching=args.batching == "on",
            ops_per_client=args.ops,
            n_replicas=args.replicas,
            drop=args.drop,
            delay_max=args.delay_max,
            duration=int(args.duration) if args.duration is not None else None,
            seed=args.seed,
            crdt=args.crdt,
        )
    else:
        config = load_cluster_config(args.config)
        rows = bench_live(
            config,
            clients=args.clients,
            mix=args.mix,
            ops_per_client=args.ops,
            duration=args.duration,
            seed=args.seed,
        )
    if args.out:
        with open(args.out, "w") as fp:
            write_bench_csv(rows, fp)
    else:
        write_bench_csv(rows, sys.stdout)
    return 0


def _cmd_summary(args) -> int:
    with open(args.csv) as fp:
        rows = read_bench_csv(fp)
    stats = summarize(rows)
    for kind in ("update", "query"):
        entry = stats[kind]
        total = entry["ok"] + entry["failed"] + entry["pending"]
        if total == 0:
            continue
        line = f"{kind}: {entry['ok']} ok, {entry['failed']} failed, {entry['pending']} pending"
        if "p50" in entry:
            line += f" | latency p50 {entry['p50']:g} p95 {entry['p95']:g}"
        if entry["round_trips"]:
            hist = " ".join(f"{n}rt×{c}" for n, c in entry["round_trips"].items())
            line += f" | {hist}"
        print(line)
    return 0


_COMMANDS = {
    "replica": _cmd_replica,
    "client": _cmd_client,
    "sim": _cmd_sim,
    "check": _cmd_check,
    "bench": _cmd_bench,
    "summary": _cmd_summary,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (
        ClusterConfigError,
        ConfigError,
        HistoryFormatError,
        UnsupportedInput,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_ERROR
    except RequestFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _CHECK_FAILED
    except ConnectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _CONNECT_ERROR


if __name__ == "__main__":
    sys.exit(main())
