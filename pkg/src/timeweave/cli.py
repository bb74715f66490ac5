"""Command-line entry point: ``timeweave <command> ...``.

Every command prints line-delimited records (``--format records``, JSON)
or ``key=value`` lines (``--format text``).  Exit codes: 0 success,
1 verification failure or inconclusive result, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import math
import random
import sys
import time
from fractions import Fraction
from pathlib import Path

from .canon import DecodeError, ServiceId, SigningKey, Suite
from .entangle import (
    BUNDLE, EVENT_PROOF, PRECEDENCE, EventProof, PrecedenceEvidence, TemporalMapping, map_event,
    map_time, message_kind, transfer_mapping, verify_bundle,
)
from .node import CONFIG_FILE, Node, NodeConfig
from .rbbtree import RbbConfig, RbbTree
from .simnet import COUNTERS, DEFAULT_RATES, Scenario, ScenarioError, Simulation, load_sweep
from .skiplist import SkipList

OK, FAILED, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class Output:
    def __init__(self, fmt: str, stream=None):
        self.fmt = fmt
        self.stream = stream or sys.stdout

    def __call__(self, **record) -> None:
        if self.fmt == "records":
            line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        else:
            line = " ".join(f"{k}={_text(v)}" for k, v in record.items())
        print(line, file=self.stream)


def _text(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_text(v) for v in value)
    return "-" if value is None else str(value)


def _hex(data: str) -> bytes:
    try:
        return bytes.fromhex(data)
    except ValueError as exc:
        raise UsageError(f"not hex: {data!r}") from exc


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _suite(args) -> Suite:
    try:
        return Suite.from_config(_load_config(args.config))
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


@contextlib.contextmanager
def _open_store(args):
    """Open the node store under an advisory exclusive lock."""
    if args.store is None:
        raise UsageError("--store is required")
    store = Path(args.store)
    if not (store / CONFIG_FILE).exists():
        raise UsageError(f"no node at {store}")
    with open(store / ".lock", "w") as lock:
        try:
            fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            raise UsageError(f"store {store} is in use") from exc
        node = Node.open(store)
        try:
            yield node
        finally:
            node.close()


def _peer(node: Node, ref: str) -> ServiceId:
    for view in node.views.values():
        if view.peer.name == ref or view.peer.id.hex() == ref:
            return view.peer
    raise UsageError(f"unknown peer {ref!r}")


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(str(exc)) from exc


def _mapping_record(mapping) -> dict:
    if not isinstance(mapping, TemporalMapping):
        return {"ok": False, "reason": mapping.reason,
                "gap": None if mapping.gap is None else list(mapping.gap)}
    return {"ok": True, "peer": mapping.peer.short(), "step": mapping.step,
            "interval": list(mapping.interval), "receipt_step": mapping.receipt_step,
            "thread_step": mapping.thread_step, "path": mapping.path.indices}


# -- node commands ------------------------------------------------------------------

def cmd_init(args, out: Output) -> int:
    if args.store is None:
        raise UsageError("--store is required")
    raw = _load_config(args.config)
    name = args.name or raw.get("name")
    if not name:
        raise UsageError("a node name is required (--name or config)")
    suite = _suite(args)
    key = (SigningKey.from_seed(f"{args.seed}/{name}".encode(), suite.sig_scheme)
           if args.seed is not None else SigningKey.generate(suite.sig_scheme))
    peers = [ServiceId(_hex(p["id"]), p.get("name", "")) for p in raw.get("peers", [])]
    for spec in args.peer or []:
        pname, _, pid = spec.partition("=")
        peers.append(ServiceId(_hex(pid), pname))
    emit = raw.get("emit_steps")
    config = NodeConfig(name, args.interval or raw.get("interval", 100),
                        None if emit is None else frozenset(emit), RbbConfig(**raw.get("rbb", {})))
    try:
        node = Node.create(args.store, key, config, peers, suite, fsync=args.fsync)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from exc
    out(name=name, id=node.sid.id.hex(), store=str(args.store), peers=len(node.peers))
    node.close()
    return OK


def cmd_add_peer(args, out: Output) -> int:
    with _open_store(args) as node:
        for spec in args.peers:
            name, sep, pid = spec.partition("=")
            if not sep:
                raise UsageError(f"expected NAME=IDHEX, got {spec!r}")
            added = node.add_peer(ServiceId(_hex(pid), name))
            out(peer=name, id=pid, added=added)
    return OK


def cmd_submit(args, out: Output) -> int:
    if (args.digest is None) == (args.file is None):
        raise UsageError("give either a hex digest or --file")
    with _open_store(args) as node:
        digest = node.suite.hash(_read(args.file)) if args.file else _hex(args.digest)
        if not node.suite.is_digest(digest):
            raise UsageError(f"event digest must be {node.suite.width} octets")
        node.submit_event(digest)
        out(event=digest.hex(), queued_for=node.timeline.step + 1)
    return OK


def cmd_tick(args, out: Output) -> int:
    inbound = [_read(p) for p in args.inbox or []]
    with _open_store(args) as node:
        messages, record = node.step(inbound)
        outdir = Path(args.outbox) if args.outbox else None
        if outdir is not None:
            outdir.mkdir(parents=True, exist_ok=True)
        for n, (dest, data) in enumerate(messages):
            if outdir is not None:
                (outdir / f"{record.step:08d}-{dest.short()}-{n}.msg").write_bytes(data)
        out(step=record.step, head=node.timeline.head.hex(), events=record.events,
            threads_accepted=record.threads_accepted, receipts_accepted=record.receipts_accepted,
            sent=len(messages), rejects=[f"{k}:{r}" for k, r in record.rejects])
    return OK


def cmd_prove_precedence(args, out: Output) -> int:
    with _open_store(args) as node:
        tl = node.timeline
        if not 0 < args.i <= args.j <= tl.step:
            raise UsageError(f"need 0 < i <= j <= {tl.step}")
        evidence = PrecedenceEvidence(tl.mark(args.i), tl.mark(args.j), tl.prove_precedence(args.i, args.j))
    Path(args.out).write_bytes(evidence.to_bytes())
    out(kind="precedence", start=args.i, end=args.j, hops=len(evidence.proof.hops),
        digests=evidence.proof.digest_count, file=args.out)
    return OK


def cmd_prove_existence(args, out: Output) -> int:
    with _open_store(args) as node:
        proof = node.event_proof(_hex(args.digest))
    if proof is None:
        out(ok=False, reason="not-committed", event=args.digest)
        return FAILED
    Path(args.out).write_bytes(proof.to_bytes())
    out(kind="event", event=args.digest, step=proof.step, file=args.out)
    return OK


def cmd_verify(args, out: Output) -> int:
    data = _read(args.file)
    suite = _suite(args)
    try:
        kind = message_kind(data)
        if kind == PRECEDENCE:
            ev = PrecedenceEvidence.from_bytes(data)
            ok = ev.verify(suite)
            out(ok=ok, kind="precedence", owner=ev.start.owner.id.hex(), start=ev.start.step,
                end=ev.end.step, reason=None if ok else "broken-proof")
        elif kind == EVENT_PROOF:
            ev = EventProof.from_bytes(data)
            ok = ev.verify(suite)
            out(ok=ok, kind="event", owner=ev.mark.owner.id.hex(), event=ev.event.hex(),
                step=ev.step, reason=None if ok else "broken-proof")
        elif kind == BUNDLE:
            result = verify_bundle(data, suite)
            ok = result.ok
            out(kind="bundle", **result.to_record())
        else:
            out(ok=False, reason="unsupported-message-type")
            return FAILED
    except DecodeError as exc:
        out(ok=False, reason=f"malformed: {exc}")
        return FAILED
    return OK if ok else FAILED


def cmd_map_time(args, out: Output) -> int:
    with _open_store(args) as node:
        mapping = map_time(node, _peer(node, args.peer), args.step)
        out(**_mapping_record(mapping))
    return OK if isinstance(mapping, TemporalMapping) else FAILED


def cmd_export_bundle(args, out: Output) -> int:
    event = None
    if args.event_proof:
        try:
            event = EventProof.from_bytes(_read(args.event_proof))
        except DecodeError as exc:
            out(ok=False, reason=f"malformed: {exc}")
            return FAILED
    with _open_store(args) as node:
        peer = _peer(node, args.peer)
        if event is not None:
            step, mapping = event.step, map_event(node, peer, event)
        elif args.step is not None:
            step, mapping = args.step, map_time(node, peer, args.step)
        else:
            raise UsageError("give a step or --event-proof")
        if not isinstance(mapping, TemporalMapping):
            out(**_mapping_record(mapping))
            return FAILED
        data = transfer_mapping(node, mapping, event)
    Path(args.out).write_bytes(data)
    out(ok=True, kind="bundle", step=step, interval=list(mapping.interval), file=args.out,
        size=len(data))
    return OK


def cmd_verify_bundle(args, out: Output) -> int:
    result = verify_bundle(_read(args.file), _suite(args))
    out(**result.to_record())
    return OK if result.ok else FAILED


# -- simulation and benchmarks ---------------------------------------------------------

def cmd_sim_run(args, out: Output) -> int:
    try:
        raw = json.loads(_read(args.scenario))
        if args.seed is not None:
            raw["seed"] = args.seed
        scenario = Scenario.from_dict(raw)
    except (ValueError, ScenarioError) as exc:
        raise UsageError(str(exc)) from exc
    sim = Simulation(scenario, args.sim_store, args.workers)
    try:
        report = sim.run()
    finally:
        sim.close()
    if args.transcript:
        Path(args.transcript).write_text("".join(line + "\n" for line in sim.transcript))
    else:
        for line in sim.transcript:
            print(line, file=out.stream)
    out(event="report", **report.to_dict())
    return OK if report.ok else FAILED


def _sizes(limit: int, start: int = 16) -> list[int]:
    sizes, n = [], start
    while n <= limit:
        sizes.append(n)
        n *= 4
    return sizes or [limit]


def bench_skiplist(args, out: Output) -> int:
    rng = random.Random(args.seed or 0)
    suite = Suite(_suite(args).algorithm)
    limit = int(float(args.max))
    store = SkipList.memory(suite)
    built = 0
    for n in _sizes(limit):
        t0, batch = time.perf_counter(), n - built
        while built < n:
            store.append(suite.hash(built.to_bytes(8, "big")))
            built += 1
        append_us = (time.perf_counter() - t0) / batch * 1e6
        trials = [(rng.randint(1, n), rng.randint(1, n)) for _ in range(args.trials)]
        t0 = time.perf_counter()
        proofs = [store.prove_precedence(min(a, b), max(a, b)) for a, b in trials]
        search_us = (time.perf_counter() - t0) / len(trials) * 1e6
        bound = math.ceil(math.log2(n)) ** 2
        out(n=n, metric="append_us", value=round(append_us, 3))
        out(n=n, metric="prove_us", value=round(search_us, 3))
        out(n=n, metric="proof_digests_max", value=max(p.digest_count for p in proofs))
        out(n=n, metric="proof_digests_bound", value=bound)
    # proof size against distance, from the last size
    n = built
    for distance in _sizes(n - 1, 1):
        i = rng.randint(1, n - distance)
        out(n=distance, metric="proof_digests_vs_distance",
            value=store.prove_precedence(i, i + distance).digest_count)
    out(n=10 ** 9, metric="formula_octets_160bit", value=math.ceil(math.log2(10 ** 9)) ** 2 * 20)
    return OK


def bench_rbbtree(args, out: Output) -> int:
    rng = random.Random(args.seed or 0)
    suite = _suite(args)
    limit = int(float(args.max))
    for snap_size in args.snapshot_size:
        tree = RbbTree.memory(Suite(suite.algorithm), RbbConfig(order=args.order))
        inserted = 0
        for n in _sizes(limit, 256):
            t0 = time.perf_counter()
            batch = n - inserted
            while inserted < n:
                tree.insert(suite.hash(rng.randbytes(16)), b"v")
                inserted += 1
                if inserted % snap_size == 0:
                    tree.close_snapshot()
            insert_us = (time.perf_counter() - t0) / batch * 1e6
            tree.close_snapshot()
            snap = len(tree)
            keys = [suite.hash(rng.randbytes(16)) for _ in range(args.trials)]
            t0 = time.perf_counter()
            proofs = [tree.prove(snap, k) for k in keys]
            search_us = (time.perf_counter() - t0) / len(keys) * 1e6
            rec = {"snapshot_size": snap_size}
            out(n=n, metric="insert_us", value=round(insert_us, 3), **rec)
            out(n=n, metric="prove_us", value=round(search_us, 3), **rec)
            out(n=n, metric="proof_digests_max", value=max(p.digest_count for p in proofs), **rec)
            out(n=n, metric="depth", value=tree.depth(snap), **rec)
    return OK


def bench_timeweave(args, out: Output) -> int:
    rates = [Fraction(r) for r in args.rates] if args.rates else list(DEFAULT_RATES)
    points, fits = load_sweep(rates, seed=args.seed or 0, min_steps=args.steps,
                              hash_name=_suite(args).algorithm)
    for p in points:
        for metric in COUNTERS:
            out(n=p["rate"], metric=metric, value=p[metric])
    for metric, (slope, intercept, r2) in fits.items():
        out(n=None, metric=f"{metric}_fit", value=[slope, intercept, r2])
    return OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--store", help="node store directory")
    common.add_argument("--config", help="JSON config (node settings, hash and signature scheme)")
    common.add_argument("--format", choices=("text", "records"), default="records")
    common.add_argument("--seed", type=int, default=None)

    parser = argparse.ArgumentParser(prog="timeweave", description="Entangled secure timelines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="create a node store")
    p.add_argument("--name")
    p.add_argument("--interval", type=int)
    p.add_argument("--peer", action="append", metavar="NAME=IDHEX")
    p.add_argument("--fsync", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("add-peer", parents=[common], help="register peers with a node")
    p.add_argument("peers", nargs="+", metavar="NAME=IDHEX")
    p.set_defaults(func=cmd_add_peer)

    p = sub.add_parser("submit", parents=[common], help="queue an event digest")
    p.add_argument("digest", nargs="?")
    p.add_argument("--file", help="hash this file and submit the digest")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("tick", parents=[common], help="run one timeline step")
    p.add_argument("--inbox", nargs="*", help="inbound message files")
    p.add_argument("--outbox", help="directory for outbound messages")
    p.set_defaults(func=cmd_tick)

    p = sub.add_parser("prove-precedence", parents=[common], help="export a precedence proof")
    p.add_argument("i", type=int)
    p.add_argument("j", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prove_precedence)

    p = sub.add_parser("prove-existence", parents=[common], help="export an event proof")
    p.add_argument("digest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prove_existence)

    p = sub.add_parser("verify", parents=[common], help="check a proof file")
    p.add_argument("file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("map-time", parents=[common], help="map a peer step onto the local timeline")
    p.add_argument("peer")
    p.add_argument("step", type=int)
    p.set_defaults(func=cmd_map_time)

    p = sub.add_parser("export-bundle", parents=[common], help="write a portable mapping bundle")
    p.add_argument("peer")
    p.add_argument("step", type=int, nargs="?")
    p.add_argument("--event-proof", help="peer event proof to include")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_bundle)

    p = sub.add_parser("verify-bundle", parents=[common], help="check a mapping bundle")
    p.add_argument("file")
    p.set_defaults(func=cmd_verify_bundle)

    sim = sub.add_parser("sim", help="simulations").add_subparsers(dest="sim_command", required=True)
    p = sim.add_parser("run", parents=[common], help="run a JSON scenario")
    p.add_argument("scenario")
    p.add_argument("--transcript", help="write the transcript here instead of stdout")
    p.add_argument("--sim-store", help="back the nodes with files under this directory")
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_sim_run)

    bench = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="bench_command", required=True)
    p = bench.add_parser("skiplist", parents=[common])
    p.add_argument("--max", default="65536")
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=bench_skiplist)
    p = bench.add_parser("rbbtree", parents=[common])
    p.add_argument("--max", default="16384")
    p.add_argument("--snapshot-size", type=int, nargs="+", default=[100, 1000])
    p.add_argument("--order", type=int, default=None)
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=bench_rbbtree)
    p = bench.add_parser("timeweave", parents=[common])
    p.add_argument("--rates", nargs="*", help="threads per step, e.g. 1/600 1/60 1 4")
    p.add_argument("--steps", type=int, default=120)
    p.set_defaults(func=bench_timeweave)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Output(args.format)
    try:
        return args.func(args, out)
    except UsageError as exc:
        print(f"timeweave: error: {exc}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
