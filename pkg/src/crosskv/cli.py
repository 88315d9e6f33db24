"""Command-line entry point: ``crosskv serve | cli | launch | sim | explore``."""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
import time

from .commands import ReplyError, parse_script_line, render
from .common import ConfigInvalid


def _serve(args) -> int:
    from .config import ClusterConfig
    from .server import BindFailure, serve

    config = ClusterConfig.load(args.config).with_overrides(args.mode, args.replication, args.wal_dir)
    config.node(args.node)
    try:
        serve(config, args.node)
    except BindFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def _cli(args) -> int:
    from .remote import ConnectFailure, RespConnection

    try:
        conn = RespConnection.to(args.connect, args.timeout)
    except ConnectFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status = 0
    interactive = args.script is None and not args.command and sys.stdin.isatty()
    if args.command:
        lines = [" ".join(args.command)]
    elif args.script is not None and args.script != "-":
        with open(args.script, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = None
    with conn:
        source = lines if lines is not None else _stdin_lines(interactive)
        for line in source:
            try:
                cmd = parse_script_line(line)
            except ValueError as exc:
                print(f"error: {exc}", file=sys.stderr)
                status = 1
                continue
            if cmd is None:
                continue
            try:
                reply = conn.call(cmd)
            except (OSError, ValueError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return 2
            print(format_reply(reply), flush=True)
            if isinstance(reply, ReplyError):
                status = 1
    return status


def format_reply(reply) -> str:
    """Top-level arrays print one numbered element per line, like redis-cli."""
    if isinstance(reply, list):
        if not reply:
            return "(empty array)"
        return "\n".join(f"{i}) {render(r)}" for i, r in enumerate(reply, 1))
    return render(reply)


def _stdin_lines(interactive: bool):
    while True:
        if interactive:
            try:
                line = input("crosskv> ")
            except EOFError:
                return
        else:
            line = sys.stdin.readline()
            if not line:
                return
        yield line


def _launch(args) -> int:
    from .config import ClusterConfig

    config = ClusterConfig.load(args.config).with_overrides(args.mode, args.replication, args.wal_dir)
    extra = []
    for flag, value in (("--mode", args.mode), ("--replication", args.replication), ("--wal-dir", args.wal_dir)):
        if value is not None:
            extra += [flag, value]
    procs = [subprocess.Popen([sys.executable, "-m", "crosskv", "-" + "v" * args.verbose if args.verbose else "-q", "serve",
                               "--config", args.config, "--node", n.id] + extra)
             for n in config.nodes]
    print(f"started {len(procs)} nodes: " + ", ".join(f"{n.id}@{n.addr}" for n in config.nodes), flush=True)
    try:
        while all(p.poll() is None for p in procs):
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    for p in procs:
        if p.poll() is None:
            p.terminate()
    codes = [p.wait() for p in procs]
    return max(abs(c) for c in codes) and 1


def _sim(args) -> int:
    from .scenario import load_scenario
    from .sim.checkers import check_all
    from .sim.simnet import run

    sc = load_scenario(args.scenario)
    trace = run(sc.topology, sc.flags, sc.workload, sc.plan, trace_messages=args.trace)
    if args.trace:
        sys.stdout.write(trace.text())
    else:
        for client, cmd, reply in trace.replies():
            print(f"{client}: {cmd} -> {reply}")
    if args.digest:
        print(f"digest {trace.digest()}")
    bad = 0
    for result in check_all(trace):
        line = f"check {result.name}: {'ok' if result.ok else 'FAILED'}"
        print(line)
        for v in result.violations[:5]:
            print(f"  {v}")
        bad += not result.ok
    return 1 if bad else 0


def _explore(args) -> int:
    from .sim.explore import Space, explore

    space = Space()
    print(f"exploring {len(space)} schedules", flush=True)
    report = explore(space, limit=args.limit,
                     on_progress=lambda n: print(f"  {n} done", flush=True) if args.progress else None)
    print(f"schedules={report.total} failures={len(report.failures)} blocked={report.blocked} "
          f"termination_failures={len(report.termination_failures)} elapsed={report.elapsed:.1f}s")
    for s, results in report.failures[:10]:
        print(f"  {s}: " + ", ".join(r.name for r in results))
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crosskv", description="Partitioned key-value cluster with "
                                "atomic cross-node transactions.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    sub = p.add_subparsers(dest="cmd", required=True)

    def cluster_flags(sp):
        sp.add_argument("--config", required=True, help="cluster INI file")
        sp.add_argument("--mode", choices=("ha", "durable"), help="override the engine mode")
        sp.add_argument("--replication", choices=("sync", "async"), help="override the replication mode")
        sp.add_argument("--wal-dir", help="override the WAL directory (durable mode)")

    s = sub.add_parser("serve", help="run one node")
    cluster_flags(s)
    s.add_argument("--node", required=True, help="node id from the config")
    s.set_defaults(fn=_serve)

    s = sub.add_parser("launch", help="run every node of a config as child processes")
    cluster_flags(s)
    s.set_defaults(fn=_launch)

    s = sub.add_parser("cli", help="send commands to a node")
    s.add_argument("--connect", required=True, metavar="HOST:PORT")
    s.add_argument("--script", help="file with one command per line ('-' for stdin)")
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("command", nargs="*", help="a single command to run")
    s.set_defaults(fn=_cli)

    s = sub.add_parser("sim", help="run a scenario in the deterministic simulator")
    s.add_argument("scenario")
    s.add_argument("--trace", action="store_true", help="print the full event trace")
    s.add_argument("--digest", action="store_true", help="print the trace digest")
    s.set_defaults(fn=_sim)

    s = sub.add_parser("explore", help="check every schedule of the bounded two-transaction space")
    s.add_argument("--limit", type=int)
    s.add_argument("--progress", action="store_true")
    s.set_defaults(fn=_explore)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigInvalid as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
