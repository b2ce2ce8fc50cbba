"""Operator entry points.

Every subcommand is a thin wrapper over the library modules; no
policy or chain logic lives here. Exit codes are stable so scripts
can branch on them:

    0  success
    1  usage / malformed input
    2  chain verification failed
    3  read access forbidden
    4  request denied by policy
    5  miner unreachable
    6  target path already exists
    7  listen port busy
    8  bad provisioning or policy configuration

Flag values override environment variables (PICHAIN_CHAIN,
PICHAIN_MINER_ADDR), which override built-in defaults.
"""

from __future__ import annotations

import argparse
import errno
import os
import signal
import sys
import threading
import time
from typing import Optional

from . import chain as chain_mod
from . import policy as policy_mod
from . import sim as sim_mod
from .console import ParentConsole, SyncError
from .gateway import GatewayClient
from .miner import MinerServer
from .policy import Role
from .wire import NodeIdentity, RequestDenied, TransportError, load_identities

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY_FAILED = 2
EXIT_FORBIDDEN = 3
EXIT_DENIED = 4
EXIT_TRANSPORT = 5
EXIT_PATH_EXISTS = 6
EXIT_PORT_BUSY = 7
EXIT_BAD_PROVISIONING = 8

DEFAULT_MINER_ADDR = "127.0.0.1:9571"
DEFAULT_CHAIN = "chain.pichain"


def _denial_exit(reason: str) -> int:
    if reason == policy_mod.DenyReason.FORBIDDEN.value:
        return EXIT_FORBIDDEN
    if reason in ("Malformed", "Unsupported"):
        return EXIT_USAGE
    return EXIT_DENIED


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"miner address must be host:port, got {text!r}")
    return host, int(port)


def _pick_identity(
    identities: dict[str, NodeIdentity], role: Role, override: Optional[str]
) -> NodeIdentity:
    if override:
        if override not in identities:
            raise ValueError(f"no node {override!r} in provisioning file")
        return identities[override]
    matching = [n for n in identities.values() if n.role is role]
    if len(matching) != 1:
        raise ValueError(
            f"need exactly one {role.value} node in the provisioning file "
            f"(found {len(matching)}); use --identity to pick one"
        )
    return matching[0]


def _print_report_lines(reports, fmt: str) -> None:
    rows = [
        (r.imei, r.phone, f"{r.lat:.6f}", f"{r.lon:.6f}", r.time_of_day, r.date)
        for r in reports
    ]
    if fmt == "table":
        headers = ("imei", "phone", "lat", "lon", "time", "date")
        widths = [
            max(len(headers[i]), *(len(row[i]) for row in rows)) if rows else len(headers[i])
            for i in range(6)
        ]
        print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
        for row in rows:
            print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    else:
        for row in rows:
            print(" ".join(row))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pichain", description=__doc__.split("\n\n")[0])
    parser.add_argument(
        "--chain",
        default=os.environ.get("PICHAIN_CHAIN", DEFAULT_CHAIN),
        help="chain file path (env PICHAIN_CHAIN)",
    )
    parser.add_argument("--nodes", default="nodes.conf", help="node provisioning file")
    parser.add_argument("--policy", default="policy.conf", help="policy configuration file")
    parser.add_argument(
        "--miner-addr",
        default=os.environ.get("PICHAIN_MINER_ADDR", DEFAULT_MINER_ADDR),
        help="miner host:port (env PICHAIN_MINER_ADDR)",
    )
    parser.add_argument("--tz", default=None, help="home timezone (IANA name, default UTC)")
    parser.add_argument(
        "--format", choices=("table", "lines"), default="lines", help="query output format"
    )
    parser.add_argument("--identity", default=None, help="node id to act as")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a fresh chain file")
    p.add_argument("chain_id")

    sub.add_parser("run-miner", help="serve the chain until SIGTERM")

    p = sub.add_parser("run-gateway", help="read ingest records from stdin")
    p.add_argument("--spool", default=None, help="spool file for unreachable-miner backlog")
    p.add_argument("--retries", type=int, default=2, help="connect retries before spooling")

    p = sub.add_parser("register", help="register a device (parent only)")
    p.add_argument("imei")
    p.add_argument("phone")
    p.add_argument("--at", type=int, default=None, help="epoch seconds (default: now)")

    p = sub.add_parser("remove", help="remove a device (parent only)")
    p.add_argument("imei")
    p.add_argument("phone")
    p.add_argument("--at", type=int, default=None)

    p = sub.add_parser("query", help="read a device's reports (parent only)")
    p.add_argument("imei")
    p.add_argument("phone")
    p.add_argument("--from", dest="t0", type=int, default=None)
    p.add_argument("--to", dest="t1", type=int, default=None)

    sub.add_parser("verify", help="verify the chain file")

    p = sub.add_parser("simulate", help="run a scenario against an in-process topology")
    p.add_argument("scenario")

    p = sub.add_parser("watch", help="stream arrival notifications")
    p.add_argument("--idle", type=float, default=5.0, help="stop after this many quiet seconds")

    return parser


def cmd_init(args) -> int:
    if os.path.exists(args.chain):
        print(f"refusing to overwrite existing chain file: {args.chain}", file=sys.stderr)
        return EXIT_PATH_EXISTS
    try:
        chain = chain_mod.new_chain(args.chain_id)
        chain_mod.persist_chain(chain, args.chain)
    except chain_mod.ChainError as exc:
        print(f"init failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"initialized {args.chain} (chain id {args.chain_id}, height 0)")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        chain = chain_mod.load_chain(args.chain)
    except chain_mod.ChainLoadError as exc:
        index = "?" if exc.first_bad_index is None else exc.first_bad_index
        print(f"verification failed at index {index}: {exc}", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    print(f"ok height={chain.height}")
    return EXIT_OK


def _load_net(args, role: Role):
    identities = load_identities(args.nodes)
    identity = _pick_identity(identities, role, args.identity)
    host, port = _parse_addr(args.miner_addr)
    return identities, identity, host, port


def cmd_register(args, remove: bool = False) -> int:
    try:
        _, identity, host, port = _load_net(args, Role.PARENT)
    except (OSError, ValueError) as exc:
        print(f"provisioning error: {exc}", file=sys.stderr)
        return EXIT_BAD_PROVISIONING
    at = args.at if args.at is not None else int(time.time())
    console = ParentConsole(identity, host, port)
    try:
        console.connect()
        if remove:
            index = console.remove(args.imei, args.phone, at)
        else:
            index = console.register(args.imei, args.phone, at)
    except RequestDenied as exc:
        print(f"denied: {exc.reason}", file=sys.stderr)
        return _denial_exit(exc.reason)
    except TransportError as exc:
        print(f"transport: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    finally:
        console.close()
    verb = "removed" if remove else "registered"
    print(f"{verb} {args.imei} {args.phone} in block {index}")
    return EXIT_OK


def cmd_query(args) -> int:
    try:
        _, identity, host, port = _load_net(args, Role.PARENT)
    except (OSError, ValueError) as exc:
        print(f"provisioning error: {exc}", file=sys.stderr)
        return EXIT_BAD_PROVISIONING
    console = ParentConsole(
        identity,
        host,
        port,
        subscribe_notify=True,
        on_notify=lambda n: print(
            f"NOTIFY {n.imei} {n.phone} arrived home at {n.epoch} ({n.distance_m:.1f} m)"
        ),
    )
    try:
        console.connect()
        reports = console.query(args.imei, args.phone, args.t0, args.t1)
    except RequestDenied as exc:
        print(f"denied: {exc.reason}", file=sys.stderr)
        return _denial_exit(exc.reason)
    except TransportError as exc:
        print(f"transport: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    finally:
        console.close()
    _print_report_lines(reports, args.format)
    return EXIT_OK


def cmd_watch(args) -> int:
    try:
        _, identity, host, port = _load_net(args, Role.PARENT)
    except (OSError, ValueError) as exc:
        print(f"provisioning error: {exc}", file=sys.stderr)
        return EXIT_BAD_PROVISIONING
    console = ParentConsole(
        identity,
        host,
        port,
        subscribe_notify=True,
        on_notify=lambda n: print(
            f"NOTIFY {n.imei} {n.phone} arrived home at {n.epoch} ({n.distance_m:.1f} m)",
            flush=True,
        ),
    )
    try:
        console.connect()
        console.watch(idle_timeout=args.idle)
    except RequestDenied as exc:
        print(f"denied: {exc.reason}", file=sys.stderr)
        return _denial_exit(exc.reason)
    except TransportError as exc:
        print(f"transport: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    finally:
        console.close()
    return EXIT_OK


def _load_miner_parts(args):
    identities = load_identities(args.nodes)
    config = policy_mod.load_policy_config(args.policy)
    chain = chain_mod.load_chain(args.chain)
    return identities, config, chain


def cmd_run_miner(args) -> int:
    try:
        identities, config, chain = _load_miner_parts(args)
    except chain_mod.ChainLoadError as exc:
        print(f"chain error: {exc}", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    except (OSError, ValueError) as exc:
        print(f"provisioning error: {exc}", file=sys.stderr)
        return EXIT_BAD_PROVISIONING
    try:
        host, port = _parse_addr(args.miner_addr)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    server = MinerServer(chain, identities, config, chain_path=args.chain, host=host, port=port)
    try:
        host, port = server.start()
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            print(f"port busy: {args.miner_addr}", file=sys.stderr)
            return EXIT_PORT_BUSY
        print(f"cannot listen on {args.miner_addr}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    print(f"miner listening on {host}:{port} height={server.chain.height}", flush=True)
    stop.wait()
    server.stop()
    print(f"miner stopped height={server.chain.height}")
    return EXIT_OK


def cmd_run_gateway(args) -> int:
    try:
        identities = load_identities(args.nodes)
        identity = _pick_identity(identities, Role.GATEWAY, args.identity)
        host, port = _parse_addr(args.miner_addr)
    except (OSError, ValueError) as exc:
        print(f"provisioning error: {exc}", file=sys.stderr)
        return EXIT_BAD_PROVISIONING
    gw = GatewayClient(
        identity,
        host,
        port,
        spool_path=args.spool,
        tz=args.tz or "UTC",
        connect_retries=args.retries,
    )
    try:
        gw.connect()
    except TransportError:
        print("miner unreachable, spooling", file=sys.stderr)
    for line in sys.stdin:
        if not line.strip():
            continue
        status = gw.ingest_line(line, now=int(time.time()))
        print(status, flush=True)
    gw.close()
    print(
        f"gateway done accepted={gw.accepted} rejected={gw.rejected} "
        f"spooled={gw.spooled} parse_failures={gw.parse_failures}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        scenario = sim_mod.load_scenario(args.scenario)
    except (OSError, ValueError) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        identities, config, chain = _load_miner_parts(args)
        gw_identity = _pick_identity(identities, Role.GATEWAY, args.identity)
    except chain_mod.ChainLoadError as exc:
        print(f"chain error: {exc}", file=sys.stderr)
        return EXIT_VERIFY_FAILED
    except (OSError, ValueError) as exc:
        print(f"provisioning error: {exc}", file=sys.stderr)
        return EXIT_BAD_PROVISIONING
    server = MinerServer(chain, identities, config, chain_path=args.chain)
    try:
        host, port = server.start()
    except OSError as exc:
        print(f"cannot start embedded miner: {exc}", file=sys.stderr)
        return EXIT_PORT_BUSY
    tz = args.tz or scenario.tz or "UTC"
    gw = GatewayClient(gw_identity, host, port, tz=tz)
    try:
        gw.connect()
        report = sim_mod.run_scenario(
            list(scenario.phones),
            scenario.blackspots,
            sink=gw.ingest_line,
            duration_s=scenario.duration_s,
            start_epoch=scenario.start_epoch,
            tz=tz,
            seed=scenario.seed,
        )
    except TransportError as exc:
        print(f"transport: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    finally:
        gw.close()
        server.stop()
    sys.stdout.write(report.render())
    print(f"chain height={server.chain.height} rejected={server.counters['rejected_submissions']}")
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "init": cmd_init,
        "verify": cmd_verify,
        "register": lambda a: cmd_register(a, remove=False),
        "remove": lambda a: cmd_register(a, remove=True),
        "query": cmd_query,
        "watch": cmd_watch,
        "run-miner": cmd_run_miner,
        "run-gateway": cmd_run_gateway,
        "simulate": cmd_simulate,
    }
    try:
        return handlers[args.command](args)
    except SyncError as exc:
        print(f"sync failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY_FAILED


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
