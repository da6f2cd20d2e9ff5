"""Command-line entry point: store lifecycle, inspection, verification and the demo."""

from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence

from . import codec
from .demo import DemoConfig, build_registry, run_demo
from .errors import AlreadyInvalid, Conflicted, CorruptLog, NotFound, SmartStoreError
from .integrity import STRATEGIES, cascade_revalidate, revoke, verify_integrity
from .records import NominativeId, VersionedId
from .roles import role_of
from .schema import SUPER_USER
from .store import FileStore

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INTEGRITY = 2
EXIT_CONFLICT = 3
EXIT_CORRUPTION = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _store_path(spec: str) -> str:
    if spec in ("mem", "memory"):
        raise UsageError("an in-memory store does not outlive the process; pass file:PATH")
    return spec[len("file:"):] if spec.startswith("file:") else spec


def _open(spec: str, recovery: str = "recover") -> FileStore:
    path = _store_path(spec)
    if not os.path.exists(path):
        raise UsageError(f"no store at {path}; create one with 'init'")
    store = FileStore(path, recovery=recovery, registry=build_registry())
    if store.corruption is not None:
        print(f"warning: {store.corruption}; showing the readable prefix", file=sys.stderr)
    return store


def _acting_role(store: FileStore, name: str | None):
    return SUPER_USER if name in (None, SUPER_USER.role_id) else role_of(store, name)


def _origin_lines(rec) -> list[str]:
    o = rec.origin
    return [
        f"role             {o.role}",
        f"timestamp        {o.timestamp.isoformat()}",
        f"permission token {o.permission_token}",
        f"transaction id   {o.transaction_id}",
    ]


def cmd_demo(args) -> int:
    config = DemoConfig(
        duration=args.duration,
        sample_rate=args.rate,
        batch_size=args.batch,
        poll_period=args.poll_ms,
        seed=args.seed,
        output_path=args.out,
        mode=args.mode,
        store=args.store,
        clock=args.clock,
    )
    if config.store not in ("mem", "memory"):
        path = _store_path(config.store)
        if os.path.exists(path) and os.path.getsize(path) > 0:
            raise UsageError(f"{path} already holds a store; the demo needs a fresh one")
    report = run_demo(config)
    print(report.summary())
    return report.exit_code


def cmd_init(args) -> int:
    path = _store_path(args.store)
    if os.path.exists(path) and os.path.getsize(path) > 0:
        raise UsageError(f"{path} already exists")
    FileStore(path, registry=build_registry()).close()
    print(f"initialized empty store at {path}")
    return EXIT_OK


def cmd_history(args) -> int:
    with _open(args.store) as store:
        for rec in store.history(NominativeId.parse(args.id)):
            state = "valid" if rec.status.valid else f"invalid ({rec.status.reason})"
            kind = "conflict-set" if rec.is_conflict_set else rec.schema_name
            o = rec.origin
            print(f"{rec.id}\t{kind}\t{state}\t{o.role}\t{o.timestamp.isoformat()}\ttx {o.transaction_id}")
    return EXIT_OK


def cmd_show(args) -> int:
    with _open(args.store) as store:
        rec = store.get_record(VersionedId.parse(args.id))
        print(codec.debug_text(rec.to_document()))
    return EXIT_OK


def cmd_origin(args) -> int:
    with _open(args.store) as store:
        rec = store.get_record(VersionedId.parse(args.id))
        print("\n".join(_origin_lines(rec)))
    return EXIT_OK


def cmd_verify(args) -> int:
    path = _store_path(args.store)
    if not os.path.exists(path):
        raise UsageError(f"no store at {path}")
    with FileStore(path, recovery="quarantine", registry=build_registry()) as store:
        report = verify_integrity(store)
        for v in report.violations:
            print(v)
        print(report.summary())
        if store.corruption is not None:
            print(f"storage corruption: {store.corruption}")
            return EXIT_CORRUPTION
    return EXIT_OK if report.passed else EXIT_INTEGRITY


def cmd_revoke(args) -> int:
    with _open(args.store, recovery="raise") as store:
        new = revoke(store, _acting_role(store, args.role), VersionedId.parse(args.id), args.reason)
        print(f"revoked {args.id}; head is now {new}")
    return EXIT_OK


def cmd_cascade(args) -> int:
    seeds = [s for s in args.ids.split(",") if s]
    if not seeds:
        raise UsageError("no seed IDs given")
    with _open(args.store, recovery="raise") as store:
        outcome = cascade_revalidate(
            store,
            _acting_role(store, args.role),
            seeds,
            strategy=args.strategy,
            max_rounds=args.max_rounds,
            reason=args.reason,
        )
        print(f"order       {', '.join(map(str, outcome.order)) or '-'}")
        print(f"repaired    {', '.join(sorted(map(str, outcome.repaired))) or '-'}")
        print(f"invalidated {', '.join(sorted(map(str, outcome.invalidated))) or '-'}")
        print(f"unresolved  {', '.join(sorted(map(str, outcome.unresolved))) or '-'}")
        print(f"rounds used {outcome.rounds_used}{' (cyclic)' if outcome.cyclic else ''}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smartstore", description="Append-only object store with origin tracing.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("demo", help="run the heart-rate monitoring scenario")
    p.add_argument("--duration", type=float, default=10.0, help="seconds of (simulated) time")
    p.add_argument("--rate", type=float, default=10.0, help="samples per second")
    p.add_argument("--batch", type=int, default=50, help="samples per sensor transaction")
    p.add_argument("--poll-ms", type=int, default=500, help="liveness poll period")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["acid", "base"], default="acid")
    p.add_argument("--store", default="mem", help="mem or file:PATH")
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--clock", choices=["wall", "virtual"], default="wall")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("init", help="create an empty file store")
    p.add_argument("store")
    p.set_defaults(func=cmd_init)

    for name, func, arg, text in (
        ("history", cmd_history, "id", "list the versions of an object, newest first"),
        ("show", cmd_show, "id", "print one stored record"),
        ("origin", cmd_origin, "id", "who wrote a version, when, and under which transaction"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("store")
        p.add_argument(arg)
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="check every object's head for integrity")
    p.add_argument("store")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("revoke", help="append an invalidated copy of a version")
    p.add_argument("store")
    p.add_argument("id")
    p.add_argument("--reason", required=True)
    p.add_argument("--role", default=None, help="acting role (default: super-user)")
    p.set_defaults(func=cmd_revoke)

    p = sub.add_parser("cascade", help="revalidate everything depending on the given objects")
    p.add_argument("store")
    p.add_argument("ids", help="comma-separated nominative IDs")
    p.add_argument("--strategy", choices=list(STRATEGIES), default="lazy")
    p.add_argument("--max-rounds", type=int, default=3)
    p.add_argument("--reason", default="cascade")
    p.add_argument("--role", default=None, help="acting role (default: super-user)")
    p.set_defaults(func=cmd_cascade)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"smartstore: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorruptLog as exc:
        print(f"smartstore: storage corruption: {exc}", file=sys.stderr)
        return EXIT_CORRUPTION
    except Conflicted as exc:
        print(f"smartstore: conflict: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except (NotFound, AlreadyInvalid, NotImplementedError, ValueError) as exc:
        print(f"smartstore: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SmartStoreError as exc:
        print(f"smartstore: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
