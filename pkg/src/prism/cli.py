"""Command-line entry points.

``prism serve --config FILE``            run one instance over HTTP
``prism admin --server URL ... CMD``     drive a running instance's API
``prism scenario run FILE``              execute a declarative scenario
``prism bench {chain,rules,fanout,capacity,geo} --out DIR``
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import urllib.parse
import urllib.request
from pathlib import Path

from . import bench as bench_mod
from .gateway import Gateway, PrismHttpServer
from .instance import AsnInstance, InstanceConfig
from .scenario import ScenarioRunner

logger = logging.getLogger(__name__)


def _serve(args: argparse.Namespace) -> int:
    config = InstanceConfig.from_file(args.config)
    instance = AsnInstance(config)
    server = PrismHttpServer(Gateway(instance))
    print(f"{config.asn_id} listening on {server.url} (data: {config.data_dir})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        instance.close()
    return 0


# --- admin client ------------------------------------------------------------------

def _api(server: str, method: str, path: str, payload: dict | None,
         token: str | None = None) -> dict:
    body = json.dumps(payload).encode() if payload is not None else None
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    request = urllib.request.Request(server.rstrip("/") + path, data=body,
                                     headers=headers, method=method)
    try:
        with urllib.request.urlopen(request, timeout=30) as response:
            return json.loads(response.read().decode())
    except urllib.error.HTTPError as err:
        detail = err.read().decode()
        raise SystemExit(f"{method} {path} -> {err.code}: {detail}")


def _admin(args: argparse.Namespace) -> int:
    session = _api(args.server, "POST", "/api/v1/session",
                   {"user": args.user, "password": args.password})
    token = session["token"]
    cmd = args.admin_cmd

    if cmd == "register-user":
        out = _api(args.server, "POST", "/api/v1/users",
                   {"name": args.name, "display_name": args.display_name,
                    "password": args.user_password}, token)
    elif cmd == "create-circle":
        out = _api(args.server, "POST", "/api/v1/circles",
                   {"kind": args.kind, "name": args.name, "parent": args.parent,
                    "policies": args.policies}, token)
    elif cmd == "create-role":
        privileges = [line.split("=") for line in args.grant]
        out = _api(args.server, "POST", "/api/v1/roles",
                   {"name": args.name,
                    "privileges": [[a, e] for a, e in privileges],
                    "parent": args.parent}, token)
    elif cmd == "assign-role":
        out = _api(args.server, "POST", "/api/v1/roles/assign",
                   {"user": args.target_user, "role": args.role}, token)
    elif cmd == "set-privileges":
        text = Path(args.file).read_text() if args.file else sys.stdin.read()
        out = _api(args.server, "POST", "/api/v1/privileges",
                   {"assignments": text}, token)
    elif cmd == "set-policies":
        text = Path(args.file).read_text() if args.file else sys.stdin.read()
        out = _api(args.server, "POST",
                   f"/api/v1/circles/{urllib.parse.quote(args.circle, safe='')}/policies",
                   {"text": text}, token)
    elif cmd == "get-policies":
        out = _api(args.server, "GET",
                   f"/api/v1/circles/{urllib.parse.quote(args.circle, safe='')}/policies",
                   None, token)
    elif cmd == "add-member":
        out = _api(args.server, "POST",
                   f"/api/v1/circles/{urllib.parse.quote(args.circle, safe='')}/members",
                   {"user": args.target_user}, token)
    elif cmd == "follow":
        out = _api(args.server, "POST", "/api/v1/follow",
                   {"target": args.target}, token)
    elif cmd == "post":
        out = _api(args.server, "POST", "/api/v1/messages",
                   {"content": args.content, "tags": args.tag,
                    "conflicts": args.conflict}, token)
    elif cmd == "fetch":
        out = _api(args.server, "GET",
                   f"/api/v1/messages/{urllib.parse.quote(args.message, safe='')}",
                   None, token)
    elif cmd == "inbox":
        out = _api(args.server, "GET", "/api/v1/inbox", None, token)
    elif cmd == "pair":
        out = _api(args.server, "POST", "/api/v1/admin/pair",
                   {"asn": args.asn, "endpoint": args.endpoint,
                    "secret": args.secret}, token)
    else:
        raise SystemExit(f"unknown admin command {cmd!r}")
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _scenario(args: argparse.Namespace) -> int:
    data_root = Path(args.data_dir) if args.data_dir else Path(
        tempfile.mkdtemp(prefix="prism-scenario-"))
    runner = ScenarioRunner.from_file(args.file, data_root)
    try:
        report = runner.run()
    finally:
        runner.close()
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _bench(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = bench_mod.DEFAULT_BENCH
    summaries = []

    if args.experiment == "chain":
        report = bench_mod.run_chain_bench(max_len=args.max_len, config=config)
        report.to_csv(out / "chain.csv")
        summaries.append(report.summary())
    elif args.experiment == "rules":
        report = bench_mod.run_rules_bench(max_rules=args.max_rules, config=config)
        report.to_csv(out / "rules.csv")
        summaries.append(report.summary())
    elif args.experiment == "fanout":
        with tempfile.TemporaryDirectory(prefix="prism-fanout-") as tmp:
            reports = bench_mod.run_fanout_sweep(Path(tmp), config,
                                                 widths=args.width or None,
                                                 asn_counts=args.asns or None)
        for width, report in sorted(reports.items()):
            report.to_csv(out / f"fanout_w{width}.csv")
            summaries.append(report.summary())
    elif args.experiment == "capacity":
        with tempfile.TemporaryDirectory(prefix="prism-capacity-") as tmp:
            report = bench_mod.run_capacity_sweep(
                Path(tmp), config, client_counts=args.clients or None,
                duration=args.duration)
        report.to_csv(out / "capacity.csv")
        summaries.append(report.summary())
    elif args.experiment == "geo":
        with tempfile.TemporaryDirectory(prefix="prism-geo-") as tmp:
            report = bench_mod.run_geo_bench(Path(tmp), config)
        report.to_csv(out / "geo.csv")
        summaries.append(report.summary())

    text = "\n\n".join(summaries) + "\n"
    (out / "summary.txt").write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prism")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run an instance over HTTP")
    serve.add_argument("--config", required=True)
    serve.set_defaults(func=_serve)

    admin = sub.add_parser("admin", help="administer a running instance")
    admin.add_argument("--server", required=True)
    admin.add_argument("--user", required=True)
    admin.add_argument("--password", required=True)
    admin_sub = admin.add_subparsers(dest="admin_cmd", required=True)

    p = admin_sub.add_parser("register-user")
    p.add_argument("name")
    p.add_argument("--display-name", default="")
    p.add_argument("--user-password", default="")
    p = admin_sub.add_parser("create-circle")
    p.add_argument("--kind", choices=["subdomain", "public", "private"],
                   default="public")
    p.add_argument("--name", default="")
    p.add_argument("--parent")
    p.add_argument("--policies", default="")
    p = admin_sub.add_parser("create-role")
    p.add_argument("name")
    p.add_argument("--grant", action="append", default=[],
                   metavar="ACTION=grant|deny")
    p.add_argument("--parent")
    p = admin_sub.add_parser("assign-role")
    p.add_argument("target_user")
    p.add_argument("role")
    p = admin_sub.add_parser("set-privileges")
    p.add_argument("--file")
    p = admin_sub.add_parser("set-policies")
    p.add_argument("circle")
    p.add_argument("--file")
    p = admin_sub.add_parser("get-policies")
    p.add_argument("circle")
    p = admin_sub.add_parser("add-member")
    p.add_argument("circle")
    p.add_argument("target_user")
    p = admin_sub.add_parser("follow")
    p.add_argument("target")
    p = admin_sub.add_parser("post")
    p.add_argument("--content", required=True)
    p.add_argument("--tag", action="append", default=[])
    p.add_argument("--conflict", action="append", default=[])
    p = admin_sub.add_parser("fetch")
    p.add_argument("message")
    admin_sub.add_parser("inbox")
    p = admin_sub.add_parser("pair")
    p.add_argument("asn")
    p.add_argument("endpoint")
    p.add_argument("--secret", required=True)
    admin.set_defaults(func=_admin)

    scenario = sub.add_parser("scenario", help="run a declarative scenario")
    scenario_sub = scenario.add_subparsers(dest="scenario_cmd", required=True)
    p = scenario_sub.add_parser("run")
    p.add_argument("file")
    p.add_argument("--data-dir")
    p.set_defaults(func=_scenario)

    bench = sub.add_parser("bench", help="run a benchmark family")
    bench.add_argument("experiment",
                       choices=["chain", "rules", "fanout", "capacity", "geo"])
    bench.add_argument("--out", required=True)
    bench.add_argument("--max-len", type=int, default=50)
    bench.add_argument("--max-rules", type=int, default=1000)
    bench.add_argument("--width", type=int, action="append")
    bench.add_argument("--asns", type=int, action="append")
    bench.add_argument("--clients", type=int, action="append")
    bench.add_argument("--duration", type=float)
    bench.set_defaults(func=_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
