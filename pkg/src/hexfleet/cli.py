"""Command-line client for the dispatch service.

Every subcommand is a thin HTTP call: against a remote server when --server
is given, otherwise against the service app mounted in-process. Paths are
resolved to absolute before sending, since the in-process server shares the
filesystem.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path

import httpx


def _post(server: str | None, path: str, body: dict) -> httpx.Response:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=body)

    from .service import app

    async def go():
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport, base_url="http://hexfleet", timeout=None) as client:
            return await client.post(path, json=body)

    return asyncio.run(go())


def _common(sub: argparse.ArgumentParser, out_required=True):
    sub.add_argument("--config", default=None, help="config file (flat key = value)")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", required=out_required, help="output directory for this run")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, val = pair.partition("=")
        out[key.strip()] = val.strip()
    return out


def _job_body(args, **extra) -> dict:
    body = {
        "out_dir": str(Path(args.out).resolve()),
        "overrides": _overrides(args.set),
        "seed": args.seed,
    }
    if args.config:
        body["config_path"] = str(Path(args.config).resolve())
    body.update(extra)
    return body


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hexfleet", description="hex-grid fleet dispatching")
    parser.add_argument("--server", default=None, help="remote service URL (default: in-process)")
    cmds = parser.add_subparsers(dest="command", required=True)

    _common(cmds.add_parser("gen-data", help="simulate the synthetic city and write the corpus"))

    p = cmds.add_parser("pretrain", help="stage 1: behavior model and feature statistics")
    _common(p)
    p.add_argument("--data", required=True, help="gen-data output directory")

    p = cmds.add_parser("train", help="stage 2 policy training (runs stage 1 first by default)")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None, help="existing stage-1 checkpoint")
    p.add_argument("--stage2-only", action="store_true", help="require the stage-1 checkpoint")

    p = cmds.add_parser("eval", help="run the trained policy in a live world")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    _common(cmds.add_parser("simulate", help="policy-free baseline run"))

    p = cmds.add_parser("sweep-ratio", help="metrics across car:order ratios")
    _common(p)
    p.add_argument("--ratios", default=None, help="comma-separated ratios (cars per order)")
    p.add_argument("--target-orders", type=int, default=60)

    p = cmds.add_parser("sweep-alpha", help="validation error across reward weights")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--alphas", default=None, help="comma-separated alpha values")
    p.add_argument("--checkpoint", default=None, help="existing stage-1 checkpoint")

    p = cmds.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)

    p = cmds.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    if args.command == "grad-check":
        path, body = "/jobs/grad-check", {"seed": args.seed}
    elif args.command == "gen-data":
        path, body = "/jobs/gen-data", _job_body(args)
    elif args.command == "pretrain":
        path, body = "/jobs/pretrain", _job_body(args, data_dir=str(Path(args.data).resolve()))
    elif args.command == "train":
        extra = {"data_dir": str(Path(args.data).resolve()), "stage2_only": args.stage2_only}
        if args.checkpoint:
            extra["checkpoint"] = str(Path(args.checkpoint).resolve())
        path, body = "/jobs/train", _job_body(args, **extra)
    elif args.command == "eval":
        path, body = "/jobs/eval", _job_body(args, checkpoint=str(Path(args.checkpoint).resolve()))
    elif args.command == "simulate":
        path, body = "/jobs/simulate", _job_body(args)
    elif args.command == "sweep-ratio":
        extra = {"target_orders": args.target_orders}
        if args.ratios:
            extra["ratios"] = [float(x) for x in args.ratios.split(",")]
        path, body = "/jobs/sweep-ratio", _job_body(args, **extra)
    elif args.command == "sweep-alpha":
        extra = {"data_dir": str(Path(args.data).resolve())}
        if args.alphas:
            extra["alphas"] = [float(x) for x in args.alphas.split(",")]
        if args.checkpoint:
            extra["checkpoint"] = str(Path(args.checkpoint).resolve())
        path, body = "/jobs/sweep-alpha", _job_body(args, **extra)
    else:  # pragma: no cover
        raise SystemExit(f"unhandled command {args.command}")

    resp = _post(args.server, path, body)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except Exception:
            detail = resp.text
        print(f"error ({resp.status_code}): {detail}", file=sys.stderr)
        return 1
    print(json.dumps(resp.json(), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
