"""Thin command-line client for the experiment service.

By default every subcommand talks to an in-process copy of the HTTP app, so
no server needs to be running; `--server URL` targets a remote instance
instead (output directories then resolve on the server's filesystem).
`dcc serve` starts the service under uvicorn.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys

import httpx

EXPERIMENT_COMMANDS = [
    "train-dcc",
    "train-iql",
    "train-iql-common",
    "lp-solve",
    "verify-gradient",
    "verify-bound",
    "scalability",
    "frequency",
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcc",
        description="Decentralized constraint coordination: experiments and oracles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)

    for name in EXPERIMENT_COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} experiment")
        cmd.add_argument("--config", default=None, help="JSON config file")
        cmd.add_argument("--seed", type=int, default=0)
        cmd.add_argument("--out", default="runs", help="output directory")
        cmd.add_argument("--runs", type=int, default=None, help="number of runs (default 15)")
        cmd.add_argument("--fast", action="store_true", help="scale budgets down 10x")
        cmd.add_argument("--server", default=None, help="remote service URL")
        if name == "verify-gradient":
            cmd.add_argument("--eps", type=float, default=None, help="finite-difference step")
        if name == "verify-bound":
            cmd.add_argument(
                "--alpha", type=float, action="append", default=None,
                help="penalty exponent (repeatable)",
            )
        if name == "lp-solve":
            cmd.add_argument("--theta-i", type=float, default=None, help="budget")
            cmd.add_argument("--dump-lp", action="store_true", help="write an LP text dump")
    return parser


def _post(server: str | None, path: str, payload: dict) -> httpx.Response:
    """POST to a remote server, or to the in-process app when none is given."""
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=payload)

    from .service.app import app

    async def _run() -> httpx.Response:
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(
            transport=transport, base_url="http://dcc.local", timeout=None
        ) as client:
            return await client.post(path, json=payload)

    return asyncio.run(_run())


def _config_payload(args) -> dict:
    config: dict = {}
    if args.config:
        with open(args.config) as fh:
            config.update(json.load(fh))
    if args.fast:
        config["fast"] = True
    if getattr(args, "eps", None) is not None:
        config["eps"] = args.eps
    if getattr(args, "alpha", None):
        config["bound_alphas"] = args.alpha
    if getattr(args, "theta_i", None) is not None:
        config["lp_theta_i"] = args.theta_i
    if getattr(args, "dump_lp", False):
        config["lp_dump"] = True
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service.app import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    payload = {
        "experiment": args.command,
        "config": _config_payload(args),
        "seed": args.seed,
        "runs": args.runs,
        "out_dir": args.out,
    }
    response = _post(args.server, "/v1/experiments", payload)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        print(f"error: {detail}", file=sys.stderr)
        return 1
    print(json.dumps(response.json()["summary"], indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
