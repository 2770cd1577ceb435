"""Command line entry point: ``bench run``, ``bench sweep`` and ``bench serve``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from faasbroker.bench.harness import (
    ExperimentConfig,
    LimitsProfile,
    Scheme,
    run_experiment,
    sweep,
    write_sweep,
)
from faasbroker.bench.report import export_report, summarize
from faasbroker.broker import CandidateMode
from faasbroker.errors import ExceedsProfile


def _steps(text: str, kind=int) -> list:
    return [kind(x) for x in text.split(",") if x.strip()]


def _scheme_list(text: str) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    try:
        return [Scheme(n).value for n in names]
    except ValueError:
        raise argparse.ArgumentTypeError(f"schemes must be among {[s.value for s in Scheme]}")


def _common(p: argparse.ArgumentParser, several_schemes: bool = False) -> None:
    if several_schemes:
        p.add_argument("--scheme", type=_scheme_list, default=["topic"],
                       help="comma-separated schemes, e.g. topic,content,function")
    else:
        p.add_argument("--scheme", choices=[s.value for s in Scheme], default="topic")
    p.add_argument("--payload-bytes", type=int, default=1024)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--groups", type=int, default=4, help="subscriber worker groups")
    p.add_argument("--limits", help="limits profile JSON file")
    p.add_argument("--candidate-mode", choices=[m.value for m in CandidateMode], default="first_key")
    p.add_argument("--timeout", type=float, help="per-run delivery deadline in seconds")
    p.add_argument("--force", action="store_true", help="run even if the point exceeds the limits profile")
    p.add_argument("--seed", type=int)


def _config(args, **overrides) -> ExperimentConfig:
    limits = LimitsProfile.load(args.limits) if args.limits else LimitsProfile()
    values = dict(
        scheme=args.scheme,
        payload_bytes=args.payload_bytes,
        repetitions=args.reps,
        worker_groups=args.groups,
        limits=limits,
        candidate_mode=args.candidate_mode,
        timeout=args.timeout,
        force=args.force,
        seed=args.seed,
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def cmd_run(args) -> int:
    cfg = _config(args, subscribers=args.subscribers, pubs_per_second=args.rate,
                  publication_count=args.pubs)
    result = run_experiment(cfg)
    for key, value in summarize(result).items():
        print(f"{key}: {value}")
    if args.out:
        csv_path, summary = export_report(result, args.out)
        print(f"wrote {csv_path} and {summary}")
    return 0 if result.delivered_count == result.expected_count else 1


def cmd_sweep(args) -> int:
    rows = []
    for scheme in list(args.scheme):
        args.scheme = scheme
        template = _config(args, publication_count=args.pubs or 20)
        rows.extend(sweep(template, _steps(args.subscribers), _steps(args.rates, float),
                          duration=None if args.pubs else args.duration))
    if args.out:
        write_sweep(rows, args.out)
    for row in rows:
        print(",".join("" if v is None else str(v) for v in row.values()))
    return 0


def cmd_serve(args) -> int:
    from faasbroker.api import serve_api
    from faasbroker.bench.harness import build_broker

    cfg = _config(args)
    broker = build_broker(cfg)
    server = serve_api(broker, args.host, args.port)
    print(f"broker API listening on {server.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        broker.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Serverless pub/sub broker benchmark")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment point")
    _common(run)
    run.add_argument("--subscribers", type=int, default=8)
    run.add_argument("--rate", type=float, default=5, help="publications per second")
    run.add_argument("--pubs", type=int, default=20, help="publications per run")
    run.add_argument("--out", help="latency CSV path; a .summary.txt is written next to it")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run the subscribers x rate grid")
    _common(sw, several_schemes=True)
    sw.add_argument("--subscribers", default="8,16,32,64", help="comma-separated subscriber counts")
    sw.add_argument("--rates", default="5,10,20,40", help="comma-separated publication rates")
    sw.add_argument("--pubs", type=int, help="publications per cell (default: rate x duration)")
    sw.add_argument("--duration", type=float, default=1.0, help="seconds of publishing per cell")
    sw.add_argument("--out", help="sweep CSV path")
    sw.set_defaults(func=cmd_sweep)

    serve = sub.add_parser("serve", help="serve the broker HTTP API")
    _common(serve)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8080)
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ExceedsProfile as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
