"""Command-line front end: ``quicknat run|bench-lookup|bench-scale|bench-pktsize``."""

import argparse
import signal
import sys

from .bench import PACKET_LENGTHS, RULE_COUNTS, bench_lookup, bench_pktsize, bench_scale
from .config import RuleParseError, parse_rules
from .engine import ConfigError, Engine, EngineConfig
from .rss import RssConfig
from .traffic import FlowSpec, PcapError, gen_flows, pcap_read, pcap_write

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quicknat", description="User-space NAT dataplane")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--rss-key", help="40-byte Toeplitz key as hex")
        sp.add_argument("--csv", help="write the report as CSV to this path")

    run = sub.add_parser("run", help="translate a pcap or synthetic workload")
    common(run)
    run.add_argument("--rules", required=True)
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input", help="input pcap")
    src.add_argument("--synthetic", help='e.g. "flows=8000,len=64,pkts=1,seed=1"')
    run.add_argument("--out", help="output pcap")
    run.add_argument("--timeout", type=float, default=300.0, help="idle timeout, seconds")
    run.add_argument("--passthrough", action="store_true",
                     help="forward packets matching no rule instead of dropping them")
    run.add_argument("--batch", type=int, default=32)
    run.add_argument("--lookup", choices=("qns", "linear"), default="qns")
    run.add_argument("--stats-interval", type=float, default=1.0)

    bl = sub.add_parser("bench-lookup", help="rule lookup latency vs rule count")
    bl.add_argument("--rule-counts", type=_int_list, default=list(RULE_COUNTS))
    bl.add_argument("--probes", type=int, default=100_000)
    bl.add_argument("--seed", type=int, default=1)
    bl.add_argument("--csv")

    bs = sub.add_parser("bench-scale", help="throughput vs worker count")
    bs.add_argument("--worker-counts", type=_int_list, default=[1, 2, 4])
    bs.add_argument("--flows", type=int, default=8000)
    bs.add_argument("--len", dest="length", type=int, default=64)
    bs.add_argument("--duration", type=float, default=2.0)
    bs.add_argument("--executor", choices=("thread", "process"))
    bs.add_argument("--seed", type=int, default=1)
    bs.add_argument("--csv")

    bp = sub.add_parser("bench-pktsize", help="throughput vs frame length")
    bp.add_argument("--lengths", type=_int_list, default=list(PACKET_LENGTHS))
    bp.add_argument("--workers", type=int, default=1)
    bp.add_argument("--flows", type=int, default=8000)
    bp.add_argument("--duration", type=float, default=2.0)
    bp.add_argument("--executor", choices=("thread", "process"))
    bp.add_argument("--seed", type=int, default=1)
    bp.add_argument("--csv")
    return p


def _emit_report(text: str, path) -> None:
    if path:
        with open(path, "w", newline="") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    try:
        rules = parse_rules(args.rules)
        key = bytes.fromhex(args.rss_key) if args.rss_key else None
        rss = RssConfig(nworkers=args.workers) if key is None else RssConfig(key, args.workers)
        cfg = EngineConfig(nworkers=args.workers, rss=rss, passthrough=args.passthrough,
                           idle_timeout=args.timeout, batch=args.batch, lookup=args.lookup)
        if args.input:
            source = list(pcap_read(args.input))
        else:
            source = gen_flows(FlowSpec.parse(args.synthetic))
    except (RuleParseError, ConfigError, PcapError, ValueError, OSError) as exc:
        print(f"quicknat: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    engine = Engine(rules, cfg)
    engine.stats_interval = args.stats_interval or None
    previous = signal.signal(signal.SIGINT, lambda *_: engine.stop())
    out = []
    try:
        report = engine.run(source, sink=lambda ts, buf: out.append((ts, buf)))
        if args.out:
            pcap_write(args.out, out)
    except Exception as exc:  # runtime failure: report, distinct exit status
        print(f"quicknat: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        signal.signal(signal.SIGINT, previous)
    print(report.to_json())
    if args.csv:
        _emit_report(report.to_csv(), args.csv)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    try:
        if args.command == "bench-lookup":
            report = bench_lookup(args.rule_counts, args.probes, args.seed)
        elif args.command == "bench-scale":
            report = bench_scale(args.worker_counts, args.flows, args.length,
                                 args.duration, args.seed, executor=args.executor)
        else:
            report = bench_pktsize(args.lengths, args.workers, args.flows,
                                   args.duration, args.seed, executor=args.executor)
    except ValueError as exc:
        print(f"quicknat: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit_report(report.to_csv(), args.csv)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
