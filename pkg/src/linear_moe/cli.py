"""``linear-moe`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import bench, growth
from .config import BenchConfig, load_config, output_root, resolve_out
from .errors import ConfigError
from .lsm.chunked import KNOWN_FAULTS
from .mqar import gen_mqar
from .train import TrainingDiverged, train
from .verify import SUITES, run_verify

EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def cmd_verify(args) -> int:
    report = run_verify(args.only, args.inject_fault)
    for suite in report.suites:
        bad = [c for c in suite.checks if not c.passed]
        print(f"{'PASS' if suite.passed else 'FAIL'} {suite.name}: {len(suite.checks) - len(bad)}/{len(suite.checks)} "
              f"checks ({suite.seconds:.1f}s)")
        for c in bad:
            err = f" error={c.error:.3g} tol={c.tolerance:.0e}" if c.error is not None else ""
            print(f"  failed: {c.name}{err} {c.detail}".rstrip())
    path = Path(args.report) if args.report else output_root() / "verify_report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    print(f"report: {path}")
    return 0 if report.passed else EXIT_FAIL


def cmd_train(args) -> int:
    cfg = load_config(args.config, "train")
    try:
        result = train(cfg)
    except TrainingDiverged as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    first, last = result.losses[0], result.losses[-1]
    extra = " ".join(f"{k}={v:.4f}" for k, v in result.evaluation.items())
    print(f"steps={cfg.steps} loss {first:.4f} -> {last:.4f} {extra}")
    for name, path in result.files.items():
        print(f"{name}: {path}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config, "bench") if args.config else BenchConfig()
    rows, files = bench(cfg)
    print(f"{'mixer':<12}{'length':>8}{'batch':>7}{'us/token':>12}{'memory':>10}")
    for r in rows:
        print(f"{r.mixer:<12}{r.length:>8}{r.batch:>7}{r.time_per_token * 1e6:>12.3f}{r.memory_elements:>10}")
    print(f"time/token growth {min(cfg.lengths)}->{max(cfg.lengths)}: "
          f"{cfg.lsm} x{growth(rows, cfg.lsm):.2f}, attention x{growth(rows, 'attention'):.2f}")
    print(f"table: {files['table']}")
    return 0


def cmd_gen_mqar(args) -> int:
    data = gen_mqar(args.seed, args.pairs, args.vocab, args.queries, args.samples)
    path = data.save(resolve_out(args.out))
    print(json.dumps({"out": str(path), "samples": data.num_samples, "seq_len": data.seq_len}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linear-moe", description="Linear-MoE toy models and verification harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the oracle verification suites")
    v.add_argument("--only", action="append", choices=sorted(SUITES), help="run just this suite (repeatable)")
    v.add_argument("--report", help="where to write the JSON report")
    v.add_argument("--inject-fault", choices=KNOWN_FAULTS, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train a toy model")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="sequence-length scaling benchmark")
    b.add_argument("--config")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen-mqar", help="generate an associative-recall dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--queries", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--vocab", type=int, default=64)
    g.add_argument("--samples", type=int, default=1000)
    g.set_defaults(func=cmd_gen_mqar)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
