"""Command line entry point: ``maxent-transfer {pretrain,finetune,summarize,plotdata}``."""

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .errors import ConfigError


def _run_flags(p):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--strategy", action="append",
                   help="strategy name or comma list; repeatable (base, base_wu, mei, mei_fn)")
    p.add_argument("--seeds", help="comma list and/or ranges, e.g. 0-7 or 1,3,5")
    p.add_argument("--gamma", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--phi-w", dest="phi_w", type=float, help="MEI weight variance (default 1e-12)")
    p.add_argument("--lambda", dest="lam", type=float, help="MEI lambda; overrides --phi-w")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--source", help="source task, e.g. synth:0-4 or mnist:0-4")
    p.add_argument("--target", help="target task, e.g. synth:5-9 or mnist:5-9")
    p.add_argument("--arch", choices=sorted(ex.ARCHITECTURES))
    p.add_argument("--optimizer", choices=["adam", "sgd"])


def _config(args):
    strategies = None
    if args.strategy:
        strategies = tuple(s.strip() for item in args.strategy for s in item.split(",") if s.strip())
    return ex.make_config(
        args.config,
        strategies=strategies,
        seeds=args.seeds,
        gamma=args.gamma,
        phi_w=args.phi_w,
        lam=args.lam,
        batch_size=args.batch_size,
        steps=args.steps,
        out=args.out,
        source=args.source,
        target=args.target,
        arch=args.arch,
        optimizer=args.optimizer,
    )


def cmd_pretrain(args):
    cfg = _config(args)
    train, test = ex.load_task(cfg, cfg.source)
    for seed in cfg.seeds:
        _, acc = ex.load_or_pretrain(cfg, seed, train, test)
        print(f"seed {seed}: source test accuracy {acc:.4f}")
    return 0


def cmd_finetune(args):
    cfg = _config(args)
    result = ex.run_experiment(cfg)
    print(f"wrote {len(result.records)} records to {Path(cfg.out) / 'records.csv'}")
    for f in result.failed:
        print(f"FAILED {f['strategy']} seed {f['seed']}: {f['error']}")
    if result.summary:
        _print_summary(result.summary)
    return 1 if result.failed else 0


def _print_summary(summary):
    for row in summary["table"]:
        if row["metric"] in ("first10_test_accuracy", "final_test_accuracy",
                             "initial_noise_fraction_pct"):
            print(f"{row['strategy']:8s} {row['metric']:28s} "
                  f"{row['mean']:.4f} +/- {row['half_width']:.4f} (n={row['n']})")
    for row in summary["paired"]:
        print(f"{row['treatment']} vs {row['control']}: first-10-step accuracy "
              f"diff {row['mean_diff']:+.4f} +/- {row['half_width']:.4f}, p={row['p_value']:.3g}")


def cmd_summarize(args):
    records = ex.read_records(args.records)
    summary = ex.summarize(records, confidence=args.confidence)
    out = args.out or Path(args.records).parent
    ex.write_summary(summary, out)
    _print_summary(summary)
    return 0


def cmd_plotdata(args):
    records = ex.read_records(args.records)
    out = args.out or Path(args.records).parent / "plots"
    kinds = args.kind or sorted(ex.PLOT_KINDS)
    for kind in kinds:
        for path in ex.export_plotdata(records, kind, out, svg=args.svg):
            print(path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="maxent-transfer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train (and cache) source backbones")
    _run_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="head swap + fine-tune for every strategy x seed")
    _run_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("summarize", help="confidence intervals and paired t-tests")
    p.add_argument("--records", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--confidence", type=float, default=0.95)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("plotdata", help="mean/std curves per strategy as CSV (and SVG)")
    p.add_argument("--records", required=True, type=Path)
    p.add_argument("--kind", action="append", choices=sorted(ex.PLOT_KINDS))
    p.add_argument("--out", type=Path)
    p.add_argument("--svg", action="store_true", help="also draw an SVG chart per kind")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
