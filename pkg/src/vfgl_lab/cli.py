"""Command line front end.

    vfgl-lab run --config exp.cfg [--out runs] [--seed 3] [--gamma 0.1 ...]
    vfgl-lab compare --configs clean.cfg,na2.cfg [--out runs]
    vfgl-lab gradcheck [--instances 5] [--tolerance 1e-4]

Every RunConfig field is also a ``--flag value`` override (dashes for
underscores); bare boolean flags such as ``--full-matrix`` mean true.
Exit codes: 0 success, 1 runtime failure, 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import harness


def _add_override_flags(parser):
    for f in dataclasses.fields(harness.RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in harness._BOOL_FIELDS:
            parser.add_argument(flag, nargs="?", const="true", default=None,
                                metavar="BOOL", dest=f.name)
        else:
            parser.add_argument(flag, default=None, metavar=f.name.upper(),
                                dest=f.name)


def _collect_config(args, path):
    mapping = harness.parse_config_file(path) if path else {}
    for f in dataclasses.fields(harness.RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            mapping[f.name] = value
    if getattr(args, "seed", None) is not None:
        mapping["seeds"] = str(args.seed)
    return harness.config_from_mapping(mapping)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vfgl-lab",
        description="split-feature federated GNN training and attack bench")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train, attack, and record one cell")
    run.add_argument("--config", default=None, help="key = value file")
    run.add_argument("--out", default="runs", help="output directory")
    run.add_argument("--seed", type=int, default=None,
                     help="run a single seed instead of the configured list")
    _add_override_flags(run)

    cmp_p = sub.add_parser("compare",
                           help="run sibling cells and tabulate ASR/Impv")
    cmp_p.add_argument("--configs", required=True,
                       help="comma-separated config files")
    cmp_p.add_argument("--out", default="runs")

    gc = sub.add_parser("gradcheck",
                        help="finite-difference audit of the model gradients")
    gc.add_argument("--instances", type=int, default=5)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _cmd_run(args):
    try:
        config = _collect_config(args, args.config)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    records = harness.run_experiment(config, args.out)
    for rec in records:
        mse = "" if rec.shadow_mse is None else f" shadow_mse={rec.shadow_mse:.4g}"
        print(f"{rec.run_id}: clean_acc={rec.clean_acc:.4f} "
              f"asr={rec.asr:.2f} aq={rec.aq:.2f}{mse}")
    print(f"wrote {len(records)} rows to {args.out}/results.csv")
    return 0


def _cmd_compare(args):
    try:
        configs = [harness.config_from_mapping(harness.parse_config_file(p))
                   for p in args.configs.split(",")]
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        rows, _ = harness.compare_methods(configs, args.out)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"{'method':<8}{'attack':<12}{'asr':>8}{'aq':>8}{'impv':>10}")
    for row in rows:
        impv = "" if row["impv"] is None else f"{row['impv']:+.1f}"
        print(f"{row['method']:<8}{row['attack']:<12}{row['asr']:>8.2f}"
              f"{row['aq']:>8.2f}{impv:>10}")
    print(f"wrote {args.out}/comparison.csv")
    return 0


def _cmd_gradcheck(args):
    worst = harness.gradcheck_suite(args.instances, args.seed, args.tolerance)
    failed = False
    for kind, err in sorted(worst.items()):
        ok = err <= args.tolerance
        failed |= not ok
        print(f"{kind:<8} max rel err {err:.3e}  "
              f"{'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"run": _cmd_run, "compare": _cmd_compare,
               "gradcheck": _cmd_gradcheck}[args.command]
    try:
        return handler(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # surfaced as a plain failure, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
