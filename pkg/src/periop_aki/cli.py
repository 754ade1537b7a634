"""Command-line entry point: ``periop-aki {synth,label,features,run,compare}``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import PeriopError
from . import pipeline


def _parser():
    p = argparse.ArgumentParser(prog="periop-aki",
                                description="Perioperative AKI risk modeling workflow.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", required=True, help="INI config file")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--jobs", type=int, help="worker threads for forest fitting")

    common(sub.add_parser("synth", help="generate a synthetic cohort as CSV files"),
           "output directory for the CSVs")
    common(sub.add_parser("label", help="derive KDIGO outcome labels"),
           "output directory for labels.csv")
    sp = sub.add_parser("features", help="clean signals and write the feature matrix")
    common(sp, "output directory for features.csv")
    sp.add_argument("--outcome", default="aki_7day", help="outcome used to fit encoders")
    common(sub.add_parser("run", help="full workflow, writes report.json"),
           "run directory (default: <output_dir>/run-<config digest>)")
    sp = sub.add_parser("compare", help="AUROC table and NRI from a report")
    sp.add_argument("report", help="path to report.json")
    sp.add_argument("--out", help="path for figure5.csv")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            text, path = pipeline.cmd_compare(args.report, args.out)
            print(text)
            print(f"wrote {path}")
            return 0
        cfg = pipeline.load_config(args.config, seed=args.seed, jobs=args.jobs)
        if args.command == "synth":
            print(pipeline.cmd_synth(cfg, args.out))
        elif args.command == "label":
            print(pipeline.cmd_label(cfg, args.out))
        elif args.command == "features":
            print(pipeline.cmd_features(cfg, args.out, args.outcome))
        elif args.command == "run":
            print(pipeline.cmd_run(cfg, args.out))
        return 0
    except PeriopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
