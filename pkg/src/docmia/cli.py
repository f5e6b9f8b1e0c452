"""Command-line entry point: ``docmia <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .config import ConfigError, load_config, parse_value
from .pipeline import StageError, run_blackbox, run_gen_corpus, run_sweep, run_train_target, run_whitebox, summarize_reports


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (defaults apply to missing keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. --set attack.tau=1e-2 (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (same as --set seed=N)")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--cache-dir", help="where trained targets are cached (default: <out>/../.cache)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for attack extraction (default: 1)")
    p.add_argument("--features", help="feature selection, e.g. 'all', 'avg:delta', 'delta,steps'")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="docmia", description="Document-level membership inference on a toy document QA model.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("gen-corpus", "generate and save the synthetic corpus"),
        ("train-target", "train (or load from cache) the target model"),
        ("attack-whitebox", "white-box attack plus baselines"),
        ("attack-blackbox", "label-only attack through a distilled proxy"),
    ):
        _common(sub.add_parser(name, help=help_))
    sw = sub.add_parser("sweep", help="grid over attack / baseline / defense settings")
    _common(sw)
    sw.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2,...", help="sweep axis, e.g. --axis attack.tau=1e-4,1e-3 (repeatable)")
    rp = sub.add_parser("report", help="mean/sd table over finished runs")
    rp.add_argument("runs", nargs="+", help="run directories containing report.json")
    rp.add_argument("--out", default="summary.csv")
    rp.add_argument("-v", "--verbose", action="store_true")
    return ap


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.features:
        overrides.append(f"attack.features={json.dumps(args.features)}")
    cfg = load_config(args.config, overrides)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.cache_dir:
        cfg = replace(cfg, cache_dir=args.cache_dir)
    return cfg


def _parse_axis(item: str) -> tuple[str, list]:
    if "=" not in item:
        raise ConfigError(f"axis {item!r} is not KEY=V1,V2,...")
    key, raw = item.split("=", 1)
    return key.strip(), [parse_value(v) for v in raw.split(",") if v != ""]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            rows = summarize_reports(args.runs, args.out)
            for r in rows:
                print(f"{r['attack']:<32} bacc {r['balanced_accuracy_mean']:.3f}±{r['balanced_accuracy_sd']:.3f}  f1 {r['f1_mean']:.3f}±{r['f1_sd']:.3f}  (n={r['runs']})")
            return 0
        cfg = _config(args)
        if args.command == "gen-corpus":
            print(run_gen_corpus(cfg))
        elif args.command == "train-target":
            print(run_train_target(cfg))
        elif args.command == "attack-whitebox":
            res = run_whitebox(cfg, args.jobs)
            for r in res.reports:
                print(f"{r.attack:<32} bacc {r.balanced_accuracy:.3f}  f1 {r.f1:.3f}  tpr@1% {r.tpr_at_1_fpr:.3f}  tpr@3% {r.tpr_at_3_fpr:.3f}")
            print(res.manifest)
        elif args.command == "attack-blackbox":
            res = run_blackbox(cfg, args.jobs)
            r = res.reports[0]
            print(f"{r.attack:<32} bacc {r.balanced_accuracy:.3f}  f1 {r.f1:.3f}  queries {res.info['query_count']}")
            print(res.manifest)
        elif args.command == "sweep":
            axes = dict(_parse_axis(a) for a in args.axis)
            print(run_sweep(cfg, axes, args.jobs))
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, OSError) as e:
        print(f"error: [config] {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
