"""Command line entry point: ``icpns <verb> ...``.

Data output (reports, statistics) goes to stdout. Failures print one JSON
object ``{"error": <category>, "message": ...}`` on stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ingest
from .config import ConfigError, expand_grid, parse_config, stage1_key
from .data import DatasetBundle
from .encoder import ModelConfig, load_checkpoint
from .metrics import UndefinedMetricError, evaluate
from .pipeline import TrainingError, load_checkpoint_for, make_model, pretrain, run_compare
from .report import FORMATS, csv_rows, load_report, markdown_table

# Published statistics of the preprocessed datasets, used to report the filter delta.
REFERENCE_STATS = {"ml-100k": {"n_users": 940, "n_items": 1017, "nnz": 80393}}

EXIT_CODES = {"usage": 2, "config": 2, "ingest": 3, "data": 3, "training": 4, "io": 5, "metric": 6}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def reference_delta(name: str | None, stats: dict) -> dict | None:
    ref = REFERENCE_STATS.get(name or "")
    if ref is None:
        return None
    return {key: {"expected": ref[key], "got": stats[key], "delta": stats[key] - ref[key],
                  "relative": (stats[key] - ref[key]) / ref[key]} for key in ref}


def _guess_reference(raw: Path) -> str | None:
    for part in (raw.parent.name, raw.stem):
        if part.lower() in REFERENCE_STATS:
            return part.lower()
    return None


def cmd_prep(args) -> int:
    raw = Path(args.raw)
    k_user = args.k_user if args.k_user is not None else args.k
    k_item = args.k_item if args.k_item is not None else args.k
    bundle = ingest.prepare(raw, args.format, k_user, k_item, args.seed, tuple(args.ratios))
    bundle.save(args.out)
    stats = {"n_users": bundle.n_users, "n_items": bundle.n_items,
             "nnz": bundle.train.nnz + bundle.val.nnz + bundle.test.nnz,
             "split": [bundle.train.nnz, bundle.val.nnz, bundle.test.nnz]}
    ref = args.reference or _guess_reference(raw)
    delta = reference_delta(ref, stats)
    if delta is not None:
        stats["reference"] = ref
        stats["delta"] = delta
    _emit(stats)
    return 0


def cmd_synth(args) -> int:
    bundle, exposure = ingest.generate_synthetic_exposure(
        args.users, args.items, args.communities, args.exposure_rate, args.click_rate, args.seed,
        tuple(args.ratios))
    out = Path(args.out)
    bundle.save(out)
    exposure.save(out / "exposure.log")
    (out / "communities.tsv").write_text("".join(f"{u}\t{c}\n" for u, c in enumerate(exposure.community)))
    _emit({"n_users": bundle.n_users, "n_items": bundle.n_items,
           "split": [bundle.train.nnz, bundle.val.nnz, bundle.test.nnz]})
    return 0


def _train_runs(args, strategies=None) -> int:
    runs = expand_grid(args.config, args.overrides)
    base_out = Path(args.out) if args.out else None
    reports, stage1_cache = [], {}
    for assignment, cfg in runs:
        out = base_out or Path(cfg.output.dir)
        if len(runs) > 1:
            out = out / "_".join(f"{k.split('.')[-1]}={v}" for k, v in assignment.items())
        key = stage1_key(cfg)
        ckpt = stage1_cache.get(key)
        if ckpt is None and len(runs) > 1:
            ckpt, _ = pretrain(cfg)
            stage1_cache[key] = ckpt
        chosen = strategies or [cfg.sampler.stage2.strategy]
        report = run_compare(cfg, chosen, out, checkpoint=ckpt)
        reports.append(report)
        sys.stderr.write(f"wrote {out}\n")
    sys.stdout.write(markdown_table(reports))
    return 0


def cmd_train(args) -> int:
    return _train_runs(args)


def cmd_compare(args) -> int:
    strategies = [s for s in args.strategies.split(",") if s]
    if len(strategies) < 2:
        raise CliError("usage", "compare needs at least two strategies")
    return _train_runs(args, strategies)


def cmd_eval(args) -> int:
    bundle = DatasetBundle.load(args.data)
    if args.config:
        cfg = parse_config(args.config, args.overrides)
        model = load_checkpoint_for(cfg, args.ckpt).model(bundle)
    else:
        state, header = load_checkpoint(args.ckpt)
        if (state.n_users, state.n_items) != (bundle.n_users, bundle.n_items):
            raise CliError("data", "checkpoint and dataset disagree on (users, items)")
        mcfg = ModelConfig(header["backbone"], header["dim"], header["n_layers"])
        model = make_model(mcfg, state, bundle)
    report = evaluate(model, bundle, args.split, args.k)
    _emit(report.to_json())
    return 0


def cmd_report(args) -> int:
    reports = []
    for run in args.runs:
        path = Path(run)
        if not (path / "report.json").exists() and not path.is_file():
            raise CliError("io", f"no report.json under {path}")
        reports.append(load_report(path))
    if args.format == "markdown-table":
        sys.stdout.write(markdown_table(reports))
    elif args.format == "json":
        _emit([r.to_json() for r in reports])
    else:
        import csv

        from .report import CSV_FIELDS
        writer = csv.DictWriter(sys.stdout, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in reports:
            writer.writerows(csv_rows(r))
    return 0


def _ratios(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("need three comma-separated ratios")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icpns", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prep", help="binarize, k-core filter and split a raw rating file")
    p.add_argument("raw")
    p.add_argument("--format", default="movielens-tab", choices=ingest.FORMATS)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--k-user", type=int)
    p.add_argument("--k-item", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=_ratios, default=[0.8, 0.1, 0.1])
    p.add_argument("--reference", choices=sorted(REFERENCE_STATS),
                   help="published statistics to compare against (guessed from the path)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("synth", help="generate a community-structured dataset with exposure ground truth")
    p.add_argument("--users", type=int, default=400)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--communities", type=int, default=4)
    p.add_argument("--exposure-rate", type=float, default=0.5)
    p.add_argument("--click-rate", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=_ratios, default=[0.8, 0.1, 0.1])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for verb, helptext, func in (("train", "pretrain and fine-tune with the configured stage-2 sampler", cmd_train),
                                 ("compare", "one shared stage-1 run, several stage-2 samplers", cmd_compare)):
        p = sub.add_parser(verb, help=helptext)
        p.add_argument("--config")
        p.add_argument("--out", help="output directory (default: output.dir from the config)")
        if verb == "compare":
            p.add_argument("--strategies", default="rns,pns,hns,icpns")
        p.add_argument("overrides", nargs="*", help="dotted key=value overrides; list values sweep")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a prepared dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split", default="test", choices=("val", "test"))
    p.add_argument("--config", help="config whose model section matches the checkpoint")
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate finished runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--format", default="markdown-table", choices=FORMATS)
    p.set_defaults(func=cmd_report)
    return parser


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, ingest.IngestError):
        return "ingest"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, UndefinedMetricError):
        return "metric"
    if isinstance(exc, (OSError, json.JSONDecodeError)):
        return "io"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        # overrides may be interleaved with options; argparse leaves the later ones unparsed
        stray = [x for x in extra if x.startswith("-") or "=" not in x or not hasattr(args, "overrides")]
        if stray:
            parser.error(f"unrecognized arguments: {' '.join(stray)}")
        if extra:
            args.overrides = list(args.overrides) + extra
    except SystemExit as exc:
        if exc.code not in (0, None):
            sys.stderr.write(json.dumps({"error": "usage", "message": "invalid arguments"}) + "\n")
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every failure becomes a categorized diagnostic
        category = _categorize(exc)
        sys.stderr.write(json.dumps({"error": category, "message": str(exc)}) + "\n")
        return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
