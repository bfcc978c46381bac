"""Command-line entry point: ``sessionrank <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import datamodel
from .config import SEED_ENV, RunConfig, config_keys, load_config
from .datamodel import DataError
from .evaluation import ablation, evaluate, make_ranker
from .gradcheck import TOLERANCE, run_gradcheck
from .listnet import RankModel, train_listrank
from .nn import NumericalError
from .sie import SieModel, TrainLog, train_sie

logger = logging.getLogger("sessionrank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SIE_FILE = "sie_model.json"
RANK_FILE = "rank_model.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _fmt_default(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group(
        "configuration",
        f"Flags override values from --config; {SEED_ENV} overrides the seed.",
    )
    group.add_argument("--config", help="key=value or JSON config file")
    group.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    for key, default in config_keys():
        group.add_argument(_flag(key), dest=f"cfg:{key}", metavar="V",
                           help=f"(default: {_fmt_default(default)})")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = _Parser(prog="sessionrank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", parents=[parent], help="write a synthetic event log")
    p.add_argument("--out", help="output JSONL path (default: config 'events')")
    p.add_argument("--json", action="store_true", help="print stats as JSON")

    p = sub.add_parser("ingest", parents=[parent], help="parse, sessionize and summarise a log")
    p.add_argument("--json", action="store_true", help="print stats as JSON")

    p = sub.add_parser("train", parents=[parent], help="train the S-IE and/or ranking model")
    p.add_argument("--stage", choices=("sie", "rank", "both"), default="both")

    p = sub.add_parser("evaluate", parents=[parent], help="NDCG reports on the test split")
    p.add_argument("--methods", default="popularity,sie,listrank")
    p.add_argument("--ablation", action="store_true", help="also run the behaviour ablation grid")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("rank", parents=[parent], help="emit ranked lists as TSV")
    p.add_argument("--method", choices=("listrank", "sie", "popularity"), default="listrank")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--out", help="TSV path (default: stdout)")

    p = sub.add_parser("gradcheck", parents=[parent], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=10)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        key[4:]: value for key, value in vars(args).items()
        if key.startswith("cfg:") and value is not None
    }
    return load_config(args.config, overrides)


def _load_dataset(cfg: RunConfig):
    path = Path(cfg.events)
    if not path.exists():
        raise DataError(f"events file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        events = datamodel.parse_events(fh)
    return datamodel.prepare_dataset(datamodel.sessionize(events, cfg.gap_ms))


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _echo_config(cfg: RunConfig, directory: str):
    _write(Path(directory) / "effective_config.json", cfg.to_json() + "\n")


def cmd_gen_synthetic(cfg: RunConfig, out: str | None = None, as_json=False) -> int:
    path = Path(out or cfg.events)
    events = datamodel.generate_synthetic(cfg.synthetic, cfg.seed)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            datamodel.write_events(events, fh)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    ds = datamodel.prepare_dataset(datamodel.sessionize(events, cfg.gap_ms))
    _print_stats(ds.stats, as_json)
    return EXIT_OK


def _print_stats(stats, as_json):
    if as_json:
        print(json.dumps(stats, indent=2, sort_keys=True))
    else:
        print(datamodel.format_stats(stats))


def cmd_ingest(cfg: RunConfig, as_json=False) -> int:
    _print_stats(_load_dataset(cfg).stats, as_json)
    return EXIT_OK


def load_sie(model_dir) -> SieModel:
    path = Path(model_dir) / SIE_FILE
    if not path.exists():
        raise UsageError(f"no trained S-IE model at {path}; run 'train --stage sie' first")
    return SieModel.from_json(path.read_text(encoding="utf-8"))


def load_rank(model_dir) -> RankModel:
    path = Path(model_dir) / RANK_FILE
    if not path.exists():
        raise UsageError(f"no trained rank model at {path}; run 'train --stage rank' first")
    return RankModel.from_json(path.read_text(encoding="utf-8"))


def _write_log(log: TrainLog, path: Path):
    buf = io.StringIO()
    log.write_csv(buf)
    _write(path, buf.getvalue())


def cmd_train(cfg: RunConfig, stage="both") -> int:
    ds = _load_dataset(cfg)
    model_dir = Path(cfg.model_dir)
    if stage in ("sie", "both"):
        log = TrainLog()
        sie_model = train_sie(ds, log=log, **cfg.sie_params())
        _write(model_dir / SIE_FILE, sie_model.to_json())
        _write_log(log, model_dir / "sie_train_log.csv")
    else:
        sie_model = load_sie(model_dir)
    if stage in ("rank", "both"):
        log = TrainLog()
        rank_model = train_listrank(ds, sie_model, log=log, **cfg.rank_params())
        _write(model_dir / RANK_FILE, rank_model.to_json())
        _write_log(log, model_dir / "rank_train_log.csv")
    _echo_config(cfg, cfg.model_dir)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, methods=("popularity", "sie", "listrank"), with_ablation=False,
                 threads=1) -> int:
    ds = _load_dataset(cfg)
    report_dir = Path(cfg.report_dir)
    sie_model = load_sie(cfg.model_dir) if {"sie", "listrank"} & set(methods) else None
    rank_model = load_rank(cfg.model_dir) if "listrank" in methods else None
    reports = [
        evaluate(m, ds, sie_model=sie_model, rank_model=rank_model, gain=cfg.gain, threads=threads)
        for m in methods
    ]
    rows = ["method,ndcg_at_all,ndcg_at_10,n_queries,n_excluded"]
    for r in reports:
        rows.append(f"{r.method},{r.ndcg_at_all!r},{r.ndcg_at_10!r},{r.n_queries},{r.n_excluded}")
        _write(report_dir / f"per_query_{r.method}.csv", r.per_query_csv())
    _write(report_dir / "report.csv", "\n".join(rows) + "\n")
    _write(report_dir / "report.json",
           json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    width = max(len(r.method) for r in reports)
    for r in reports:
        print(f"{r.method:<{width}}  NDCG@all={r.ndcg_at_all:.4f}  NDCG@10={r.ndcg_at_10:.4f}"
              f"  (queries={r.n_queries}, excluded={r.n_excluded})")
    if with_ablation:
        result = ablation(ds, sie_params=cfg.sie_params(), rank_params=cfg.rank_params(),
                          gain=cfg.gain)
        _write(report_dir / "ablation.csv", result.to_csv())
        _write(report_dir / "ablation.txt", result.to_text() + "\n")
        _write(report_dir / "ablation.json", json.dumps(
            {f"{m}/{c}": r.to_dict() for (m, c), r in result.reports.items()},
            indent=2, sort_keys=True) + "\n")
        print(result.to_text())
    _echo_config(cfg, cfg.report_dir)
    return EXIT_OK


def cmd_rank(cfg: RunConfig, method="listrank", split="test", out=None) -> int:
    ds = _load_dataset(cfg)
    sie_model = load_sie(cfg.model_dir) if method != "popularity" else None
    rank_model = load_rank(cfg.model_dir) if method == "listrank" else None
    ranker = make_ranker(method, train_blocks=ds.train, sie_model=sie_model, rank_model=rank_model)
    blocks = {"test": ds.test, "train": ds.train, "all": ds.blocks}[split]
    lines = [f"{b.query_id}\t{' '.join(ranker(b))}" for b in blocks]
    text = "\n".join(lines) + "\n"
    if out:
        _write(Path(out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, seeds=10) -> int:
    results = run_gradcheck(range(cfg.seed, cfg.seed + seeds))
    worst = max(results, key=lambda r: r.error)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} seed={r.seed:<3} "
              f"max_rel_err={r.error:.3e}  ({r.worst_param})")
    if not worst.passed:
        print(f"gradcheck FAILED: worst parameter {worst.worst_param} in {worst.name} "
              f"seed {worst.seed}: {worst.error:.3e} >= {TOLERANCE:g}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"gradcheck passed: {len(results)} checks, worst {worst.error:.3e} < {TOLERANCE:g}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
    except (KeyError, ValueError, OSError) as exc:
        print(f"sessionrank: bad configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _dispatch(args, cfg)
    except UsageError as exc:
        print(f"sessionrank: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"sessionrank: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"sessionrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def _dispatch(args, cfg: RunConfig) -> int:
    if args.command == "gen-synthetic":
        return cmd_gen_synthetic(cfg, args.out, args.json)
    if args.command == "ingest":
        return cmd_ingest(cfg, args.json)
    if args.command == "train":
        return cmd_train(cfg, args.stage)
    if args.command == "evaluate":
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        for m in methods:
            if m not in ("popularity", "sie", "listrank"):
                raise UsageError(f"unknown method {m!r}")
        return cmd_evaluate(cfg, methods, args.ablation, max(1, args.threads))
    if args.command == "rank":
        return cmd_rank(cfg, args.method, args.split, args.out)
    return cmd_gradcheck(cfg, args.seeds)


if __name__ == "__main__":
    sys.exit(main())
