"""Command-line entry point: ``txlmem <subcommand> ...``.

Machine-readable results go to stdout, diagnostics to stderr.  Files are
written under ``$TXLMEM_OUTPUT_DIR`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .data import CorpusError, StreamExhausted, load as load_corpus, synthetic_corpus
from .memory import PATTERNS, arrange
from .model import CheckpointError
from .train import TrainingDiverged

OUTPUT_ENV = "TXLMEM_OUTPUT_DIR"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

log = logging.getLogger("txlmem")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def output_dir() -> Path:
    out = Path(os.environ.get(OUTPUT_ENV, "runs"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def format_layers(layers) -> str:
    """Comma-separated indices with contiguous runs written as ``a..b``."""
    layers = sorted(layers)
    if not layers:
        return ""
    parts, start, prev = [], layers[0], layers[0]
    for i in layers[1:] + [None]:
        if i is not None and i == prev + 1:
            prev = i
            continue
        parts.append(str(start) if start == prev else f"{start}..{prev}")
        if i is not None:
            start = prev = i
    return ",".join(parts)


def _load_config(path, seed=None):
    try:
        cfg = config_mod.load(path)
    except config_mod.ConfigError as e:
        raise UsageError(f"config {path}: {e}") from None
    if seed is not None:
        try:
            cfg = cfg.with_train(seed=seed)
        except ValueError as e:
            raise UsageError(str(e)) from None
    return cfg


def _corpus_for(cfg, data_override):
    path = data_override or cfg.data.path
    if not path:
        raise UsageError("no corpus: set data.path in the config or pass --data")
    return load_corpus(path, cfg.data.split)


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_config(args.config, args.seed)
    corpus = _corpus_for(cfg, args.data)
    out = output_dir()
    stem = args.name or Path(args.config).stem
    ckpt, metrics = out / f"{stem}.ckpt", out / f"{stem}.metrics.jsonl"
    result = train(cfg, corpus, metrics_path=metrics, checkpoint_path=ckpt,
                   on_record=lambda r: log.info("%s", json.dumps(r)))
    print(json.dumps({"checkpoint": str(ckpt), "metrics": str(metrics), "steps": result.steps,
                      "best_step": result.best_step, "best_valid_bpc": result.best_valid_bpc,
                      "stopped_early": result.stopped_early}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model

    try:
        params, cfg = load_model(args.checkpoint)
    except OSError as e:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {e}") from None
    corpus = _corpus_for(cfg, args.data)
    try:
        report = evaluate(params, cfg.model, corpus, args.split, args.lrm_eval, args.lanes, args.max_bytes)
    except ValueError as e:
        raise UsageError(str(e)) from None
    log.info("evaluated %d tokens in %.1f ms", report.tokens, report.wall_ms)
    print(json.dumps(report.to_dict(wall=False), sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .train import format_sweep, srm_sweep, train

    cfg = _load_config(args.config, args.seed)
    corpus = _corpus_for(cfg, args.data)
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    base_params = None
    if args.fine_tune:
        base_params = train(cfg, corpus).params
    out = output_dir()
    try:
        rows = srm_sweep(cfg, lengths, corpus, fine_tune=args.fine_tune, base_params=base_params,
                         checkpoint_dir=out)
    except ValueError as e:
        if isinstance(e, (CorpusError, CheckpointError)):
            raise
        raise UsageError(str(e)) from None
    table = format_sweep(rows)
    (out / "srm_sweep.tsv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_profile(args) -> int:
    from .profiler import format_table, profile, series

    paths = [p for p in args.configs.split(",") if p]
    if not paths:
        raise UsageError("--configs needs at least one file")
    cfgs = [_load_config(p) for p in paths]
    rows = profile(cfgs, names=[Path(p).stem for p in paths], warmup=args.warmup, measure=args.measure)
    (output_dir() / "profile_series.json").write_text(json.dumps(series(rows), indent=1))
    sys.stdout.write(format_table(rows))
    return EXIT_OK


def cmd_arrange(args) -> int:
    try:
        layers = arrange(args.layers, args.num_lrm, args.pattern)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(",".join(map(str, layers)) if args.expand else format_layers(layers))
    return EXIT_OK


def cmd_synth(args) -> int:
    Path(args.out).write_bytes(synthetic_corpus(args.bytes, args.seed))
    print(json.dumps({"path": args.out, "bytes": args.bytes, "seed": args.seed}))
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = config_mod.DEFAULT
    if args.num_lrm is not None or args.pattern:
        changes = {}
        if args.num_lrm is not None:
            changes["num_lrm"] = args.num_lrm
        if args.pattern:
            changes["pattern"] = args.pattern
        try:
            cfg = cfg.with_memory(**changes)
        except ValueError as e:
            raise UsageError(str(e)) from None
    if args.data:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, path=args.data))
    sys.stdout.write(config_mod.dumps(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="txlmem", description="Transformer-XL with per-layer long/short-range memories")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--data", help="corpus path (overrides data.path)")
    t.add_argument("--name", help="output file stem (default: config file stem)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="bits per character of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("valid", "test"), required=True)
    e.add_argument("--lrm-eval", type=int, help="test-time long-range memory length")
    e.add_argument("--data")
    e.add_argument("--lanes", type=int, default=1)
    e.add_argument("--max-bytes", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-srm", help="train and test one model per short-range memory length")
    s.add_argument("--config", required=True)
    s.add_argument("--lengths", required=True)
    s.add_argument("--fine-tune", action="store_true", help="start every length from one base model")
    s.add_argument("--seed", type=int)
    s.add_argument("--data")
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("profile", help="latency and peak memory per config")
    pr.add_argument("--configs", required=True, help="comma-separated config files")
    pr.add_argument("--warmup", type=int, default=10)
    pr.add_argument("--measure", type=int, default=50)
    pr.set_defaults(func=cmd_profile)

    a = sub.add_parser("arrange", help="print the layers that hold long-range memories")
    a.add_argument("--layers", type=int, required=True)
    a.add_argument("--num-lrm", type=int, required=True)
    a.add_argument("--pattern", choices=[x for x in PATTERNS if x != "explicit"], required=True)
    a.add_argument("--expand", action="store_true", help="list every index instead of a..b runs")
    a.set_defaults(func=cmd_arrange)

    c = sub.add_parser("config", help="print the default experiment config")
    c.add_argument("--num-lrm", type=int)
    c.add_argument("--pattern", choices=PATTERNS)
    c.add_argument("--data")
    c.set_defaults(func=cmd_config)

    g = sub.add_parser("synth-corpus", help="write a deterministic synthetic text corpus")
    g.add_argument("--bytes", type=int, default=1_000_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_synth)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, StreamExhausted, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
