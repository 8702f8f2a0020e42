"""Command-line entry point.

    amlm tokenize --vocab V --corpus C --out IDS
    amlm nhot     --vocab V --out TABLE
    amlm train    --config CFG --seed N --out-dir RUN [--metric M] [--schedule S] [--nhot | --no-nhot] [--resume CKPT]
    amlm stats    --run-dir RUN --group {freq,pos} [--pos-map TSV] [--bin-size N] [--out FILE] [--format csv|jsonl]

Exit codes: 0 success, 2 I/O failure, 3 invalid input or config, 4 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .analytics import TrajectoryLog, export, load_pos_map, snapshot
from .binio import FormatError
from .config import ConfigError, load_config
from .model import DivergenceError
from .nhot import build_nhot, save_nhot
from .scheduler import METRICS
from .vocab import VocabError, load_vocab, ranking_from_counts, read_documents, tokenize_documents, write_pretokenized

log = logging.getLogger("amlm")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    """Bad combination of flags; maps to the validation exit code."""


def cmd_tokenize(args: argparse.Namespace) -> int:
    vocab = load_vocab(args.vocab)
    docs = tokenize_documents(read_documents(args.corpus), vocab)
    write_pretokenized(docs, args.out)
    n_tokens = sum(len(d) for d in docs)
    n_types = len(np.unique(np.concatenate(docs))) if n_tokens else 0
    if n_tokens == 0:
        log.warning("corpus %s is empty; wrote an empty id file", args.corpus)
    print(f"documents={len(docs)} tokens={n_tokens} types={n_types}")
    return EXIT_OK


def cmd_nhot(args: argparse.Namespace) -> int:
    vocab = load_vocab(args.vocab)
    table = build_nhot(vocab)
    save_nhot(table, args.out)
    print(f"vocab={table.vocab_size} features={table.total} max_per_token={int(table.counts().max(initial=0))}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from .train import train  # pulls in torch

    overrides = {"seed": args.seed, "metric": args.metric, "schedule": args.schedule, "use_nhot": args.nhot}
    cfg = load_config(args.config, **overrides)
    result = train(cfg, args.out_dir, resume=args.resume)
    last = result.metrics[-1]
    print(
        f"steps={result.steps} updates={result.n_updates} "
        f"eval_loss {result.metrics[0]['eval_loss']:.4f} -> {last['eval_loss']:.4f} out={result.out_dir}"
    )
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    run = Path(args.run_dir)
    if args.group == "pos" and not args.pos_map:
        raise UsageError("--group pos needs --pos-map")
    weights = np.load(run / "weights.npy")
    special = np.load(run / "special.npy")
    ranking = ranking_from_counts(np.load(run / "token_counts.npy"))
    if weights.ndim != 2 or weights.shape[1] != len(special) or len(special) != ranking.size:
        raise FormatError(f"{run}: weights, special and token_counts disagree on vocabulary size")
    pos_map = load_pos_map(args.pos_map) if args.group == "pos" else None
    bin_size = args.bin_size or _run_bin_size(run)
    out = TrajectoryLog()
    for t, w in enumerate(weights):
        out.extend(snapshot(
            t, w, special,
            ranking=ranking if args.group == "freq" else None,
            bin_size=bin_size,
            pos_map=pos_map,
            occurrence_weighted=args.occurrence_weighted,
        ))
    target = args.out or str(run / f"stats_{args.group}.{args.format}")
    export(out, target, args.format)
    print(f"timesteps={len(weights)} records={len(out)} out={target}")
    return EXIT_OK


def _run_bin_size(run: Path) -> int:
    cfg = run / "config.txt"
    if cfg.exists():
        return load_config(cfg).bin_size
    return 1000


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amlm", description="Adaptive masked language modelling toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tokenize", help="tokenize a text corpus into an id file")
    t.add_argument("--vocab", required=True, help="vocabulary file, one token per line")
    t.add_argument("--corpus", required=True, help="UTF-8 text, one document per line")
    t.add_argument("--out", required=True, help="output id file (one line of ids per document)")
    t.set_defaults(func=cmd_tokenize)

    n = sub.add_parser("nhot", help="precompute sub-token membership features")
    n.add_argument("--vocab", required=True, help="vocabulary file")
    n.add_argument("--out", required=True, help="output table file")
    n.set_defaults(func=cmd_nhot)

    r = sub.add_parser("train", help="train the toy model with adaptive masking")
    r.add_argument("--config", required=True, help="key = value run configuration")
    r.add_argument("--seed", type=int, default=None, help="root seed (overrides the config file)")
    r.add_argument("--out-dir", required=True, help="run directory for manifest, logs and checkpoints")
    r.add_argument("--metric", choices=METRICS, default=None, help="weight update metric")
    r.add_argument("--schedule", choices=("decay", "constant"), default=None, help="masking-rate schedule")
    r.add_argument("--nhot", action=argparse.BooleanOptionalAction, default=None, help="add sub-token features")
    r.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    r.set_defaults(func=cmd_train)

    s = sub.add_parser("stats", help="group logged mask weights by frequency bin or POS tag")
    s.add_argument("--run-dir", required=True, help="directory written by 'amlm train'")
    s.add_argument("--group", choices=("freq", "pos"), required=True, help="grouping")
    s.add_argument("--pos-map", default=None, help="token_id<TAB>UPOS file (required for --group pos)")
    s.add_argument("--bin-size", type=int, default=0, help="ranks per frequency bin (default: the run's)")
    s.add_argument("--occurrence-weighted", action="store_true", help="weight types by corpus frequency")
    s.add_argument("--format", choices=("csv", "jsonl"), default="csv", help="output format")
    s.add_argument("--out", default=None, help="output file (default: RUN/stats_GROUP.FORMAT)")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"amlm: training diverged: {exc}; last good state kept under checkpoints/last_good", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, VocabError, FormatError, UsageError, ValueError) as exc:
        print(f"amlm: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"amlm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
