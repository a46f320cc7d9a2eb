"""Command-line entry point: ``hgmnet <verb> [options]``.

Exit codes: 0 on success, 1 on validation or numeric errors, 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from ..errors import DegenerateInputWarning, HgmError, ValidationError
from ..features import CpcEmbedder, EmbeddingTable, cpc_parse, read_citations
from ..hcl import default_lexicon, read_lexicon
from ..mgat import build_graph, write_graph
from ..numkit import Rng
from ..textseg import content_tokens, tokenize
from . import checkpoint
from .bench import BenchConfig, bench, write_bench
from .dataset import ingest, render_stats, stats, text_table, write_stats
from .model import CPC_LEVELS, SimilarityModel, TrainConfig, train


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return cfg


def _records(args):
    if args.data is None:
        raise ValidationError("--data is required")
    result = ingest(args.data)
    for line, why in result.problems:
        print(f"{args.data}:{line}: skipped: {why}", file=sys.stderr)
    return result


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(args) -> int:
    result = _records(args)
    print(result.summary())
    return 0


def cmd_stats(args) -> int:
    st = stats(_records(args).records, args.top)
    print(render_stats(st))
    if args.out:
        for p in write_stats(st, args.out):
            print(f"wrote {p}")
    return 0


def cmd_train(args) -> int:
    records = _records(args).records
    config = TrainConfig.from_dict(_read_config(args.config))
    lexicon = read_lexicon(args.lexicon) if args.lexicon else default_lexicon()
    citations = read_citations(args.citations) if args.citations else ()
    result = train(records, config, args.seed, lexicon, citations)
    out = _out_dir(args)
    ck_path = checkpoint.save(result.checkpoint(), out / "checkpoint.hgm")
    curve_path = out / "loss_curve.csv"
    curve_path.write_text(result.curve_csv(), encoding="utf-8")
    if result.curve:
        first, last = result.curve[0]["total"], result.curve[-1]["total"]
        print(f"steps: {len(result.curve)}  initial loss: {first:.6g}  final loss: {last:.6g}")
    print(f"wrote {ck_path}\nwrote {curve_path}")
    if result.diverged:
        print(f"training diverged ({result.message}); checkpoint holds the last finite parameters",
              file=sys.stderr)
        return 1
    return 0


def cmd_score(args) -> int:
    if args.checkpoint is None:
        raise ValidationError("--checkpoint is required")
    model = SimilarityModel.from_checkpoint(checkpoint.load(args.checkpoint))
    if args.data is not None:
        rows = [(r.id, model.score(r.anchor, r.target, r.context)) for r in _records(args).records]
        body = "id,score\n" + "".join(f"{i},{s:.17g}\n" for i, s in rows)
        if args.out:
            path = _out_dir(args) / "scores.csv"
            path.write_text(body, encoding="utf-8")
            print(f"wrote {path}")
        else:
            sys.stdout.write(body)
        return 0
    if args.anchor is None or args.target is None or args.context is None:
        raise ValidationError("score needs --anchor, --target and --context (or --data)")
    print(f"{model.score(args.anchor, args.target, args.context):.17g}")
    return 0


def cmd_bench(args) -> int:
    cfg = _read_config(args.config)
    if args.ns:
        cfg["ns"] = [int(x) for x in args.ns.split(",")]
    if args.dense:
        cfg["dense"] = True
    config = BenchConfig.from_dict(cfg)
    rows = bench(config)
    print(text_table(["n", "pairs", "pairs/(n log2 n)", "dense pairs", "pct of dense", "median ms", "dense ms"],
                     [(r.n, r.pairs, f"{r.ratio:.4f}", r.dense_pairs, f"{100 * r.pairs / r.dense_pairs:.3f}",
                       f"{r.wall_ms:.2f}", "" if r.dense_ms is None else f"{r.dense_ms:.2f}") for r in rows]))
    if args.out:
        print(f"wrote {write_bench(rows, args.out, config.dense)}")
    return 0


def cmd_graph(args) -> int:
    records = _records(args).records
    if not records:
        raise ValidationError("no records to build a graph from")
    citations = read_citations(args.citations) if args.citations else ()
    if args.checkpoint:
        model = SimilarityModel.from_checkpoint(checkpoint.load(args.checkpoint))
        table = EmbeddingTable(model.vocab, model.params["tok"])
        cpc = CpcEmbedder([EmbeddingTable(v, model.params[f"cpc.{lvl}"])
                           for v, lvl in zip(model.cpc_vocabs, CPC_LEVELS)])
    else:
        config = TrainConfig.from_dict(_read_config(args.config))
        rng = Rng(args.seed)
        words = [t.surface for r in records for x in (r.anchor, r.target) for t in content_tokens(tokenize(x))]
        table = EmbeddingTable.init(words, config.dim, rng)
        cpc = CpcEmbedder.init([cpc_parse(r.context) for r in records], config.dim, rng)
    g = build_graph(records, table, cpc, citations)
    nodes, edges = write_graph(g, _out_dir(args) / "graph")
    print(f"{len(g)} nodes, {len(g.edges)} edges\nwrote {nodes}\nwrote {edges}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "train": cmd_train,
    "score": cmd_score,
    "bench": cmd_bench,
    "graph": cmd_graph,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgmnet", description="Patent phrase similarity toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="phrase-pair CSV")
        p.add_argument("--citations", help="citing_id<TAB>cited_id file")
        p.add_argument("--lexicon", help="term<TAB>synonyms file")
        if name == "stats":
            p.add_argument("--top", type=int, default=20)
        if name in ("score", "graph"):
            p.add_argument("--checkpoint")
        if name == "score":
            p.add_argument("--anchor")
            p.add_argument("--target")
            p.add_argument("--context")
        if name == "bench":
            p.add_argument("--ns", help="comma-separated sequence lengths")
            p.add_argument("--dense", action="store_true", help="time plain full attention")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    warnings.simplefilter("default", DegenerateInputWarning)
    try:
        return COMMANDS[args.command](args)
    except (HgmError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
