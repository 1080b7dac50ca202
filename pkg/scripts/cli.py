#!/usr/bin/env python3
"""
Operator command line: build-vocab, train, eval, rank, gradcheck, make-fixture,
neighbors, profile and serve.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

# Add the parent directory to the path so we can import our modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from retrieval.checkpoint import load_checkpoint, save_checkpoint
from retrieval.data import (CaptionSet, load_caption_set, load_embedding_table,
                            load_feature_store, load_judgments, load_precomputed_store, load_queries,
                            make_batches)
from retrieval.encoders import EncoderResources
from retrieval.errors import RetrievalError, SelectionTieError, UsageError
from retrieval.metrics import (encoder_win_rates, evaluate_inferred, evaluate_rankings, format_report, read_run,
                               write_run)
from retrieval.spaces import profile_model, rank_many, sentence_neighbors
from retrieval.textproc import Sentence, Vocabulary, build_vocab
from retrieval.trainer import Split, build_model, fit, gradient_check
from scripts.config import Config, TrainConfig, load_train_config

logger = logging.getLogger("scripts.cli")

BOW_VOCAB = "bow_vocab.txt"
SEQ_VOCAB = "seq_vocab.txt"
TIE_RETRIES = 20


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="KEY=value file with TrainConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--log-level", default="WARNING")
    return common


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vocab", help="directory with bow_vocab.txt / seq_vocab.txt")
    p.add_argument("--embeddings", help="word embedding table (count dim header)")
    p.add_argument("--precomputed", help="precomputed sentence vectors")
    p.add_argument("--encoders")
    p.add_argument("--fusion")
    p.add_argument("--dc", type=int)
    p.add_argument("--min-count", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="sea", description="Text-to-video retrieval over encoder-specific common spaces")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("build-vocab", parents=[common], help="write BoW and sequential vocabularies")
    p.add_argument("--captions", required=True)
    p.add_argument("--min-count", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="fit a model and write checkpoint and log")
    p.add_argument("--captions", required=True)
    p.add_argument("--val-captions")
    p.add_argument("--features", required=True)
    _model_flags(p)
    p.add_argument("--loss")
    p.add_argument("--val-metric")
    p.add_argument("--restarts", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="score a run file or a checkpoint")
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--features")
    p.add_argument("--captions")
    p.add_argument("--qrels")
    p.add_argument("--compare", action="append", metavar="NAME=RUN",
                   help="per-query AP comparison of several run files (repeatable)")
    p.add_argument("--out")

    p = sub.add_parser("rank", parents=[common], help="write a run file of the top-N videos per query")
    p.add_argument("--checkpoint", required=True, help="comma-separated list is late-fused")
    p.add_argument("--features", required=True)
    p.add_argument("--queries", required=True, help="one sentence per line")
    p.add_argument("--topn", type=int, default=Config.TOPN)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the loss gradients")
    p.add_argument("--captions", required=True)
    p.add_argument("--features", required=True)
    _model_flags(p)
    p.add_argument("--loss")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt", type=float, default=0.0, help="scale analytic gradients by 1+corrupt")

    p = sub.add_parser("make-fixture", parents=[common], help="write the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-videos", type=int, default=32)

    p = sub.add_parser("neighbors", parents=[common], help="sentence-to-sentence retrieval in one space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--space", type=int, default=0)
    p.add_argument("--topn", type=int, default=20)

    p = sub.add_parser("profile", parents=[common], help="parameter count and per-query timings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--queries", required=True)

    p = sub.add_parser("serve", parents=[common], help="start the ranking API")
    p.add_argument("--checkpoint")
    p.add_argument("--features")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    return parser


def _train_config(args) -> TrainConfig:
    flags = {
        "seed": args.seed,
        "threads": args.threads,
        "encoders": getattr(args, "encoders", None),
        "fusion": getattr(args, "fusion", None),
        "dc": getattr(args, "dc", None),
        "min_count": getattr(args, "min_count", None),
        "loss": getattr(args, "loss", None),
        "val_metric": getattr(args, "val_metric", None),
        "restarts": getattr(args, "restarts", None),
        "max_epochs": getattr(args, "epochs", None),
    }
    if args.command == "train":
        flags["batch_size"] = args.batch_size
    return load_train_config(args.config, flags)


def _resources(args, config: TrainConfig, captions: CaptionSet, out: Optional[Path] = None) -> EncoderResources:
    """Vocabularies from --vocab or built from the captions (and saved to `out`), plus tables and stores"""
    resources = EncoderResources()
    needs_bow = "bow" in config.encoders
    needs_seq = bool({"gru", "bigru"} & set(config.encoders))
    vocab_dir = Path(args.vocab) if getattr(args, "vocab", None) else None
    corpus = [s.tokens for s in captions.sentences]

    for needed, name, attr, sequential in ((needs_bow, BOW_VOCAB, "bow_vocab", False),
                                           (needs_seq, SEQ_VOCAB, "seq_vocab", True)):
        if not needed:
            continue
        if vocab_dir is not None:
            path = vocab_dir / name
            vocab = Vocabulary.load(path)
        else:
            vocab = build_vocab(corpus, config.min_count, for_sequential=sequential)
            path = None
            if out is not None:
                path = out / name
                vocab.save(path)
        setattr(resources, attr, vocab)
        if path is not None:
            resources.paths[attr] = str(path)

    if getattr(args, "embeddings", None):
        resources.table = load_embedding_table(args.embeddings)
        resources.paths["table"] = args.embeddings
    if getattr(args, "precomputed", None):
        resources.precomputed = load_precomputed_store(args.precomputed)
        resources.paths["precomputed"] = args.precomputed
    return resources


def _checkpoints(value: str):
    paths = [p.strip() for p in value.split(",") if p.strip()]
    if not paths:
        raise UsageError("--checkpoint needs at least one path")
    models = [load_checkpoint(p) for p in paths]
    return models[0] if len(models) == 1 else models


def cmd_build_vocab(args) -> int:
    config = _train_config(args)
    captions = load_caption_set(args.captions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = [s.tokens for s in captions.sentences]
    bow = build_vocab(corpus, config.min_count, for_sequential=False)
    seq = build_vocab(corpus, config.min_count, for_sequential=True)
    bow.save(out / BOW_VOCAB)
    seq.save(out / SEQ_VOCAB)
    print(f"bow_vocab={bow.size} seq_vocab={seq.size} min_count={config.min_count}")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = load_feature_store(args.features)
    train_caps = load_caption_set(args.captions)
    val_caps = load_caption_set(args.val_captions) if args.val_captions else train_caps
    train_caps.check_against(store)
    val_caps.check_against(store)
    resources = _resources(args, config, train_caps, out)

    logger.info(f"config: {config.describe()}")
    result = fit(Split(train_caps, store), Split(val_caps, store), config, resources)
    save_checkpoint(result.model, out / "model.ckpt", resources.paths)
    with open(out / "train.log", "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {config.describe()}\n")
        f.write("".join(line + "\n" for line in result.log.lines()))
        f.write("".join(f"# {note}\n" for note in result.log.notes))
    with open(out / "diversity.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(line + "\n" for line in result.log.diversity_report()))
    print(f"best_{config.val_metric}={result.best_metric:.6f} checkpoint={out / 'model.ckpt'}")
    return 0


def _relevance(args, captions: Optional[CaptionSet]):
    pool = load_judgments(args.qrels) if args.qrels else None
    if pool is not None:
        return {q: pool.relevant(q) for q in pool.queries()}, pool
    if captions is None:
        raise UsageError("eval needs --qrels or --captions for relevance")
    return captions.relevant_by_query(), None


def _compare_runs(items: List[str], relevant) -> str:
    """One aggregate line per named run, then the share of queries each run wins on AP"""
    per_run, lines = {}, []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--compare expects NAME=RUN, got {item!r}")
        if name in per_run:
            raise UsageError(f"--compare names must be unique, {name} repeats")
        report = evaluate_rankings(read_run(path), relevant)
        per_run[name] = report.per_query_ap
        lines.append(f"{name} " + format_report(report).splitlines()[-1].split(" ", 1)[1])
    if len(per_run) < 2:
        raise UsageError("--compare needs at least two runs")
    wins = encoder_win_rates(per_run)
    lines.append("wins " + " ".join(f"{name}={share:.4f}" for name, share in wins.items()))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    captions = load_caption_set(args.captions) if args.captions else None
    rankings = None
    if args.run:
        rankings = read_run(args.run)
    elif args.checkpoint:
        if not args.features or captions is None:
            raise UsageError("eval --checkpoint needs --features and --captions")
        rankings = rank_many(captions.sentences, load_feature_store(args.features), _checkpoints(args.checkpoint))
    elif not args.compare:
        raise UsageError("eval needs --run, --checkpoint or --compare")

    relevant, pool = _relevance(args, captions)
    text = ""
    if rankings is not None:
        report = evaluate_rankings(rankings, relevant)
        if pool is not None:
            report.per_query_infap = evaluate_inferred([r for r in rankings if r.query_id in pool], pool)
            if report.per_query_infap:
                report.mean_infap = float(np.mean(list(report.per_query_infap.values())))
        text = format_report(report)
    if args.compare:
        text += _compare_runs(args.compare, relevant)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    sys.stdout.write(text)
    return 0


def cmd_rank(args) -> int:
    if args.topn < 1:
        raise UsageError(f"--topn must be >= 1, got {args.topn}")
    queries = load_queries(args.queries)
    rankings = rank_many(queries, load_feature_store(args.features), _checkpoints(args.checkpoint), args.topn)
    write_run(args.out, rankings)
    print(f"queries={len(rankings)} run={args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    config = _train_config(args)
    store = load_feature_store(args.features)
    captions = load_caption_set(args.captions)
    resources = _resources(args, config, captions)

    torch.manual_seed(config.seed)
    model = build_model(config, resources, store.d_v)
    model.reset_parameters(resources.table, torch.Generator().manual_seed(config.seed))

    for attempt in range(TIE_RETRIES):
        batch = make_batches(captions, args.batch_size, config.seed, attempt, store)[0]
        try:
            report = gradient_check(model, batch, args.tolerance, config.loss, config.alpha,
                                    args.samples, seed=config.seed, corrupt=args.corrupt)
        except SelectionTieError as e:
            logger.info(f"attempt {attempt}: {e}")
            continue
        for name, err in report.per_tensor.items():
            print(f"{name}\t{err:.3e}")
        print(f"max_rel_error={report.max_rel_error:.3e} checked={report.checked} "
              f"{'PASS' if report.passed else 'FAIL'}")
        return 0 if report.passed else 3
    raise SelectionTieError(f"Every one of {TIE_RETRIES} sampled batches was too close to a selection tie")


def cmd_make_fixture(args) -> int:
    from scripts.data_generator import fixture_summary, make_fixture

    paths = make_fixture(args.out, args.n_videos, 42 if args.seed is None else args.seed)
    for key, value in fixture_summary(paths).items():
        print(f"{key}={value}")
    return 0


def cmd_neighbors(args) -> int:
    model = load_checkpoint(args.checkpoint)
    pool = load_caption_set(args.captions).sentences
    query = Sentence.from_text("query", args.query)
    for sid, score in sentence_neighbors(query, pool, model, args.space, args.topn):
        print(f"{sid}\t{score:.6f}")
    return 0


def cmd_profile(args) -> int:
    prof = profile_model(_checkpoints(args.checkpoint), load_queries(args.queries),
                         load_feature_store(args.features))
    print(f"parameters_million={prof.parameters_million:.3f}")
    print(f"query_embedding_ms={prof.query_embedding_ms:.3f}")
    print(f"ranking_ms={prof.ranking_ms:.3f}")
    print(f"queries={prof.queries} collection={prof.collection_size}")
    return 0


def cmd_serve(args) -> int:
    import main
    from api.routes import search
    from scripts.index_manager import IndexManager

    checkpoints = [p for p in (args.checkpoint or "").split(",") if p] or None
    search.set_index(IndexManager(checkpoints, args.features, args.threads))
    main.serve(args.host, args.port)
    return 0


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "gradcheck": cmd_gradcheck,
    "make-fixture": cmd_make_fixture,
    "neighbors": cmd_neighbors,
    "profile": cmd_profile,
    "serve": cmd_serve,
}


def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, force=True,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads:
            torch.set_num_threads(args.threads)
        return COMMANDS[args.command](args)
    except RetrievalError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
