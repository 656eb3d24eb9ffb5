"""Command-line entry point: ``tan-ntm <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .recipe import RecipeError, resolve

logger = logging.getLogger("tan_ntm")

VARIANTS = ["lstm", "attn", "wtan", "ttan"]


def _window(value: str):
    return value if value == "doc" else int(value)


def _emit(obj, out):
    text = json.dumps(obj, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    sys.stdout.write(text)


def cmd_preprocess(args):
    from .corpus import load_dataset

    corpus = load_dataset(args.dataset, resolve(args.input), seed=args.seed, tr_size=args.tr_size,
                          num_below=args.num_below, fr_abv=args.fr_abv, max_vocab=args.max_vocab,
                          max_seq_len=args.max_seq_len)
    corpus.save(resolve(args.out))
    _emit({"train": len(corpus.train), "test": len(corpus.test), "vocab": corpus.vocab_size,
           "vocab_with_pad": corpus.vocab_size + 1}, None)


def cmd_train(args):
    from .corpus import CorpusSplit
    from .model import ModelConfig, load_glove
    from .train import TrainConfig, Trainer, train

    if args.threads:
        torch.set_num_threads(args.threads)
    corpus = CorpusSplit.load(resolve(args.data))
    out = resolve(args.out)
    if args.resume:
        trainer = Trainer.resume(args.resume, corpus, out, epochs=args.epochs)
        trainer.run()
        return
    mcfg = ModelConfig(vocab_size=corpus.vocab_size, num_topics=args.topics, embed_dim=args.embed_dim,
                       hidden_dim=args.hidden_dim, attn_dim=args.attn_dim, variant=args.variant,
                       prior_alpha=args.prior_alpha)
    tcfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       checkpoint_every=args.checkpoint_every)
    emb = None
    if args.glove and not args.no_glove:
        emb, _ = load_glove(resolve(args.glove), corpus.vocabulary.tokens(), args.embed_dim, args.seed)
    train(corpus, mcfg, tcfg, out, emb)


def _model_and_corpus(args):
    from .checkpoint import load_model
    from .corpus import CorpusSplit

    corpus = CorpusSplit.load(resolve(args.data))
    model, _ = load_model(resolve(args.checkpoint), corpus.vocabulary.fingerprint())
    return model, corpus


def cmd_eval_coherence(args):
    from .evaluation import CoherenceConfig, model_coherence

    model, corpus = _model_and_corpus(args)
    report = model_coherence(model, corpus, CoherenceConfig(top_L=args.top, window=args.window,
                                                            reference_corpus=args.reference))
    _emit(report.to_dict(), args.out)


def cmd_classify(args):
    from .evaluation import ProbeConfig, classify

    model, corpus = _model_and_corpus(args)
    torch.manual_seed(args.seed)
    _emit(classify(model, corpus, ProbeConfig(feature_source=args.source, seed=args.seed)), args.out)


def cmd_export_topics(args):
    from .checkpoint import load_model
    from .corpus import Vocabulary
    from .evaluation import export_topics, top_words

    model, payload = load_model(resolve(args.checkpoint))
    tokens = payload.get("vocab_tokens")
    if tokens is None:
        raise SystemExit("checkpoint carries no vocabulary; re-export from a trainer checkpoint")
    vocab = Vocabulary({t: i for i, t in enumerate(tokens, start=1)}, {})
    with torch.no_grad():
        text = export_topics(top_words(model.topic_word(), vocab, args.top))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_time(args):
    from .evaluation import time_forward

    model, corpus = _model_and_corpus(args)
    torch.manual_seed(args.seed)
    _emit(time_forward(model, corpus, n_passes=args.passes, batch_size=args.batch_size), args.out)


def cmd_run(args):
    from .recipe import run_recipe

    out = run_recipe(args.config, resume=args.resume, seed=args.seed)
    sys.stdout.write((out / "comparison.tsv").read_text())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tan-ntm", description="Topic attention neural topic models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="prune, build vocabulary and encode a dataset")
    s.add_argument("--dataset", required=True, choices=["20ng", "agnews", "yrp"])
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tr-size", type=int)
    s.add_argument("--num-below", type=int)
    s.add_argument("--fr-abv", type=float)
    s.add_argument("--max-vocab", type=int)
    s.add_argument("--max-seq-len", type=int)
    s.set_defaults(fn=cmd_preprocess)

    s = sub.add_parser("train", help="train a model on a preprocessed corpus")
    s.add_argument("--data", required=True)
    s.add_argument("--variant", choices=VARIANTS, default="ttan")
    s.add_argument("--topics", type=int, default=50)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--glove")
    s.add_argument("--no-glove", action="store_true")
    s.add_argument("--embed-dim", type=int, default=200)
    s.add_argument("--hidden-dim", type=int, default=450)
    s.add_argument("--attn-dim", type=int, default=350)
    s.add_argument("--batch-size", type=int, default=100)
    s.add_argument("--prior-alpha", type=float)
    s.add_argument("--checkpoint-every", type=int, default=10)
    s.add_argument("--resume", help="continue from a trainer checkpoint")
    s.add_argument("--threads", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval-coherence", help="NPMI coherence of a checkpoint's topics")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--window", type=_window, default=10, help="window width in tokens, or 'doc'")
    s.add_argument("--reference", choices=["train", "test"], default="train")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval_coherence)

    s = sub.add_parser("classify", help="linear probe on frozen document features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--source", choices=["topic", "context"], default="topic")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_classify)

    s = sub.add_parser("export-topics", help="TSV table of each topic's top words")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_export_topics)

    s = sub.add_parser("time", help="mean forward-pass time")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--passes", type=int, default=10000)
    s.add_argument("--batch-size", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_time)

    s = sub.add_parser("run", help="execute an experiment recipe")
    s.add_argument("config")
    s.add_argument("--resume", action="store_true", help="skip stages whose inputs are unchanged")
    s.add_argument("--seed", type=int, help="override the recipe seed")
    s.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.fn(args)
    except RecipeError as e:
        logger.error("%s", e)
        return 2
    except (FileNotFoundError, ValueError, RuntimeError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
