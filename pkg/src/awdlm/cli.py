"""Command-line entry point: build-vocab, lr-find, train, eval, generate.

Exit status is 0 on success, 2 for configuration errors and 1 for any
other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, RunConfig, make_config
from .corpus import EmptyCorpus, Vocabulary, build_vocab, encode_documents, read_corpus_dir, tokenize
from .evaluate import UniformModel, generate, perplexity
from .model import LstmLanguageModel
from .ngram import InterpolatedBigram

log = logging.getLogger("awdlm")


class MissingCheckpoint(FileNotFoundError):
    pass


# flags that map one-to-one onto RunConfig fields
CONFIG_FLAGS = {
    "model": dict(choices=["awd", "ngram"]),
    "train_dir": dict(), "valid_dir": dict(), "test_dir": dict(),
    "vocab_path": dict(flag="--vocab"), "checkpoint_path": dict(flag="--checkpoint"),
    "min_freq": dict(type=int), "max_vocab": dict(type=int),
    "emb": dict(type=int), "hidden": dict(type=int), "layers": dict(type=int),
    "dropout_mult": dict(type=float),
    "batch_size": dict(type=int), "bptt": dict(type=int),
    "phase1_epochs": dict(type=int), "phase2_epochs": dict(type=int),
    "phase1_lr": dict(type=float), "group_lrs": dict(type=float, nargs="+"),
    "unfreeze": dict(choices=["all", "gradual"]),
    "weight_decay": dict(type=float), "optimizer": dict(choices=["adam", "sgd", "asgd"]),
    "clip": dict(type=float),
}


def _add_shared(p: argparse.ArgumentParser, fields: list[str]):
    p.add_argument("--config", metavar="PATH", help="JSON file of RunConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    for name in fields:
        opts = dict(CONFIG_FLAGS[name])
        flag = opts.pop("flag", "--" + name.replace("_", "-"))
        p.add_argument(flag, dest=name, default=None, **opts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="awdlm", description="AWD-LSTM and n-gram language modelling")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    model_fields = ["emb", "hidden", "layers", "dropout_mult", "batch_size", "bptt"]

    p = sub.add_parser("build-vocab", help="count tokens and write a vocabulary file")
    _add_shared(p, ["train_dir", "vocab_path", "min_freq", "max_vocab"])

    p = sub.add_parser("lr-find", help="exponential learning-rate range test")
    _add_shared(p, ["train_dir", "vocab_path", *model_fields, "weight_decay", "optimizer", "clip"])
    p.add_argument("--out", required=True, help="CSV file for the lr,loss trace")
    p.add_argument("--plot", help="PNG file for the trace plot")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr-start", type=float, default=1e-7)
    p.add_argument("--lr-end", type=float, default=10.0)

    p = sub.add_parser("train", help="train a model and write the best checkpoint")
    _add_shared(p, ["model", "train_dir", "valid_dir", "vocab_path", "checkpoint_path", *model_fields,
                    "phase1_epochs", "phase2_epochs", "phase1_lr", "group_lrs", "unfreeze",
                    "weight_decay", "optimizer", "clip"])
    p.add_argument("--log", help="file for per-epoch log lines")
    p.add_argument("--plot", help="PNG file for training curves")

    p = sub.add_parser("eval", help="held-out perplexity")
    _add_shared(p, ["model", "test_dir", "vocab_path", "checkpoint_path"])
    p.add_argument("--uniform", action="store_true", help="score with the uniform model over the vocabulary")
    p.add_argument("--report", help="also write the report as key=value lines")

    p = sub.add_parser("generate", help="continue a prompt")
    _add_shared(p, ["vocab_path", "checkpoint_path"])
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {name: getattr(args, name) for name in CONFIG_FLAGS if hasattr(args, name)}
    overrides["seed"] = args.seed
    return make_config(args.preset, overrides, args.config)


def _need(cfg: RunConfig, *names: str):
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(name, "is required for this command")


def _load_vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary.load(cfg.vocab_path)


def _stream(directory: str, vocab: Vocabulary) -> np.ndarray:
    docs = read_corpus_dir(directory)
    if not any(docs):
        raise EmptyCorpus(f"no tokens under {directory}")
    return encode_documents(docs, vocab)


def _load_scorer(cfg: RunConfig, vocab: Vocabulary):
    path = Path(cfg.checkpoint_path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    if cfg.model == "ngram" or path.is_dir():
        return InterpolatedBigram.load(path, vocab)
    model = LstmLanguageModel.load(path)
    if model.config.vocab_size != len(vocab):
        raise ValueError(f"checkpoint vocabulary ({model.config.vocab_size}) does not match "
                         f"vocab file ({len(vocab)})")
    return model


def cmd_build_vocab(cfg: RunConfig, args) -> None:
    _need(cfg, "train_dir", "vocab_path")
    tokens = [t for doc in read_corpus_dir(cfg.train_dir) for t in doc]
    if not tokens:
        raise EmptyCorpus(f"no tokens under {cfg.train_dir}")
    vocab = build_vocab(tokens, cfg.min_freq, cfg.max_vocab)
    vocab.save(cfg.vocab_path)
    covered = sum(1 for t in tokens if t in vocab)
    print(f"vocab_size={len(vocab)} coverage={100.0 * covered / len(tokens):.2f}%")


def cmd_lr_find(cfg: RunConfig, args) -> None:
    from .corpus import batchify
    from .schedule import GroupLrPolicy, lr_find
    from .train import Trainer

    _need(cfg, "train_dir", "vocab_path")
    vocab = _load_vocab(cfg)
    stream = _stream(cfg.train_dir, vocab)
    model = LstmLanguageModel(cfg.model_config(len(vocab)), seed=cfg.seed)
    trainer = Trainer(model, cfg)
    trainer.policy = GroupLrPolicy.all_unfrozen([1.0] * len(trainer.group_names))
    plan = batchify(stream, cfg.batch_size, cfg.bptt)

    def batches():
        while True:
            for _, x, y in plan.segments(trainer.rng, cfg.variable_bptt):
                yield x, y

    trace = lr_find(trainer, batches(), args.lr_start, args.lr_end, args.steps)
    Path(args.out).write_text(trace.to_csv(), encoding="utf-8")
    if args.plot:
        from .plotting import plot_lr_trace
        plot_lr_trace(trace, args.plot)
    print(f"suggested_lr={trace.suggested_lr:.6g} max_descending_lr={trace.max_descending_lr:.6g}")


def cmd_train(cfg: RunConfig, args) -> None:
    from .train import train_language_model

    _need(cfg, "train_dir", "vocab_path", "checkpoint_path")
    vocab = _load_vocab(cfg)
    train = _stream(cfg.train_dir, vocab)
    valid = _stream(cfg.valid_dir, vocab) if cfg.valid_dir else None
    if cfg.model == "ngram":
        model = InterpolatedBigram.fit(train, len(vocab))
        model.save(cfg.checkpoint_path, vocab)
        if valid is not None:
            print(f"valid {perplexity(model, valid)}")
        return
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def on_epoch(rec):
        print(rec.line(), flush=True)
        if log_fh:
            log_fh.write(rec.line() + "\n")
            log_fh.flush()

    try:
        _, history = train_language_model(train, valid, len(vocab), cfg, on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    if args.plot and history:
        from .plotting import plot_training
        plot_training(history, args.plot)


def cmd_eval(cfg: RunConfig, args) -> None:
    _need(cfg, "test_dir", "vocab_path")
    vocab = _load_vocab(cfg)
    stream = _stream(cfg.test_dir, vocab)
    if args.uniform:
        scorer = UniformModel(len(vocab))
    else:
        _need(cfg, "checkpoint_path")
        scorer = _load_scorer(cfg, vocab)
    report = perplexity(scorer, stream)
    print(report)
    if args.report:
        report.save(args.report)


def cmd_generate(cfg: RunConfig, args) -> None:
    _need(cfg, "vocab_path", "checkpoint_path")
    vocab = _load_vocab(cfg)
    model = _load_scorer(cfg, vocab)
    if not isinstance(model, LstmLanguageModel):
        raise ValueError("generation needs a neural checkpoint")
    prompt = [vocab.encode(t) for t in tokenize(args.prompt)]
    rng = np.random.default_rng(cfg.seed)
    out = generate(model, prompt, args.max_len, args.temperature, rng, args.mode)
    print(" ".join(tokenize(args.prompt) + vocab.decode_ids(out)))


COMMANDS = {"build-vocab": cmd_build_vocab, "lr-find": cmd_lr_find, "train": cmd_train,
            "eval": cmd_eval, "generate": cmd_generate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse itself exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_json())
            return 0
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to status 1
        if args.verbose:
            log.exception("failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
