"""Command-line interface: ``radsprl <subcommand> [options]``.

Exit status is 0 on success, 1 when a gradient check fails its threshold and
2 on invalid input or configuration. Output files are written through a
temporary file and renamed, so a failed run leaves none behind.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import math
import os
import sys
import tempfile
import typing
from typing import Sequence

import numpy as np

from . import __version__
from .corpus import CorpusError, agreement, compute_stats, dump_corpus_lines, format_agreement, format_stats, load_corpus, load_lexicon
from .evaluation import SPLIT_MODES, cross_validate, format_report
from .nn import NonFiniteGradientError
from .preprocess import expand_corpus, tokenize
from .synth import GrammarError, generate, generate_relations, load_grammar
from .tagger import (
    CheckpointError,
    TaggerConfig,
    TrainingDivergedError,
    checkpoint_bytes,
    check_gradients,
    load_model,
    predict_corpus,
    train,
)
from .vocab import EmbeddingDimensionError

log = logging.getLogger("radsprl")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2

# errors that mean "bad input or configuration" rather than a crash
INPUT_ERRORS = (
    CorpusError,
    GrammarError,
    CheckpointError,
    EmbeddingDimensionError,
    ValueError,
    OSError,
)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# output handling
# ---------------------------------------------------------------------------


class Outputs:
    """Collects files written by a command so they can be removed if it fails."""

    def __init__(self) -> None:
        self.written: list[str] = []

    def write(self, path: str, data: str | bytes) -> None:
        directory = os.path.dirname(os.path.abspath(path))
        mode = "wb" if isinstance(data, bytes) else "w"
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".radsprl-", suffix=".tmp")
        try:
            with os.fdopen(fd, mode, **({} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": "\n"})) as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            with contextlib.suppress(OSError):
                os.unlink(tmp)
            raise
        self.written.append(path)

    def discard(self) -> None:
        for path in self.written:
            with contextlib.suppress(OSError):
                os.unlink(path)
        self.written.clear()


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

CONFIG_HELP = {
    "word_dim": "word embedding size",
    "char_dim": "character embedding size",
    "char_hidden": "character LSTM units per direction",
    "ind_dim": "indicator-flag embedding size",
    "lstm_hidden": "sentence LSTM units per direction",
    "dropout": "dropout rate on LSTM inputs and outputs",
    "lr": "initial Adam learning rate",
    "lr_decay": "learning-rate decay factor applied per epoch",
    "max_epochs": "maximum training epochs",
    "batch_size": "instances per mini-batch",
    "seed": "root random seed",
    "task": "roles (given indicators) or indicator detection",
    "bio_constraints": "forbid ill-formed BIO transitions in the CRF",
    "min_freq": "minimum word count for the vocabulary",
    "clip_norm": "global gradient-norm clipping threshold",
    "patience": "stop after this many epochs without validation improvement",
}


def _field_type(f: dataclasses.Field):
    hints = typing.get_type_hints(TaggerConfig)
    t = hints[f.name]
    args = [a for a in typing.get_args(t) if a is not type(None)]
    return args[0] if args else t


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training configuration (override --config)")
    g.add_argument("--config", metavar="JSON", help="JSON file of configuration values")
    for f in dataclasses.fields(TaggerConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _field_type(f)
        help_text = f"{CONFIG_HELP.get(f.name, f.name)} (default: {f.default})"
        if kind is bool:
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None, help=help_text)
        elif f.name == "task":
            g.add_argument(flag, dest=f.name, choices=("roles", "indicator"), default=None, help=help_text)
        else:
            g.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.name.upper(), help=help_text)


def resolve_config(args: argparse.Namespace) -> TaggerConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            try:
                loaded = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        values.update(loaded)
    for f in dataclasses.fields(TaggerConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        return TaggerConfig.from_dict(values)
    except TypeError as exc:
        raise UsageError(f"bad configuration: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_stats(args, out: Outputs) -> int:
    stats = compute_stats(load_corpus(args.corpus))
    if args.json:
        print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    else:
        print(format_stats(stats))
    return EXIT_OK


def cmd_agreement(args, out: Outputs) -> int:
    a, b = load_corpus(args.corpus), load_corpus(args.corpus_b)
    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    report = agreement(a, b, lexicon)
    if args.json:
        print(json.dumps(
            {
                "kappa_indicator": report.kappa_indicator,
                "role_f1": {r.value: v for r, v in report.role_f1.items()},
                "n_candidates": report.n_candidates,
            },
            indent=2,
            sort_keys=True,
        ))
    else:
        print(format_agreement(report))
    return EXIT_OK


def _split_validation(instances, fraction: float, seed: int):
    if not 0 <= fraction < 1:
        raise UsageError("--val-fraction must be in [0, 1)")
    n_val = math.ceil(len(instances) * fraction) if fraction > 0 else 0
    if n_val and n_val >= len(instances):
        raise UsageError("too few instances to hold out a validation set")
    order = np.random.default_rng(seed).permutation(len(instances))
    val = [instances[i] for i in sorted(order[:n_val])]
    tr = [instances[i] for i in sorted(order[n_val:])]
    return tr, val


def cmd_train(args, out: Outputs) -> int:
    config = resolve_config(args)
    if config.max_epochs < 1:
        raise UsageError("no training performed: max_epochs must be at least 1")
    corpus = load_corpus(args.corpus)
    instances = expand_corpus(corpus, tokenize, config.task, strict=not args.skip_unaligned)
    if not instances:
        raise UsageError("corpus yields no training instances")
    tr, val = _split_validation(instances, args.val_fraction, config.seed)
    log.info("training on %d instances, validating on %d", len(tr), len(val))
    model, history = train(tr, val or None, config, args.embeddings)
    out.write(args.model, checkpoint_bytes(model))
    log_path = args.log or args.model + ".log.json"
    record = {"config": config.to_dict(), "n_train": len(tr), "n_val": len(val), **history.to_dict()}
    out.write(log_path, json.dumps(record, indent=2, sort_keys=True) + "\n")
    best = "n/a" if history.best_val_f1 is None else f"{history.best_val_f1:.4f}"
    print(f"best epoch {history.best_epoch} (validation F1 {best}); model written to {args.model}")
    return EXIT_OK


def cmd_predict(args, out: Outputs) -> int:
    model = load_model(args.model)
    indicator_model = load_model(args.indicator_model) if args.indicator_model else None
    if indicator_model is not None and indicator_model.config.task != "indicator":
        raise UsageError(f"{args.indicator_model} is not an indicator model")
    corpus = load_corpus(args.corpus)
    predicted = predict_corpus(model, corpus, indicator_model)
    out.write(args.output, "".join(line + "\n" for line in dump_corpus_lines(predicted)))
    print(f"{len(predicted)} sentences written to {args.output}")
    return EXIT_OK


def cmd_cv(args, out: Outputs) -> int:
    config = resolve_config(args)
    if config.max_epochs < 1:
        raise UsageError("no training performed: max_epochs must be at least 1")
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    corpus = load_corpus(args.corpus)
    report = cross_validate(
        corpus,
        config,
        k=args.k,
        split_by=args.split_by,
        with_indicator=args.with_indicator,
        jobs=args.jobs,
        pretrained=args.embeddings,
    )
    out.write(args.output, report.to_json())
    table = format_report(report)
    if args.table:
        out.write(args.table, table + "\n")
    print(table)
    return EXIT_OK if not any(f.error for f in report.folds) else EXIT_CHECK_FAILED


def cmd_synth(args, out: Outputs) -> int:
    grammar = load_grammar(args.grammar)
    weights = None
    if args.weights:
        try:
            weights = json.loads(args.weights)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--weights is not valid JSON: {exc}") from None
        if not isinstance(weights, dict):
            raise UsageError("--weights must be a JSON object")
    make = generate_relations if args.relations else generate
    corpus, tally = make(args.n, args.seed, grammar, weights)
    out.write(args.output, "".join(line + "\n" for line in dump_corpus_lines(corpus)))
    if args.tally:
        out.write(args.tally, json.dumps(tally.as_stats().to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{len(corpus)} sentences with {tally.relations} relations written to {args.output}")
    return EXIT_OK


def cmd_gradcheck(args, out: Outputs) -> int:
    config = resolve_config(args)
    result = check_gradients(config, seed=config.seed, n_samples=args.samples, eps=args.eps, stencil=args.stencil)
    width = max(len(n) for n in result.per_group)
    for name, err in result.per_group.items():
        status = "ok" if err < args.threshold else "FAIL"
        print(f"{name.ljust(width)}  {err:.3e}  ({result.n_checked[name]} coords)  {status}")
    print(f"max relative error {result.max_error:.3e} (threshold {args.threshold:g})")
    return EXIT_OK if result.max_error < args.threshold else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radsprl",
        description="Spatial role labeling for radiology sentences with a Bi-LSTM-CRF.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("stats", help="descriptive statistics of a corpus")
    p.add_argument("--corpus", required=True, help="annotated corpus (JSON lines)")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("agreement", help="inter-annotator agreement between two corpora")
    p.add_argument("--corpus", required=True, help="annotations of the first annotator")
    p.add_argument("--corpus-b", required=True, help="annotations of the second annotator")
    p.add_argument("--lexicon", help="preposition lexicon, one per line (default: bundled)")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("train", help="train a tagger and write a checkpoint")
    p.add_argument("--corpus", required=True, help="training corpus (JSON lines)")
    p.add_argument("--model", required=True, help="checkpoint to write")
    p.add_argument("--log", help="training log JSON (default: MODEL.log.json)")
    p.add_argument("--embeddings", help="pretrained word vectors (word2vec text format)")
    p.add_argument("--val-fraction", type=float, default=0.1, help="held-out validation share (default: 0.1)")
    p.add_argument("--skip-unaligned", action="store_true", help="skip sentences whose spans cannot be aligned")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label a corpus with a trained model")
    p.add_argument("--model", required=True, help="roles or indicator checkpoint")
    p.add_argument("--indicator-model", help="indicator checkpoint used instead of the corpus's indicators")
    p.add_argument("--corpus", required=True, help="sentences to label (JSON lines)")
    p.add_argument("--output", required=True, help="predicted corpus (JSON lines)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", help="k-fold cross-validation report")
    p.add_argument("--corpus", required=True, help="annotated corpus (JSON lines)")
    p.add_argument("--output", required=True, help="metric report JSON")
    p.add_argument("--table", help="also write the plain-text table here")
    p.add_argument("--embeddings", help="pretrained word vectors (word2vec text format)")
    p.add_argument("--k", type=int, default=10, help="number of folds (default: 10)")
    p.add_argument("--split-by", choices=SPLIT_MODES, default="instance", help="fold unit (default: instance)")
    p.add_argument("--with-indicator", action="store_true", help="also cross-validate indicator detection")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel (default: 1)")
    add_config_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    p.add_argument("--output", required=True, help="corpus to write (JSON lines)")
    p.add_argument("--n", type=int, default=1000, help="number of sentences (default: 1000)")
    p.add_argument("--relations", action="store_true", help="count relations instead of sentences")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--grammar", help="grammar JSON (default: bundled)")
    p.add_argument("--weights", help='template weights as JSON, e.g. \'{"tl_only": 0.8, "chained": 0.2}\'')
    p.add_argument("--tally", help="write the generator's own statistics as JSON")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tagger gradient")
    p.add_argument("--samples", type=int, default=200, help="coordinates per parameter group (default: 200)")
    p.add_argument("--eps", type=float, default=1e-2, help="finite-difference step (default: 1e-2)")
    p.add_argument("--stencil", type=int, choices=(2, 4), default=4, help="difference points (default: 4, fourth order)")
    p.add_argument("--threshold", type=float, default=1e-4, help="maximum relative error (default: 1e-4)")
    add_config_flags(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out = Outputs()
    try:
        return args.func(args, out)
    except (UsageError, *INPUT_ERRORS) as exc:
        out.discard()
        print(f"radsprl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDivergedError, NonFiniteGradientError) as exc:
        out.discard()
        print(f"radsprl {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except BaseException:
        out.discard()
        raise


if __name__ == "__main__":
    sys.exit(main())
