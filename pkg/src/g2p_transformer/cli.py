"""Command-line interface: ``g2pt train|eval|convert|inspect|selfcheck``."""

import argparse
import json
import logging
import os
import sys

from . import config as cfgmod
from .data import (
    DataError,
    Vocabulary,
    build_vocabularies,
    filter_by_length,
    read_lexicon,
    read_word_list,
    split_dataset,
)
from .inference import batch_decode
from .model import (
    CheckpointError,
    ModelConfig,
    component_counts,
    count_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# inventory sizes plus the three special tokens
DEFAULT_VOCAB = {"cmudict": (30, 44), "nettalk": (29, 55)}

log = logging.getLogger("g2pt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_split(path, kind, what):
    path = cfgmod.data_path(path)
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")
    entries, report = read_lexicon(path, kind)
    for lineno, msg in report.warnings:
        log.warning("%s:%d: %s", path, lineno, msg)
    if report.rejected:
        log.info("%s: rejected %d lines", path, len(report.rejected))
    return entries


def cmd_train(args):
    run = cfgmod.load_config(args.config, args.override)
    if args.output_dir:
        run["output_dir"] = args.output_dir
    if args.max_epochs is not None:
        run["training"]["max_epochs"] = args.max_epochs
    kind = run["dataset"]
    train_e = _load_split(run["train"], kind, "train")
    dev_e = _load_split(run["dev"], kind, "dev") if run.get("dev") else None
    test_e = _load_split(run["test"], kind, "test") if run.get("test") else []
    train_e, dev_e, test_e = split_dataset(train_e, test_e, dev_e, seed=run["seed"],
                                           dev_size=run["training"]["dev_size"])
    max_len = run["model"]["max_len"]
    train_e, dropped = filter_by_length(train_e, max_len)
    if dropped:
        log.info("dropped %d training words longer than %d tokens", len(dropped), max_len - 2)
    vocab_g, vocab_p = build_vocabularies(train_e + dev_e + test_e)

    from .training import TrainOptions, evaluate_entries, train

    model_cfg = ModelConfig(**run["model"], grapheme_vocab_size=len(vocab_g),
                            phoneme_vocab_size=len(vocab_p))
    t = run["training"]
    options = TrainOptions(
        lr=run["optimizer"]["lr"], beta1=run["optimizer"]["beta1"],
        beta2=run["optimizer"]["beta2"], adam_eps=run["optimizer"]["adam_eps"],
        clip_norm=run["optimizer"]["clip_norm"], batch_size=t["batch_size"],
        max_epochs=t["max_epochs"], eval_every=t["eval_every"],
        target_dev_wer=t["target_dev_wer"], patience=run["schedule"]["patience"],
        decay=run["schedule"]["decay"], lr_floor=run["schedule"]["lr_floor"],
        seed=run["seed"], max_len=max_len, out_dir=run["output_dir"],
    )
    os.makedirs(run["output_dir"], exist_ok=True)
    with open(os.path.join(run["output_dir"], "effective_config.json"), "w") as fh:
        json.dump(run, fh, indent=2)

    def progress(rec):
        if not args.quiet:
            print(json.dumps(rec), flush=True)

    result = train(model_cfg, train_e, dev_e, vocab_g, vocab_p, options, on_epoch=progress)
    best = result.checkpoint
    best.extra["dataset"] = kind
    ckpt_path = os.path.join(run["output_dir"], "best.ckpt")
    save_checkpoint(ckpt_path, best)

    from .plots import plot_training_curves

    plot_training_curves(result.log, os.path.join(run["output_dir"], "training_curves.png"))
    print(f"best epoch {best.epoch}: validation PER {best.best_val_per:.2f}% "
          f"WER {best.best_val_wer:.2f}%  -> {ckpt_path}")
    if test_e:
        report = evaluate_entries(best.params, best.config, test_e, vocab_g, vocab_p, max_len)
        _write_report(report, run["output_dir"], "test")
        print(f"test PER {report.per:.2f}% WER {report.wer:.2f}%")
    return EXIT_OK


def _vocabs(ckpt):
    return Vocabulary(ckpt.grapheme_tokens), Vocabulary(ckpt.phoneme_tokens)


def _write_report(report, out_dir, stem):
    from .plots import plot_error_breakdown

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{stem}_report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out_dir, f"{stem}_words.tsv"), "w", encoding="utf-8") as fh:
        report.write_tsv(fh)
    plot_error_breakdown(report, os.path.join(out_dir, f"{stem}_errors.png"))


def cmd_eval(args):
    from .training import evaluate_entries

    ckpt = load_checkpoint(args.model)
    kind = args.kind or ckpt.extra.get("dataset", "cmudict")
    entries = _load_split(args.test, kind, "test")
    vocab_g, vocab_p = _vocabs(ckpt)
    unknown = sorted({ch for e in entries for ch in e.word} - set(vocab_g.tokens))
    if unknown:
        raise DataError(
            f"test data uses graphemes missing from the checkpoint vocabulary: {''.join(unknown)}"
        )
    report = evaluate_entries(ckpt.params, ckpt.config, entries, vocab_g, vocab_p,
                              ckpt.config.max_len)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.model))
    _write_report(report, out_dir, "eval")
    print(report.format_table())
    return EXIT_OK


def cmd_convert(args):
    ckpt = load_checkpoint(args.model)
    vocab_g, vocab_p = _vocabs(ckpt)
    words = list(args.words)
    if args.words_file:
        words += read_word_list(args.words_file)
    if not words:
        raise UsageError("give words on the command line or --words-file")
    kind = ckpt.extra.get("dataset", "cmudict")
    if kind == "cmudict" and not args.keep_case:
        words = [w.upper() for w in words]
    failed = 0
    for res in batch_decode(ckpt.params, ckpt.config, words, vocab_g, vocab_p,
                            ckpt.config.max_len):
        if res.error:
            failed += 1
            print(f"{res.word}: {res.error}", file=sys.stderr)
        else:
            print(f"{res.word}\t{' '.join(res.phonemes)}")
    return EXIT_DATA if failed else EXIT_OK


def cmd_inspect(args):
    if args.model:
        ckpt = load_checkpoint(args.model)
        config = ckpt.config
        header = {"checkpoint": args.model, "epoch": ckpt.epoch,
                  "best_val_per": ckpt.best_val_per, "best_val_wer": ckpt.best_val_wer,
                  "prng": ckpt.prng, "seed": ckpt.seed}
    elif args.config:
        run = cfgmod.load_config(args.config, args.override)
        v_g, v_p = DEFAULT_VOCAB[run["dataset"]]
        config = ModelConfig(**run["model"], grapheme_vocab_size=v_g, phoneme_vocab_size=v_p)
        header = {"config": args.config, "fresh": True}
    else:
        raise UsageError("inspect needs --model or --config")
    info = dict(header)
    info["model_config"] = config.to_dict()
    info["vocab_sizes"] = {"graphemes": config.grapheme_vocab_size,
                           "phonemes": config.phoneme_vocab_size}
    info["parameters"] = component_counts(config)
    info["total_parameters"] = count_params(config)
    if args.json:
        print(json.dumps(info, indent=2))
        return EXIT_OK
    for k, v in header.items():
        print(f"{k}: {v}")
    print("config:")
    for k, v in config.to_dict().items():
        print(f"  {k} = {v}")
    print(f"vocabulary: {config.grapheme_vocab_size} graphemes, "
          f"{config.phoneme_vocab_size} phonemes")
    print("parameters:")
    for k, v in info["parameters"].items():
        print(f"  {k:<16} {v:>10,}")
    print(f"  {'total':<16} {info['total_parameters']:>10,}")
    return EXIT_OK


def cmd_selfcheck(args):
    from .selfcheck import run_selfcheck

    results = run_selfcheck()
    for r in results:
        err = "" if r.max_rel_error is None else f"{r.max_rel_error:.3e}"
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<36} {err:>10}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="g2pt", description="Transformer grapheme-to-phoneme converter.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True,
                   help="config file or preset name (%s)" % ", ".join(cfgmod.preset_names()))
    p.add_argument("--override", nargs="+", default=[], metavar="KEY=VALUE",
                   help="override config values, e.g. n_enc_blocks=3 or training.batch_size=32")
    p.add_argument("--output-dir", help="run directory (overrides output_dir in the config)")
    p.add_argument("--max-epochs", type=int, help="shortcut for training.max_epochs")
    p.add_argument("--quiet", action="store_true", help="do not print per-epoch log lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy-decode a lexicon and report PER/WER")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--test", required=True, help="lexicon file to evaluate on")
    p.add_argument("--kind", choices=["cmudict", "nettalk"],
                   help="lexicon format (default: the dataset the model was trained on)")
    p.add_argument("--out-dir", help="where to write eval_report.json, eval_words.tsv and "
                                     "eval_errors.png (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="print pronunciations for words")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--words-file", help="UTF-8 file with one word per line")
    p.add_argument("--keep-case", action="store_true",
                   help="do not upper-case words for CMUDict models")
    p.add_argument("words", nargs="*", help="words to convert")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("inspect", help="show configuration and parameter counts")
    p.add_argument("--model", help="checkpoint file")
    p.add_argument("--config", help="config file or preset name, for a fresh model")
    p.add_argument("--override", nargs="+", default=[], metavar="KEY=VALUE")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("selfcheck", help="run gradient checks and invariant tests")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"g2pt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"g2pt {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"g2pt {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
