"""The ``contact`` command line: filter -> tokenize -> pretrain -> finetune
-> evaluate -> report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every run writes a ``*.manifest.json`` next to its primary output with the
resolved configuration and input/output digests, sufficient to re-execute
the run. CONTACT_LOG={error,info,debug} adjusts stderr logging only.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import ContactError, DataError, NumericalError
from .ioutil import read_json, sha256_file, write_json, write_jsonl

log = logging.getLogger("contact")


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2; this tool reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ------------------------------------------------------------------ manifest


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Collects the facts that make a run re-executable."""

    def __init__(self, command: str, argv: list[str], args: argparse.Namespace):
        self.record = {
            "command": command,
            "argv": list(argv),
            "config": {
                k: (str(v) if isinstance(v, Path) else v)
                for k, v in vars(args).items()
                if k != "func"
            },
            "inputs": {},
            "outputs": {},
            "seed": getattr(args, "seed", None),
            "version": __version__,
            "started": _utcnow(),
        }

    def add_input(self, path) -> None:
        if path is not None:
            self.record["inputs"][str(path)] = sha256_file(path)

    def add_output(self, path) -> None:
        if path is not None:
            self.record["outputs"][str(path)] = sha256_file(path)

    def write(self, primary_out: str | Path) -> Path:
        primary_out = Path(primary_out)
        if primary_out.is_dir():
            path = primary_out / "run.manifest.json"
        else:
            path = primary_out.with_name(primary_out.name + ".manifest.json")
        self.record["finished"] = _utcnow()
        write_json(path, self.record)
        return path


def _train_config(args, **defaults) -> "TrainConfig":
    """Precedence: command defaults < --train-config file < explicit flags."""
    from .training import TrainConfig, parse_train_config_file

    file_values = {}
    if getattr(args, "train_config", None):
        file_values = parse_train_config_file(args.train_config)
    overrides = {}
    for key in ("epochs", "batch_size", "learning_rate", "validation_fraction", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return TrainConfig(**{**defaults, **file_values, **overrides})


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--train-config", type=Path, metavar="FILE",
                   help="key = value file with TrainConfig fields")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)


# ------------------------------------------------------------------ commands


def _cmd_corpus_filter(args, argv) -> int:
    from .corpus import (compile_rules, default_rules_path, read_raw_posts,
                         run_pipeline, sample_for_audit, write_clean_docs)
    from .langid import load_default_profiles

    manifest = Manifest("corpus filter", argv, args)
    rules_path = args.rules or default_rules_path()
    rules = compile_rules(rules_path)
    profiles = load_default_profiles()
    posts = list(read_raw_posts(args.inp))
    manifest.add_input(args.inp)
    manifest.add_input(rules_path)
    docs, report = run_pipeline(posts, rules, profiles, jobs=args.jobs)
    write_clean_docs(args.out, docs)
    write_json(args.report, report.to_json())
    manifest.add_output(args.out)
    manifest.add_output(args.report)
    if args.audit:
        sample = sample_for_audit(docs, args.audit, args.seed)
        audit_out = args.audit_out or Path(str(args.out) + ".audit.jsonl")
        write_jsonl(audit_out, (d.to_record() for d in sample))
        manifest.add_output(audit_out)
    manifest.write(args.out)
    log.info("kept %d of %d posts", report.counts["after_language_filter"],
             report.counts["input"])
    return 0


def _cmd_tok_train(args, argv) -> int:
    from .corpus import read_texts
    from .tokenizer import train_bpe

    manifest = Manifest("tok train", argv, args)
    texts = read_texts(args.inp)
    manifest.add_input(args.inp)
    vocab = train_bpe(texts, vocab_size=args.vocab_size, seed=args.seed)
    vocab.save(args.out)
    manifest.add_output(args.out)
    manifest.write(args.out)
    log.info("trained vocabulary of %d tokens (%d merges)", len(vocab),
             len(vocab.merges))
    return 0


def _cmd_pretrain(args, argv) -> int:
    from .corpus import read_texts
    from .encoder import EncoderConfig, init_params
    from .model import ModelState
    from .tokenizer import Vocabulary
    from .training import MaskingPolicy, pretrain

    manifest = Manifest("pretrain", argv, args)
    texts = read_texts(args.inp)
    manifest.add_input(args.inp)
    if args.init:
        model = ModelState.load(args.init)
        manifest.add_input(args.init)
    else:
        if not args.vocab:
            raise DataError("--vocab is required unless --init is given")
        vocab = Vocabulary.load(args.vocab)
        manifest.add_input(args.vocab)
        config = EncoderConfig(
            n_layers=args.layers, n_heads=args.heads, d_model=args.d_model,
            d_ff=args.d_ff, max_positions=args.max_positions,
            vocab_size=max(args.vocab_budget or 0, len(vocab)),
            dropout_rate=args.dropout,
        )
        model = ModelState(params=init_params(config, seed=args.seed or 0),
                           vocab=vocab, meta={})
    cfg = _train_config(args, epochs=4, batch_size=32, learning_rate=5e-5,
                        validation_fraction=0.2)
    policy = MaskingPolicy(select_prob=args.select_prob, seed=cfg.seed)
    params, train_log = pretrain(model, texts, cfg, policy)
    out_model = ModelState(
        params=params, vocab=model.vocab,
        meta={"stage": "pretrain", "init": str(args.init) if args.init else None,
              "config_fingerprint": cfg.fingerprint(), "seed": cfg.seed},
    )
    for path in out_model.save(args.out):
        manifest.add_output(path)
    log_path = Path(str(args.out)[: -len(".bin")] + ".trainlog.jsonl")
    train_log.write(log_path)
    manifest.add_output(log_path)
    manifest.write(args.out)
    last = train_log.records[-1]
    log.info("pretrain done: train %.4f val %s", last["train_loss"],
             f"{last['val_loss']:.4f}" if last["val_loss"] is not None else "n/a")
    return 0


def _cmd_finetune(args, argv) -> int:
    from .labels import read_labeled_posts
    from .model import ModelState
    from .training import finetune_arguments, finetune_stance

    manifest = Manifest("finetune", argv, args)
    model = ModelState.load(args.model)
    manifest.add_input(args.model)
    data = list(read_labeled_posts(args.data))
    manifest.add_input(args.data)
    cfg = _train_config(args, epochs=4, batch_size=8, learning_rate=5e-5)
    trainer = finetune_stance if args.task == "stance" else finetune_arguments
    params = trainer(model, data, cfg)
    out_model = ModelState(
        params=params, vocab=model.vocab,
        meta={"stage": f"finetune:{args.task}", "base": str(args.model),
              "config_fingerprint": cfg.fingerprint(), "seed": cfg.seed},
    )
    for path in out_model.save(args.out):
        manifest.add_output(path)
    manifest.write(args.out)
    return 0


def _cmd_eval_run(args, argv) -> int:
    from .evalharness import ExperimentSpec, run_matrix
    from .labels import read_labeled_posts
    from .model import ModelState

    manifest = Manifest("eval run", argv, args)
    baseline = ModelState.load(args.baseline)
    adapted = ModelState.load(args.adapted)
    manifest.add_input(args.baseline)
    manifest.add_input(args.adapted)
    data = list(read_labeled_posts(args.data))
    manifest.add_input(args.data)
    spec = ExperimentSpec(task=args.task, setting=args.setting,
                          folds=args.folds, seed=args.seed)
    if args.balance == "none":
        balance = None
    elif args.balance == "auto":
        balance = "auto"
    else:
        balance = int(args.balance)
    cfg = _train_config(args, epochs=4, batch_size=8, learning_rate=5e-5)
    report = run_matrix(spec, baseline, adapted, data, train_cfg=cfg,
                        jobs=args.jobs, balance_per_cell=balance)
    write_json(args.out, report.to_json())
    manifest.add_output(args.out)
    manifest.write(args.out)
    return 0


def _cmd_synth(args, argv) -> int:
    from .synthgen import SynthSpec, gen_labeled, gen_pretrain_corpora

    manifest = Manifest(f"synth {args.kind}", argv, args)
    spec_obj = read_json(args.spec) if args.spec else {}
    if args.spec:
        manifest.add_input(args.spec)
    if args.seed is not None:
        spec_obj["seed"] = args.seed
    spec = SynthSpec.from_json(spec_obj)
    if args.kind == "pretrain":
        domain_a, domain_b = gen_pretrain_corpora(spec)
        records = []
        if args.domain in ("a", "both"):
            records += [{**p.__dict__, "domain": "a"} for p in domain_a]
        if args.domain in ("b", "both"):
            records += [{**p.__dict__, "domain": "b"} for p in domain_b]
        write_jsonl(args.out, records)
    else:
        posts = gen_labeled(spec)
        write_jsonl(args.out, (p.to_record() for p in posts))
    manifest.add_output(args.out)
    manifest.write(args.out)
    return 0


def _cmd_report(args, argv) -> int:
    from .report import render_figures, render_report, validate_report, write_tsv

    manifest = Manifest("report", argv, args)
    obj = read_json(args.inp)
    manifest.add_input(args.inp)
    validate_report(obj)
    text = render_report(obj)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path = out_dir / "report.txt"
    text_path.write_text(text, encoding="utf-8")
    manifest.add_output(text_path)
    for path in write_tsv(obj, out_dir):
        manifest.add_output(path)
    if not args.no_figures:
        for path in render_figures(obj, out_dir):
            manifest.add_output(path)
    manifest.write(out_dir)
    sys.stdout.write(text)
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="contact", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="corpus curation").add_subparsers(
        dest="subcommand", required=True
    )
    p = corpus.add_parser("filter", help="filter raw posts into clean docs")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--rules", type=Path, help="rules TSV (default: bundled set)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0, help="audit-sample seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--audit", type=int, default=0, metavar="N",
                   help="also write an N-doc audit sample")
    p.add_argument("--audit-out", type=Path)
    p.set_defaults(func=_cmd_corpus_filter)

    tok = sub.add_parser("tok", help="tokenizer").add_subparsers(
        dest="subcommand", required=True
    )
    p = tok.add_parser("train", help="train a BPE vocabulary")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--vocab-size", type=int, default=2000)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_tok_train)

    p = sub.add_parser("pretrain", help="masked-language-model training")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--vocab", type=Path, help="vocabulary JSON (fresh start)")
    p.add_argument("--init", type=Path, help="continue from this model .bin")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--max-positions", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--vocab-budget", type=int,
                   help="encoder vocab_size if larger than the vocabulary")
    p.add_argument("--select-prob", type=float, default=0.15)
    p.add_argument("--validation-fraction", type=float, default=None)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised task fine-tuning")
    p.add_argument("--task", choices=("stance", "arguments"), required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--validation-fraction", type=float, default=None)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_finetune)

    ev = sub.add_parser("eval", help="evaluation harness").add_subparsers(
        dest="subcommand", required=True
    )
    p = ev.add_parser("run", help="fine-tune + evaluate the genre matrix")
    p.add_argument("--task", choices=("stance", "arguments"), required=True)
    p.add_argument("--setting", required=True,
                   choices=("same_twitter", "same_facebook", "mixed",
                            "cross_tw_to_fb", "cross_fb_to_tw",
                            "mixed_eval_twitter", "mixed_eval_facebook", "all"))
    p.add_argument("--folds", type=int, default=0,
                   help="default: 10 for stance, 5 for arguments")
    p.add_argument("--baseline", type=Path, required=True)
    p.add_argument("--adapted", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--balance", default="auto",
                   help='"auto", "none", or posts per (class, platform) cell')
    p.add_argument("--validation-fraction", type=float, default=None)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_eval_run)

    synth = sub.add_parser("synth", help="synthetic corpora").add_subparsers(
        dest="subcommand", required=True
    )
    p = synth.add_parser("pretrain", help="two-domain unlabeled corpora")
    p.add_argument("--spec", type=Path, help="SynthSpec JSON")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--domain", choices=("a", "b", "both"), default="both")
    p.set_defaults(func=_cmd_synth, kind="pretrain")
    p = synth.add_parser("labeled", help="labeled stance/argument posts")
    p.add_argument("--spec", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_synth, kind="labeled")

    p = sub.add_parser("report", help="render an experiment report")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_report)
    return parser


def dispatch(argv: list[str]) -> int:
    """Parse and run; returns the process exit code instead of raising."""
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("CONTACT_LOG", "error"))
    logging.basicConfig(stream=sys.stderr, level=level or logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help exits 0, usage errors exit 1
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except NumericalError as exc:
        print(f"contact: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ContactError, OSError) as exc:
        print(f"contact: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
