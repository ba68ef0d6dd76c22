"""Command-line front end: tokenize | teacher-oracle | distil | evaluate."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from .errors import ContractError, FormatError, NonFiniteError
from .evaluation import (
    accuracy,
    load_corpus,
    low_resource_split,
    max_variance,
    prediction_variance,
    save_corpus,
)
from .losses import LossWeights
from .student import (
    StudentConfig,
    load_checkpoint,
    predict_labels,
    save_checkpoint,
)
from .teacher import OracleTeacher, export_records, import_records
from .tokenizer import Vocab, decode_pieces, encode
from .training import (
    REGIMENS,
    TrainConfig,
    run_distil_then_finetune,
    run_joint,
    run_stagewise_rl_first,
)

CONFIG_DEFAULTS = {
    "corpus": None,
    "vocab": None,
    "teacher_records": None,
    "test_corpus": None,
    "out_dir": "out",
    "regimen": "joint",
    "embed_dim": 300,
    "lstm_hidden": 600,
    "teacher_hidden": None,  # taken from the records when present
    "max_len": 128,
    "dropout_rate": 0.4,
    "recurrent_dropout_rate": 0.2,
    "alpha": 10.0,
    "beta": 10.0,
    "gamma": 1.0,
    "batch_size": 64,
    "max_epochs": 50,
    "patience": 3,
    "seed": None,
    "rho": 0.95,
    "eps": 1e-6,
    "val_fraction": 0.1,
    "k_per_class": None,
}


def _config_hash(config: dict) -> str:
    # The output location cannot influence the result, so two runs of the
    # same experiment into different directories share a hash.
    relevant = {k: v for k, v in config.items() if k != "out_dir"}
    canonical = json.dumps(relevant, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _load_config(path, overrides) -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path}: invalid JSON: {exc}") from exc
    unknown = set(raw) - set(CONFIG_DEFAULTS)
    if unknown:
        raise FormatError(f"config {path}: unknown keys {sorted(unknown)}")
    config = dict(CONFIG_DEFAULTS, **raw)
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    if config["seed"] is None:
        raise ContractError("config: seed is mandatory")
    if config["regimen"] not in REGIMENS:
        raise ContractError(f"config: unknown regimen {config['regimen']!r}")
    for key in ("corpus", "vocab"):
        if config[key] is None:
            raise ContractError(f"config: {key} path is required")
    for key in ("corpus", "vocab", "teacher_records", "test_corpus"):
        if config[key] is not None and not os.path.exists(config[key]):
            raise ContractError(f"config: {key} path {config[key]!r} does not exist")
    return config


def cmd_tokenize(args) -> int:
    vocab = Vocab.from_file(args.vocab)
    total_pieces = 0
    total_lines = 0
    with open(args.input, encoding="utf-8") as fin, \
            open(args.out, "w", encoding="utf-8") as fout:
        for lineno, line in enumerate(fin, start=1):
            text = line.rstrip("\n")
            try:
                enc = encode(text, vocab, args.max_len)
            except ContractError as exc:
                raise ContractError(f"{args.input}:{lineno}: {exc}") from exc
            fout.write(json.dumps({
                "ids": list(enc.ids),
                "length": enc.length,
                "tokens": decode_pieces(enc, vocab),
            }))
            fout.write("\n")
            total_pieces += enc.length - 2
            total_lines += 1
    mean = total_pieces / total_lines if total_lines else 0.0
    print(f"tokenized {total_lines} lines, {total_pieces} pieces "
          f"(mean {mean:.2f}/line) -> {args.out}")
    return 0


def cmd_teacher_oracle(args) -> int:
    corpus = load_corpus(args.corpus)
    vocab = Vocab.from_file(args.vocab)
    encode_one = lambda inst: encode(inst.text, vocab, args.max_len)
    if args.fit_centroids:
        if not corpus.labeled:
            raise ContractError("--fit-centroids needs labeled instances")
        oracle = OracleTeacher.fit_centroids(
            [encode_one(i) for i in corpus.labeled],
            [i.label for i in corpus.labeled],
            num_classes=corpus.num_classes,
            feature_dim=args.feature_dim,
            hidden_dim=args.hidden_dim,
            tau=args.tau,
            seed=args.seed,
        )
    else:
        oracle = OracleTeacher.random(
            args.feature_dim, corpus.num_classes, args.hidden_dim,
            tau=args.tau, seed=args.seed,
        )
    instances = list(corpus.unlabeled)
    if args.include_labeled:
        instances += list(corpus.labeled)
    records = [oracle.predict(encode_one(inst), inst.instance_id, inst.text)
               for inst in instances]
    export_records(records, args.out)
    variance = prediction_variance(records)
    bound = max_variance(corpus.num_classes)
    print(f"wrote {len(records)} records -> {args.out}")
    print(f"prediction variance {variance:.6f} (max {bound:.6f} "
          f"for C={corpus.num_classes})")
    return 0


def cmd_distil(args) -> int:
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "regimen": args.regimen,
        "k_per_class": args.k,
        "alpha": args.alpha,
        "beta": args.beta,
        "gamma": args.gamma,
    }
    config = _load_config(args.config, overrides)
    out_dir = config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    config_hash = _config_hash(config)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")

    corpus = load_corpus(config["corpus"])
    if config["k_per_class"] is not None:
        derived = low_resource_split(
            corpus.labeled, config["k_per_class"], corpus.num_classes,
            config["seed"])
        derived.unlabeled.extend(corpus.unlabeled)
        corpus = derived
        save_corpus(corpus, os.path.join(out_dir, "derived_corpus.jsonl"))
    vocab = Vocab.from_file(config["vocab"])

    records = []
    if config["teacher_records"]:
        records = import_records(config["teacher_records"])
    weights = LossWeights(alpha=config["alpha"], beta=config["beta"],
                          gamma=config["gamma"])
    teacher_hidden = config["teacher_hidden"]
    if teacher_hidden is None:
        teacher_hidden = records[0].hidden_dim if records else 1
    student_cfg = StudentConfig(
        vocab_size=len(vocab),
        num_classes=corpus.num_classes,
        embed_dim=config["embed_dim"],
        lstm_hidden=config["lstm_hidden"],
        teacher_hidden=teacher_hidden,
        max_len=config["max_len"],
        dropout_rate=config["dropout_rate"],
        recurrent_dropout_rate=config["recurrent_dropout_rate"],
    )
    cfg = TrainConfig(
        student=student_cfg, vocab=vocab,
        batch_size=config["batch_size"], max_epochs=config["max_epochs"],
        patience=config["patience"], seed=config["seed"],
        rho=config["rho"], eps=config["eps"],
        val_fraction=config["val_fraction"],
        metrics_path=os.path.join(out_dir, "metrics.jsonl"),
    )
    regimen = config["regimen"]
    if regimen == "joint":
        params, metrics = run_joint(corpus, records, weights, cfg)
    elif regimen == "stagewise_rl_first":
        params, metrics = run_stagewise_rl_first(corpus, records, weights, cfg)
    else:
        params, metrics, distilled = run_distil_then_finetune(
            corpus, records, weights, cfg)
        save_checkpoint(distilled, os.path.join(out_dir, "distilled.ckpt"))
    save_checkpoint(params, os.path.join(out_dir, "checkpoint.ckpt"))

    summary = {
        "config_hash": config_hash,
        "regimen": regimen,
        **metrics.summary(),
    }
    if config["test_corpus"]:
        test = load_corpus(config["test_corpus"])
        encoded = [encode(i.text, vocab, config["max_len"]) for i in test.labeled]
        preds = predict_labels(params, encoded, config["batch_size"])
        summary["test_accuracy"] = accuracy(
            preds.tolist(), [i.label for i in test.labeled])
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    params = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    vocab = Vocab.from_file(args.vocab)
    if params.config.num_classes != corpus.num_classes:
        raise ContractError(
            f"checkpoint has {params.config.num_classes} classes, "
            f"corpus has {corpus.num_classes}"
        )
    if params.config.vocab_size != len(vocab):
        raise ContractError(
            f"checkpoint vocab size {params.config.vocab_size} != "
            f"vocab file size {len(vocab)}"
        )
    if not corpus.labeled:
        raise ContractError("evaluate needs labeled instances")
    encoded = [encode(i.text, vocab, params.config.max_len)
               for i in corpus.labeled]
    preds = predict_labels(params, encoded)
    gold = [i.label for i in corpus.labeled]
    overall = accuracy(preds.tolist(), gold)
    print(f"accuracy {overall:.4f} over {len(gold)} instances")
    for c in range(corpus.num_classes):
        idx = [i for i, g in enumerate(gold) if g == c]
        if idx:
            c_acc = accuracy([preds[i] for i in idx], [gold[i] for i in idx])
            print(f"  class {c}: {c_acc:.4f} ({len(idx)} instances)")
    if args.teacher:
        records = {r.instance_id: r for r in import_records(args.teacher)}
        pairs = [(int(preds[i]), records[inst.instance_id].hard_label)
                 for i, inst in enumerate(corpus.labeled)
                 if inst.instance_id in records]
        if pairs:
            agree = sum(1 for p, h in pairs if p == h) / len(pairs)
            print(f"teacher agreement {agree:.4f} over {len(pairs)} instances")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distilkit",
        description="Distil a compact BiLSTM student from exported teacher "
                    "logits and hidden representations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="wordpiece-encode a text file")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--max-len", type=int, default=128, dest="max_len")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("teacher-oracle",
                       help="generate synthetic teacher records over D_u")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-dim", type=int, default=512, dest="feature_dim")
    p.add_argument("--hidden-dim", type=int, default=64, dest="hidden_dim")
    p.add_argument("--max-len", type=int, default=128, dest="max_len")
    p.add_argument("--fit-centroids", action="store_true", dest="fit_centroids")
    p.add_argument("--include-labeled", action="store_true",
                   dest="include_labeled")
    p.set_defaults(func=cmd_teacher_oracle)

    p = sub.add_parser("distil", help="train a student per an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--regimen", choices=REGIMENS)
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_distil)

    p = sub.add_parser("evaluate", help="report accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--teacher", help="teacher artifact for agreement rate")
    p.set_defaults(func=cmd_evaluate)
    return parser


_ERROR_CATEGORIES = (
    (ContractError, "contract"),
    (FormatError, "format"),
    (NonFiniteError, "numeric"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(e for e, _ in _ERROR_CATEGORIES) as exc:
        category = next(c for e, c in _ERROR_CATEGORIES if isinstance(exc, e))
        print(f"error: {category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
