"""Command-line entry point for the whole pipeline: vocabulary training,
fine-tuning, datastore construction, translation, scoring, and the experiment
matrix. All randomness sits behind explicit seeds, so every command is
rerunnable to byte-identical outputs."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from knnmt.bleu import corpus_bleu
from knnmt.datastore import build_datastore, load_datastore, save_datastore
from knnmt.decoding import KnnSource, translate_corpus
from knnmt.experiment import ExperimentConfig, run_experiment_matrix
from knnmt.index import build_clustered_index, load_index, save_index
from knnmt.knn import KnnParams
from knnmt.model import ModelShape, TranslationModel, load_checkpoint, save_checkpoint
from knnmt.synthdata import standard_bundle
from knnmt.tokenizer import BpeVocab, ParallelCorpus, encode_pairs, filter_by_length
from knnmt.trainer import TrainConfig, fine_tune

EXIT_SCHEMA = 2
EXIT_MISSING_FILE = 3
EXIT_DIMENSION = 4


class SchemaError(ValueError):
    pass


class DimensionError(ValueError):
    pass


MODEL_KEYS = {"d_model", "n_heads", "layers", "d_ff", "max_len"}
PATH_KEYS = {"corpus", "vocab", "checkpoint", "out", "valid_corpus", "metrics", "datastore"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def _require_corpus(prefix: str) -> str:
    for ext in (".src", ".tgt"):
        if not os.path.exists(prefix + ext):
            raise FileNotFoundError(prefix + ext)
    return prefix


def _load_vocabs(prefix: str) -> tuple[BpeVocab, BpeVocab]:
    return (BpeVocab.load(_require_file(prefix + ".src.vocab")),
            BpeVocab.load(_require_file(prefix + ".tgt.vocab")))


def load_run_config(path: str, overrides: dict) -> dict:
    """JSON run config with command-line overrides on top; unknown keys are
    a schema violation."""
    with open(_require_file(path), encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from exc
    allowed = TRAIN_KEYS | PATH_KEYS | {"model"}
    unknown = set(raw) - allowed
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")
    if "model" in raw:
        bad = set(raw["model"]) - MODEL_KEYS
        if bad:
            raise SchemaError(f"unknown model keys: {sorted(bad)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("corpus", "vocab", "out"):
        if key not in raw:
            raise SchemaError(f"config is missing required key {key!r}")
    return raw


def cmd_build_vocab(args) -> int:
    corpus = ParallelCorpus.load(_require_corpus(args.corpus))
    corpus = filter_by_length(corpus, args.max_len)
    BpeVocab.train(corpus.sources(), args.merges).save(args.out + ".src.vocab")
    BpeVocab.train(corpus.targets(), args.merges).save(args.out + ".tgt.vocab")
    print(f"wrote {args.out}.src.vocab and {args.out}.tgt.vocab")
    return 0


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k) for k in
                 ("mode", "seed", "epochs", "learning_rate", "checkpoint")}
    run = load_run_config(args.config, overrides)
    train_kwargs = {k: run[k] for k in TRAIN_KEYS & set(run)}
    try:
        cfg = TrainConfig(**train_kwargs)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"invalid training configuration: {exc}") from exc
    src_vocab, tgt_vocab = _load_vocabs(run["vocab"])
    corpus = filter_by_length(ParallelCorpus.load(_require_corpus(run["corpus"])))
    pairs = encode_pairs(corpus, src_vocab, tgt_vocab)
    if run.get("checkpoint"):
        model = load_checkpoint(_require_file(run["checkpoint"]))
        if model.shape.src_vocab != len(src_vocab) or model.shape.tgt_vocab != len(tgt_vocab):
            raise DimensionError(
                f"checkpoint vocab sizes ({model.shape.src_vocab}, {model.shape.tgt_vocab}) do not "
                f"match vocabulary files ({len(src_vocab)}, {len(tgt_vocab)})")
    else:
        m = run.get("model", {})
        shape = ModelShape(src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab),
                           d_model=m.get("d_model", 64), n_heads=m.get("n_heads", 4),
                           enc_layers=m.get("layers", 2), dec_layers=m.get("layers", 2),
                           d_ff=m.get("d_ff", 256), max_len=m.get("max_len", 256))
        model = TranslationModel(shape, seed=cfg.seed)
    datastore = None
    if run.get("datastore"):
        datastore = load_datastore(_require_file(run["datastore"]))
        if datastore.dim != model.shape.d_model:
            raise DimensionError(f"datastore dim {datastore.dim} does not match "
                                 f"model d_model {model.shape.d_model}")
    validator = None
    if run.get("valid_corpus"):
        valid = ParallelCorpus.load(_require_corpus(run["valid_corpus"]))

        def validator(m, _valid=valid):
            hyps = translate_corpus(m, src_vocab, tgt_vocab, _valid.sources(), max_len=64)
            return corpus_bleu(hyps, _valid.targets()).bleu

    print(json.dumps({"resolved_config": run}, sort_keys=True), file=sys.stderr)
    fine_tune(model, pairs, cfg, datastore=datastore, validator=validator,
              metrics_path=run.get("metrics"))
    save_checkpoint(model, run["out"])
    print(f"wrote {run['out']}")
    return 0


def cmd_build_datastore(args) -> int:
    model = load_checkpoint(_require_file(args.checkpoint))
    src_vocab, tgt_vocab = _load_vocabs(args.vocab)
    corpus = filter_by_length(ParallelCorpus.load(_require_corpus(args.corpus)))
    pairs = encode_pairs(corpus, src_vocab, tgt_vocab)
    ds = build_datastore(model, pairs)
    save_datastore(ds, args.out)
    print(f"wrote {args.out} ({len(ds)} entries, dim {ds.dim})")
    if args.cluster:
        index = build_clustered_index(ds, min(args.cluster, len(ds)),
                                      quantize=args.quantize, seed=args.seed)
        save_index(index, args.out + ".tkix")
        print(f"wrote {args.out}.tkix ({index.n_clusters} clusters"
              + (", quantized)" if args.quantize else ")"))
    return 0


def cmd_translate(args) -> int:
    model = load_checkpoint(_require_file(args.checkpoint))
    src_vocab, tgt_vocab = _load_vocabs(args.vocab)
    knn = None
    if args.datastore:
        ds = load_datastore(_require_file(args.datastore))
        if ds.dim != model.shape.d_model:
            raise DimensionError(f"datastore dim {ds.dim} does not match "
                                 f"model d_model {model.shape.d_model}")
        index = load_index(_require_file(args.index)) if args.index else None
        knn = KnnSource(datastore=ds,
                        params=KnnParams(k=args.k, temperature=args.temp,
                                         interp_weight=getattr(args, "lambda")),
                        index=index, nprobe=args.nprobe)
    with open(_require_file(args.input), encoding="utf-8") as f:
        texts = [line.rstrip("\n") for line in f]
    outs = translate_corpus(model, src_vocab, tgt_vocab, texts, knn=knn,
                            beam=args.beam, max_len=args.max_len)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            for line in outs:
                f.write(line + "\n")
        print(f"wrote {args.output}")
    else:
        for line in outs:
            print(line)
    return 0


def cmd_evaluate(args) -> int:
    with open(_require_file(args.hyp), encoding="utf-8") as f:
        hyps = [line.rstrip("\n") for line in f]
    with open(_require_file(args.ref), encoding="utf-8") as f:
        refs = [line.rstrip("\n") for line in f]
    report = corpus_bleu(hyps, refs)
    print(f"{report.bleu:.1f}")
    print(str(report), file=sys.stderr)
    return 0


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig()
    bundle_sizes = {}
    if args.config:
        with open(_require_file(args.config), encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"config is not valid JSON: {exc}") from exc
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        size_keys = {"task_seed", "a_train", "b_train", "b_valid", "b_test"}
        unknown = set(raw) - known - size_keys
        if unknown:
            raise SchemaError(f"unknown experiment config keys: {sorted(unknown)}")
        bundle_sizes = {k: raw.pop(k) for k in size_keys & set(raw)}
        for key in ("seeds", "modes"):
            if key in raw:
                raw[key] = tuple(raw[key])
        cfg = dataclasses.replace(cfg, **raw)
    bundle = standard_bundle(**bundle_sizes)
    rows = run_experiment_matrix(bundle, cfg, out_path=args.out)
    failures = [r for r in rows if r["error"]]
    print(f"wrote {args.out} ({len(rows)} rows, {len(failures)} failed cells)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knnmt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="train source/target subword vocabularies")
    p.add_argument("--corpus", required=True, help="parallel corpus prefix (.src/.tgt)")
    p.add_argument("--merges", type=int, default=500)
    p.add_argument("--max-len", type=int, default=250, help="length filter before training")
    p.add_argument("--out", required=True, help="output vocabulary prefix")
    p.set_defaults(fn=cmd_build_vocab)

    p = sub.add_parser("train", help="train or fine-tune a model")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--mode", choices=("vanilla", "gate", "gtprob", "rl"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--checkpoint", help="continue from this checkpoint instead of fresh init")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("build-datastore", help="cache decoder states over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cluster", type=int, default=0, help="also build an index with N clusters")
    p.add_argument("--quantize", action="store_true", help="store 64-byte codes in the index")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_build_datastore)

    p = sub.add_parser("translate", help="translate a file of sentences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--datastore")
    p.add_argument("--index")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--lambda", type=float, default=0.4)
    p.add_argument("--temp", type=float, default=10.0)
    p.add_argument("--nprobe", type=int, default=8)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len", dest="max_len", type=int, default=64)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the two-domain experiment matrix")
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--out", required=True, help="results table path")
    p.set_defaults(fn=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except SchemaError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except DimensionError as exc:
        print(f"error: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
