"""The desk-scale experiment matrix: train on domain A, adapt to domain B
with each fine-tuning arm, and score test BLEU with and without retrieval-
interpolated decoding."""

from __future__ import annotations

import copy
import itertools
import sys
from dataclasses import dataclass, field

import numpy as np

from knnmt.bleu import corpus_bleu
from knnmt.datastore import Datastore, build_datastore
from knnmt.decoding import KnnSource, translate_corpus
from knnmt.knn import KnnParams
from knnmt.model import ModelShape, TranslationModel
from knnmt.synthdata import standard_bundle
from knnmt.tokenizer import BpeVocab, ParallelCorpus, encode_pairs
from knnmt.trainer import TrainConfig, fine_tune

RESULT_COLUMNS = ("domain", "mode", "knn_at_inference", "seed", "bleu",
                  "p1", "p2", "p3", "p4", "bp", "error")


@dataclass
class ExperimentConfig:
    """Defaults calibrated on the bundled task: the base budget reaches full
    domain-A fit, while the fine-tuning budget stops in the convergence tail
    (plain fine-tuning ~99.3 test BLEU) so retrieval still has residual
    errors to fix and the scaled modes keep room to differ."""

    seeds: tuple[int, ...] = (0, 1, 2)
    modes: tuple[str, ...] = ("vanilla", "gate", "gtprob", "rl")
    bpe_merges: int = 500
    d_model: int = 64
    n_heads: int = 4
    layers: int = 2
    d_ff: int = 256
    base_epochs: int = 10
    ft_epochs: int = 3
    base_lr: float = 2e-3
    ft_lr: float = 5e-4
    base_token_batch: int = 1024
    ft_token_batch: int = 512
    train_k: int = 8
    train_temperature: float = 10.0
    gate_threshold: float = 0.6
    # per-mode trainer tweaks; gtprob wants sharp retrieval statistics and a
    # CE floor that stops the ratio weight exploding on converged tokens
    mode_overrides: dict = field(default_factory=lambda: {
        "gtprob": {"temperature": 2.0, "ce_floor": 0.5},
    })
    tune_grid_k: tuple[int, ...] = (4, 8)
    tune_grid_weight: tuple[float, ...] = (0.3, 0.5, 0.7)
    tune_grid_temperature: tuple[float, ...] = (10.0, 100.0)
    tune_subset: int = 120
    max_decode_len: int = 24
    verbose: bool = True


def _log(cfg: ExperimentConfig, msg: str) -> None:
    if cfg.verbose:
        print(msg, file=sys.stderr, flush=True)


def build_vocabs(bundle: dict[str, ParallelCorpus], merges: int) -> tuple[BpeVocab, BpeVocab]:
    train_corpora = [bundle["a_train"], bundle["b_train"]]
    src_vocab = BpeVocab.train([s for c in train_corpora for s in c.sources()], merges)
    tgt_vocab = BpeVocab.train([t for c in train_corpora for t in c.targets()], merges)
    return src_vocab, tgt_vocab


def score(model: TranslationModel, src_vocab, tgt_vocab, corpus: ParallelCorpus,
          knn: KnnSource | None = None, max_len: int = 24):
    hyps = translate_corpus(model, src_vocab, tgt_vocab, corpus.sources(), knn=knn,
                            max_len=max_len)
    return corpus_bleu(hyps, corpus.targets())


def tune_knn_params(model: TranslationModel, src_vocab, tgt_vocab, ds: Datastore,
                    valid: ParallelCorpus, cfg: ExperimentConfig) -> KnnParams:
    """Grid-search (k, interp weight, temperature) on the validation split."""
    subset = ParallelCorpus(pairs=valid.pairs[: cfg.tune_subset], domain=valid.domain)
    best, best_bleu = None, -1.0
    for k, w, t in itertools.product(cfg.tune_grid_k, cfg.tune_grid_weight,
                                     cfg.tune_grid_temperature):
        params = KnnParams(k=k, temperature=t, interp_weight=w)
        bleu = score(model, src_vocab, tgt_vocab, subset,
                     knn=KnnSource(datastore=ds, params=params),
                     max_len=cfg.max_decode_len).bleu
        if bleu > best_bleu:
            best, best_bleu = params, bleu
    return best


def _row(mode: str, knn: bool, seed: int, report=None, error: str = "") -> dict:
    row = {"domain": "B", "mode": mode, "knn_at_inference": "yes" if knn else "no",
           "seed": seed, "bleu": None, "p1": None, "p2": None, "p3": None, "p4": None,
           "bp": None, "error": error}
    if report is not None:
        row.update(bleu=round(report.bleu, 2), bp=round(report.brevity_penalty, 4),
                   **{f"p{i + 1}": round(p, 4) for i, p in enumerate(report.precisions)})
    return row


def run_experiment_matrix(bundle: dict[str, ParallelCorpus] | None,
                          cfg: ExperimentConfig = ExperimentConfig(),
                          out_path: str | None = None) -> list[dict]:
    """Run every (mode x decode) cell per seed; failures are recorded in the
    row's error column and the matrix continues."""
    if bundle is None:
        bundle = standard_bundle()
    src_vocab, tgt_vocab = build_vocabs(bundle, cfg.bpe_merges)
    shape = ModelShape(src_vocab=len(src_vocab), tgt_vocab=len(tgt_vocab),
                       d_model=cfg.d_model, n_heads=cfg.n_heads, enc_layers=cfg.layers,
                       dec_layers=cfg.layers, d_ff=cfg.d_ff, max_len=64)
    a_pairs = encode_pairs(bundle["a_train"], src_vocab, tgt_vocab)
    b_pairs = encode_pairs(bundle["b_train"], src_vocab, tgt_vocab)
    rows: list[dict] = []

    for seed in cfg.seeds:
        base = TranslationModel(shape, seed=seed)
        base_cfg = TrainConfig(mode="vanilla", epochs=cfg.base_epochs, seed=seed,
                               learning_rate=cfg.base_lr, grad_accum=1,
                               token_batch_size=cfg.base_token_batch)
        fine_tune(base, a_pairs, base_cfg)
        _log(cfg, f"[seed {seed}] base model trained ({cfg.base_epochs} epochs on A)")
        try:
            report = score(base, src_vocab, tgt_vocab, bundle["b_test"], max_len=cfg.max_decode_len)
            rows.append(_row("base", False, seed, report))
            _log(cfg, f"[seed {seed}] base test BLEU {report.bleu:.2f}")
        except Exception as exc:  # noqa: BLE001 - cell isolation
            rows.append(_row("base", False, seed, error=repr(exc)))

        # retrieval over the base model's own representation space
        try:
            base_ds = build_datastore(base, b_pairs)
            params = tune_knn_params(base, src_vocab, tgt_vocab, base_ds, bundle["b_valid"], cfg)
            report = score(base, src_vocab, tgt_vocab, bundle["b_test"],
                           knn=KnnSource(datastore=base_ds, params=params),
                           max_len=cfg.max_decode_len)
            rows.append(_row("base", True, seed, report))
            _log(cfg, f"[seed {seed}] base+knn test BLEU {report.bleu:.2f} ({params})")
        except Exception as exc:  # noqa: BLE001
            rows.append(_row("base", True, seed, error=repr(exc)))

        ft_models: dict[str, TranslationModel] = {}
        for mode in cfg.modes:
            try:
                model = copy.deepcopy(base)
                ft_kwargs = dict(mode=mode, epochs=cfg.ft_epochs, seed=seed,
                                 learning_rate=cfg.ft_lr, k=cfg.train_k,
                                 temperature=cfg.train_temperature,
                                 gate_threshold=cfg.gate_threshold, grad_accum=1,
                                 token_batch_size=cfg.ft_token_batch)
                ft_kwargs.update(cfg.mode_overrides.get(mode, {}))
                ft_cfg = TrainConfig(**ft_kwargs)
                fine_tune(model, b_pairs, ft_cfg)
                ft_models[mode] = model
                report = score(model, src_vocab, tgt_vocab, bundle["b_test"], max_len=cfg.max_decode_len)
                rows.append(_row(mode, False, seed, report))
                _log(cfg, f"[seed {seed}] {mode} fine-tune test BLEU {report.bleu:.2f}")
            except Exception as exc:  # noqa: BLE001
                rows.append(_row(mode, False, seed, error=repr(exc)))

        if "vanilla" in ft_models:
            try:
                ft = ft_models["vanilla"]
                ft_ds = build_datastore(ft, b_pairs)
                params = tune_knn_params(ft, src_vocab, tgt_vocab, ft_ds, bundle["b_valid"], cfg)
                report = score(ft, src_vocab, tgt_vocab, bundle["b_test"],
                               knn=KnnSource(datastore=ft_ds, params=params),
                               max_len=cfg.max_decode_len)
                rows.append(_row("vanilla", True, seed, report))
                _log(cfg, f"[seed {seed}] vanilla+knn test BLEU {report.bleu:.2f} ({params})")
            except Exception as exc:  # noqa: BLE001
                rows.append(_row("vanilla", True, seed, error=repr(exc)))

    if out_path:
        write_results(rows, out_path)
    return rows


def aggregate(rows: list[dict]) -> dict[tuple[str, str], tuple[float, float]]:
    """(mode, knn_at_inference) -> (mean BLEU, spread) over seeds."""
    cells: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        if row["bleu"] is not None:
            cells.setdefault((row["mode"], row["knn_at_inference"]), []).append(row["bleu"])
    return {key: (float(np.mean(v)), float(np.max(v) - np.min(v))) for key, v in cells.items()}


def write_results(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(RESULT_COLUMNS) + "\n")
        for row in rows:
            f.write("\t".join("" if row[c] is None else str(row[c]) for c in RESULT_COLUMNS) + "\n")
        for (mode, knn), (mean, spread) in sorted(aggregate(rows).items()):
            f.write(f"# mean\t{mode}\tknn={knn}\tbleu={mean:.2f}\tspread={spread:.2f}\n")
