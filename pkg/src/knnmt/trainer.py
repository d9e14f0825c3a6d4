"""Fine-tuning with retrieval-scaled losses.

Per target position the trainer queries the datastore with that position's
hidden state (detached: no gradient flows through retrieval), converts the
neighbors into a distribution, and derives a scaling coefficient g from it.
Three schemes are implemented besides plain cross entropy:

  gate   - g = c < 1 when the retrieval distribution's peak is below a
           threshold, else 1
  gtprob - g = retrieval probability of the ground-truth token, floored
           at 1/k when it was not retrieved
  rl     - token reward R = |p_knn(sampled) - p_knn(truth)| weighting the
           cross entropy, with correct-sample and double-miss edge rules

The scaled loss value is ce - log(g). Its gradient is, by default, the
"ratio-weight" reading: scaled by the detached factor (ce - log g)/max(ce, eps)
so the gradient grows by exactly the loss-growth factor; the "literal" form
keeps -log(g) as an additive constant with no gradient of its own (ablation).
The datastore is rebuilt from the updated weights on a fixed epoch interval.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from knnmt import autodiff as ad
from knnmt.autodiff import Array, Tape
from knnmt.datastore import Datastore, build_datastore, search_exact_batch
from knnmt.index import build_clustered_index, search_clustered_batch
from knnmt.knn import aggregate_probs
from knnmt.model import TranslationModel
from knnmt.tokenizer import PAD_ID

MODES = ("vanilla", "gate", "gtprob", "rl")
LOSS_FORMS = ("ratio-weight", "literal")

CE_PROB_FLOOR = 1e-12  # clamp on the probability inside -log p


@dataclass
class TrainConfig:
    mode: str = "vanilla"
    k: int = 8
    temperature: float = 10.0  # retrieval-softmax temperature
    interp_weight: float = 0.4  # decode-time mixture weight; also default gate constant
    gate_threshold: float = 0.6  # peak-probability threshold of the gate
    gate_constant: float | None = None  # None: reuse interp_weight
    loss_form: str = "ratio-weight"
    learning_rate: float = 5e-4
    token_batch_size: int = 2048
    grad_accum: int = 32
    refresh_interval: int = 1  # datastore rebuilds, in refresh_unit
    refresh_unit: str = "epochs"  # epochs (default schedule) | steps
    epochs: int = 1
    seed: int = 0
    ce_floor: float = 1e-6  # eps in the ratio weight
    sample_argmax: bool = False  # rl: take argmax instead of sampling
    squared_distance: bool = False  # retrieval-softmax over squared distances (ablation)
    use_index: bool = False  # clustered index for training retrieval
    n_clusters: int = 64
    nprobe: int = 8
    refresh_at_start: bool = False  # rebuild a stale datastore instead of failing

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss_form not in LOSS_FORMS:
            raise ValueError(f"loss_form must be one of {LOSS_FORMS}, got {self.loss_form!r}")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError(f"gate threshold must be in [0, 1], got {self.gate_threshold}")
        c = self.effective_gate_constant()
        if not 0.0 < c <= 1.0:
            raise ValueError(f"gate constant must be in (0, 1], got {c}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.refresh_interval < 1:
            raise ValueError(f"refresh interval must be >= 1, got {self.refresh_interval}")
        if self.refresh_unit not in ("epochs", "steps"):
            raise ValueError(f"refresh unit must be 'epochs' or 'steps', got {self.refresh_unit!r}")
        if self.temperature <= 0 or self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("temperature and learning rate must be positive, epochs >= 0")
        if self.token_batch_size < 1 or self.grad_accum < 1:
            raise ValueError("token batch size and grad accumulation must be >= 1")

    def effective_gate_constant(self) -> float:
        return self.interp_weight if self.gate_constant is None else self.gate_constant


@dataclass(frozen=True)
class ScalingCoefficient:
    """Detached per-token loss scaler with its origin."""

    g: float
    provenance: str  # gate | gtprob-hit | gtprob-floor | rl-reward | rl-floor | rl-correct

    def __post_init__(self):
        if not self.g > 0:
            raise ValueError(f"scaling coefficient must be positive, got {self.g}")


def vanilla_ce(p_nmt: np.ndarray, y: int) -> float:
    """-log p[y] with the probability clamped at 1e-12."""
    return -math.log(max(float(p_nmt[y]), CE_PROB_FLOOR))


def gate_coefficient(m_knn: float, threshold: float, constant: float) -> ScalingCoefficient:
    """g = constant when the retrieval peak is below the threshold, else 1."""
    if not 0.0 < constant <= 1.0:
        raise ValueError(f"gate constant must be in (0, 1], got {constant}")
    return ScalingCoefficient(g=constant if m_knn < threshold else 1.0, provenance="gate")


def gtprob_coefficient(p_knn: np.ndarray, y: int, k: int) -> ScalingCoefficient:
    """g = retrieval probability of the truth, floored at 1/k when absent."""
    p = float(p_knn[y])
    if p > 0.0:
        return ScalingCoefficient(g=p, provenance="gtprob-hit")
    return ScalingCoefficient(g=1.0 / k, provenance="gtprob-floor")


def rl_reward(p_knn: np.ndarray, y_sampled: int, y_true: int, k: int) -> ScalingCoefficient:
    """R = |p_knn(sampled) - p_knn(truth)|; a correct sample falls back to the
    plain cross-entropy loss, a double miss gets the uniform floor 1/k."""
    r = abs(float(p_knn[y_sampled]) - float(p_knn[y_true]))
    if r == 0.0:
        if y_sampled == y_true:
            return ScalingCoefficient(g=1.0, provenance="rl-correct")
        return ScalingCoefficient(g=1.0 / k, provenance="rl-floor")
    return ScalingCoefficient(g=r, provenance="rl-reward")


def scaled_loss(ce: float, coeff: ScalingCoefficient, loss_form: str = "ratio-weight",
                ce_floor: float = 1e-6) -> tuple[float, float]:
    """(loss value, gradient weight) for one token.

    gate/gtprob: value = ce - log g. ratio-weight puts w = value/max(ce, eps)
    on the ce gradient; literal keeps w = 1 (the -log g part is constant).
    rl: value = R * ce with w = R; the correct-sample marker means plain ce.
    """
    if ce < 0:
        raise ValueError(f"cross entropy must be non-negative, got {ce}")
    if coeff.provenance == "rl-correct":
        return ce, 1.0
    if coeff.provenance in ("rl-reward", "rl-floor"):
        return coeff.g * ce, coeff.g
    if coeff.g == 1.0:
        return ce, 1.0  # exact collapse to the plain loss
    value = ce - math.log(coeff.g)
    weight = value / max(ce, ce_floor) if loss_form == "ratio-weight" else 1.0
    return value, weight


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Array], state: OptimizerState, lr: float,
              grad_scale: float = 1.0) -> None:
    """Bias-corrected Adam update in place; missing grads count as zero."""
    for name, p in params.items():
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in {name!r}; step rejected")
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = (p.grad if p.grad is not None else np.zeros_like(p.data)) * grad_scale
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# batched loss assembly
# ---------------------------------------------------------------------------


def token_ce(probs: Array, targets: np.ndarray) -> Array:
    """Per-position -log p[target] with the 1e-12 clamp, as a (P,) Array."""
    picked = ad.clamp_min(ad.take_per_row(probs, targets), CE_PROB_FLOOR)
    return ad.scale(ad.log(picked), -1.0)


def weighted_loss(ce_vec: Array, weights: np.ndarray, corrections: np.ndarray,
                  n_valid: int) -> Array:
    """mean over valid tokens of (w_i * ce_i + correction_i).

    weights and corrections are detached constants; padded positions carry
    weight 0. The correction pins the loss VALUE to the defined one while the
    gradient stays w_i * dce_i.
    """
    weighted = ad.mul(ce_vec, ad.constant(weights.astype(ce_vec.data.dtype)))
    total = ad.add(ad.reshape(ad.asum(weighted), (1,)),
                   ad.constant([corrections.sum()], dtype=ce_vec.data.dtype))
    return ad.scale(ad.reshape(total, ()), 1.0 / n_valid)


def batch_loss(model: TranslationModel, src: np.ndarray, src_valid: np.ndarray,
               tgt: np.ndarray, weights: np.ndarray, corrections: np.ndarray) -> Array:
    """Forward + scaled loss with frozen coefficients; the finite-difference
    path through the very composition the training step uses."""
    _, probs, targets = model.teacher_forced_batch(src, src_valid, tgt)
    ce_vec = token_ce(probs, targets)
    n_valid = int((targets != PAD_ID).sum())
    return weighted_loss(ce_vec, weights, corrections, n_valid)


# ---------------------------------------------------------------------------
# per-batch coefficient computation
# ---------------------------------------------------------------------------


def _sample_rows(probs: np.ndarray, rng: np.random.Generator, argmax: bool) -> np.ndarray:
    if argmax:
        return probs.argmax(axis=1)
    cum = np.cumsum(probs.astype(np.float64), axis=1)
    u = rng.random(len(probs)) * cum[:, -1]
    return np.minimum(
        np.array([np.searchsorted(cum[i], u[i], side="right") for i in range(len(probs))]),
        probs.shape[1] - 1,
    )


def compute_coefficients(cfg: TrainConfig, ce_values: np.ndarray, probs: np.ndarray,
                         hiddens: np.ndarray, targets: np.ndarray, valid: np.ndarray,
                         retrieve, rng: np.random.Generator):
    """Per-token (weights, corrections, coefficients) for one batch.

    probs/hiddens/targets are flat (P, ...); retrieve maps (Q, d) queries to
    (distances, values) arrays. Everything here is detached from the tape.
    """
    weights = np.ones(len(targets))
    corrections = np.zeros(len(targets))
    weights[~valid] = 0.0
    coeffs: list[ScalingCoefficient] = []
    idx = np.flatnonzero(valid)
    dists, vals = retrieve(hiddens[idx])
    sampled = None
    if cfg.mode == "rl":
        sampled = _sample_rows(probs[idx], rng, cfg.sample_argmax)
    for row, pos in enumerate(idx):
        p_by_value = aggregate_probs(dists[row], vals[row], cfg.temperature,
                                     cfg.squared_distance)
        y = int(targets[pos])
        if cfg.mode == "gate":
            coeff = gate_coefficient(max(p_by_value.values()), cfg.gate_threshold,
                                     cfg.effective_gate_constant())
        elif cfg.mode == "gtprob":
            p_y = p_by_value.get(y, 0.0)
            coeff = (ScalingCoefficient(g=p_y, provenance="gtprob-hit") if p_y > 0
                     else ScalingCoefficient(g=1.0 / cfg.k, provenance="gtprob-floor"))
        else:  # rl
            y_hat = int(sampled[row])
            r = abs(p_by_value.get(y_hat, 0.0) - p_by_value.get(y, 0.0))
            if r == 0.0:
                coeff = (ScalingCoefficient(g=1.0, provenance="rl-correct") if y_hat == y
                         else ScalingCoefficient(g=1.0 / cfg.k, provenance="rl-floor"))
            else:
                coeff = ScalingCoefficient(g=r, provenance="rl-reward")
        value, w = scaled_loss(float(ce_values[pos]), coeff, cfg.loss_form, cfg.ce_floor)
        weights[pos] = w
        corrections[pos] = value - w * float(ce_values[pos])
        coeffs.append(coeff)
    return weights, corrections, coeffs


# ---------------------------------------------------------------------------
# the fine-tuning loop
# ---------------------------------------------------------------------------


def pack_batches(pairs: list[tuple[list[int], list[int]]], order: np.ndarray,
                 token_budget: int) -> list[list[int]]:
    """Greedy packing of shuffled sentence indices into target-token budgets."""
    batches: list[list[int]] = []
    current: list[int] = []
    tokens = 0
    for i in order.tolist():
        need = len(pairs[i][1]) - 1
        if current and tokens + need > token_budget:
            batches.append(current)
            current, tokens = [], 0
        current.append(i)
        tokens += need
    if current:
        batches.append(current)
    return batches


def _pad_batch(pairs, idx):
    chunk = [pairs[i] for i in idx]
    s_len = max(len(s) for s, _ in chunk)
    t_len = max(len(t) for _, t in chunk)
    src = np.full((len(chunk), s_len), PAD_ID, dtype=np.int64)
    tgt = np.full((len(chunk), t_len), PAD_ID, dtype=np.int64)
    valid = np.zeros((len(chunk), s_len), dtype=bool)
    for r, (s, t) in enumerate(chunk):
        src[r, : len(s)] = s
        valid[r, : len(s)] = True
        tgt[r, : len(t)] = t
    return src, valid, tgt


@dataclass
class TrainResult:
    model: TranslationModel
    metrics: list[dict]
    datastore: Datastore | None


def fine_tune(model: TranslationModel, pairs: list[tuple[list[int], list[int]]],
              cfg: TrainConfig, datastore: Datastore | None = None,
              validator=None, metrics_path: str | None = None) -> TrainResult:
    """Fine-tune in place. pairs are tokenized (src_ids, tgt_ids) with targets
    framed BOS ... EOS. validator, if given, maps the model to a BLEU score at
    each epoch end. Returns the model, the metrics log, and the datastore as
    of the last refresh (None in vanilla mode)."""
    cfg.validate()
    if not pairs:
        raise ValueError("no training pairs")
    uses_knn = cfg.mode != "vanilla"
    index = None
    if uses_knn:
        if datastore is None:
            datastore = build_datastore(model, pairs)
        elif datastore.generation != model.generation:
            if not cfg.refresh_at_start:
                raise ValueError(
                    f"datastore generation {datastore.generation} does not match "
                    f"model generation {model.generation}; pass refresh_at_start=True to rebuild")
            datastore = build_datastore(model, pairs)
        if datastore.dim != model.shape.d_model:
            raise ValueError(f"datastore dim {datastore.dim} does not match model d_model {model.shape.d_model}")
        if cfg.use_index:
            index = build_clustered_index(datastore, min(cfg.n_clusters, len(datastore)), seed=cfg.seed)

    def retrieve(queries: np.ndarray):
        assert datastore.generation == model.generation, "stale datastore at query time"
        k = min(cfg.k, len(datastore))
        if index is not None:
            return search_clustered_batch(index, datastore, queries, k,
                                          min(cfg.nprobe, index.n_clusters))
        return search_exact_batch(datastore, queries, k)

    rng_shuffle = np.random.default_rng(cfg.seed)
    rng_sample = np.random.default_rng(cfg.seed + 1)
    opt = OptimizerState()
    metrics: list[dict] = []
    log_file = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def emit(record: dict) -> None:
        metrics.append(record)
        if log_file:
            log_file.write(json.dumps(record) + "\n")

    def refresh() -> None:
        nonlocal datastore, index
        model.generation += 1
        datastore = build_datastore(model, pairs)
        if cfg.use_index:
            index = build_clustered_index(datastore, min(cfg.n_clusters, len(datastore)),
                                          seed=cfg.seed)

    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng_shuffle.permutation(len(pairs))
            pending = 0
            epoch_gs: list[np.ndarray] = []
            for batch_idx in pack_batches(pairs, order, cfg.token_batch_size):
                src, src_valid, tgt = _pad_batch(pairs, batch_idx)
                with Tape() as tape:
                    hidden, probs, targets = model.teacher_forced_batch(src, src_valid, tgt)
                    valid = targets != PAD_ID
                    ce_vec = token_ce(probs, targets)
                    if uses_knn:
                        weights, corrections, coeffs = compute_coefficients(
                            cfg, ce_vec.data, probs.data, hidden.data, targets, valid,
                            retrieve, rng_sample)
                        gs = np.array([c.g for c in coeffs])
                    else:
                        weights = valid.astype(np.float64)
                        corrections = np.zeros(len(targets))
                        gs = np.ones(int(valid.sum()))
                    epoch_gs.append(gs)
                    n_valid = int(valid.sum())
                    loss = weighted_loss(ce_vec, weights, corrections, n_valid)
                    tape.backward(loss)
                pending += 1
                if pending == cfg.grad_accum:
                    adam_step({n: p for n, p in model.parameters()}, opt,
                              cfg.learning_rate, grad_scale=1.0 / cfg.grad_accum)
                    model.zero_grad()
                    pending = 0
                    step += 1
                    emit({"step": step, "epoch": epoch, "mode": cfg.mode,
                          "loss": float(loss.item()), "mean_g": float(gs.mean()),
                          "frac_gated": float((gs < 1.0).mean()), "val_bleu": None})
                    if uses_knn and cfg.refresh_unit == "steps" and step % cfg.refresh_interval == 0:
                        refresh()
            if pending:  # flush a trailing partial accumulation cycle
                adam_step({n: p for n, p in model.parameters()}, opt,
                          cfg.learning_rate, grad_scale=1.0 / pending)
                model.zero_grad()
                step += 1
                emit({"step": step, "epoch": epoch, "mode": cfg.mode,
                      "loss": float(loss.item()), "mean_g": float(gs.mean()),
                      "frac_gated": float((gs < 1.0).mean()), "val_bleu": None})
                if uses_knn and cfg.refresh_unit == "steps" and step % cfg.refresh_interval == 0:
                    refresh()
            all_gs = np.concatenate(epoch_gs) if epoch_gs else np.zeros(0)
            emit({"step": step, "epoch": epoch, "mode": cfg.mode, "loss": None,
                  "mean_g": float(all_gs.mean()) if len(all_gs) else None,
                  "frac_gated": float((all_gs < 1.0).mean()) if len(all_gs) else None,
                  "g_histogram": np.histogram(all_gs, bins=10, range=(0.0, 1.0))[0].tolist(),
                  "val_bleu": float(validator(model)) if validator is not None else None})
            last_epoch = epoch == cfg.epochs - 1
            if (uses_knn and cfg.refresh_unit == "epochs" and not last_epoch
                    and (epoch + 1) % cfg.refresh_interval == 0):
                refresh()
    finally:
        if log_file:
            log_file.close()
    return TrainResult(model=model, metrics=metrics, datastore=datastore if uses_knn else None)
