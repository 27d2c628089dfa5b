"""Multitask training: embedding-conditioned generation plus denoising reconstruction."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import DatasetSplit
from .errors import DataError, InvalidConfigError, InvalidShapeError
from .model import ModelConfig, ModelParams, decoder_forward, init_params, stack_embeddings
from .tensor import Tensor
from .tokenizer import BOS, EOS, MASK, NUM_SPECIALS, PAD, Vocabulary

log = logging.getLogger(__name__)

DEV_LEN_MARGIN = 8


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    corruption_p: float = 0.2
    corruption_delete: bool = False
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 5
    warmup_steps: int = 4000
    lr_init: float = 1e-7
    lr_max: float = 1e-3
    lr_min: float = 1e-9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 0.1
    smoothing: float = 0.1
    seed: int = 0
    dev_max_len: int | None = None
    log_steps: bool = True

    def __post_init__(self):
        if not 0.0 <= self.corruption_p <= 1.0:
            raise InvalidConfigError(f"corruption_p must lie in [0, 1], got {self.corruption_p}")
        if not (self.lr_init <= self.lr_max and self.lr_min <= self.lr_max):
            raise InvalidConfigError("learning rates must satisfy lr_init <= lr_max and lr_min <= lr_max")
        if min(self.batch_size, self.max_epochs, self.patience, self.warmup_steps) <= 0:
            raise InvalidConfigError("batch_size, max_epochs, patience and warmup_steps must be positive")
        if self.clip_norm <= 0:
            raise InvalidConfigError("clip_norm must be positive")
        if not 0.0 <= self.smoothing < 1.0:
            raise InvalidConfigError("smoothing must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


# corruption


def corrupt_gloss(ids, p: float, rng: np.random.Generator, vocab_size: int, delete: bool = False) -> np.ndarray:
    """Corrupt interior tokens of one BOS ... EOS sequence.

    Each eligible position is picked with probability ``p``; a picked token is
    blanked to MASK or, with equal chance, substituted by a different random
    non-special id (deleted instead, when ``delete`` is set, with PAD filling
    the tail so the length is preserved). PAD, BOS and EOS are never touched.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[0]
    picked = rng.random(n) < p
    blank = rng.random(n) < 0.5
    u = rng.random(n)
    eligible = (ids != PAD) & (ids != BOS) & (ids != EOS)
    picked &= eligible
    out = ids.copy()
    out[picked & blank] = MASK

    n_content = vocab_size - NUM_SPECIALS
    for i in np.flatnonzero(picked & ~blank):
        if delete:
            continue
        orig = ids[i] - NUM_SPECIALS
        if 0 <= orig < n_content:
            if n_content < 2:
                out[i] = MASK
                continue
            r = int(u[i] * (n_content - 1))
            r += r >= orig
        else:
            r = int(u[i] * n_content)
        out[i] = NUM_SPECIALS + r
    if delete:
        kept = out[~(picked & ~blank)]
        out = np.full(n, PAD, dtype=np.int64)
        out[: kept.shape[0]] = kept
    return out


# batching


@dataclass
class Batch:
    ids: np.ndarray  # (B, L) padded BOS ... EOS sequences
    embeddings: object  # (B, m, d_e) array or (array, key_mask)
    entry_ids: list[str] = field(default_factory=list)

    @property
    def inputs(self) -> np.ndarray:
        return self.ids[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.ids[:, 1:]

    @property
    def target_mask(self) -> np.ndarray:
        return self.targets != PAD

    def __len__(self) -> int:
        return self.ids.shape[0]


def pad_sequences(seqs) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(entries, vocab: Vocabulary | None = None, encoded=None) -> Batch:
    """Pad token sequences and stack embedding sets of ``entries``."""
    entries = list(entries)
    if not entries:
        raise DataError("cannot build an empty batch")
    if encoded is None:
        encoded = [vocab.encode(e.gloss) for e in entries]
    dims = {e.sgns.shape[0] for e in entries}
    for e in entries:
        widths = {e.sgns.shape[0], e.char.shape[0]} | ({e.electra.shape[0]} if e.electra is not None else set())
        if len(widths) != 1 or widths != dims:
            raise DataError("embedding set has inconsistent widths", e.id)
    return Batch(pad_sequences(encoded), stack_embeddings(entries), [e.id for e in entries])


def _check_embedding_width(batch: Batch, cfg: ModelConfig) -> None:
    emb = batch.embeddings[0] if isinstance(batch.embeddings, tuple) else batch.embeddings
    if emb.shape[-1] != cfg.embed_dim:
        bad = batch.entry_ids[0] if batch.entry_ids else None
        raise DataError(f"embedding width {emb.shape[-1]} does not match model embed_dim {cfg.embed_dim}", bad)


def bucketed_batches(lengths, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches of similar length, in shuffled order."""
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(lengths.shape[0]), lengths))
    chunks = [order[i : i + batch_size] for i in range(0, order.shape[0], batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


# losses


def sequence_loss(params: ModelParams, cfg: ModelConfig, inputs, targets, E, smoothing: float,
                  rng=None) -> Tensor:
    logits = decoder_forward(params, cfg, inputs, E, rng)
    return T.label_smoothed_cross_entropy(logits, targets, smoothing, np.asarray(targets) != PAD)


def generation_loss(params: ModelParams, cfg: ModelConfig, batch: Batch, smoothing: float = 0.0,
                    rng=None, zero_embeddings: bool = False) -> Tensor:
    """Per-token smoothed NLL of each gloss given its embedding set."""
    _check_embedding_width(batch, cfg)
    E = None if zero_embeddings else batch.embeddings
    return sequence_loss(params, cfg, batch.inputs, batch.targets, E, smoothing, rng)


def corrupt_batch(batch: Batch, p: float, rng: np.random.Generator, vocab_size: int,
                  delete: bool = False) -> np.ndarray:
    return np.stack([corrupt_gloss(row, p, rng, vocab_size, delete) for row in batch.ids])


def reconstruction_loss(params: ModelParams, cfg: ModelConfig, batch: Batch, rng: np.random.Generator,
                        corruption_p: float = 0.2, smoothing: float = 0.0, delete: bool = False,
                        dropout_rng=None) -> Tensor:
    """Recover clean glosses from corrupted decoder inputs with zeroed embeddings."""
    _check_embedding_width(batch, cfg)
    noisy = corrupt_batch(batch, corruption_p, rng, cfg.vocab_size, delete)
    return sequence_loss(params, cfg, noisy[:, :-1], batch.targets, None, smoothing, dropout_rng)


def joint_loss(gen, rec, lam: float):
    """gen + lam * rec, for Tensors or plain floats."""
    if isinstance(gen, Tensor) or isinstance(rec, Tensor):
        return T.add(gen, T.mul(rec, lam))
    return gen + lam * rec


# optimisation


def noam_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_init to lr_max, then inverse-sqrt decay floored at lr_min."""
    if step < cfg.warmup_steps:
        return cfg.lr_init + (cfg.lr_max - cfg.lr_init) * (step / cfg.warmup_steps)
    return max(cfg.lr_max * math.sqrt(cfg.warmup_steps / step), cfg.lr_min)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
              cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update, in place."""
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise InvalidShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def copy_params(params: ModelParams) -> ModelParams:
    return {k: Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}


# training loop


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_bleu: float
    best_nll: float
    epochs_run: int
    log: list[dict]


def dev_evaluate(params: ModelParams, cfg: ModelConfig, vocab: Vocabulary, dev: DatasetSplit,
                 max_len: int | None = None) -> tuple[float, float]:
    """(mean sentence-BLEU of greedy decodes, per-token NLL) on ``dev``."""
    from .inference import greedy_decode_batch
    from .metrics import corpus_average, sentence_bleu

    entries = list(dev.entries)
    encoded = [vocab.encode(e.gloss) for e in entries]
    scores, nll_sum, tokens = [], 0.0, 0
    with T.no_grad():
        for i in range(0, len(entries), 64):
            chunk = entries[i : i + 64]
            batch = make_batch(chunk, encoded=encoded[i : i + 64])
            if batch.ids.shape[1] - 1 <= cfg.max_len:
                n = int(batch.target_mask.sum())
                nll_sum += generation_loss(params, cfg, batch).item() * n
                tokens += n
            results = greedy_decode_batch(params, cfg, vocab, batch.embeddings, max_len)
            for entry, res in zip(chunk, results):
                scores.append(sentence_bleu(res.text.split(), entry.gloss.split()))
    return corpus_average(scores), (nll_sum / tokens if tokens else float("inf"))


def train(train_split: DatasetSplit, dev_split: DatasetSplit, vocab: Vocabulary, model_cfg: ModelConfig,
          train_cfg: TrainConfig, log_path=None, checkpoint_path=None, vocab_path: str | None = None,
          dev_metric=None) -> TrainResult:
    """Train one model and keep the parameters of the best dev epoch.

    ``dev_metric(params) -> (bleu, nll)`` replaces the default greedy-decode
    evaluation. Selection maximises dev BLEU, breaking ties by lower NLL.
    Training stops after ``patience`` epochs without improvement.
    """
    if not len(train_split):
        raise InvalidConfigError("training split is empty")
    if not len(dev_split):
        raise InvalidConfigError("dev split is empty")
    if len(vocab) != model_cfg.vocab_size:
        raise InvalidConfigError(f"vocabulary has {len(vocab)} tokens, model expects {model_cfg.vocab_size}")
    entries = list(train_split.entries)
    encoded = [vocab.encode(e.gloss) for e in entries]
    longest = max(len(s) for s in encoded) - 1
    if longest > model_cfg.max_len:
        raise InvalidConfigError(f"longest training gloss needs {longest} positions, max_len={model_cfg.max_len}")
    if dev_metric is None:
        # untrained models rarely emit EOS; bound dev decoding by the training glosses
        dev_len = train_cfg.dev_max_len or min(model_cfg.max_len, longest + DEV_LEN_MARGIN)

        def dev_metric(p):
            return dev_evaluate(p, model_cfg, vocab, dev_split, dev_len)

    params = init_params(model_cfg, train_cfg.seed)
    names = list(params)
    state = OptimizerState.zeros_like(params)
    lengths = [len(s) for s in encoded]
    records: list[dict] = []
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8")

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps({**rec, "timestamp": time.time()}, sort_keys=True) + "\n")
            log_fh.flush()

    best = (-math.inf, math.inf)
    best_params, best_epoch, stale, epoch = copy_params(params), 0, 0, 0
    try:
        for epoch in range(1, train_cfg.max_epochs + 1):
            rng = np.random.default_rng([train_cfg.seed, epoch])
            gen_vals, rec_vals = [], []
            for idx in bucketed_batches(lengths, train_cfg.batch_size, rng):
                batch = make_batch([entries[i] for i in idx], encoded=[encoded[i] for i in idx])
                for p in params.values():
                    p.zero_grad()
                gen = generation_loss(params, model_cfg, batch, train_cfg.smoothing, rng)
                rec = reconstruction_loss(params, model_cfg, batch, rng, train_cfg.corruption_p,
                                          train_cfg.smoothing, train_cfg.corruption_delete, rng)
                joint = joint_loss(gen, rec, train_cfg.lam)
                grads = T.backward(joint, [params[k] for k in names])
                clipped, _ = T.clip_grad_norm(dict(zip(names, grads)), train_cfg.clip_norm)
                lr = noam_lr(state.step + 1, train_cfg)
                adam_step(params, clipped, state, lr, train_cfg)
                gen_vals.append(gen.item())
                rec_vals.append(rec.item())
                if train_cfg.log_steps:
                    emit({"kind": "step", "epoch": epoch, "step": state.step, "lr": lr,
                          "loss_gen": gen.item(), "loss_rec": rec.item(), "loss_joint": joint.item(),
                          "dev_bleu": None, "dev_nll": None})

            bleu, nll = dev_metric(params)
            gen_mean = math.fsum(gen_vals) / len(gen_vals)
            rec_mean = math.fsum(rec_vals) / len(rec_vals)
            emit({"kind": "epoch", "epoch": epoch, "step": state.step, "lr": noam_lr(state.step, train_cfg),
                  "loss_gen": gen_mean, "loss_rec": rec_mean,
                  "loss_joint": joint_loss(gen_mean, rec_mean, train_cfg.lam),
                  "dev_bleu": bleu, "dev_nll": nll})
            log.info("epoch %d step %d gen %.4f rec %.4f dev_bleu %.4f dev_nll %.4f",
                     epoch, state.step, gen_mean, rec_mean, bleu, nll)
            if (bleu, -nll) > (best[0], -best[1]):
                best, best_epoch, stale = (bleu, nll), epoch, 0
                best_params = copy_params(params)
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, best_params, model_cfg, vocab_path,
                                    {"epoch": epoch, "dev_bleu": bleu, "dev_nll": nll, "seed": train_cfg.seed})
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(best_params, best_epoch, best[0], best[1], epoch, records)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
