"""Autoregressive gloss decoding for single models and probability-averaging ensembles."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetSplit, GlossEntry
from .errors import CamfError, DataError, InvalidConfigError, SequenceLengthError
from .model import DecoderCache, ModelConfig, ModelParams, decoder_forward
from .tokenizer import BOS, EOS, MASK, PAD, UNK, Vocabulary

# every special except EOS is excluded from the candidates
_BLOCKED = np.array([PAD, BOS, UNK, MASK])


@dataclass
class Model:
    params: ModelParams
    cfg: ModelConfig
    vocab: Vocabulary
    name: str = ""


@dataclass
class DecodeResult:
    ids: list[int]
    text: str
    step_logprobs: list[float] = field(default_factory=list)


def _as_models(models) -> list[Model]:
    models = [models] if isinstance(models, Model) else list(models)
    if not models:
        raise InvalidConfigError("at least one model is required")
    first = models[0]
    for m in models[1:]:
        if m.vocab != first.vocab or m.cfg.vocab_size != first.cfg.vocab_size:
            raise InvalidConfigError(f"model {m.name or '?'} uses a different vocabulary")
    return models


def _embedding_arg(E):
    if isinstance(E, GlossEntry):
        return E.embedding_matrix()
    return E


def average_probs(per_model: list[np.ndarray]) -> np.ndarray:
    """Elementwise arithmetic mean, exact for identical inputs and order-free.

    Values are sorted per element and accumulated as ``lo + sum(v - lo) / k``,
    so k identical distributions return the same bits as one of them.
    """
    if len(per_model) == 1:
        return per_model[0]
    stacked = np.sort(np.stack(per_model), axis=0)
    lo = stacked[0]
    return lo + (stacked[1:] - lo).sum(axis=0) / len(per_model)


def next_token_probs(models: list[Model], prefixes: np.ndarray, E) -> np.ndarray:
    """Averaged next-token distribution for each row of ``prefixes`` (B, t)."""
    per_model = []
    with T.no_grad():
        for m in models:
            logits = decoder_forward(m.params, m.cfg, prefixes, E).data[:, -1, :]
            per_model.append(T.softmax_array(logits))
    return average_probs(per_model)


class _Stepper:
    """Cached incremental decoding of a batch through every model at once."""

    def __init__(self, models: list[Model], E, batch: int):
        self.caches = [DecoderCache(m.params, m.cfg, E, batch) for m in models]

    def step(self, tokens) -> np.ndarray:
        return average_probs([T.softmax_array(c.step(tokens)) for c in self.caches])


def _pick(probs: np.ndarray) -> np.ndarray:
    """Argmax over allowed tokens; ties go to the lowest id."""
    masked = probs.copy()
    masked[..., _BLOCKED] = -np.inf
    return np.argmax(masked, axis=-1)


def _check_len(models: list[Model], max_len: int | None) -> int:
    limit = min(m.cfg.max_len for m in models)
    if max_len is None:
        return limit
    if max_len > limit:
        raise SequenceLengthError(f"max_len={max_len} exceeds the model limit {limit}")
    return max_len


def _finish(vocab: Vocabulary, ids: list[int], logps: list[float]) -> DecodeResult:
    return DecodeResult(ids, vocab.decode(ids), logps)


def ensemble_decode(models, E, max_len: int | None = None, beam: int | None = None) -> DecodeResult:
    """Greedy (or beam) decoding from the mean of the models' next-token distributions."""
    models = _as_models(models)
    max_len = _check_len(models, max_len)
    E = _embedding_arg(E)
    if E is not None:
        E = np.asarray(E, dtype=np.float64)[None]
    if beam is not None and beam > 1:
        return _beam_search(models, E, max_len, beam)
    stepper = _Stepper(models, E, 1)
    tok = BOS
    ids, logps = [], []
    for _ in range(max_len):
        probs = stepper.step([tok])[0]
        tok = int(_pick(probs))
        ids.append(tok)
        logps.append(float(np.log(probs[tok])))
        if tok == EOS:
            break
    return _finish(models[0].vocab, ids, logps)


def greedy_decode(params: ModelParams, cfg: ModelConfig, vocab: Vocabulary, E,
                  max_len: int | None = None) -> DecodeResult:
    return ensemble_decode([Model(params, cfg, vocab)], E, max_len)


def _beam_search(models: list[Model], E, max_len: int, width: int) -> DecodeResult:
    """Length-normalised beam search; ties resolved by token sequence order."""
    beams: list[tuple[float, list[int], list[float]]] = [(0.0, [], [])]
    finished: list[tuple[float, list[int], list[float]]] = []
    for _ in range(max_len):
        prefixes = np.array([[BOS] + seq for _, seq, _ in beams])
        batch_E = None if E is None else np.repeat(E, len(beams), axis=0)
        probs = next_token_probs(models, prefixes, batch_E)
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        logp[:, _BLOCKED] = -np.inf
        candidates = []
        for b, (score, seq, steps) in enumerate(beams):
            top = np.argsort(-logp[b], kind="stable")[:width]
            for tok in top:
                if np.isfinite(logp[b, tok]):
                    candidates.append((score + logp[b, tok], seq + [int(tok)], steps + [float(logp[b, tok])]))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for cand in candidates:
            (finished if cand[1][-1] == EOS else beams).append(cand)
            if len(beams) == width:
                break
        if len(finished) >= width or not beams:
            break
    pool = finished or beams
    best = min(pool, key=lambda c: (-c[0] / len(c[1]), c[1]))
    return _finish(models[0].vocab, best[1], best[2])


def greedy_decode_batch(params: ModelParams, cfg: ModelConfig, vocab: Vocabulary, E,
                        max_len: int | None = None) -> list[DecodeResult]:
    """Greedy decoding of a whole batch in lockstep; ``E`` is (B, m, d_e)."""
    models = [Model(params, cfg, vocab)]
    max_len = _check_len(models, max_len)
    arr = E[0] if isinstance(E, tuple) else E
    n = arr.shape[0]
    stepper = _Stepper(models, E, n)
    toks = np.full(n, BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    ids = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]
    for _ in range(max_len):
        probs = stepper.step(toks)
        toks = _pick(probs)
        for i in np.flatnonzero(~done):
            ids[i].append(int(toks[i]))
            logps[i].append(float(np.log(probs[i, toks[i]])))
        done |= toks == EOS
        if done.all():
            break
        toks = np.where(done, PAD, toks)
    return [_finish(vocab, a, b) for a, b in zip(ids, logps)]


def rescore(params: ModelParams, cfg: ModelConfig, E, ids: list[int]) -> list[float]:
    """Log-probability of each token in ``ids`` under teacher forcing."""
    E = _embedding_arg(E)
    with T.no_grad():
        logits = decoder_forward(params, cfg, [BOS] + list(ids[:-1]), E).data
    logp = T.log_softmax_array(logits)
    return [float(logp[t, tok]) for t, tok in enumerate(ids)]


def batch_generate(models, split: DatasetSplit, max_len: int | None = None, beam: int | None = None,
                   out_path=None) -> list[DecodeResult]:
    """Decode every entry of ``split`` in order; optionally write a submission file."""
    models = _as_models(models)
    results = []
    for entry in split.entries:
        try:
            results.append(ensemble_decode(models, entry, max_len, beam))
        except CamfError as exc:
            raise DataError(str(exc), entry.id) from exc
    if out_path is not None:
        write_submission(out_path, [e.id for e in split.entries], [r.text for r in results])
    return results


def write_submission(path, ids, glosses) -> None:
    """JSON array of {"id", "gloss"} records, written atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [{"id": i, "gloss": g} for i, g in zip(ids, glosses)]
    payload = json.dumps(records, ensure_ascii=False, indent=1) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_submission(path) -> list[dict]:
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read submission {path}: {exc}") from exc
    if not isinstance(records, list) or not all(
        isinstance(r, dict) and isinstance(r.get("id"), str) and isinstance(r.get("gloss"), str) for r in records
    ):
        raise DataError(f"{path} is not a JSON array of {{'id', 'gloss'}} records")
    return records
