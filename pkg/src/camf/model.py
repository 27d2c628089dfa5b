"""Pre-norm causal transformer decoder with cross-attention over an embedding set."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import InvalidConfigError, InvalidShapeError, SequenceLengthError
from .tensor import Tensor

ModelParams = dict[str, Tensor]

CROSS_MODES = ("literal", "projected")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 256
    layers: int = 3
    heads: int = 8
    d_ff: int | None = None
    max_len: int = 256
    dropout: float = 0.1
    cross_attention: str = "literal"
    embed_dim: int = 256
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if min(self.vocab_size, self.d_model, self.layers, self.heads, self.d_ff, self.max_len, self.embed_dim) <= 0:
            raise InvalidConfigError("model dimensions must be positive")
        if self.d_model % self.heads:
            raise InvalidConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.cross_attention not in CROSS_MODES:
            raise InvalidConfigError(f"cross_attention must be one of {CROSS_MODES}")
        if self.cross_attention == "literal" and self.embed_dim != self.d_model:
            raise InvalidConfigError(
                f"literal cross-attention needs embed_dim == d_model ({self.embed_dim} != {self.d_model})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    d, dff = cfg.d_model, cfg.d_ff
    raw: dict[str, np.ndarray] = {"tok_emb": rng.normal(0.0, d**-0.5, size=(cfg.vocab_size, d))}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        raw[p + "ln_self.gain"], raw[p + "ln_self.bias"] = np.ones(d), np.zeros(d)
        for name in ("q", "k", "v", "o"):
            raw[p + f"self_attn.w{name}"] = _xavier(rng, d, d)
            # a key bias only shifts every score of a query equally, so it is omitted
            if name != "k":
                raw[p + f"self_attn.b{name}"] = np.zeros(d)
        raw[p + "ln_cross.gain"], raw[p + "ln_cross.bias"] = np.ones(d), np.zeros(d)
        if cfg.cross_attention == "projected":
            raw[p + "cross_attn.wq"] = _xavier(rng, d, d)
            raw[p + "cross_attn.wk"] = _xavier(rng, cfg.embed_dim, d)
            raw[p + "cross_attn.wv"] = _xavier(rng, cfg.embed_dim, d)
            raw[p + "cross_attn.wo"] = _xavier(rng, d, d)
        raw[p + "ln_ffn.gain"], raw[p + "ln_ffn.bias"] = np.ones(d), np.zeros(d)
        raw[p + "ffn.w1"], raw[p + "ffn.b1"] = _xavier(rng, d, dff), np.zeros(dff)
        raw[p + "ffn.w2"], raw[p + "ffn.b2"] = _xavier(rng, dff, d), np.zeros(d)
    raw["ln_final.gain"], raw["ln_final.bias"] = np.ones(d), np.zeros(d)
    raw["out_proj"] = _xavier(rng, d, cfg.vocab_size)
    return {name: Tensor(value, requires_grad=True) for name, value in raw.items()}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: t.shape for name, t in init_params(cfg, 0).items()}


@lru_cache(maxsize=16)
def positional_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


@lru_cache(maxsize=64)
def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def self_attention(params: ModelParams, prefix: str, x: Tensor, cfg: ModelConfig, rng=None) -> Tensor:
    """Multi-head causal self-attention on ``x`` of shape (B, T, d)."""
    q = _split_heads(_linear(x, params[prefix + "wq"], params[prefix + "bq"]), cfg.heads)
    k = _split_heads(_linear(x, params[prefix + "wk"]), cfg.heads)
    v = _split_heads(_linear(x, params[prefix + "wv"], params[prefix + "bv"]), cfg.heads)
    dk = cfg.d_model // cfg.heads
    scores = (q @ T.swap_last(k)) * (1.0 / math.sqrt(dk))
    weights = T.dropout(T.softmax_rows(scores, _causal_mask(x.shape[1])), cfg.dropout, rng)
    return _linear(_merge_heads(weights @ v), params[prefix + "wo"], params[prefix + "bo"])


def _embedding_array(E, batch: int, embed_dim: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalise an embedding set argument to (B, m, d_e) plus an optional key mask."""
    if E is None:
        return np.zeros((batch, 1, embed_dim)), None
    if isinstance(E, tuple):
        E, key_mask = E
    else:
        key_mask = None
    E = np.asarray(E, dtype=np.float64)
    if E.ndim == 2:
        E = np.broadcast_to(E, (batch,) + E.shape)
    if E.ndim != 3 or E.shape[0] != batch or E.shape[2] != embed_dim:
        raise InvalidShapeError(f"embedding set of shape {E.shape} does not fit batch {batch} x width {embed_dim}")
    if E.shape[1] == 0:
        raise InvalidShapeError("embedding set is empty")
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool).reshape(batch, 1, E.shape[1])
    return E, key_mask


def cross_attention(H: Tensor, E, cfg: ModelConfig, params: ModelParams | None = None,
                    prefix: str = "", rng=None) -> Tensor:
    """Attend from hidden states ``H`` over the rows of the embedding set ``E``.

    ``E`` is an (m, d_e) or (B, m, d_e) array, a ``(array, key_mask)`` pair
    for ragged sets, or ``None`` for the masked case, which feeds a zero
    vector and therefore yields an all-zero context. Literal mode computes
    softmax(H E^T / sqrt(d_h)) E with no learned maps, single-head.
    """
    squeeze = H.ndim == 2
    if squeeze:
        H = H.reshape(1, *H.shape)
    batch = H.shape[0]
    if E is None:
        # the context is zero whatever the weights, so dropout draws nothing
        rng = None
    if cfg.cross_attention == "literal":
        if H.shape[-1] != cfg.embed_dim:
            raise InvalidShapeError(f"literal cross-attention needs d_h == d_e, got {H.shape[-1]} and {cfg.embed_dim}")
        E_arr, key_mask = _embedding_array(E, batch, cfg.embed_dim)
        Et = Tensor(E_arr)
        scores = (H @ T.swap_last(Et)) * (1.0 / math.sqrt(H.shape[-1]))
        weights = T.dropout(T.softmax_rows(scores, key_mask), cfg.dropout, rng)
        out = weights @ Et
    else:
        E_arr, key_mask = _embedding_array(E, batch, cfg.embed_dim)
        Et = Tensor(E_arr)
        q = _split_heads(H @ params[prefix + "wq"], cfg.heads)
        k = _split_heads(Et @ params[prefix + "wk"], cfg.heads)
        v = _split_heads(Et @ params[prefix + "wv"], cfg.heads)
        dk = cfg.d_model // cfg.heads
        scores = (q @ T.swap_last(k)) * (1.0 / math.sqrt(dk))
        mask = None if key_mask is None else key_mask[:, None]
        weights = T.dropout(T.softmax_rows(scores, mask), cfg.dropout, rng)
        out = _merge_heads(weights @ v) @ params[prefix + "wo"]
    return out.reshape(*out.shape[1:]) if squeeze else out


def decoder_forward(params: ModelParams, cfg: ModelConfig, input_ids, E=None, rng=None,
                    ablate_cross: bool = False) -> Tensor:
    """Next-token logits for ``input_ids`` of shape (T,) or (B, T).

    ``E=None`` is the zero-masked conditioning. ``rng`` enables dropout.
    ``ablate_cross`` drops the cross-attention sublayer entirely, leaving
    only its residual passthrough.
    """
    ids = np.asarray(input_ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    n = ids.shape[1]
    if n > cfg.max_len:
        raise SequenceLengthError(f"sequence of length {n} exceeds max_len={cfg.max_len}")
    if squeeze and E is not None and not isinstance(E, tuple) and np.ndim(E) == 3:
        raise InvalidShapeError("unbatched input needs an (m, d_e) embedding set")

    d = cfg.d_model
    x = T.embedding(params["tok_emb"], ids) * math.sqrt(d) + positional_table(cfg.max_len, d)[:n]
    for i in range(cfg.layers):
        p = f"layers.{i}."
        h = T.layer_norm(x, params[p + "ln_self.gain"], params[p + "ln_self.bias"], cfg.ln_eps)
        x = x + self_attention(params, p + "self_attn.", h, cfg, rng)
        if not ablate_cross:
            h = T.layer_norm(x, params[p + "ln_cross.gain"], params[p + "ln_cross.bias"], cfg.ln_eps)
            x = x + cross_attention(h, E, cfg, params, p + "cross_attn.", rng)
        h = T.layer_norm(x, params[p + "ln_ffn.gain"], params[p + "ln_ffn.bias"], cfg.ln_eps)
        h = T.dropout(T.gelu(_linear(h, params[p + "ffn.w1"], params[p + "ffn.b1"])), cfg.dropout, rng)
        x = x + _linear(h, params[p + "ffn.w2"], params[p + "ffn.b2"])
    x = T.layer_norm(x, params["ln_final.gain"], params["ln_final.bias"], cfg.ln_eps)
    logits = x @ params["out_proj"]
    return logits.reshape(*logits.shape[1:]) if squeeze else logits


def stack_embeddings(entries) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Batch the embedding sets of ``entries``; ragged sets get a key mask."""
    mats = [e.embedding_matrix() for e in entries]
    m = max(x.shape[0] for x in mats)
    if all(x.shape[0] == m for x in mats):
        return np.stack(mats)
    out = np.zeros((len(mats), m, mats[0].shape[1]))
    mask = np.zeros((len(mats), m), dtype=bool)
    for i, x in enumerate(mats):
        out[i, : x.shape[0]] = x
        mask[i, : x.shape[0]] = True
    return out, mask


def check_finite(params: ModelParams) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in params.values())


def _ln(x: np.ndarray, gain: Tensor, bias: Tensor, eps: float) -> np.ndarray:
    return T.layer_norm(Tensor(x), gain, bias, eps).data


class DecoderCache:
    """Incremental decoding with cached self-attention keys and values.

    Feeding tokens one position at a time through :meth:`step` yields the
    same logits as :func:`decoder_forward` on the whole prefix (up to float
    rounding), at linear rather than quadratic cost per sequence.
    """

    def __init__(self, params: ModelParams, cfg: ModelConfig, E, batch: int):
        self.params, self.cfg, self.batch = params, cfg, batch
        self.E, self.key_mask = _embedding_array(E, batch, cfg.embed_dim)
        self.keys: list[np.ndarray | None] = [None] * cfg.layers
        self.values: list[np.ndarray | None] = [None] * cfg.layers
        self.cross_kv = []
        if cfg.cross_attention == "projected":
            for i in range(cfg.layers):
                p = f"layers.{i}.cross_attn."
                k = self._heads(self.E @ params[p + "wk"].data)
                v = self._heads(self.E @ params[p + "wv"].data)
                self.cross_kv.append((k, v))
        self.length = 0

    def _heads(self, x: np.ndarray) -> np.ndarray:
        b, n, d = x.shape
        return x.reshape(b, n, self.cfg.heads, d // self.cfg.heads).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, n, dk = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)

    def step(self, tokens) -> np.ndarray:
        """Logits (B, V) for the next position after appending ``tokens`` (B,)."""
        cfg, P = self.cfg, self.params
        if self.length >= cfg.max_len:
            raise SequenceLengthError(f"sequence of length {self.length + 1} exceeds max_len={cfg.max_len}")
        d = cfg.d_model
        dk = d // cfg.heads
        tokens = np.asarray(tokens, dtype=np.int64).reshape(self.batch, 1)
        with T.no_grad():
            x = P["tok_emb"].data[tokens] * math.sqrt(d) + positional_table(cfg.max_len, d)[self.length : self.length + 1]
            for i in range(cfg.layers):
                p = f"layers.{i}."
                h = _ln(x, P[p + "ln_self.gain"], P[p + "ln_self.bias"], cfg.ln_eps)
                q = self._heads(h @ P[p + "self_attn.wq"].data + P[p + "self_attn.bq"].data)
                k = self._heads(h @ P[p + "self_attn.wk"].data)
                v = self._heads(h @ P[p + "self_attn.wv"].data + P[p + "self_attn.bv"].data)
                self.keys[i] = k if self.keys[i] is None else np.concatenate([self.keys[i], k], axis=2)
                self.values[i] = v if self.values[i] is None else np.concatenate([self.values[i], v], axis=2)
                scores = (q @ np.swapaxes(self.keys[i], -1, -2)) * (1.0 / math.sqrt(dk))
                att = self._merge(T.softmax_array(scores) @ self.values[i])
                x = x + (att @ P[p + "self_attn.wo"].data + P[p + "self_attn.bo"].data)

                h = _ln(x, P[p + "ln_cross.gain"], P[p + "ln_cross.bias"], cfg.ln_eps)
                if cfg.cross_attention == "literal":
                    scores = (h @ np.swapaxes(self.E, -1, -2)) * (1.0 / math.sqrt(d))
                    ctx = T.softmax_array(scores, self.key_mask) @ self.E
                else:
                    ck, cv = self.cross_kv[i]
                    cq = self._heads(h @ P[p + "cross_attn.wq"].data)
                    scores = (cq @ np.swapaxes(ck, -1, -2)) * (1.0 / math.sqrt(dk))
                    mask = None if self.key_mask is None else self.key_mask[:, None]
                    ctx = self._merge(T.softmax_array(scores, mask) @ cv) @ P[p + "cross_attn.wo"].data
                x = x + ctx

                h = _ln(x, P[p + "ln_ffn.gain"], P[p + "ln_ffn.bias"], cfg.ln_eps)
                h = T.gelu(Tensor(h @ P[p + "ffn.w1"].data + P[p + "ffn.b1"].data)).data
                x = x + (h @ P[p + "ffn.w2"].data + P[p + "ffn.b2"].data)
            x = _ln(x, P["ln_final.gain"], P["ln_final.bias"], cfg.ln_eps)
            self.length += 1
            return (x @ P["out_proj"].data)[:, 0, :]
