"""Encoder-decoder transformer built on the fedbot.ops autodiff layer.

The model is purely functional: weights live in a ModelWeights
collection with canonical names (embed.src, enc.L{i}.*, dec.L{i}.*,
proj.out.*), forward() builds the computation on the active GradGraph,
and decoding is greedy argmax with ties broken towards the lowest token
id so results are identical across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor
from .tokenizer import END_ID, PAD_ID, START_ID, TokenSequence
from .weights import ModelWeights


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 4
    d_ff: int = 512
    dropout: float = 0.2
    attention_dropout: float = 0.2
    activation_dropout: float = 0.2
    max_len: int = 30
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the four specials and content")
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict) -> "TransformerConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in raw:
                value = raw[f.name]
                kwargs[f.name] = float(value) if "float" in str(f.type) else int(value)
        return cls(**kwargs)


def positional_encoding(max_len: int, d_model: int, dtype=np.float32) -> Tensor:
    """Sinusoidal table: sin on even columns, cos on odd ones."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return Tensor(table, dtype=dtype)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[np.ndarray] = None,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d_k)) v.

    mask is boolean, broadcastable to [..., n, m]; True marks positions
    a query may attend to, False positions get -inf before the softmax.
    """
    d_k = q.shape[-1]
    scores = ops.matmul(q, ops.transpose(k, _swap_last(k.ndim)))
    scores = ops.scale(scores, 1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = ops.masked_fill(scores, mask, -np.inf)
    attn = ops.softmax(scores)
    if dropout_rate > 0.0 and rng is not None:
        attn = ops.dropout(attn, dropout_rate, rng)
    return ops.matmul(attn, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, w), b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    batch, seq, d_model = x.shape
    d_k = d_model // n_heads
    return ops.transpose(ops.reshape(x, (batch, seq, n_heads, d_k)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, n_heads, seq, d_k = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (batch, seq, n_heads * d_k))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    weights: ModelWeights,
    prefix: str,
    n_heads: int,
    mask: Optional[np.ndarray] = None,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """h parallel heads over d_model/h slices, concatenated, projected.

    Projection parameters are read from weights as {prefix}.wq/.bq/.wk/
    .bk/.wv/.bv/.wo/.bo.
    """
    d_model = x_q.shape[-1]
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
    q = _split_heads(_linear(x_q, weights[f"{prefix}.wq"], weights[f"{prefix}.bq"]), n_heads)
    k = _split_heads(_linear(x_kv, weights[f"{prefix}.wk"], weights[f"{prefix}.bk"]), n_heads)
    v = _split_heads(_linear(x_kv, weights[f"{prefix}.wv"], weights[f"{prefix}.bv"]), n_heads)
    ctx = _merge_heads(attention(q, k, v, mask=mask, dropout_rate=dropout_rate, rng=rng))
    return _linear(ctx, weights[f"{prefix}.wo"], weights[f"{prefix}.bo"])


# -- weight construction ------------------------------------------------------


def _attn_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.{p}" for p in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def weight_layout(config: TransformerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; the single source of truth for order."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    layout: list[tuple[str, tuple[int, ...]]] = [
        ("embed.src", (v, d)),
        ("embed.tgt", (v, d)),
    ]

    def attn_block(prefix: str):
        for name in _attn_param_names(prefix):
            is_matrix = name.rsplit(".", 1)[1].startswith("w")
            layout.append((name, (d, d) if is_matrix else (d,)))

    def norm_block(prefix: str):
        layout.append((f"{prefix}.gain", (d,)))
        layout.append((f"{prefix}.bias", (d,)))

    def ff_block(prefix: str):
        layout.append((f"{prefix}.w1", (d, ff)))
        layout.append((f"{prefix}.b1", (ff,)))
        layout.append((f"{prefix}.w2", (ff, d)))
        layout.append((f"{prefix}.b2", (d,)))

    for i in range(config.n_layers):
        attn_block(f"enc.L{i}.attn")
        norm_block(f"enc.L{i}.norm1")
        ff_block(f"enc.L{i}.ff")
        norm_block(f"enc.L{i}.norm2")
    for i in range(config.n_layers):
        attn_block(f"dec.L{i}.self")
        norm_block(f"dec.L{i}.norm1")
        attn_block(f"dec.L{i}.cross")
        norm_block(f"dec.L{i}.norm2")
        ff_block(f"dec.L{i}.ff")
        norm_block(f"dec.L{i}.norm3")
    layout.append(("proj.out.w", (d, v)))
    layout.append(("proj.out.b", (v,)))
    return layout


def count_parameters(config: TransformerConfig) -> int:
    """Exact scalar count of the canonical weight set."""
    d, ff, v, n = config.d_model, config.d_ff, config.vocab_size, config.n_layers
    attn = 4 * (d * d + d)
    norm = 2 * d
    ffwd = d * ff + ff + ff * d + d
    enc_layer = attn + norm + ffwd + norm
    dec_layer = 2 * attn + 3 * norm + ffwd
    return 2 * v * d + n * enc_layer + n * dec_layer + (d * v + v)


def init_weights(config: TransformerConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """Deterministic init: Xavier-uniform linears, N(0, d^-1/2) embeddings,
    zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    items: list[tuple[str, Tensor]] = []
    for name, shape in weight_layout(config):
        if name.startswith("embed."):
            data = rng.normal(0.0, config.d_model**-0.5, size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        items.append((name, Tensor(np.asarray(data), dtype=dtype, name=name)))
    return ModelWeights(items)


# -- forward pass -------------------------------------------------------------


def _feed_forward(
    x: Tensor, weights: ModelWeights, prefix: str, act_dropout: float, rng
) -> Tensor:
    hidden = ops.relu(_linear(x, weights[f"{prefix}.w1"], weights[f"{prefix}.b1"]))
    if act_dropout > 0.0 and rng is not None:
        hidden = ops.dropout(hidden, act_dropout, rng)
    return _linear(hidden, weights[f"{prefix}.w2"], weights[f"{prefix}.b2"])


def _sublayer(
    x: Tensor,
    sub_out: Tensor,
    weights: ModelWeights,
    norm_prefix: str,
    residual_dropout: float,
    rng,
    eps: float,
) -> Tensor:
    if residual_dropout > 0.0 and rng is not None:
        sub_out = ops.dropout(sub_out, residual_dropout, rng)
    return ops.layer_norm(
        ops.add(x, sub_out),
        weights[f"{norm_prefix}.gain"],
        weights[f"{norm_prefix}.bias"],
        eps,
    )


def forward(
    weights: ModelWeights,
    config: TransformerConfig,
    src_ids: np.ndarray,
    tgt_ids: np.ndarray,
    train_mode: bool = False,
    seed: int = 0,
) -> Tensor:
    """Logits [batch, tgt_len, vocab] for source and decoder-input ids.

    Encoder self-attention masks PAD keys; the decoder uses a causal mask
    plus the PAD key mask for cross-attention. Dropout runs only in
    train_mode, driven by a generator seeded with `seed`.
    """
    src_ids = np.atleast_2d(np.asarray(src_ids))
    tgt_ids = np.atleast_2d(np.asarray(tgt_ids))
    batch, src_len = src_ids.shape
    tgt_len = tgt_ids.shape[1]
    rng = np.random.default_rng(seed) if train_mode else None
    res_drop = config.dropout if train_mode else 0.0
    attn_drop = config.attention_dropout if train_mode else 0.0
    act_drop = config.activation_dropout if train_mode else 0.0
    eps = config.layer_norm_eps
    dtype = weights["embed.src"].dtype

    src_keep = (src_ids != PAD_ID)[:, None, None, :]
    causal = np.tril(np.ones((tgt_len, tgt_len), dtype=bool))[None, None, :, :]

    pe = positional_encoding(max(src_len, tgt_len), config.d_model, dtype=dtype)
    embed_scale = math.sqrt(config.d_model)

    def embed(table: Tensor, ids: np.ndarray, length: int) -> Tensor:
        x = ops.scale(ops.embedding(table, ids), embed_scale)
        x = ops.add(x, Tensor._wrap(pe.data[:length]))
        if res_drop > 0.0 and rng is not None:
            x = ops.dropout(x, res_drop, rng)
        return x

    x = embed(weights["embed.src"], src_ids, src_len)
    for i in range(config.n_layers):
        attn_out = multi_head_attention(
            x, x, weights, f"enc.L{i}.attn", config.n_heads,
            mask=src_keep, dropout_rate=attn_drop, rng=rng,
        )
        x = _sublayer(x, attn_out, weights, f"enc.L{i}.norm1", res_drop, rng, eps)
        ff_out = _feed_forward(x, weights, f"enc.L{i}.ff", act_drop, rng)
        x = _sublayer(x, ff_out, weights, f"enc.L{i}.norm2", res_drop, rng, eps)
    memory = x

    y = embed(weights["embed.tgt"], tgt_ids, tgt_len)
    for i in range(config.n_layers):
        self_out = multi_head_attention(
            y, y, weights, f"dec.L{i}.self", config.n_heads,
            mask=causal, dropout_rate=attn_drop, rng=rng,
        )
        y = _sublayer(y, self_out, weights, f"dec.L{i}.norm1", res_drop, rng, eps)
        cross_out = multi_head_attention(
            y, memory, weights, f"dec.L{i}.cross", config.n_heads,
            mask=src_keep, dropout_rate=attn_drop, rng=rng,
        )
        y = _sublayer(y, cross_out, weights, f"dec.L{i}.norm2", res_drop, rng, eps)
        ff_out = _feed_forward(y, weights, f"dec.L{i}.ff", act_drop, rng)
        y = _sublayer(y, ff_out, weights, f"dec.L{i}.norm3", res_drop, rng, eps)

    return _linear(y, weights["proj.out.w"], weights["proj.out.b"])


def shift_targets(tgt_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets and their include-mask for decoder input ids.

    targets[i] = tgt_ids[i + 1] with PAD appended; mask is True where the
    target is a real (non-PAD) token.
    """
    tgt_ids = np.atleast_2d(np.asarray(tgt_ids))
    targets = np.concatenate(
        [tgt_ids[:, 1:], np.full((tgt_ids.shape[0], 1), PAD_ID, dtype=tgt_ids.dtype)],
        axis=1,
    )
    return targets, targets != PAD_ID


def greedy_decode(
    weights: ModelWeights, config: TransformerConfig, src: TokenSequence
) -> TokenSequence:
    """Argmax decoding from START until END or max_len (lowest id on ties)."""
    src_ids = np.asarray(src.ids, dtype=np.int64)[None, :]
    generated = [START_ID]
    while len(generated) < config.max_len:
        tgt = np.array(generated, dtype=np.int64)[None, :]
        logits = forward(weights, config, src_ids, tgt, train_mode=False)
        next_id = int(np.argmax(logits.data[0, -1]))
        generated.append(next_id)
        if next_id == END_ID:
            break
    true_length = len(generated)
    ids = generated + [PAD_ID] * (config.max_len - true_length)
    return TokenSequence(np.array(ids, dtype=np.int64), true_length)
