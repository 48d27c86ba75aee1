"""Transformer encoder in plain numpy with hand-written backpropagation.

The forward pass records every intermediate needed for the exact gradient
(a ForwardTrace), so ``backward_batch`` can return analytically correct
parameter gradients without any autodiff framework. All math happens in
float64. Architecture: learned token and position embeddings, post-norm
residual blocks (multi-head attention then a GELU feed-forward), a linear
scoring head over the first-token state, and a masked-token head that
shares the token embedding matrix.

Padded positions are excluded from attention with additive -inf on the key
axis, which makes the states of real tokens exactly independent of how much
padding follows them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ContractError, ValidationError
from .tokenizer import CLS_ID, PAD_ID, TokenSequence

LN_EPS = 1e-5
INIT_STD = 0.02

#: Architecture used by the full-scale reference system this package scales
#: down from; kept for documentation and experiments, not used by defaults.
FULL_SCALE = dict(n_layers=6, n_heads=12, model_dim=768, ffn_dim=3072, max_len=512, vocab_size=30000)


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the encoder; defaults are the desk-scale configuration."""

    n_layers: int = 2
    n_heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    vocab_size: int = 2000
    max_len: int = 64
    pooling: str = "cls"

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigurationError("n_layers must be >= 0")
        for name in ("n_heads", "model_dim", "ffn_dim", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.model_dim % self.n_heads != 0:
            raise ConfigurationError(
                f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}"
            )
        if self.pooling not in ("cls", "mean"):
            raise ConfigurationError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "model_dim": self.model_dim,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "pooling": self.pooling,
        }


@dataclass
class LayerParams:
    """Weights of one residual block (attention then feed-forward)."""

    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln1_scale: np.ndarray
    ln1_offset: np.ndarray
    w_ffn1: np.ndarray
    b_ffn1: np.ndarray
    w_ffn2: np.ndarray
    b_ffn2: np.ndarray
    ln2_scale: np.ndarray
    ln2_offset: np.ndarray

    _FIELDS = (
        "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
        "ln1_scale", "ln1_offset",
        "w_ffn1", "b_ffn1", "w_ffn2", "b_ffn2",
        "ln2_scale", "ln2_offset",
    )


@dataclass
class EncoderParams:
    """All trainable arrays; ``named_arrays`` fixes the canonical order used
    by the optimizer, checkpoints, and gradient checks."""

    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list
    score_w: np.ndarray
    score_b: np.ndarray
    mlm_bias: np.ndarray

    def named_arrays(self):
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for name in LayerParams._FIELDS:
                yield f"layer{i}.{name}", getattr(layer, name)
        yield "score_w", self.score_w
        yield "score_b", self.score_b
        yield "mlm_bias", self.mlm_bias

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            tok_emb=self.tok_emb.copy(),
            pos_emb=self.pos_emb.copy(),
            layers=[
                LayerParams(**{f: getattr(layer, f).copy() for f in LayerParams._FIELDS})
                for layer in self.layers
            ],
            score_w=self.score_w.copy(),
            score_b=self.score_b.copy(),
            mlm_bias=self.mlm_bias.copy(),
        )


def init_params(config: EncoderConfig, seed: int = 0) -> EncoderParams:
    """Fresh parameters: weights ~ N(0, 0.02), biases and norm offsets zero,
    norm scales one. Draw order follows ``named_arrays`` so a seed fully
    determines every array."""
    rng = np.random.default_rng(seed)
    d, f = config.model_dim, config.ffn_dim

    def w(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    tok_emb = w(config.vocab_size, d)
    pos_emb = w(config.max_len, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                w_q=w(d, d), b_q=np.zeros(d),
                w_k=w(d, d), b_k=np.zeros(d),
                w_v=w(d, d), b_v=np.zeros(d),
                w_o=w(d, d), b_o=np.zeros(d),
                ln1_scale=np.ones(d), ln1_offset=np.zeros(d),
                w_ffn1=w(d, f), b_ffn1=np.zeros(f),
                w_ffn2=w(f, d), b_ffn2=np.zeros(d),
                ln2_scale=np.ones(d), ln2_offset=np.zeros(d),
            )
        )
    return EncoderParams(
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        layers=layers,
        score_w=w(d),
        score_b=np.zeros(()),
        mlm_bias=np.zeros(config.vocab_size),
    )


def zeros_like_params(params: EncoderParams) -> EncoderParams:
    return EncoderParams(
        tok_emb=np.zeros_like(params.tok_emb),
        pos_emb=np.zeros_like(params.pos_emb),
        layers=[
            LayerParams(**{f: np.zeros_like(getattr(layer, f)) for f in LayerParams._FIELDS})
            for layer in params.layers
        ],
        score_w=np.zeros_like(params.score_w),
        score_b=np.zeros_like(params.score_b),
        mlm_bias=np.zeros_like(params.mlm_bias),
    )


def add_params(into: EncoderParams, other: EncoderParams) -> None:
    """In-place accumulation, used to merge per-group gradients."""
    for (_, a), (_, b) in zip(into.named_arrays(), other.named_arrays()):
        a += b


def pad_token_rows(rows):
    """Stack variable-length id lists into (ids, attention_mask) arrays,
    padding short rows with the padding token."""
    max_len = max(len(r) for r in rows)
    ids = np.full((len(rows), max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), max_len), dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1
    return ids, mask


# -- forward ----------------------------------------------------------------


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _layer_norm(x: np.ndarray, scale: np.ndarray, offset: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    x_hat = centered * inv_std
    return x_hat * scale + offset, x_hat, inv_std


def _layer_norm_backward(d_out, x_hat, inv_std, scale):
    d_hat = d_out * scale
    mean1 = d_hat.mean(axis=-1, keepdims=True)
    mean2 = (d_hat * x_hat).mean(axis=-1, keepdims=True)
    d_x = inv_std * (d_hat - mean1 - x_hat * mean2)
    axes = tuple(range(d_out.ndim - 1))
    return d_x, (d_out * x_hat).sum(axis=axes), d_out.sum(axis=axes)


@dataclass
class _LayerTrace:
    x_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray
    x_hat1: np.ndarray
    inv_std1: np.ndarray
    h1: np.ndarray
    ffn_pre: np.ndarray
    ffn_act: np.ndarray
    x_hat2: np.ndarray
    inv_std2: np.ndarray


@dataclass
class ForwardTrace:
    """Cached intermediates from one forward pass; consumed by backward."""

    ids: np.ndarray
    attention_mask: np.ndarray
    hidden: np.ndarray
    layers: list = field(default_factory=list)
    params_id: int = 0


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * hd)


def _check_batch_inputs(config: EncoderConfig, ids: np.ndarray, attention_mask: np.ndarray):
    if ids.ndim != 2 or attention_mask.shape != ids.shape:
        raise ValidationError("ids and attention_mask must be matching 2-D arrays")
    if ids.shape[1] > config.max_len:
        raise ValidationError(
            f"sequence length {ids.shape[1]} exceeds max_len {config.max_len}"
        )
    if ids.shape[1] == 0:
        raise ValidationError("sequences must contain at least one token")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValidationError("token id outside vocabulary range")
    if np.any((attention_mask != 0) & (attention_mask != 1)):
        raise ValidationError("attention_mask entries must be 0 or 1")
    if np.any(attention_mask[:, 0] == 0):
        raise ValidationError("first position of every sequence must be valid")


def forward_batch(params: EncoderParams, config: EncoderConfig, ids, attention_mask):
    """Run the encoder over ``[batch, length]`` token ids.

    Returns ``(hidden, trace)`` where hidden is ``[batch, length, model_dim]``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    attention_mask = np.asarray(attention_mask, dtype=np.int64)
    _check_batch_inputs(config, ids, attention_mask)
    b, l = ids.shape

    x = params.tok_emb[ids] + params.pos_emb[:l][None, :, :]
    key_bias = np.where(attention_mask[:, None, None, :] == 1, 0.0, -np.inf)
    scale = 1.0 / math.sqrt(config.head_dim)

    trace = ForwardTrace(ids=ids, attention_mask=attention_mask, hidden=None, params_id=id(params))
    for layer in params.layers:
        q = _split_heads(x @ layer.w_q + layer.b_q, config.n_heads)
        k = _split_heads(x @ layer.w_k + layer.b_k, config.n_heads)
        v = _split_heads(x @ layer.w_v + layer.b_v, config.n_heads)
        logits = np.matmul(q, k.swapaxes(-1, -2)) * scale + key_bias
        logits -= logits.max(axis=-1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(np.matmul(probs, v))
        attn_out = ctx @ layer.w_o + layer.b_o
        h1, x_hat1, inv_std1 = _layer_norm(x + attn_out, layer.ln1_scale, layer.ln1_offset)
        ffn_pre = h1 @ layer.w_ffn1 + layer.b_ffn1
        ffn_act = _gelu(ffn_pre)
        x_next, x_hat2, inv_std2 = _layer_norm(
            h1 + ffn_act @ layer.w_ffn2 + layer.b_ffn2, layer.ln2_scale, layer.ln2_offset
        )
        trace.layers.append(
            _LayerTrace(
                x_in=x, q=q, k=k, v=v, probs=probs, ctx=ctx,
                x_hat1=x_hat1, inv_std1=inv_std1, h1=h1,
                ffn_pre=ffn_pre, ffn_act=ffn_act,
                x_hat2=x_hat2, inv_std2=inv_std2,
            )
        )
        x = x_next
    trace.hidden = x
    return x, trace


def backward_batch(params: EncoderParams, config: EncoderConfig, trace: ForwardTrace, d_hidden) -> EncoderParams:
    """Exact gradients of ``sum(d_hidden * hidden)`` for every parameter."""
    if trace.params_id != id(params):
        raise ContractError("trace was produced by different parameters")
    d_hidden = np.asarray(d_hidden, dtype=np.float64)
    if d_hidden.shape != trace.hidden.shape:
        raise ContractError(
            f"upstream gradient shape {d_hidden.shape} does not match hidden {trace.hidden.shape}"
        )
    grads = zeros_like_params(params)
    scale = 1.0 / math.sqrt(config.head_dim)
    b, l = trace.ids.shape
    d = config.model_dim

    d_x = d_hidden
    for layer, lt, g in zip(reversed(params.layers), reversed(trace.layers), reversed(grads.layers)):
        d_r2, g.ln2_scale[:], g.ln2_offset[:] = _layer_norm_backward(
            d_x, lt.x_hat2, lt.inv_std2, layer.ln2_scale
        )
        # r2 = h1 + ffn_act @ w_ffn2 + b_ffn2
        act_flat = lt.ffn_act.reshape(-1, config.ffn_dim)
        d_r2_flat = d_r2.reshape(-1, d)
        g.w_ffn2[:] = act_flat.T @ d_r2_flat
        g.b_ffn2[:] = d_r2_flat.sum(axis=0)
        d_act = d_r2 @ layer.w_ffn2.T
        d_pre = d_act * _gelu_grad(lt.ffn_pre)
        d_pre_flat = d_pre.reshape(-1, config.ffn_dim)
        h1_flat = lt.h1.reshape(-1, d)
        g.w_ffn1[:] = h1_flat.T @ d_pre_flat
        g.b_ffn1[:] = d_pre_flat.sum(axis=0)
        d_h1 = d_r2 + d_pre @ layer.w_ffn1.T

        d_r1, g.ln1_scale[:], g.ln1_offset[:] = _layer_norm_backward(
            d_h1, lt.x_hat1, lt.inv_std1, layer.ln1_scale
        )
        # r1 = x_in + ctx @ w_o + b_o
        d_r1_flat = d_r1.reshape(-1, d)
        g.w_o[:] = lt.ctx.reshape(-1, d).T @ d_r1_flat
        g.b_o[:] = d_r1_flat.sum(axis=0)
        d_ctx = _split_heads(d_r1 @ layer.w_o.T, config.n_heads)

        d_probs = np.matmul(d_ctx, lt.v.swapaxes(-1, -2))
        d_v = np.matmul(lt.probs.swapaxes(-1, -2), d_ctx)
        d_logits = lt.probs * (d_probs - (d_probs * lt.probs).sum(axis=-1, keepdims=True))
        d_q = np.matmul(d_logits, lt.k) * scale
        d_k = np.matmul(d_logits.swapaxes(-1, -2), lt.q) * scale

        d_x = d_r1.copy()
        x_flat = lt.x_in.reshape(-1, d)
        for d_head, w_name, b_name, w in (
            (d_q, "w_q", "b_q", layer.w_q),
            (d_k, "w_k", "b_k", layer.w_k),
            (d_v, "w_v", "b_v", layer.w_v),
        ):
            d_proj = _merge_heads(d_head)
            d_proj_flat = d_proj.reshape(-1, d)
            getattr(g, w_name)[:] = x_flat.T @ d_proj_flat
            getattr(g, b_name)[:] = d_proj_flat.sum(axis=0)
            d_x += d_proj @ w.T

    np.add.at(grads.tok_emb, trace.ids, d_x)
    grads.pos_emb[:l] = d_x.sum(axis=0)
    return grads


# -- heads ------------------------------------------------------------------


def _require_cls(trace_ids: np.ndarray):
    if np.any(trace_ids[:, 0] != CLS_ID):
        raise ContractError("scoring requires sequences that start with the [CLS] token")


def score_cls_batch(params: EncoderParams, config: EncoderConfig, ids, attention_mask):
    """Scalar relevance score per sequence from the first-token state."""
    hidden, trace = forward_batch(params, config, ids, attention_mask)
    _require_cls(trace.ids)
    scores = hidden[:, 0, :] @ params.score_w + params.score_b
    return scores, trace


def score_cls_backward(params: EncoderParams, config: EncoderConfig, trace: ForwardTrace, d_scores) -> EncoderParams:
    d_scores = np.asarray(d_scores, dtype=np.float64)
    if d_scores.shape != (trace.hidden.shape[0],):
        raise ContractError("one upstream gradient per sequence is required")
    d_hidden = np.zeros_like(trace.hidden)
    d_hidden[:, 0, :] = d_scores[:, None] * params.score_w
    grads = backward_batch(params, config, trace, d_hidden)
    grads.score_w[:] += trace.hidden[:, 0, :].T @ d_scores
    grads.score_b[()] += d_scores.sum()
    return grads


def embed_batch(params: EncoderParams, config: EncoderConfig, ids, attention_mask):
    """One embedding vector per sequence (first-token state, or masked mean)."""
    hidden, trace = forward_batch(params, config, ids, attention_mask)
    if config.pooling == "cls":
        emb = hidden[:, 0, :].copy()
    else:
        m = trace.attention_mask[:, :, None].astype(np.float64)
        emb = (hidden * m).sum(axis=1) / m.sum(axis=1)
    return emb, trace


def embed_backward(params: EncoderParams, config: EncoderConfig, trace: ForwardTrace, d_emb) -> EncoderParams:
    d_emb = np.asarray(d_emb, dtype=np.float64)
    if d_emb.shape != (trace.hidden.shape[0], trace.hidden.shape[2]):
        raise ContractError("one upstream gradient row per sequence is required")
    d_hidden = np.zeros_like(trace.hidden)
    if config.pooling == "cls":
        d_hidden[:, 0, :] = d_emb
    else:
        m = trace.attention_mask[:, :, None].astype(np.float64)
        d_hidden[:] = d_emb[:, None, :] * (m / m.sum(axis=1, keepdims=True))
    return backward_batch(params, config, trace, d_hidden)


def mlm_logits_batch(params: EncoderParams, states) -> np.ndarray:
    """Vocabulary logits for gathered hidden states, with the output
    projection tied to the token embedding matrix."""
    states = np.asarray(states, dtype=np.float64)
    return states @ params.tok_emb.T + params.mlm_bias


# -- single-sequence wrappers ----------------------------------------------


def _as_batch(seq: TokenSequence):
    return np.asarray([seq.ids], dtype=np.int64), np.asarray([seq.attention_mask], dtype=np.int64)


def forward(params: EncoderParams, config: EncoderConfig, seq: TokenSequence):
    """Hidden states ``[length, model_dim]`` for one token sequence."""
    ids, mask = _as_batch(seq)
    hidden, trace = forward_batch(params, config, ids, mask)
    return hidden[0], trace


def backward(params: EncoderParams, config: EncoderConfig, trace: ForwardTrace, d_hidden) -> EncoderParams:
    d_hidden = np.asarray(d_hidden, dtype=np.float64)
    if d_hidden.ndim == 2 and trace.hidden.shape[0] == 1:
        d_hidden = d_hidden[None, :, :]
    return backward_batch(params, config, trace, d_hidden)


def score_cls(params: EncoderParams, config: EncoderConfig, seq: TokenSequence):
    ids, mask = _as_batch(seq)
    scores, trace = score_cls_batch(params, config, ids, mask)
    return float(scores[0]), trace


def embed_text(params: EncoderParams, config: EncoderConfig, seq: TokenSequence) -> np.ndarray:
    ids, mask = _as_batch(seq)
    emb, _ = embed_batch(params, config, ids, mask)
    return emb[0]


def mlm_logits(params: EncoderParams, hidden, positions) -> np.ndarray:
    """Logits ``[len(positions), vocab]`` for chosen positions of one sequence."""
    hidden = np.asarray(hidden, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    if hidden.ndim != 2:
        raise ValidationError("hidden must be [length, model_dim]")
    if positions.size and (positions.min() < 0 or positions.max() >= hidden.shape[0]):
        raise ValidationError("masked position outside sequence")
    return mlm_logits_batch(params, hidden[positions])
