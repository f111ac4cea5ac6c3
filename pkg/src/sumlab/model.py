"""Tiny Transformer encoder-decoder over the autodiff substrate.

The model computes token log-likelihoods f(y_i | X, y_<i): encode() turns a
source document into a reusable stack of hidden states, decode_logprobs()
teacher-forces a BOS-prefixed prefix and returns one log-probability row
per position, and sequence_loglik() reads those rows at the gold ids.

Everything numerical goes through autodiff ops.  Attention masking uses a
large negative constant rather than -inf so every tensor stays finite; the
constant is big enough that masked positions exp-flush to exactly 0.0,
which together with the einsum accumulation rules makes decoder rows
bit-identical under prefix extension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS_ID, TokenSequence

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_doc_len: int = 64
    max_sum_len: int = 32
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers",
                     "n_dec_layers", "d_ff", "max_doc_len", "max_sum_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError("%s must be a positive count" % name)
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 4 reserved ids plus content")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must lie in [0, 1)")


def sinusoidal_positions(n_rows: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table, one row per position."""
    pos = np.arange(n_rows, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / d_model)
    table = np.zeros((n_rows, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


class DropoutMasks:
    """Pre-drawn 0/1 keep masks, one per dropout site, for one forward pass.

    Drawing happens up front from a caller-owned generator so that any
    forward pass can be replayed bit-exactly.  Site names are structural:
    "enc.embed", "enc.0.attn.h1", "dec.1.cross.out", and so on.
    """

    def __init__(self, rate: float, masks: dict):
        self.rate = float(rate)
        self.masks = masks

    def __getitem__(self, site: str) -> Tensor:
        return self.masks[site]

    def __or__(self, other: "DropoutMasks") -> "DropoutMasks":
        if other.rate != self.rate:
            raise ValueError("cannot merge mask sets with different rates")
        merged = dict(self.masks)
        merged.update(other.masks)
        return DropoutMasks(self.rate, merged)

    @staticmethod
    def _draw(rng, rate, shape) -> Tensor:
        return Tensor((rng.random(shape) >= rate).astype(np.float64))

    @classmethod
    def for_encoder(cls, config: ModelConfig, rng, source_len: int) -> "DropoutMasks":
        rate = config.dropout_rate
        d, s = config.d_model, source_len
        masks = {"enc.embed": cls._draw(rng, rate, (s, d))}
        for i in range(config.n_enc_layers):
            for h in range(config.n_heads):
                masks["enc.%d.attn.h%d" % (i, h)] = cls._draw(rng, rate, (s, s))
            masks["enc.%d.attn.out" % i] = cls._draw(rng, rate, (s, d))
            masks["enc.%d.ffn.out" % i] = cls._draw(rng, rate, (s, d))
        return cls(rate, masks)

    @classmethod
    def for_decoder(cls, config: ModelConfig, rng, source_len: int,
                    target_len: int) -> "DropoutMasks":
        rate = config.dropout_rate
        d, s, t = config.d_model, source_len, target_len
        masks = {"dec.embed": cls._draw(rng, rate, (t, d))}
        for i in range(config.n_dec_layers):
            for h in range(config.n_heads):
                masks["dec.%d.self.h%d" % (i, h)] = cls._draw(rng, rate, (t, t))
            masks["dec.%d.self.out" % i] = cls._draw(rng, rate, (t, d))
            for h in range(config.n_heads):
                masks["dec.%d.cross.h%d" % (i, h)] = cls._draw(rng, rate, (t, s))
            masks["dec.%d.cross.out" % i] = cls._draw(rng, rate, (t, d))
            masks["dec.%d.ffn.out" % i] = cls._draw(rng, rate, (t, d))
        return cls(rate, masks)


@dataclass(frozen=True)
class EncoderOutput:
    """Reusable encoder states; one encoding can serve many decodes."""

    states: Tensor
    source_len: int


class Seq2SeqModel:
    """Parameter container plus the forward passes defined below.

    Parameter names are stable and form the checkpoint contract; the
    position table is derived from the config (sinusoidal) and is not a
    parameter.  Names beginning with "encoder." define the freezable set.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params
        n_pos = max(config.max_doc_len, config.max_sum_len)
        self.pos_table = sinusoidal_positions(n_pos, config.d_model)

    def parameters(self) -> dict:
        return self.params

    @classmethod
    def initialize(cls, config: ModelConfig, seed_or_rng) -> "Seq2SeqModel":
        if isinstance(seed_or_rng, np.random.Generator):
            rng = seed_or_rng
        else:
            rng = np.random.default_rng(seed_or_rng)
        d, ff, v = config.d_model, config.d_ff, config.vocab_size

        params: dict = {}

        def weight(name, d_in, d_out):
            bound = 1.0 / math.sqrt(d_in)
            params[name] = Tensor(rng.uniform(-bound, bound, (d_in, d_out)),
                                  requires_grad=True)

        def bias(name, width):
            params[name] = Tensor(np.zeros(width), requires_grad=True)

        def layer_norm(prefix):
            params[prefix + ".gain"] = Tensor(np.ones(d), requires_grad=True)
            params[prefix + ".bias"] = Tensor(np.zeros(d), requires_grad=True)

        def attention(prefix):
            for part in ("q", "k", "v", "o"):
                weight("%s.w%s" % (prefix, part), d, d)
                bias("%s.b%s" % (prefix, part), d)

        def ffn(prefix):
            weight(prefix + ".w1", d, ff)
            bias(prefix + ".b1", ff)
            weight(prefix + ".w2", ff, d)
            bias(prefix + ".b2", d)

        bound = 1.0 / math.sqrt(d)
        params["encoder.embed.tokens"] = Tensor(
            rng.uniform(-bound, bound, (v, d)), requires_grad=True)
        for i in range(config.n_enc_layers):
            layer_norm("encoder.layer%d.ln1" % i)
            attention("encoder.layer%d.attn" % i)
            layer_norm("encoder.layer%d.ln2" % i)
            ffn("encoder.layer%d.ffn" % i)
        layer_norm("encoder.final_ln")

        params["decoder.embed.tokens"] = Tensor(
            rng.uniform(-bound, bound, (v, d)), requires_grad=True)
        for i in range(config.n_dec_layers):
            layer_norm("decoder.layer%d.ln1" % i)
            attention("decoder.layer%d.self_attn" % i)
            layer_norm("decoder.layer%d.ln2" % i)
            attention("decoder.layer%d.cross_attn" % i)
            layer_norm("decoder.layer%d.ln3" % i)
            ffn("decoder.layer%d.ffn" % i)
        layer_norm("decoder.final_ln")

        weight("proj.weight", d, v)
        bias("proj.bias", v)
        return cls(config, params)


def _maybe_dropout(x: Tensor, masks, site: str) -> Tensor:
    if masks is None or masks.rate == 0.0:
        return x
    kept = ad.dropout_mask_apply(x, masks[site])
    return ad.scale(kept, 1.0 / (1.0 - masks.rate))


def _layer_norm(params, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm_rows(x, params[prefix + ".gain"], params[prefix + ".bias"])


def _attention(params, prefix: str, n_heads: int, q_in: Tensor, kv_in: Tensor,
               attn_mask, masks, site: str) -> Tensor:
    d = q_in.shape[1]
    dh = d // n_heads
    q = ad.add(ad.matmul(q_in, params[prefix + ".wq"]), params[prefix + ".bq"])
    k = ad.add(ad.matmul(kv_in, params[prefix + ".wk"]), params[prefix + ".bk"])
    v = ad.add(ad.matmul(kv_in, params[prefix + ".wv"]), params[prefix + ".bv"])
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_(q, lo, hi, axis=1)
        kh = ad.slice_(k, lo, hi, axis=1)
        vh = ad.slice_(v, lo, hi, axis=1)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        if attn_mask is not None:
            scores = ad.add(scores, attn_mask)
        probs = ad.softmax_rows(scores)
        probs = _maybe_dropout(probs, masks, "%s.h%d" % (site, h))
        heads.append(ad.matmul(probs, vh))
    ctx = heads[0] if n_heads == 1 else ad.concat(*heads, axis=1)
    return ad.add(ad.matmul(ctx, params[prefix + ".wo"]), params[prefix + ".bo"])


def _ffn(params, prefix: str, x: Tensor) -> Tensor:
    inner = ad.relu(ad.add(ad.matmul(x, params[prefix + ".w1"]), params[prefix + ".b1"]))
    return ad.add(ad.matmul(inner, params[prefix + ".w2"]), params[prefix + ".b2"])


def _embed(table: Tensor, ids, pos_table: np.ndarray, d_model: int) -> Tensor:
    emb = ad.scale(ad.embedding_lookup(table, ids), math.sqrt(d_model))
    positions = Tensor(pos_table[: len(ids)])
    return ad.add(emb, positions)


def _validate_ids(seq: TokenSequence, vocab_size: int, what: str):
    for i in seq:
        if i >= vocab_size:
            raise ValueError("%s contains out-of-vocabulary id %d" % (what, i))


def encode(model: Seq2SeqModel, source: TokenSequence, dropout_masks=None) -> EncoderOutput:
    """Run the encoder stack over a source document.

    Masks absent means inference mode (no dropout).  Output is
    deterministic given (parameters, source, masks).
    """
    cfg = model.config
    if len(source) == 0:
        raise ValueError("source is empty")
    if len(source) > cfg.max_doc_len:
        raise ValueError(
            "source length %d exceeds max_doc_len %d" % (len(source), cfg.max_doc_len))
    _validate_ids(source, cfg.vocab_size, "source")
    p = model.params
    x = _embed(p["encoder.embed.tokens"], list(source), model.pos_table, cfg.d_model)
    x = _maybe_dropout(x, dropout_masks, "enc.embed")
    for i in range(cfg.n_enc_layers):
        base = "encoder.layer%d" % i
        h = _layer_norm(p, base + ".ln1", x)
        attn = _attention(p, base + ".attn", cfg.n_heads, h, h, None,
                          dropout_masks, "enc.%d.attn" % i)
        attn = _maybe_dropout(attn, dropout_masks, "enc.%d.attn.out" % i)
        x = ad.add(x, attn)
        h = _layer_norm(p, base + ".ln2", x)
        ff = _maybe_dropout(_ffn(p, base + ".ffn", h), dropout_masks, "enc.%d.ffn.out" % i)
        x = ad.add(x, ff)
    x = _layer_norm(p, "encoder.final_ln", x)
    return EncoderOutput(states=x, source_len=len(source))


def _causal_mask(t: int) -> Tensor:
    return Tensor(np.triu(np.full((t, t), MASK_VALUE), k=1))


def _decoder_states(model: Seq2SeqModel, enc: EncoderOutput, prefix_ids,
                    dropout_masks) -> Tensor:
    cfg = model.config
    p = model.params
    t = len(prefix_ids)
    x = _embed(p["decoder.embed.tokens"], prefix_ids, model.pos_table, cfg.d_model)
    x = _maybe_dropout(x, dropout_masks, "dec.embed")
    causal = _causal_mask(t)
    for i in range(cfg.n_dec_layers):
        base = "decoder.layer%d" % i
        h = _layer_norm(p, base + ".ln1", x)
        attn = _attention(p, base + ".self_attn", cfg.n_heads, h, h, causal,
                          dropout_masks, "dec.%d.self" % i)
        attn = _maybe_dropout(attn, dropout_masks, "dec.%d.self.out" % i)
        x = ad.add(x, attn)
        h = _layer_norm(p, base + ".ln2", x)
        cross = _attention(p, base + ".cross_attn", cfg.n_heads, h, enc.states, None,
                           dropout_masks, "dec.%d.cross" % i)
        cross = _maybe_dropout(cross, dropout_masks, "dec.%d.cross.out" % i)
        x = ad.add(x, cross)
        h = _layer_norm(p, base + ".ln3", x)
        ff = _maybe_dropout(_ffn(p, base + ".ffn", h), dropout_masks, "dec.%d.ffn.out" % i)
        x = ad.add(x, ff)
    return _layer_norm(p, "decoder.final_ln", x)


def _log_softmax_rows(logits: Tensor) -> Tensor:
    # The row max is subtracted as a constant: log-softmax is invariant to
    # per-row shifts, so routing no gradient through it is exact.
    t, v = logits.shape
    rowmax = logits.data.max(axis=1, keepdims=True)
    shifted = ad.add(logits, Tensor(np.repeat(-rowmax, v, axis=1)))
    e = ad.exp(shifted)
    denom = ad.matmul(e, Tensor(np.ones((v, 1))))
    spread = ad.matmul(ad.log(denom), Tensor(np.ones((1, v))))
    return ad.add(shifted, ad.scale(spread, -1.0))


def decode_logprobs(model: Seq2SeqModel, enc: EncoderOutput, prefix: TokenSequence,
                    dropout_masks=None) -> Tensor:
    """Teacher-forced decoder pass.

    Row t is the log-probability distribution over the next token given
    the source and prefix positions <= t.  Causal masking makes earlier
    rows bit-identical when the prefix is extended.
    """
    cfg = model.config
    if len(prefix) == 0 or prefix[0] != BOS_ID:
        raise ValueError("decoder prefix must start with BOS")
    if len(prefix) > cfg.max_sum_len:
        raise ValueError(
            "prefix length %d exceeds max_sum_len %d" % (len(prefix), cfg.max_sum_len))
    _validate_ids(prefix, cfg.vocab_size, "prefix")
    states = _decoder_states(model, enc, list(prefix), dropout_masks)
    logits = ad.add(ad.matmul(states, model.params["proj.weight"]),
                    model.params["proj.bias"])
    return _log_softmax_rows(logits)


def _onehot_row(vocab_size: int, token_id: int) -> Tensor:
    row = np.zeros((1, vocab_size))
    row[0, token_id] = 1.0
    return Tensor(row)


def teacher_forced_logliks(model: Seq2SeqModel, enc: EncoderOutput, input_prefix,
                           target_ids, dropout_masks=None):
    """Log-likelihood of each target id under the rows produced by feeding
    ``input_prefix``.  The two sequences must have equal length; entry i is
    log p(target_ids[i] | source, input_prefix[:i+1]).  Returns scalar
    tensors so losses can differentiate through them."""
    if len(input_prefix) != len(target_ids):
        raise ValueError("input prefix and targets must have equal length")
    lp = decode_logprobs(model, enc, input_prefix, dropout_masks)
    v = model.config.vocab_size
    out = []
    for i, tid in enumerate(target_ids):
        row = ad.slice_(lp, i, i + 1, axis=0)
        out.append(ad.sum_all(ad.mul(row, _onehot_row(v, tid))))
    return out


def sequence_loglik(model: Seq2SeqModel, enc: EncoderOutput, target: TokenSequence,
                    dropout_masks=None):
    """Per-token log-likelihoods f(target_i | X, target_<i) of a complete
    BOS ... EOS target.  Returns length(target) - 1 scalar tensors, all
    with non-positive values (BOS is input only)."""
    target.require_decoder_shape("target")
    _validate_ids(target, model.config.vocab_size, "target")
    prefix = TokenSequence(target.ids[:-1])
    return teacher_forced_logliks(model, enc, prefix, target.ids[1:], dropout_masks)
