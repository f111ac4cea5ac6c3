"""Length-penalized beam search, an exhaustive-search oracle, and sequence
scoring.

A hypothesis's score is sum_loglik / m**beta where m counts generated
tokens including EOS and excluding BOS.  The length penalty is applied at
every pruning step, not only at final ranking.  Hypotheses that reach the
length budget are finalized by appending EOS (with its log-likelihood), so
both searches range over exactly the EOS-terminated sequences of total
generated length <= max_len, and a saturating beam must agree with the
oracle.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

from .autodiff import no_grad
from .data import BOS_ID, EOS_ID, PAD_ID, TokenSequence
from .model import EncoderOutput, Seq2SeqModel, decode_logprobs, encode


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    length_penalty_beta: float = 0.6
    max_len: int = 16

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be a positive count")
        if not self.length_penalty_beta > 0.0:
            raise ValueError("length_penalty_beta must be > 0")
        if self.max_len < 1:
            raise ValueError("max_len must be a positive count")
        if self.length_penalty_beta >= 1.0:
            warnings.warn(
                "length_penalty_beta >= 1.0; summarization normally uses beta < 1",
                stacklevel=2,
            )


@dataclass(frozen=True)
class BeamHypothesis:
    """A (possibly finished) decode: BOS-prefixed tokens, accumulated
    log-likelihood over generated tokens, and the normalized score."""

    tokens: TokenSequence
    sum_loglik: float
    finished: bool
    score: float


def _normalizer(m: int, beta: float) -> float:
    return 1.0 / float(m) ** beta


def score_sequence(per_token_logliks, beta: float):
    """(sum of per-token log-likelihoods) / m**beta with m the token count.

    Accepts plain floats or scalar autodiff tensors; with tensors the
    result stays differentiable.  Entries must be non-positive.
    """
    entries = list(per_token_logliks)
    if not entries:
        raise ValueError("score_sequence needs a non-empty log-likelihood list")
    if not beta > 0.0:
        raise ValueError("beta must be > 0")
    floats = [e if isinstance(e, float) else None for e in entries]
    norm = _normalizer(len(entries), beta)
    if all(f is not None for f in floats):
        if any(f > 0.0 for f in floats):
            raise ValueError("log-likelihoods must be <= 0")
        return sum(floats) * norm
    from . import autodiff as ad

    if any(e.item() > 0.0 for e in entries):
        raise ValueError("log-likelihoods must be <= 0")
    total = entries[0]
    for e in entries[1:]:
        total = ad.add(total, e)
    return ad.scale(total, norm)


def _rank_key(tokens: tuple, score: float):
    return (-score, tokens)


def beam_search(model: Seq2SeqModel, enc: EncoderOutput, cfg: DecodeConfig):
    """Ranked finished hypotheses, best first.

    At each step every live hypothesis is extended with every candidate
    token (PAD and BOS are never generated); EOS extensions move to the
    finished pool, the rest compete for beam_size live slots by score.
    At the final step only EOS is offered, which finalizes truncations.
    Ties break toward the lexicographically smaller token-id sequence.
    """
    beta = cfg.length_penalty_beta
    vocab = model.config.vocab_size
    content = [t for t in range(vocab) if t not in (PAD_ID, BOS_ID, EOS_ID)]
    # (tokens, sum_loglik); all start as the bare BOS prefix
    alive = [((BOS_ID,), 0.0)]
    finished = []
    with no_grad():
        for m in range(1, cfg.max_len + 1):
            norm = _normalizer(m, beta)
            candidates = []
            for tokens, acc in alive:
                lp = decode_logprobs(model, enc, TokenSequence(tokens))
                row = lp.data[-1]
                eos_sum = acc + float(row[EOS_ID])
                finished.append(
                    BeamHypothesis(
                        tokens=TokenSequence(tokens + (EOS_ID,)),
                        sum_loglik=eos_sum,
                        finished=True,
                        score=eos_sum * norm,
                    )
                )
                if m == cfg.max_len:
                    continue  # length budget reached: EOS was forced
                for tok in content:
                    s = acc + float(row[tok])
                    candidates.append((s * norm, tokens + (tok,), s))
            if not candidates:
                break
            candidates.sort(key=lambda c: _rank_key(c[1], c[0]))
            alive = [(tokens, acc) for _, tokens, acc in candidates[: cfg.beam_size]]
    finished.sort(key=lambda h: _rank_key(h.tokens.ids, h.score))
    return finished


EXHAUSTIVE_LIMIT = 10**6


def exhaustive_search(model: Seq2SeqModel, enc: EncoderOutput, cfg: DecodeConfig):
    """Score every EOS-terminated sequence of generated length <= max_len.

    Oracle for beam_search on tiny vocabularies; guarded against search
    spaces past 10^6 sequences.
    """
    vocab = model.config.vocab_size
    if vocab**cfg.max_len > EXHAUSTIVE_LIMIT:
        raise ValueError(
            "search space vocab_size**max_len = %d**%d exceeds %d"
            % (vocab, cfg.max_len, EXHAUSTIVE_LIMIT)
        )
    beta = cfg.length_penalty_beta
    content = [t for t in range(vocab) if t not in (PAD_ID, BOS_ID, EOS_ID)]
    out = []
    with no_grad():
        for content_len in range(cfg.max_len):
            for body in itertools.product(content, repeat=content_len):
                tokens = (BOS_ID,) + body + (EOS_ID,)
                prefix = TokenSequence(tokens[:-1])
                lp = decode_logprobs(model, enc, prefix)
                acc = 0.0
                for i, tok in enumerate(tokens[1:]):
                    acc = acc + float(lp.data[i, tok])
                m = content_len + 1
                out.append(
                    BeamHypothesis(
                        tokens=TokenSequence(tokens),
                        sum_loglik=acc,
                        finished=True,
                        score=acc * _normalizer(m, beta),
                    )
                )
    out.sort(key=lambda h: _rank_key(h.tokens.ids, h.score))
    return out


def generate_silver(model: Seq2SeqModel, source: TokenSequence,
                    cfg: DecodeConfig) -> TokenSequence:
    """Top-1 beam output for a source document (BOS ... EOS), decoded with
    dropout off and no gradient recording."""
    with no_grad():
        enc = encode(model, source)
        ranked = beam_search(model, enc, cfg)
    return ranked[0].tokens
