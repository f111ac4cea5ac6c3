"""ROUGE-1 / ROUGE-2 / ROUGE-L scoring.

Scoring tokenization is deliberately simple and fully documented here:
lowercase, punctuation characters become separate tokens, then whitespace
split.  No stemming, no stopword removal, no sentence splitting for
ROUGE-L.  Scores are therefore comparable within this codebase only.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize_for_scoring(text: str):
    """Lowercase and split, with punctuation as standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class RougeScores:
    r1: PRF
    r2: PRF
    rl: PRF


def _f1(p: float, r: float) -> float:
    return 2.0 * p * r / (p + r) if p + r > 0.0 else 0.0


def _ngrams(words, n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def rouge_n(candidate, reference, n: int) -> PRF:
    """Clipped n-gram overlap precision/recall/F1 for n in {1, 2}."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    cand = _ngrams(list(candidate), n)
    ref = _ngrams(list(reference), n)
    cand_total = sum(cand.values())
    ref_total = sum(ref.values())
    if cand_total == 0 or ref_total == 0:
        return PRF(0.0, 0.0, 0.0)
    overlap = sum(min(c, ref[g]) for g, c in cand.items())
    p = overlap / cand_total
    r = overlap / ref_total
    return PRF(p, r, _f1(p, r))


def _lcs_len(a, b) -> int:
    # One-row dynamic program; O(len(a) * len(b)).
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(cur[j - 1], prev[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> PRF:
    """Longest-common-subsequence P/R/F1 over the whole word sequences."""
    cand = list(candidate)
    ref = list(reference)
    if not cand or not ref:
        return PRF(0.0, 0.0, 0.0)
    ell = _lcs_len(cand, ref)
    p = ell / len(cand)
    r = ell / len(ref)
    return PRF(p, r, _f1(p, r))


def score_pair(candidate_text: str, reference_text: str) -> RougeScores:
    """All three variants for one candidate/reference text pair."""
    cand = tokenize_for_scoring(candidate_text)
    ref = tokenize_for_scoring(reference_text)
    return RougeScores(
        r1=rouge_n(cand, ref, 1),
        r2=rouge_n(cand, ref, 2),
        rl=rouge_l(cand, ref),
    )


def corpus_rouge(pairs) -> RougeScores:
    """Unweighted mean of per-pair scores.  ``pairs`` holds
    (candidate_text, reference_text) tuples."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_rouge needs at least one pair")
    scored = [score_pair(c, r) for c, r in pairs]
    out = []
    for variant in ("r1", "r2", "rl"):
        triples = [getattr(s, variant) for s in scored]
        out.append(
            PRF(
                sum(t.precision for t in triples) / len(triples),
                sum(t.recall for t in triples) / len(triples),
                sum(t.f1 for t in triples) / len(triples),
            )
        )
    return RougeScores(*out)
