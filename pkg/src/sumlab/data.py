"""Vocabulary, tokenization, synthetic corpus generation, and JSONL ingestion.

Tokenization is plain whitespace splitting against a fixed vocabulary with
four reserved sentinels.  The synthetic task embeds marked salient words in
random filler text; the gold summary is the salient words in document order,
so it is a compressive, order-preserving target a tiny model can learn.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class TokenSequence:
    """An immutable list of vocabulary ids."""

    ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if any(i < 0 for i in ids):
            raise ValueError("token ids must be non-negative")
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, key):
        if isinstance(key, slice):
            return TokenSequence(self.ids[key])
        return self.ids[key]

    @property
    def starts_with_bos(self) -> bool:
        return len(self.ids) > 0 and self.ids[0] == BOS_ID

    @property
    def ends_with_eos(self) -> bool:
        return len(self.ids) > 0 and self.ids[-1] == EOS_ID

    def content_ids(self) -> tuple:
        """Ids with a leading BOS and trailing EOS stripped, if present."""
        ids = self.ids
        if ids and ids[0] == BOS_ID:
            ids = ids[1:]
        if ids and ids[-1] == EOS_ID:
            ids = ids[:-1]
        return ids

    def require_decoder_shape(self, what: str = "sequence"):
        """Check the BOS/EOS/no-interior-PAD convention for decoder targets."""
        if not self.starts_with_bos:
            raise ValueError("%s must start with BOS" % what)
        if not self.ends_with_eos:
            raise ValueError("%s must end with EOS" % what)
        if PAD_ID in self.ids:
            raise ValueError("%s contains PAD" % what)


class Vocab:
    """Fixed token inventory.  Ids are line numbers: reserved sentinels
    occupy 0..3, content words follow in the order given."""

    def __init__(self, content_words):
        words = list(content_words)
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        for w in words:
            if not w or w.split() != [w]:
                raise ValueError("vocabulary words must be single non-empty tokens: %r" % w)
            if w in RESERVED_TOKENS:
                raise ValueError("word collides with reserved token: %r" % w)
        self.tokens = list(RESERVED_TOKENS) + words
        self._index = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def lookup(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def word_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ValueError("vocabulary file does not start with the reserved tokens")
        return cls(tokens[4:])


def build_vocab(corpus, max_size: int) -> Vocab:
    """Most frequent words up to max_size - 4 slots, ties alphabetical."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < 4:
        raise ValueError("max_size must leave room for the 4 reserved tokens")
    counts = Counter()
    for text in corpus:
        counts.update(text.split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [w for w, _ in ranked[: max_size - 4]]
    return Vocab(kept)


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    return TokenSequence(tuple(vocab.lookup(w) for w in text.split()))


def detokenize(vocab: Vocab, seq) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else tuple(seq)
    return " ".join(vocab.word_of(i) for i in ids)


def summary_words(vocab: Vocab, seq: TokenSequence) -> str:
    """Detokenized content of a decoder-side sequence, sentinels stripped."""
    return " ".join(vocab.word_of(i) for i in seq.content_ids())


@dataclass(frozen=True)
class ExamplePair:
    """One (document, gold summary) training example, already tokenized.
    The document is bare content ids; the summary is BOS ... EOS."""

    document: TokenSequence
    summary: TokenSequence

    def __post_init__(self):
        if len(self.document) == 0:
            raise ValueError("document is empty")
        self.summary.require_decoder_shape("summary")
        if len(self.summary) < 3:
            raise ValueError("summary has no content tokens")


# ----- synthetic task -----

_N_FILLER = 160
_N_SALIENT = 40

# Salient words carry the "kw" marker prefix; fillers are "tok" words.
SYNTH_LEXICON = tuple("tok%03d" % i for i in range(_N_FILLER)) + tuple(
    "kw%02d" % i for i in range(_N_SALIENT)
)


def synth_vocab() -> Vocab:
    return Vocab(sorted(SYNTH_LEXICON))


def _synth_split(rng, vocab, n, doc_len_lo, doc_len_hi, salient_count):
    fillers = sorted(SYNTH_LEXICON[:_N_FILLER])
    salients = sorted(SYNTH_LEXICON[_N_FILLER:])
    pairs = []
    for _ in range(n):
        length = int(rng.integers(doc_len_lo, doc_len_hi + 1))
        positions = np.sort(rng.choice(length, size=salient_count, replace=False))
        chosen = rng.choice(len(salients), size=salient_count, replace=False)
        words = [fillers[int(i)] for i in rng.integers(0, len(fillers), size=length)]
        for pos, widx in zip(positions, chosen):
            words[int(pos)] = salients[int(widx)]
        doc = TokenSequence(tuple(vocab.lookup(w) for w in words))
        gold = [words[int(p)] for p in positions]
        summary = TokenSequence(
            (BOS_ID,) + tuple(vocab.lookup(w) for w in gold) + (EOS_ID,)
        )
        pairs.append(ExamplePair(doc, summary))
    return pairs


def synth_corpus(seed, n_train, n_val, n_test, doc_len_range, salient_count):
    """Three seeded splits of the salient-word extraction task.

    Every document is doc_len_range[0]..doc_len_range[1] words over the
    200-word lexicon with salient_count marked words at random positions;
    the gold summary is those words in document order.  Pure function of
    its arguments.
    """
    lo, hi = int(doc_len_range[0]), int(doc_len_range[1])
    if lo < 1 or hi < lo:
        raise ValueError("doc_len_range must satisfy 1 <= lo <= hi")
    if not (1 <= salient_count <= lo):
        raise ValueError("salient_count must be between 1 and the minimum doc length")
    if salient_count > _N_SALIENT:
        raise ValueError("salient_count exceeds the salient lexicon (%d)" % _N_SALIENT)
    sizes = (int(n_train), int(n_val), int(n_test))
    if any(s < 0 for s in sizes):
        raise ValueError("split sizes must be non-negative")
    vocab = synth_vocab()
    streams = np.random.SeedSequence(int(seed)).spawn(3)
    splits = []
    for n, ss in zip(sizes, streams):
        splits.append(_synth_split(np.random.default_rng(ss), vocab, n, lo, hi, salient_count))
    return tuple(splits)


# ----- JSONL ingestion -----


def _raise_malformed(bad, path):
    if bad:
        first_line, first_reason = bad[0]
        raise ValueError(
            "%d malformed line(s) in %s; first at line %d: %s"
            % (len(bad), path, first_line, first_reason)
        )


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                yield lineno, line


def read_jsonl_records(path):
    """Raw (line_number, document, summary) triples from a JSON Lines
    file, with all malformed lines reported together by line number."""
    records = []
    bad = []
    for lineno, line in _iter_jsonl(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            bad.append((lineno, "invalid JSON"))
            continue
        if not isinstance(record, dict):
            bad.append((lineno, "record is not an object"))
            continue
        doc = record.get("document")
        summ = record.get("summary")
        if not isinstance(doc, str):
            bad.append((lineno, 'missing or non-string "document"'))
            continue
        if not isinstance(summ, str):
            bad.append((lineno, 'missing or non-string "summary"'))
            continue
        records.append((lineno, doc, summ))
    _raise_malformed(bad, path)
    return records


def read_jsonl_documents(path):
    """Document strings only; records without a "summary" field are fine."""
    docs = []
    bad = []
    for lineno, line in _iter_jsonl(path):
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            bad.append((lineno, "invalid JSON"))
            continue
        doc = record.get("document") if isinstance(record, dict) else None
        if not isinstance(doc, str):
            bad.append((lineno, 'missing or non-string "document"'))
            continue
        docs.append(doc)
    _raise_malformed(bad, path)
    return docs


def load_jsonl(path, vocab: Vocab, max_doc_len: int, max_sum_len: int):
    """Read one (document, summary) record per line and tokenize.

    Documents are truncated to max_doc_len ids; summary content to
    max_sum_len - 2 so the BOS/EOS framing fits.  Malformed lines are
    collected and reported together with their line numbers.
    """
    pairs = []
    bad = []
    for lineno, doc, summ in read_jsonl_records(path):
        doc_ids = tokenize(doc, vocab).ids[:max_doc_len]
        sum_ids = tokenize(summ, vocab).ids[: max_sum_len - 2]
        if not doc_ids:
            bad.append((lineno, "document empty after tokenization"))
            continue
        if not sum_ids:
            bad.append((lineno, "summary empty after tokenization"))
            continue
        pairs.append(
            ExamplePair(
                TokenSequence(doc_ids),
                TokenSequence((BOS_ID,) + sum_ids + (EOS_ID,)),
            )
        )
    _raise_malformed(bad, path)
    return pairs
