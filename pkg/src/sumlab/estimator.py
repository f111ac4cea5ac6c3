"""Scikit-learn style front door: fit on (document, summary) string pairs,
predict summaries for new documents, score with mean Rouge-2 F1.

The estimator owns vocabulary construction and tokenization; everything
after that is the regular training stack.  All constructor arguments are
stored verbatim so get_params/set_params/clone behave as sklearn expects.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import BOS_ID, EOS_ID, ExamplePair, TokenSequence, build_vocab, tokenize
from .decoding import generate_silver
from .model import ModelConfig
from .rouge import corpus_rouge
from .training import Trainer, TrainingConfig


class ContrastiveSummarizer(BaseEstimator):
    """Contrastively trained tiny seq2seq summarizer.

    fit(X, y) expects parallel lists of document and summary strings.
    mode selects the training objective: "consum" (contrastive + NLL),
    "nll_only", "con_only", or the scheduled-sampling baselines
    "ss_sum" / "ss_token".
    """

    def __init__(self, gamma=1.5, beta=0.6, lambda_nll=1.0, mode="consum",
                 vocab_size=2000, d_model=64, n_heads=4, n_enc_layers=2,
                 n_dec_layers=2, d_ff=128, dropout_rate=0.1,
                 learning_rate=3e-4, weight_decay=1e-8, batch_size=8,
                 max_epochs=5, max_doc_len=64, max_sum_len=16,
                 freeze_encoder=False, ss_prob=0.5, beam_size=4,
                 early_stopping=False, validation_fraction=0.1,
                 n_iter_no_change=4, val_frequency=0.25,
                 warmup_fraction=0.1, random_state=0):
        self.gamma = gamma
        self.beta = beta
        self.lambda_nll = lambda_nll
        self.mode = mode
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.d_ff = d_ff
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_doc_len = max_doc_len
        self.max_sum_len = max_sum_len
        self.freeze_encoder = freeze_encoder
        self.ss_prob = ss_prob
        self.beam_size = beam_size
        self.early_stopping = early_stopping
        self.validation_fraction = validation_fraction
        self.n_iter_no_change = n_iter_no_change
        self.val_frequency = val_frequency
        self.warmup_fraction = warmup_fraction
        self.random_state = random_state

    # ----- input handling -----

    def _check_texts(self, X, name):
        texts = list(X)
        for i, t in enumerate(texts):
            if not isinstance(t, str):
                raise ValueError("%s[%d] is not a string" % (name, i))
        return texts

    def _pair_from_texts(self, doc: str, summ: str, index: int) -> ExamplePair:
        doc_ids = tokenize(doc, self.vocab_).ids[: self.max_doc_len]
        sum_ids = tokenize(summ, self.vocab_).ids[: self.max_sum_len - 2]
        if not doc_ids:
            raise ValueError("document %d is empty after tokenization" % index)
        if not sum_ids:
            raise ValueError("summary %d is empty after tokenization" % index)
        return ExamplePair(
            TokenSequence(doc_ids),
            TokenSequence((BOS_ID,) + sum_ids + (EOS_ID,)),
        )

    # ----- estimator API -----

    def fit(self, X, y):
        docs = self._check_texts(X, "X")
        summaries = self._check_texts(y, "y")
        if len(docs) != len(summaries):
            raise ValueError(
                "X and y differ in length: %d vs %d" % (len(docs), len(summaries)))
        if not docs:
            raise ValueError("cannot fit on an empty corpus")
        if not (0.0 < self.validation_fraction < 1.0):
            raise ValueError("validation_fraction must lie in (0, 1)")

        self.vocab_ = build_vocab(docs + summaries, self.vocab_size)
        pairs = [self._pair_from_texts(d, s, i)
                 for i, (d, s) in enumerate(zip(docs, summaries))]

        val_pairs = None
        if self.early_stopping:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(len(pairs))
            n_val = max(1, math.ceil(self.validation_fraction * len(pairs)))
            if n_val >= len(pairs):
                raise ValueError("validation_fraction leaves no training data")
            val_pairs = [pairs[int(i)] for i in order[:n_val]]
            pairs = [pairs[int(i)] for i in order[n_val:]]

        model_cfg = ModelConfig(
            vocab_size=len(self.vocab_), d_model=self.d_model,
            n_heads=self.n_heads, n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers, d_ff=self.d_ff,
            max_doc_len=self.max_doc_len, max_sum_len=self.max_sum_len,
            dropout_rate=self.dropout_rate)
        train_cfg = TrainingConfig(
            gamma=self.gamma, beta=self.beta, lambda_nll=self.lambda_nll,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            batch_size=self.batch_size, max_doc_len=self.max_doc_len,
            max_sum_len=self.max_sum_len, freeze_encoder=self.freeze_encoder,
            mode=self.mode, ss_prob=self.ss_prob,
            val_frequency=self.val_frequency, patience=self.n_iter_no_change,
            warmup_fraction=self.warmup_fraction, seed=self.random_state,
            beam_size=self.beam_size, max_epochs=self.max_epochs)

        trainer = Trainer.from_seed(model_cfg, train_cfg)
        state = trainer.fit(pairs, val_pairs)
        self.model_ = state.model
        self.decode_config_ = train_cfg.decode_config()
        self.n_steps_ = state.step
        self.best_rouge2_ = state.best_rouge2 if val_pairs else None
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This ContrastiveSummarizer instance is not fitted yet; "
                "call fit before predict or score.")

    def predict(self, X):
        """Beam-decode a summary string for each document string."""
        self._require_fitted()
        docs = self._check_texts(X, "X")
        out = []
        for i, doc in enumerate(docs):
            ids = tokenize(doc, self.vocab_).ids[: self.max_doc_len]
            if not ids:
                raise ValueError("document %d is empty after tokenization" % i)
            hyp = generate_silver(self.model_, TokenSequence(ids), self.decode_config_)
            out.append(" ".join(self.vocab_.word_of(t) for t in hyp.content_ids()))
        return out

    def score(self, X, y):
        """Mean Rouge-2 F1 of predicted summaries against references."""
        self._require_fitted()
        refs = self._check_texts(y, "y")
        preds = self.predict(X)
        if len(preds) != len(refs):
            raise ValueError("X and y differ in length")
        return corpus_rouge(list(zip(preds, refs))).r2.f1
