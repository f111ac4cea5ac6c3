"""Training loop: encode once per document, score gold (pos) and silver
(neg) against the shared encoder states, backprop the combined loss, and
update with an adaptive-moment optimizer under a cosine schedule with
linear warmup.  Also: scheduled-sampling baseline steps, validation with
Rouge-2 early stopping, bit-exact checkpoint serialization, and the
metrics CSV writer.

Randomness is split into independent named streams (init, shuffle, two
dropout streams, scheduled-sampling coins, validation subsample) derived
from the run seed, so switching a feature off leaves every other stream's
draws untouched.  That is what makes the mode-equivalence guarantees
(nll_only vs consum-with-zero-hinge, ss_prob=0 vs nll_only) hold at the
bit level rather than merely in expectation.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tape, Tensor, backward
from .data import ExamplePair, TokenSequence
from .decoding import DecodeConfig, beam_search, generate_silver, score_sequence
from .losses import LossBreakdown, combined_loss, contrastive_loss, nll_loss
from .model import (DropoutMasks, Seq2SeqModel, encode, sequence_loglik,
                    teacher_forced_logliks)
from .rouge import rouge_l, rouge_n

MODES = ("consum", "nll_only", "con_only", "ss_sum", "ss_token")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# The paper-scale-reference preset assumes a pre-trained initialization and
# documents 1e-6; the desk-scale defaults train from scratch, hence 3e-4.
# Both appear in the shipped presets.
PAPER_SCALE_LEARNING_RATE = 1e-6


class NonFiniteLossError(RuntimeError):
    """Training aborted because a loss value went NaN or infinite."""


class NonFiniteGradientError(RuntimeError):
    """Training aborted because a gradient went NaN or infinite."""


class CheckpointError(ValueError):
    """Checkpoint bytes do not follow the expected framing."""


@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 1.5
    beta: float = 0.6
    lambda_nll: float = 1.0
    learning_rate: float = 3e-4
    weight_decay: float = 1e-8
    batch_size: int = 8
    max_doc_len: int = 64
    max_sum_len: int = 16
    freeze_encoder: bool = True
    mode: str = "consum"
    ss_prob: float = 0.5
    val_samples: int = 1000
    val_frequency: float = 0.01
    patience: int = 4
    warmup_fraction: float = 0.1
    seed: int = 0
    beam_size: int = 4
    max_epochs: int = 10

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValueError("gamma must be a finite value >= 0")
        if not (np.isfinite(self.beta) and self.beta > 0.0):
            raise ValueError("beta must be > 0")
        if not (np.isfinite(self.lambda_nll) and self.lambda_nll >= 0.0):
            raise ValueError("lambda_nll must be a finite value >= 0")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0.0):
            raise ValueError("learning_rate must be > 0")
        if not (np.isfinite(self.weight_decay) and self.weight_decay >= 0.0):
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be a positive count")
        if self.max_doc_len < 1:
            raise ValueError("max_doc_len must be a positive count")
        if self.max_sum_len < 3:
            raise ValueError("max_sum_len must be at least 3 (BOS, a token, EOS)")
        if self.mode not in MODES:
            raise ValueError("mode must be one of %s" % (MODES,))
        if not (0.0 <= self.ss_prob <= 1.0):
            raise ValueError("ss_prob must lie in [0, 1]")
        if self.val_samples < 1:
            raise ValueError("val_samples must be a positive count")
        if not (0.0 < self.val_frequency <= 1.0):
            raise ValueError("val_frequency must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be a positive count")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.beam_size < 1:
            raise ValueError("beam_size must be a positive count")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be a positive count")

    def decode_config(self) -> DecodeConfig:
        # Generated tokens (content + EOS) fit in max_sum_len - 1 so the
        # BOS-prefixed sequence respects the decoder's prefix limit.
        return DecodeConfig(
            beam_size=self.beam_size,
            length_penalty_beta=self.beta,
            max_len=self.max_sum_len - 1,
        )

    def effective_lambda(self) -> float:
        return 0.0 if self.mode == "con_only" else self.lambda_nll


class RngStreams:
    """Independent generators spawned from the run seed, one per concern."""

    NAMES = ("init", "shuffle", "dropout_pos", "dropout_neg", "ss", "val")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(int(seed)).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))


@dataclass
class TrainState:
    model: Seq2SeqModel
    config: TrainingConfig
    rngs: RngStreams
    decode_cfg: DecodeConfig
    total_steps: int
    warmup_steps: int
    step: int = 0
    optimizer_moments: dict = field(default_factory=dict)
    best_rouge2: float = float("-inf")
    validations_since_improvement: int = 0
    best_snapshot: Optional[dict] = None
    stopped: bool = False
    last_lr: float = 0.0
    val_subsample: Optional[list] = None
    last_validation_scores: Optional[tuple] = None
    # Diagnostic switch: compute the contrastive term but let it contribute
    # nothing, to check step-equivalence with nll_only.
    force_zero_con: bool = False


def _is_frozen(name: str, config: TrainingConfig) -> bool:
    return config.freeze_encoder and name.startswith("encoder.")


def lr_factor(step: int, warmup_steps: int, total_steps: int) -> float:
    """0 at step 0, linear to 1.0 at the end of warmup, then a half-cosine
    down to 0 at total_steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    if total_steps <= warmup_steps:
        return 1.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_update(state: TrainState, grads: dict):
    """Adaptive-moment update with decoupled weight decay on every
    non-frozen parameter; missing gradients count as zero (weight decay
    still applies).  Advances the step counter."""
    cfg = state.config
    lr = cfg.learning_rate * lr_factor(state.step, state.warmup_steps, state.total_steps)
    state.last_lr = lr
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in state.model.params.items():
        if _is_frozen(name, cfg):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise NonFiniteGradientError(
                "non-finite gradient for %s at step %d" % (name, state.step))
        mom = state.optimizer_moments.get(name)
        if mom is None:
            mom = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            state.optimizer_moments[name] = mom
        mom["m"] = ADAM_BETA1 * mom["m"] + (1.0 - ADAM_BETA1) * g
        mom["v"] = ADAM_BETA2 * mom["v"] + (1.0 - ADAM_BETA2) * g * g
        m_hat = mom["m"] / bc1
        v_hat = mom["v"] / bc2
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + cfg.weight_decay * p.data)
    state.step += 1


def _collect_and_clear_grads(model: Seq2SeqModel) -> dict:
    grads = {}
    for name, p in model.params.items():
        if p.grad is not None:
            grads[name] = p.grad
            p.grad = None
    return grads


def _check_pair_lengths(pair: ExamplePair, cfg: TrainingConfig):
    if len(pair.document) > cfg.max_doc_len:
        raise ValueError(
            "document length %d exceeds max_doc_len %d"
            % (len(pair.document), cfg.max_doc_len))
    if len(pair.summary) > cfg.max_sum_len:
        raise ValueError(
            "summary length %d exceeds max_sum_len %d"
            % (len(pair.summary), cfg.max_sum_len))


def _pos_masks(state: TrainState, source_len: int, target_len: int):
    """Encoder + decoder masks for the gold-scoring pass, or None when
    dropout is off.  target_len is the decoder prefix length."""
    rate = state.model.config.dropout_rate
    if rate == 0.0:
        return None
    cfg = state.model.config
    rng = state.rngs.dropout_pos
    enc = DropoutMasks.for_encoder(cfg, rng, source_len)
    dec = DropoutMasks.for_decoder(cfg, rng, source_len, target_len)
    return enc | dec


def _neg_masks(state: TrainState, source_len: int, target_len: int):
    """Decoder-only masks for the silver-scoring pass (the encoder states
    are shared with the gold pass), drawn from their own stream so modes
    that skip this pass leave the gold pass's draws untouched."""
    rate = state.model.config.dropout_rate
    if rate == 0.0:
        return None
    return DropoutMasks.for_decoder(
        state.model.config, state.rngs.dropout_neg, source_len, target_len)


def _abort_if_nonfinite(value: float, state: TrainState, detail: str):
    if not np.isfinite(value):
        raise NonFiniteLossError(
            "non-finite loss at step %d (%s)" % (state.step, detail))


def train_step_consum(state: TrainState, batch) -> LossBreakdown:
    """One optimizer step of the contrastive workflow (also serves the
    nll_only and con_only variants via config.mode).

    Per pair: generate the silver summary with the current parameters
    (no gradients), encode the document once, teacher-force gold and
    silver against that shared encoding, and combine hinge and NLL terms.
    Pairs whose silver equals gold contribute l_con = 0 and are counted.
    """
    if not batch:
        raise ValueError("batch is empty")
    cfg = state.config
    lam = cfg.effective_lambda()
    want_contrast = cfg.mode != "nll_only"
    n = len(batch)
    nll_vals, con_vals, pos_vals, neg_vals = [], [], [], []
    n_hinge = 0
    n_equal = 0
    for pair in batch:
        _check_pair_lengths(pair, cfg)
        silver = None
        if want_contrast:
            silver = generate_silver(state.model, pair.document, state.decode_cfg)
        masks = _pos_masks(state, len(pair.document), len(pair.summary) - 1)
        with Tape() as tape:
            enc = encode(state.model, pair.document, masks)
            gold_lls = sequence_loglik(state.model, enc, pair.summary, masks)
            l_nll = nll_loss(gold_lls)
            pos = score_sequence(gold_lls, cfg.beta)
            pos_val = pos.item()
            l_con_term = 0.0
            if want_contrast:
                if silver.ids == pair.summary.ids:
                    # Same sequence, same score: no useful gradient, and
                    # charging the full margin would add a constant floor.
                    n_equal += 1
                    neg_val = pos_val
                    con_val = 0.0
                else:
                    nmasks = _neg_masks(state, len(pair.document), len(silver) - 1)
                    silver_lls = sequence_loglik(state.model, enc, silver, nmasks)
                    neg = score_sequence(silver_lls, cfg.beta)
                    neg_val = neg.item()
                    l_con = contrastive_loss(pos, neg, cfg.gamma)
                    con_val = l_con.item()
                    if con_val > 0.0:
                        n_hinge += 1
                    if not state.force_zero_con:
                        l_con_term = l_con
                pos_vals.append(pos_val)
                neg_vals.append(neg_val)
                con_vals.append(con_val)
            total = combined_loss(l_nll, l_con_term, lam)
            _abort_if_nonfinite(total.item(), state, "consum pair loss")
            pair_loss = total if n == 1 else _scaled(total, 1.0 / n)
        backward(tape, pair_loss)
        nll_vals.append(l_nll.item())
    optimizer_update(state, _collect_and_clear_grads(state.model))
    mean_nll = sum(nll_vals) / n
    mean_con = sum(con_vals) / n if con_vals else 0.0
    return LossBreakdown(
        l_nll=mean_nll,
        l_con=mean_con,
        total=mean_con + lam * mean_nll,
        hinge_active=mean_con > 0.0,
        pos_score=sum(pos_vals) / n if pos_vals else None,
        neg_score=sum(neg_vals) / n if neg_vals else None,
        hinge_rate=n_hinge / n if want_contrast else 0.0,
        n_silver_equals_gold=n_equal,
    )


def _scaled(t: Tensor, factor: float) -> Tensor:
    from . import autodiff as ad

    return ad.scale(t, factor)


def ss_decisions(rng, level: str, n_positions: int, ss_prob: float):
    """The Bernoulli draws behind scheduled sampling: one coin for
    level=sum, one per decoder input position (past BOS) for level=token."""
    if level == "sum":
        return [bool(rng.random() < ss_prob)]
    if level == "token":
        return [bool(u < ss_prob) for u in rng.random(n_positions)]
    raise ValueError("level must be 'sum' or 'token'")


def _mixed_input(gold_prefix, silver_generated, flags):
    """Positionally replace gold decoder inputs with silver tokens.
    Position 0 (BOS) is never replaced; positions beyond the generated
    silver length keep the gold token."""
    mixed = list(gold_prefix)
    for pos in range(1, len(mixed)):
        if flags[pos - 1] and pos - 1 < len(silver_generated):
            mixed[pos] = silver_generated[pos - 1]
    return mixed


def train_step_ss(state: TrainState, batch, level: str) -> LossBreakdown:
    """One scheduled-sampling step: decoder inputs are (wholly, for
    level=sum; per position, for level=token) replaced by the silver
    summary with probability ss_prob.  Targets stay gold; loss is NLL."""
    if not batch:
        raise ValueError("batch is empty")
    cfg = state.config
    lam = cfg.effective_lambda()
    n = len(batch)
    nll_vals = []
    for pair in batch:
        _check_pair_lengths(pair, cfg)
        gold_prefix = pair.summary.ids[:-1]
        targets = pair.summary.ids[1:]
        n_positions = len(gold_prefix) - 1
        decisions = ss_decisions(state.rngs.ss, level, n_positions, cfg.ss_prob)
        flags = decisions * n_positions if level == "sum" else decisions
        if any(flags):
            silver = generate_silver(state.model, pair.document, state.decode_cfg)
            input_ids = _mixed_input(gold_prefix, silver.ids[1:], flags)
        else:
            input_ids = list(gold_prefix)
        masks = _pos_masks(state, len(pair.document), len(input_ids))
        with Tape() as tape:
            enc = encode(state.model, pair.document, masks)
            lls = teacher_forced_logliks(
                state.model, enc, TokenSequence(tuple(input_ids)), targets, masks)
            l_nll = nll_loss(lls)
            total = combined_loss(l_nll, 0.0, lam)
            _abort_if_nonfinite(total.item(), state, "scheduled-sampling pair loss")
            pair_loss = total if n == 1 else _scaled(total, 1.0 / n)
        backward(tape, pair_loss)
        nll_vals.append(l_nll.item())
    optimizer_update(state, _collect_and_clear_grads(state.model))
    mean_nll = sum(nll_vals) / n
    return LossBreakdown(
        l_nll=mean_nll,
        l_con=0.0,
        total=lam * mean_nll,
        hinge_active=False,
        pos_score=None,
        neg_score=None,
    )


# ----- validation and early stopping -----


def _snapshot_params(model: Seq2SeqModel) -> dict:
    return {name: p.data.copy() for name, p in model.params.items()}


def _restore_params(model: Seq2SeqModel, snapshot: dict):
    for name, p in model.params.items():
        p.data = snapshot[name].copy()


def validation_scores(state: TrainState, pairs):
    """Mean Rouge-1/2/L F1 of beam decodes over the given pairs, computed
    on token ids (id-level and text-level Rouge agree for any vocabulary
    whose words survive scoring tokenization unchanged)."""
    f1s = np.zeros(3)
    for pair in pairs:
        hyp = generate_silver(state.model, pair.document, state.decode_cfg)
        cand = list(hyp.content_ids())
        ref = list(pair.summary.content_ids())
        f1s[0] += rouge_n(cand, ref, 1).f1
        f1s[1] += rouge_n(cand, ref, 2).f1
        f1s[2] += rouge_l(cand, ref).f1
    f1s /= len(pairs)
    return tuple(f1s)


def register_validation(state: TrainState, rouge2: float) -> str:
    """Early-stopping bookkeeping for one validation result.  Improvement
    means strictly greater mean Rouge-2 F1; hitting patience restores the
    best snapshot and stops."""
    if rouge2 > state.best_rouge2:
        state.best_rouge2 = rouge2
        state.validations_since_improvement = 0
        state.best_snapshot = _snapshot_params(state.model)
        return "continue"
    state.validations_since_improvement += 1
    if state.validations_since_improvement >= state.config.patience:
        if state.best_snapshot is not None:
            _restore_params(state.model, state.best_snapshot)
        state.stopped = True
        return "stop"
    return "continue"


def validate_and_maybe_stop(state: TrainState, val_set) -> str:
    """Decode the run's fixed validation subsample, track mean Rouge-2 F1,
    and decide whether training continues."""
    if not val_set:
        raise ValueError("validation set is empty")
    if state.val_subsample is None:
        k = min(state.config.val_samples, len(val_set))
        chosen = state.rngs.val.choice(len(val_set), size=k, replace=False)
        state.val_subsample = sorted(int(i) for i in chosen)
    subset = [val_set[i] for i in state.val_subsample]
    scores = validation_scores(state, subset)
    state.last_validation_scores = scores
    return register_validation(state, scores[1])


# ----- metrics CSV -----

METRICS_COLUMNS = ("step", "split", "l_nll", "l_con", "loss", "hinge_rate",
                   "pos_score", "neg_score", "rouge1_f", "rouge2_f",
                   "rougeL_f", "lr")


class MetricsWriter:
    """Append-only CSV sink with the fixed column layout above."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(METRICS_COLUMNS)

    def write(self, **fields):
        unknown = set(fields) - set(METRICS_COLUMNS)
        if unknown:
            raise ValueError("unknown metrics columns: %s" % sorted(unknown))
        row = ["" if fields.get(c) is None else fields.get(c, "")
               for c in METRICS_COLUMNS]
        self._writer.writerow(row)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


# ----- orchestration -----


class Trainer:
    """Drives epochs of the configured mode over a training split, with
    optional validation-based early stopping and metrics logging."""

    def __init__(self, model: Seq2SeqModel, config: TrainingConfig, metrics=None):
        if model.config.max_doc_len < config.max_doc_len:
            raise ValueError("model max_doc_len is smaller than the training limit")
        if model.config.max_sum_len < config.max_sum_len:
            raise ValueError("model max_sum_len is smaller than the training limit")
        self.model = model
        self.config = config
        self.metrics = metrics
        self.state: Optional[TrainState] = None
        if config.freeze_encoder:
            for name, p in model.params.items():
                if name.startswith("encoder."):
                    p.requires_grad = False

    @classmethod
    def from_seed(cls, model_config, config: TrainingConfig, metrics=None):
        """Canonical wiring: the model is initialized from the run seed's
        first stream, so one seed fixes the whole run."""
        streams = RngStreams(config.seed)
        model = Seq2SeqModel.initialize(model_config, streams.init)
        trainer = cls(model, config, metrics=metrics)
        trainer._streams = streams
        return trainer

    def _build_state(self, n_train: int) -> TrainState:
        steps_per_epoch = math.ceil(n_train / self.config.batch_size)
        total_steps = self.config.max_epochs * steps_per_epoch
        streams = getattr(self, "_streams", None) or RngStreams(self.config.seed)
        return TrainState(
            model=self.model,
            config=self.config,
            rngs=streams,
            decode_cfg=self.config.decode_config(),
            total_steps=total_steps,
            warmup_steps=int(self.config.warmup_fraction * total_steps),
        )

    def _run_step(self, state: TrainState, batch) -> LossBreakdown:
        mode = self.config.mode
        if mode in ("consum", "nll_only", "con_only"):
            return train_step_consum(state, batch)
        level = "sum" if mode == "ss_sum" else "token"
        return train_step_ss(state, batch, level)

    def _write_train_row(self, state: TrainState, bd: LossBreakdown):
        if self.metrics is None:
            return
        self.metrics.write(
            step=state.step, split="train", l_nll=bd.l_nll, l_con=bd.l_con,
            loss=bd.total, hinge_rate=bd.hinge_rate, pos_score=bd.pos_score,
            neg_score=bd.neg_score, lr=state.last_lr)

    def _write_val_row(self, state: TrainState):
        if self.metrics is None or state.last_validation_scores is None:
            return
        r1, r2, rl = state.last_validation_scores
        self.metrics.write(
            step=state.step, split="val", rouge1_f=r1, rouge2_f=r2,
            rougeL_f=rl, lr=state.last_lr)

    def fit(self, train_pairs, val_pairs=None) -> TrainState:
        train_pairs = list(train_pairs)
        if not train_pairs:
            raise ValueError("training set is empty")
        for pair in train_pairs:
            _check_pair_lengths(pair, self.config)
        n = len(train_pairs)
        cfg = self.config
        state = self._build_state(n)
        self.state = state
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        val_interval = max(1, math.ceil(cfg.val_frequency * steps_per_epoch))
        for _epoch in range(cfg.max_epochs):
            order = state.rngs.shuffle.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = [train_pairs[int(i)] for i in order[start:start + cfg.batch_size]]
                bd = self._run_step(state, batch)
                self._write_train_row(state, bd)
                if val_pairs and state.step % val_interval == 0:
                    decision = validate_and_maybe_stop(state, val_pairs)
                    self._write_val_row(state)
                    if decision == "stop":
                        return state
        # Out of epochs: keep the best validated parameters when they exist.
        if state.best_snapshot is not None:
            _restore_params(state.model, state.best_snapshot)
        return state


# ----- checkpoint serialization -----

CHECKPOINT_MAGIC = b"CSUM"
CHECKPOINT_VERSION = 1


def _write_entries(path, entries):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes(order="C"))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("corrupt checkpoint: truncated %s" % what)
    return data


def _read_entries(path):
    entries = []
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("corrupt checkpoint: bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint version %d" % version)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = tuple(
                struct.unpack("<Q", _read_exact(f, 8, "dimension"))[0]
                for _ in range(rank)
            )
            size = int(np.prod(dims)) if dims else 1
            raw = _read_exact(f, 8 * size, "values")
            arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
            entries.append((name, arr))
        if f.read(1):
            raise CheckpointError("corrupt checkpoint: trailing data")
    return entries


def save_checkpoint(path, model: Seq2SeqModel):
    _write_entries(path, [(name, p.data) for name, p in model.params.items()])


def load_checkpoint(path) -> dict:
    return dict(_read_entries(path))


def apply_checkpoint(model: Seq2SeqModel, arrays: dict):
    expected = set(model.params)
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise CheckpointError(
            "checkpoint parameters do not match the model (missing %s, unexpected %s)"
            % (missing, extra))
    for name, p in model.params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                "checkpoint shape %s for %s does not match model shape %s"
                % (arr.shape, name, p.data.shape))
        p.data = arr.copy()


def save_optimizer_state(path, state: TrainState):
    entries = [("step", np.array([float(state.step)]))]
    for name in state.model.params:
        mom = state.optimizer_moments.get(name)
        if mom is not None:
            entries.append(("m." + name, mom["m"]))
            entries.append(("v." + name, mom["v"]))
    _write_entries(path, entries)


def load_optimizer_state(path, state: TrainState):
    entries = dict(_read_entries(path))
    step = entries.pop("step", None)
    if step is None:
        raise CheckpointError("optimizer state is missing the step entry")
    state.step = int(step[0])
    moments: dict = {}
    for key, arr in entries.items():
        kind, _, name = key.partition(".")
        if kind not in ("m", "v") or not name:
            raise CheckpointError("unrecognized optimizer entry %r" % key)
        moments.setdefault(name, {})[kind] = arr
    state.optimizer_moments = moments
