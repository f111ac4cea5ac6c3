"""Training mechanics: schedule, optimizer, mode equivalences, scheduled
sampling, early stopping, checkpoints, and the metrics sink."""

import math

import numpy as np
import pytest

from sumlab.data import BOS_ID, EOS_ID, ExamplePair, TokenSequence
from sumlab.model import Seq2SeqModel
from sumlab.training import (CHECKPOINT_MAGIC, CheckpointError, MetricsWriter,
                             METRICS_COLUMNS, NonFiniteGradientError,
                             RngStreams, Trainer, TrainingConfig, TrainState,
                             apply_checkpoint, load_checkpoint,
                             load_optimizer_state, lr_factor,
                             optimizer_update, register_validation,
                             save_checkpoint, save_optimizer_state,
                             ss_decisions, train_step_consum, train_step_ss,
                             validate_and_maybe_stop, _mixed_input)

from conftest import tiny_config, tiny_model


def small_config(**overrides) -> TrainingConfig:
    base = dict(gamma=0.5, beta=0.6, lambda_nll=1.0, learning_rate=1e-2,
                weight_decay=0.0, batch_size=2, max_doc_len=8, max_sum_len=6,
                freeze_encoder=False, mode="consum", ss_prob=0.5,
                val_samples=4, val_frequency=1.0, patience=4,
                warmup_fraction=0.0, seed=0, beam_size=4, max_epochs=1)
    base.update(overrides)
    return TrainingConfig(**base)


def make_state(model_seed=0, **overrides) -> TrainState:
    cfg = small_config(**overrides)
    streams = RngStreams(cfg.seed)
    model = Seq2SeqModel.initialize(
        tiny_config(max_sum_len=cfg.max_sum_len, dropout_rate=0.1), streams.init)
    return TrainState(model=model, config=cfg, rngs=streams,
                      decode_cfg=cfg.decode_config(), total_steps=100,
                      warmup_steps=0)


def pairs_fixture(n=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        doc = tuple(int(rng.integers(3, 6)) for _ in range(5))
        summ = tuple(int(rng.integers(3, 6)) for _ in range(2))
        out.append(ExamplePair(TokenSequence(doc),
                               TokenSequence((BOS_ID,) + summ + (EOS_ID,))))
    return out


def param_bytes(model: Seq2SeqModel) -> dict:
    return {name: p.data.tobytes() for name, p in model.params.items()}


# ----- config -----


def test_training_config_validation():
    with pytest.raises(ValueError):
        small_config(gamma=-0.1)
    with pytest.raises(ValueError):
        small_config(lambda_nll=-1.0)
    with pytest.raises(ValueError):
        small_config(mode="nope")
    with pytest.raises(ValueError):
        small_config(ss_prob=1.5)
    with pytest.raises(ValueError):
        small_config(max_sum_len=2)
    with pytest.raises(ValueError):
        small_config(val_frequency=0.0)
    with pytest.raises(ValueError):
        small_config(warmup_fraction=1.0)


def test_lambda_zero_is_allowed():
    cfg = small_config(lambda_nll=0.0)
    assert cfg.effective_lambda() == 0.0


def test_decode_config_budget_leaves_room_for_bos():
    cfg = small_config(max_sum_len=6, beam_size=3, beta=0.7)
    dc = cfg.decode_config()
    assert dc.max_len == 5
    assert dc.beam_size == 3
    assert dc.length_penalty_beta == 0.7


def test_effective_lambda_by_mode():
    assert small_config(mode="consum", lambda_nll=0.5).effective_lambda() == 0.5
    assert small_config(mode="con_only", lambda_nll=0.5).effective_lambda() == 0.0


# ----- schedule -----


def test_lr_factor_closed_form():
    assert lr_factor(0, 10, 110) == 0.0
    assert lr_factor(5, 10, 110) == 0.5
    assert lr_factor(10, 10, 110) == 1.0
    mid = lr_factor(60, 10, 110)
    assert abs(mid - 0.5) <= 1e-12  # halfway through the cosine
    assert abs(lr_factor(110, 10, 110)) <= 1e-12
    assert lr_factor(5, 0, 100) == 0.5 * (1.0 + math.cos(math.pi * 0.05))
    assert lr_factor(7, 10, 10) == 0.7
    assert lr_factor(12, 10, 10) == 1.0  # degenerate: no cosine span
    assert lr_factor(200, 10, 110) == 0.0  # clamped past the end


def test_rng_streams_are_named_independent_and_seeded():
    a = RngStreams(7)
    b = RngStreams(7)
    c = RngStreams(8)
    for name in RngStreams.NAMES:
        assert getattr(a, name).random() == getattr(b, name).random()
    draws_a = [getattr(RngStreams(7), n).random() for n in RngStreams.NAMES]
    assert len(set(draws_a)) == len(RngStreams.NAMES)  # streams differ
    assert RngStreams(7).shuffle.random() != c.shuffle.random()


# ----- optimizer -----


def test_weight_decay_shrinks_parameters_without_gradients():
    state = make_state(weight_decay=0.1, warmup_fraction=0.0)
    before = {n: p.data.copy() for n, p in state.model.params.items()}
    optimizer_update(state, {})
    lr = state.last_lr
    assert lr > 0.0
    for name, p in state.model.params.items():
        expect = before[name] - lr * (0.1 * before[name])
        assert np.array_equal(p.data, expect)
    assert state.step == 1


def test_zero_gradients_and_zero_decay_is_a_no_op():
    state = make_state(weight_decay=0.0)
    before = param_bytes(state.model)
    optimizer_update(state, {})
    assert param_bytes(state.model) == before


def test_first_adam_step_matches_formula():
    state = make_state(weight_decay=0.0)
    name = "proj.bias"
    p0 = state.model.params[name].data.copy()
    g = np.ones_like(p0)
    optimizer_update(state, {name: g})
    lr = state.last_lr
    # bias-corrected first step: m_hat = g, v_hat = g*g
    expect = p0 - lr * (g / (np.sqrt(g * g) + 1e-8))
    assert np.allclose(state.model.params[name].data, expect, atol=1e-15)


def test_frozen_parameters_are_skipped():
    state = make_state(freeze_encoder=True, weight_decay=0.1)
    frozen = {n: p.data.tobytes() for n, p in state.model.params.items()
              if n.startswith("encoder.")}
    bias_before = state.model.params["proj.bias"].data.tobytes()
    grads = {n: np.ones_like(p.data) for n, p in state.model.params.items()}
    optimizer_update(state, grads)
    for name, blob in frozen.items():
        assert state.model.params[name].data.tobytes() == blob
    assert state.model.params["proj.bias"].data.tobytes() != bias_before


def test_nonfinite_gradient_aborts():
    state = make_state()
    bad = {"proj.bias": np.full_like(state.model.params["proj.bias"].data, np.nan)}
    with pytest.raises(NonFiniteGradientError):
        optimizer_update(state, bad)


# ----- scheduled-sampling pieces -----


def test_ss_decisions_shapes():
    rng = np.random.default_rng(0)
    assert len(ss_decisions(rng, "sum", 7, 0.5)) == 1
    assert len(ss_decisions(rng, "token", 7, 0.5)) == 7
    assert ss_decisions(rng, "sum", 3, 0.0) == [False]
    assert ss_decisions(rng, "token", 3, 1.0) == [True, True, True]
    with pytest.raises(ValueError):
        ss_decisions(rng, "word", 3, 0.5)


def test_ss_replacement_rate_near_half():
    rng = np.random.default_rng(123)
    draws = [ss_decisions(rng, "sum", 1, 0.5)[0] for _ in range(1000)]
    rate = sum(draws) / len(draws)
    assert 0.45 <= rate <= 0.55


def test_mixed_input_alignment():
    gold_prefix = (BOS_ID, 10, 11, 12)
    silver_generated = (20, 21)
    flags = [True, False, True]
    mixed = _mixed_input(gold_prefix, silver_generated, flags)
    # position 3 wants silver index 2, which does not exist: gold kept
    assert mixed == [BOS_ID, 20, 11, 12]
    assert _mixed_input(gold_prefix, silver_generated, [False] * 3) == list(gold_prefix)
    # BOS is never replaced even when every flag is set
    assert _mixed_input(gold_prefix, (20, 21, 22), [True] * 3) == [BOS_ID, 20, 21, 22]


# ----- training steps -----


def test_consum_step_reports_and_updates():
    state = make_state(mode="consum")
    before = param_bytes(state.model)
    bd = train_step_consum(state, pairs_fixture(2))
    assert state.step == 1
    assert param_bytes(state.model) != before
    assert bd.l_nll > 0.0
    assert bd.pos_score is not None and bd.neg_score is not None
    assert 0.0 <= bd.hinge_rate <= 1.0
    assert bd.total == bd.l_con + state.config.effective_lambda() * bd.l_nll


def test_nll_only_step_has_no_contrastive_report():
    state = make_state(mode="nll_only")
    bd = train_step_consum(state, pairs_fixture(2))
    assert bd.l_con == 0.0
    assert bd.pos_score is None and bd.neg_score is None
    assert bd.hinge_rate == 0.0


def test_empty_batch_rejected():
    state = make_state()
    with pytest.raises(ValueError):
        train_step_consum(state, [])
    with pytest.raises(ValueError):
        train_step_ss(state, [], "sum")


def test_overlong_pair_rejected():
    state = make_state(max_doc_len=4)
    doc = TokenSequence((4,) * 5)
    pair = ExamplePair(doc, TokenSequence((BOS_ID, 4, EOS_ID)))
    with pytest.raises(ValueError):
        train_step_consum(state, [pair])


def test_silver_equals_gold_is_skipped_and_counted():
    # decode budget of 3 generated tokens makes (BOS, 4, 4, EOS) the best
    # hypothesis under the biased logits below
    state = make_state(mode="consum", gamma=1.0, max_sum_len=4)
    model = state.model
    model.params["proj.weight"].data[:] = 0.0
    model.params["proj.bias"].data[:] = 0.0
    model.params["proj.bias"].data[EOS_ID] = 8.0
    model.params["proj.bias"].data[4] = 10.0
    pair = ExamplePair(TokenSequence((4, 5, 3)),
                       TokenSequence((BOS_ID, 4, 4, EOS_ID)))
    bd = train_step_consum(state, [pair])
    assert bd.n_silver_equals_gold == 1
    assert bd.l_con == 0.0
    assert bd.pos_score == bd.neg_score
    assert not bd.hinge_active


def test_nll_only_equals_consum_with_hinge_forced_to_zero():
    batch = pairs_fixture(3, seed=5)
    a = make_state(mode="nll_only")
    b = make_state(mode="consum")
    b.force_zero_con = True
    train_step_consum(a, batch)
    train_step_consum(b, batch)
    assert param_bytes(a.model) == param_bytes(b.model)


def test_ss_prob_zero_equals_nll_only():
    batch = pairs_fixture(3, seed=6)
    a = make_state(mode="nll_only")
    b = make_state(mode="ss_sum", ss_prob=0.0)
    train_step_consum(a, batch)
    train_step_ss(b, batch, "sum")
    assert param_bytes(a.model) == param_bytes(b.model)


def test_ss_step_runs_both_levels():
    for level, mode in (("sum", "ss_sum"), ("token", "ss_token")):
        state = make_state(mode=mode, ss_prob=1.0)
        before = param_bytes(state.model)
        bd = train_step_ss(state, pairs_fixture(2), level)
        assert param_bytes(state.model) != before
        assert bd.pos_score is None
        assert bd.l_con == 0.0


def test_consum_is_seed_reproducible():
    batch = pairs_fixture(4, seed=7)
    a = make_state(mode="consum")
    b = make_state(mode="consum")
    for _ in range(2):
        train_step_consum(a, batch)
        train_step_consum(b, batch)
    assert param_bytes(a.model) == param_bytes(b.model)


# ----- validation and early stopping -----


def scripted_state(patience=4) -> TrainState:
    return make_state(patience=patience)


def test_early_stop_after_patience_nonimprovements():
    state = scripted_state()
    assert register_validation(state, 0.5) == "continue"
    snapshot = {n: p.data.copy() for n, p in state.model.params.items()}
    # degrade the parameters so a restore is observable
    for p in state.model.params.values():
        p.data = p.data + 1.0
    for i, r2 in enumerate([0.4, 0.5, 0.45, 0.3]):
        decision = register_validation(state, r2)
        expected = "stop" if i == 3 else "continue"
        assert decision == expected
    assert state.stopped
    for name, p in state.model.params.items():
        assert np.array_equal(p.data, snapshot[name])


def test_improvement_resets_the_counter():
    state = scripted_state()
    register_validation(state, 0.3)
    register_validation(state, 0.2)
    register_validation(state, 0.25)
    assert register_validation(state, 0.35) == "continue"  # strict improvement
    assert state.validations_since_improvement == 0
    for r2 in (0.35, 0.35, 0.35):  # ties do not count as improvements
        assert register_validation(state, r2) == "continue"
    assert register_validation(state, 0.35) == "stop"


def test_equal_rouge_is_not_an_improvement():
    state = scripted_state(patience=1)
    register_validation(state, 0.5)
    assert register_validation(state, 0.5) == "stop"


def test_validation_subsample_is_fixed_per_run():
    state = make_state(val_samples=3)
    val = pairs_fixture(8, seed=9)
    validate_and_maybe_stop(state, val)
    first = list(state.val_subsample)
    assert len(first) == 3
    validate_and_maybe_stop(state, val)
    assert state.val_subsample == first
    assert state.last_validation_scores is not None
    with pytest.raises(ValueError):
        validate_and_maybe_stop(state, [])


# ----- trainer orchestration -----


def test_trainer_fit_runs_and_counts_steps():
    cfg = small_config(max_epochs=2, batch_size=2)
    trainer = Trainer.from_seed(tiny_config(max_sum_len=6), cfg)
    state = trainer.fit(pairs_fixture(4))
    assert state.step == 2 * 2  # ceil(4/2) steps per epoch, 2 epochs
    assert state.total_steps == 4
    assert not state.stopped


def test_trainer_fit_is_bit_reproducible():
    cfg = small_config(max_epochs=1, batch_size=2)
    runs = []
    for _ in range(2):
        trainer = Trainer.from_seed(tiny_config(max_sum_len=6), cfg)
        state = trainer.fit(pairs_fixture(4), pairs_fixture(2, seed=1))
        runs.append(param_bytes(state.model))
    assert runs[0] == runs[1]


def test_trainer_freeze_keeps_encoder_bits():
    cfg = small_config(max_epochs=1, freeze_encoder=True, weight_decay=0.01)
    trainer = Trainer.from_seed(tiny_config(max_sum_len=6), cfg)
    init = param_bytes(trainer.model)
    state = trainer.fit(pairs_fixture(4))
    after = param_bytes(state.model)
    for name in init:
        if name.startswith("encoder."):
            assert after[name] == init[name]
    assert any(after[n] != init[n] for n in init if n.startswith("decoder."))
    for name, p in state.model.params.items():
        if name.startswith("encoder."):
            assert not p.requires_grad


def test_trainer_rejects_empty_and_oversized():
    cfg = small_config()
    trainer = Trainer.from_seed(tiny_config(max_sum_len=6), cfg)
    with pytest.raises(ValueError):
        trainer.fit([])
    with pytest.raises(ValueError):
        Trainer(tiny_model(max_sum_len=4), small_config(max_sum_len=6))


def test_trainer_ss_modes_dispatch():
    cfg = small_config(mode="ss_token", max_epochs=1)
    trainer = Trainer.from_seed(tiny_config(max_sum_len=6), cfg)
    init = param_bytes(trainer.model)
    state = trainer.fit(pairs_fixture(4))
    assert param_bytes(state.model) != init


def test_trainer_restores_best_snapshot_at_end():
    cfg = small_config(max_epochs=1, val_frequency=1.0, val_samples=2)
    trainer = Trainer.from_seed(tiny_config(max_sum_len=6), cfg)
    state = trainer.fit(pairs_fixture(4), pairs_fixture(2, seed=11))
    assert state.best_snapshot is not None
    for name, p in state.model.params.items():
        assert np.array_equal(p.data, state.best_snapshot[name])


# ----- metrics writer -----


def test_metrics_writer_layout(tmp_path):
    path = tmp_path / "metrics.csv"
    with MetricsWriter(path) as mw:
        mw.write(step=1, split="train", l_nll=2.0, l_con=0.5, loss=2.5,
                 hinge_rate=0.5, pos_score=-1.0, neg_score=-0.5, lr=1e-3)
        mw.write(step=2, split="val", rouge1_f=0.5, rouge2_f=0.25,
                 rougeL_f=0.5, lr=1e-3)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == ",".join(METRICS_COLUMNS)
    row = lines[2].split(",")
    assert row[0] == "2"
    assert row[2] == ""  # unset numeric fields are empty, not zero
    with MetricsWriter(tmp_path / "other.csv") as mw:
        with pytest.raises(ValueError):
            mw.write(step=1, nonsense=1.0)


# ----- checkpoints -----


def test_checkpoint_round_trip_and_determinism(tmp_path):
    model = tiny_model(seed=13)
    p1 = tmp_path / "a.bin"
    p2 = tmp_path / "b.bin"
    save_checkpoint(p1, model)
    save_checkpoint(p2, model)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:4] == CHECKPOINT_MAGIC

    other = tiny_model(seed=14)
    assert param_bytes(other) != param_bytes(model)
    apply_checkpoint(other, load_checkpoint(p1))
    assert param_bytes(other) == param_bytes(model)


def test_checkpoint_rejects_mismatched_models(tmp_path):
    model = tiny_model(seed=15)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, model)
    bigger = tiny_model(seed=15, d_model=16, d_ff=32)
    with pytest.raises(CheckpointError):
        apply_checkpoint(bigger, load_checkpoint(path))
    arrays = load_checkpoint(path)
    arrays.pop("proj.bias")
    with pytest.raises(CheckpointError):
        apply_checkpoint(model, arrays)


def test_checkpoint_framing_errors(tmp_path):
    model = tiny_model(seed=16)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, model)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(truncated)

    trailing = tmp_path / "trail.bin"
    trailing.write_bytes(blob + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(trailing)

    bad_version = tmp_path / "ver.bin"
    bad_version.write_bytes(blob[:4] + b"\x63\x00\x00\x00" + blob[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad_version)


def test_optimizer_state_round_trip(tmp_path):
    state = make_state()
    train_step_consum(state, pairs_fixture(2))
    path = tmp_path / "opt.bin"
    save_optimizer_state(path, state)

    fresh = make_state()
    load_optimizer_state(path, fresh)
    assert fresh.step == state.step
    assert set(fresh.optimizer_moments) == set(state.optimizer_moments)
    for name, mom in state.optimizer_moments.items():
        assert np.array_equal(fresh.optimizer_moments[name]["m"], mom["m"])
        assert np.array_equal(fresh.optimizer_moments[name]["v"], mom["v"])


def test_optimizer_state_requires_step_entry(tmp_path):
    state = make_state()
    path = tmp_path / "opt.bin"
    from sumlab.training import _write_entries

    _write_entries(path, [("m.proj.bias", np.zeros(3))])
    with pytest.raises(CheckpointError):
        load_optimizer_state(path, state)
