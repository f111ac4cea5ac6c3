"""Run configuration: one JSON document describing model, training,
decoding, and data source for a run, plus shipped presets.

Validation errors always name the offending field (section-qualified),
which the CLI relies on for its exit-code contract.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional

from .model import ModelConfig
from .training import PAPER_SCALE_LEARNING_RATE, TrainingConfig


class ConfigError(Exception):
    """A configuration problem attributable to one field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__("%s: %s" % (field_name, message))


_MODEL_KEYS = ("vocab_size", "d_model", "n_heads", "n_enc_layers",
               "n_dec_layers", "d_ff", "dropout_rate")
_TRAINING_KEYS = tuple(f.name for f in dc_fields(TrainingConfig))
_SYNTH_KEYS = ("kind", "seed", "n_train", "n_val", "n_test",
               "doc_len_range", "salient_count")
_JSONL_KEYS = ("kind", "train_path", "val_path", "test_path", "vocab_size")


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs.  model holds the architecture fields other
    than vocab_size and the length limits, which are resolved from the
    data source and the training section respectively."""

    training: TrainingConfig
    model: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    out_dir: Optional[str] = None
    notes: Optional[str] = None

    def model_config(self, vocab_size: int) -> ModelConfig:
        kwargs = {k: v for k, v in self.model.items() if k != "vocab_size"}
        declared = self.model.get("vocab_size")
        if declared is not None and int(declared) != vocab_size:
            raise ConfigError(
                "model.vocab_size",
                "declared %s but the data source yields %d" % (declared, vocab_size))
        try:
            return ModelConfig(
                vocab_size=vocab_size,
                max_doc_len=self.training.max_doc_len,
                max_sum_len=self.training.max_sum_len,
                **kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError("model", str(e)) from None

    def to_json_dict(self) -> dict:
        training = {f.name: getattr(self.training, f.name)
                    for f in dc_fields(TrainingConfig)}
        out = {
            "model": dict(self.model),
            "training": training,
            "data": dict(self.data),
        }
        if self.out_dir is not None:
            out["out_dir"] = self.out_dir
        if self.notes is not None:
            out["notes"] = self.notes
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _check_keys(section: str, raw: dict, allowed):
    for key in raw:
        if key not in allowed:
            raise ConfigError("%s.%s" % (section, key), "unknown field")


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    _check_keys("config", raw, ("model", "training", "data", "out_dir", "notes"))

    model_raw = raw.get("model", {})
    if not isinstance(model_raw, dict):
        raise ConfigError("model", "must be an object")
    _check_keys("model", model_raw, _MODEL_KEYS)

    training_raw = raw.get("training", {})
    if not isinstance(training_raw, dict):
        raise ConfigError("training", "must be an object")
    _check_keys("training", training_raw, _TRAINING_KEYS)
    try:
        training = TrainingConfig(**training_raw)
    except (TypeError, ValueError) as e:
        raise ConfigError("training", str(e)) from None

    data_raw = raw.get("data")
    if not isinstance(data_raw, dict):
        raise ConfigError("data", "section is required and must be an object")
    kind = data_raw.get("kind")
    if kind == "synthetic":
        _check_keys("data", data_raw, _SYNTH_KEYS)
        for key in ("seed", "n_train", "n_val", "n_test", "doc_len_range",
                    "salient_count"):
            if key not in data_raw:
                raise ConfigError("data.%s" % key, "required for synthetic data")
        rng = data_raw["doc_len_range"]
        if (not isinstance(rng, (list, tuple)) or len(rng) != 2
                or not all(isinstance(v, int) for v in rng)):
            raise ConfigError("data.doc_len_range", "must be [lo, hi] integers")
    elif kind == "jsonl":
        _check_keys("data", data_raw, _JSONL_KEYS)
        for key in ("train_path", "val_path", "test_path", "vocab_size"):
            if key not in data_raw:
                raise ConfigError("data.%s" % key, "required for jsonl data")
    else:
        raise ConfigError("data.kind", "must be 'synthetic' or 'jsonl'")

    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir", "must be a string path")
    notes = raw.get("notes")

    return RunConfig(training=training, model=dict(model_raw),
                     data=dict(data_raw), out_dir=out_dir, notes=notes)


# ----- presets -----

_FAST_MODEL = {"d_model": 32, "n_heads": 2, "n_enc_layers": 1,
               "n_dec_layers": 1, "d_ff": 64, "dropout_rate": 0.1}

PRESETS = {
    # Minutes on a laptop CPU; a smoke-test scale run.
    "synthetic-fast": {
        "model": dict(_FAST_MODEL),
        "training": {
            "gamma": 0.0, "beta": 0.6, "lambda_nll": 1.0,
            "learning_rate": 1e-3, "weight_decay": 1e-8, "batch_size": 8,
            "max_doc_len": 16, "max_sum_len": 6, "freeze_encoder": False,
            "mode": "consum", "val_samples": 32, "val_frequency": 0.5,
            "patience": 4, "warmup_fraction": 0.1, "seed": 0,
            "beam_size": 4, "max_epochs": 3,
        },
        "data": {
            "kind": "synthetic", "seed": 7, "n_train": 256, "n_val": 64,
            "n_test": 64, "doc_len_range": [10, 14], "salient_count": 3,
        },
    },
    # The full desk-scale experiment behind the behavioral checks.
    "synthetic-full": {
        "model": dict(_FAST_MODEL),
        "training": {
            "gamma": 0.0, "beta": 0.6, "lambda_nll": 1.0,
            "learning_rate": 1e-3, "weight_decay": 1e-8, "batch_size": 8,
            "max_doc_len": 16, "max_sum_len": 6, "freeze_encoder": False,
            "mode": "consum", "val_samples": 64, "val_frequency": 0.25,
            "patience": 4, "warmup_fraction": 0.1, "seed": 0,
            "beam_size": 4, "max_epochs": 6,
        },
        "data": {
            "kind": "synthetic", "seed": 7, "n_train": 2000, "n_val": 200,
            "n_test": 200, "doc_len_range": [10, 14], "salient_count": 3,
        },
    },
    # Documentation of the reference full-scale settings (CNNDM-style).
    # Requires corpora and compute far beyond this codebase's desk scale;
    # not intended to be run.
    "paper-scale-reference": {
        "model": {"d_model": 64, "n_heads": 4, "n_enc_layers": 2,
                  "n_dec_layers": 2, "d_ff": 128, "dropout_rate": 0.1},
        "training": {
            "gamma": 1.5, "beta": 0.8, "lambda_nll": 1.0,
            "learning_rate": PAPER_SCALE_LEARNING_RATE, "weight_decay": 1e-8,
            "batch_size": 8, "max_doc_len": 1024, "max_sum_len": 128,
            "freeze_encoder": True, "mode": "consum", "ss_prob": 0.5,
            "val_samples": 1000, "val_frequency": 0.01, "patience": 4,
            "warmup_fraction": 0.1, "seed": 0, "beam_size": 4,
            "max_epochs": 10,
        },
        "data": {
            "kind": "jsonl",
            "train_path": "train.jsonl", "val_path": "val.jsonl",
            "test_path": "test.jsonl", "vocab_size": 32000,
        },
        "notes": ("Reference hyperparameters for a CNNDM-scale run assuming a "
                  "pre-trained initialization; kept for documentation, not "
                  "runnable at desk scale."),
    },
}


def load_run_config(path_or_preset: str) -> RunConfig:
    """Load a config from a JSON file, or by preset name."""
    if path_or_preset in PRESETS:
        return parse_run_config(copy.deepcopy(PRESETS[path_or_preset]))
    try:
        with open(path_or_preset, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(
            "config",
            "%r is neither a file nor a preset (presets: %s)"
            % (path_or_preset, ", ".join(sorted(PRESETS)))) from None
    except json.JSONDecodeError as e:
        raise ConfigError("config", "invalid JSON: %s" % e) from None
    return parse_run_config(raw)
