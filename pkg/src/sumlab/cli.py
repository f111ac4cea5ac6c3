"""Command-line surface: train, eval, decode, sweep-margin, ablate.

Exit codes: 0 success, 1 configuration error (the message names the
offending field), 2 runtime failure.  Every command that owns an output
directory refuses to clobber it unless --overwrite is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, PRESETS, RunConfig, load_run_config, parse_run_config
from .data import (TokenSequence, Vocab, build_vocab, load_jsonl,
                   read_jsonl_documents, read_jsonl_records, synth_corpus,
                   synth_vocab, tokenize)
from .decoding import DecodeConfig, beam_search
from .model import Seq2SeqModel, encode
from .rouge import corpus_rouge, score_pair
from .training import (MetricsWriter, Trainer, apply_checkpoint,
                       load_checkpoint, save_checkpoint, save_optimizer_state)

DEFAULT_SWEEP_GAMMAS = (0.0, 0.5, 1.0, 1.5, 2.0)


def _prepare_out_dir(out_dir: Path, overwrite: bool) -> Path:
    if out_dir.exists() and any(out_dir.iterdir()):
        if not overwrite:
            raise ConfigError(
                "out_dir",
                "%s already exists and is not empty; pass --overwrite to replace it"
                % out_dir)
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _resolve_out(rc: RunConfig, out_flag) -> Path:
    if out_flag:
        return Path(out_flag)
    if rc.out_dir:
        return Path(rc.out_dir)
    raise ConfigError("out_dir", "no output directory: set it in the config or pass --out")


def _check_synth_limits(rc: RunConfig):
    d = rc.data
    if d["kind"] != "synthetic":
        return
    lo, hi = d["doc_len_range"]
    if hi > rc.training.max_doc_len:
        raise ConfigError(
            "data.doc_len_range",
            "documents up to %d words exceed training.max_doc_len %d"
            % (hi, rc.training.max_doc_len))
    if d["salient_count"] + 2 > rc.training.max_sum_len:
        raise ConfigError(
            "data.salient_count",
            "summaries need %d tokens with BOS/EOS but training.max_sum_len is %d"
            % (d["salient_count"] + 2, rc.training.max_sum_len))


def _build_vocab_for(rc: RunConfig) -> Vocab:
    d = rc.data
    if d["kind"] == "synthetic":
        return synth_vocab()
    records = read_jsonl_records(d["train_path"])
    texts = [doc for _, doc, _ in records] + [summ for _, _, summ in records]
    return build_vocab(texts, d["vocab_size"])


def _load_splits(rc: RunConfig, vocab: Vocab):
    d = rc.data
    t = rc.training
    if d["kind"] == "synthetic":
        return synth_corpus(d["seed"], d["n_train"], d["n_val"], d["n_test"],
                            tuple(d["doc_len_range"]), d["salient_count"])
    return tuple(
        load_jsonl(d[key], vocab, t.max_doc_len, t.max_sum_len)
        for key in ("train_path", "val_path", "test_path"))


def _frozen_config(rc: RunConfig, model_cfg, out_dir: Path) -> RunConfig:
    model_section = {
        "vocab_size": model_cfg.vocab_size,
        "d_model": model_cfg.d_model,
        "n_heads": model_cfg.n_heads,
        "n_enc_layers": model_cfg.n_enc_layers,
        "n_dec_layers": model_cfg.n_dec_layers,
        "d_ff": model_cfg.d_ff,
        "dropout_rate": model_cfg.dropout_rate,
    }
    return dataclasses.replace(rc, model=model_section, out_dir=str(out_dir))


def _train_run(rc: RunConfig, out_dir: Path, overwrite: bool) -> dict:
    """Run one training job into out_dir; returns the live objects."""
    _check_synth_limits(rc)
    _prepare_out_dir(out_dir, overwrite)
    vocab = _build_vocab_for(rc)
    train, val, test = _load_splits(rc, vocab)
    model_cfg = rc.model_config(len(vocab))
    # Freeze the exact resolved configuration before any training happens.
    _frozen_config(rc, model_cfg, out_dir).save(out_dir / "config.json")
    vocab.save(out_dir / "vocab.txt")
    with MetricsWriter(out_dir / "metrics.csv") as metrics:
        trainer = Trainer.from_seed(model_cfg, rc.training, metrics=metrics)
        state = trainer.fit(train, val or None)
    save_checkpoint(out_dir / "checkpoint.bin", state.model)
    save_optimizer_state(out_dir / "optimizer.bin", state)
    return {"state": state, "vocab": vocab, "test": test, "out": out_dir}


def _eval_rows(model, decode_cfg: DecodeConfig, vocab: Vocab, pairs):
    rows = []
    for i, pair in enumerate(pairs):
        enc = encode(model, pair.document)
        top = beam_search(model, enc, decode_cfg)[0]
        candidate = " ".join(vocab.word_of(t) for t in top.tokens.content_ids())
        reference = " ".join(vocab.word_of(t) for t in pair.summary.content_ids())
        scores = score_pair(candidate, reference)
        rows.append({
            "example_id": i,
            "rouge1_f": scores.r1.f1,
            "rouge2_f": scores.r2.f1,
            "rougeL_f": scores.rl.f1,
            "beam_score": top.score,
            "candidate": candidate,
            "reference": reference,
        })
    return rows


def _summarize_rows(rows) -> dict:
    corpus = corpus_rouge([(r["candidate"], r["reference"]) for r in rows])
    return {
        "n_examples": len(rows),
        "rouge1": dataclasses.asdict(corpus.r1),
        "rouge2": dataclasses.asdict(corpus.r2),
        "rougeL": dataclasses.asdict(corpus.rl),
        "mean_beam_score": sum(r["beam_score"] for r in rows) / len(rows),
    }


def _print_rouge_table(summary: dict, label: str):
    print("%-24s %8s %8s %8s" % (label, "R-1", "R-2", "R-L"))
    print("%-24s %8.4f %8.4f %8.4f" % (
        "f1", summary["rouge1"]["f1"], summary["rouge2"]["f1"],
        summary["rougeL"]["f1"]))
    print("mean beam score: %.6f over %d examples"
          % (summary["mean_beam_score"], summary["n_examples"]))


def _write_per_example_csv(path, rows):
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["example_id", "rouge1_f", "rouge2_f", "rougeL_f",
                         "beam_score"])
        for r in rows:
            writer.writerow([r["example_id"], r["rouge1_f"], r["rouge2_f"],
                             r["rougeL_f"], r["beam_score"]])


def _with_seed(rc: RunConfig, seed) -> RunConfig:
    if seed is None:
        return rc
    training = dataclasses.replace(rc.training, seed=int(seed))
    return dataclasses.replace(rc, training=training)


# ----- command handlers -----


def cmd_train(args) -> int:
    rc = _with_seed(load_run_config(args.config), args.seed)
    out = _resolve_out(rc, args.out)
    result = _train_run(rc, out, args.overwrite)
    state = result["state"]
    print("trained %d steps; checkpoint at %s" % (state.step, out / "checkpoint.bin"))
    if state.best_rouge2 != float("-inf"):
        print("best validation rouge-2 f1: %.4f" % state.best_rouge2)
    return 0


def _load_model_for_inference(checkpoint_path: Path, rc: RunConfig):
    vocab_path = checkpoint_path.parent / "vocab.txt"
    if not vocab_path.exists():
        raise FileNotFoundError(
            "no vocab.txt next to %s; evaluation needs the training vocabulary"
            % checkpoint_path)
    vocab = Vocab.load(vocab_path)
    model_cfg = rc.model_config(len(vocab))
    model = Seq2SeqModel.initialize(model_cfg, 0)
    apply_checkpoint(model, load_checkpoint(checkpoint_path))
    return model, vocab


def cmd_eval(args) -> int:
    rc = load_run_config(args.config)
    model, vocab = _load_model_for_inference(Path(args.checkpoint), rc)
    t = rc.training
    beta = args.beta if args.beta is not None else t.beta
    decode_cfg = DecodeConfig(beam_size=t.beam_size, length_penalty_beta=beta,
                              max_len=t.max_sum_len - 1)
    if args.input:
        pairs = load_jsonl(args.input, vocab, t.max_doc_len, t.max_sum_len)
    else:
        pairs = _load_splits(rc, vocab)[2]
    if not pairs:
        raise ValueError("evaluation corpus is empty")
    out = _prepare_out_dir(Path(args.out), args.overwrite)
    rows = _eval_rows(model, decode_cfg, vocab, pairs)
    _write_per_example_csv(out / "per_example.csv", rows)
    summary = _summarize_rows(rows)
    with open(out / "eval_summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    _print_rouge_table(summary, "corpus rouge")
    return 0


def cmd_decode(args) -> int:
    checkpoint = Path(args.checkpoint)
    config_path = args.config or str(checkpoint.parent / "config.json")
    rc = load_run_config(config_path)
    model, vocab = _load_model_for_inference(checkpoint, rc)
    t = rc.training
    decode_cfg = DecodeConfig(
        beam_size=args.beam if args.beam is not None else t.beam_size,
        length_penalty_beta=args.beta if args.beta is not None else t.beta,
        max_len=t.max_sum_len - 1)
    lines = []
    for i, doc in enumerate(read_jsonl_documents(args.input)):
        ids = tokenize(doc, vocab).ids[: t.max_doc_len]
        if not ids:
            raise ValueError("document %d is empty after tokenization" % i)
        enc = encode(model, TokenSequence(ids))
        top = beam_search(model, enc, decode_cfg)[0]
        lines.append(" ".join(vocab.word_of(tok) for tok in top.tokens.content_ids()))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _run_and_eval(rc_dict: dict, out_dir: str) -> dict:
    """One sweep/ablation constituent: train, then eval on the test split.
    Takes plain serializable arguments so it can run in a worker process."""
    rc = parse_run_config(rc_dict)
    result = _train_run(rc, Path(out_dir), overwrite=False)
    state, vocab, test = result["state"], result["vocab"], result["test"]
    if not test:
        raise ValueError("test split is empty; sweep/ablate reports need one")
    rows = _eval_rows(state.model, state.decode_cfg, vocab, test)
    summary = _summarize_rows(rows)
    return {
        "gamma": rc.training.gamma,
        "lambda_nll": rc.training.lambda_nll,
        "mode": rc.training.mode,
        "rouge1_f": summary["rouge1"]["f1"],
        "rouge2_f": summary["rouge2"]["f1"],
        "rougeL_f": summary["rougeL"]["f1"],
        "mean_beam_score": summary["mean_beam_score"],
    }


def _run_many(jobs, parallel: int):
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_and_eval_star, jobs))
    return [_run_and_eval(rc_dict, out) for rc_dict, out in jobs]


def _run_and_eval_star(job):
    return _run_and_eval(*job)


def _write_report_csv(path, columns, rows):
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])


def cmd_sweep_margin(args) -> int:
    rc = _with_seed(load_run_config(args.config), args.seed)
    if args.gammas is not None:
        try:
            gammas = [float(g) for g in args.gammas.split(",")]
        except ValueError:
            raise ConfigError("gammas", "must be a comma-separated list of numbers")
    else:
        gammas = list(DEFAULT_SWEEP_GAMMAS)
    out = _prepare_out_dir(_resolve_out(rc, args.out), args.overwrite)
    jobs = []
    for gamma in gammas:
        training = dataclasses.replace(rc.training, gamma=gamma)
        sub = dataclasses.replace(rc, training=training, out_dir=None)
        jobs.append((sub.to_json_dict(), str(out / ("gamma_%g" % gamma))))
    rows = _run_many(jobs, args.parallel)
    columns = ["gamma", "rouge1_f", "rouge2_f", "rougeL_f", "mean_beam_score"]
    _write_report_csv(out / "sweep_report.csv", columns, rows)
    print("%8s %8s %8s %8s" % ("gamma", "R-1", "R-2", "R-L"))
    for row in rows:
        print("%8g %8.4f %8.4f %8.4f"
              % (row["gamma"], row["rouge1_f"], row["rouge2_f"], row["rougeL_f"]))
    return 0


def cmd_ablate(args) -> int:
    rc = _with_seed(load_run_config(args.config), args.seed)
    out = _prepare_out_dir(_resolve_out(rc, args.out), args.overwrite)
    variants = [
        ("consum", {"mode": "consum"}),
        ("nll_only", {"mode": "nll_only"}),
        ("con_only_gamma_1.5", {"mode": "con_only", "gamma": 1.5, "lambda_nll": 0.0}),
        ("con_only_gamma_0.0", {"mode": "con_only", "gamma": 0.0, "lambda_nll": 0.0}),
    ]
    jobs = []
    for name, overrides in variants:
        training = dataclasses.replace(rc.training, **overrides)
        sub = dataclasses.replace(rc, training=training, out_dir=None)
        jobs.append((sub.to_json_dict(), str(out / name)))
    rows = _run_many(jobs, args.parallel)
    for (name, _), row in zip(variants, rows):
        row["run"] = name
    columns = ["run", "mode", "gamma", "lambda_nll", "rouge1_f", "rouge2_f",
               "rougeL_f"]
    _write_report_csv(out / "ablation_report.csv", columns, rows)
    print("%-22s %8s %8s %8s" % ("run", "R-1", "R-2", "R-L"))
    for row in rows:
        print("%-22s %8.4f %8.4f %8.4f"
              % (row["run"], row["rouge1_f"], row["rouge2_f"], row["rougeL_f"]))
    return 0


# ----- argument parsing -----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sumlab",
        description="Desk-scale contrastive summarization laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True):
        p.add_argument("--config", required=True,
                       help="config JSON path or preset name (%s)"
                       % ", ".join(sorted(PRESETS)))
        p.add_argument("--out", help="output directory")
        p.add_argument("--overwrite", action="store_true",
                       help="replace an existing non-empty output directory")
        if seed:
            p.add_argument("--seed", type=int, help="override training.seed")

    p_train = sub.add_parser("train", help="train one model")
    add_common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="beam-decode and Rouge-score a corpus")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True,
                        help="run config (e.g. the frozen config.json)")
    p_eval.add_argument("--input", help="JSONL corpus; defaults to the config's test split")
    p_eval.add_argument("--beta", type=float, help="length penalty override")
    p_eval.add_argument("--out", required=True, help="report directory")
    p_eval.add_argument("--overwrite", action="store_true")
    p_eval.set_defaults(fn=cmd_eval)

    p_dec = sub.add_parser("decode", help="generate summaries for documents")
    p_dec.add_argument("--checkpoint", required=True)
    p_dec.add_argument("--input", required=True, help="JSONL with a 'document' field")
    p_dec.add_argument("--beam", type=int, help="beam size override")
    p_dec.add_argument("--beta", type=float, help="length penalty override")
    p_dec.add_argument("--config", help="run config; defaults to config.json beside the checkpoint")
    p_dec.add_argument("--out", help="output file (default: stdout)")
    p_dec.set_defaults(fn=cmd_decode)

    p_sweep = sub.add_parser("sweep-margin", help="train/eval across margin values")
    add_common(p_sweep)
    p_sweep.add_argument("--gammas", help="comma-separated margins (default %s)"
                         % ",".join(str(g) for g in DEFAULT_SWEEP_GAMMAS))
    p_sweep.add_argument("--parallel", type=int, default=1,
                         help="run constituents in N worker processes")
    p_sweep.set_defaults(fn=cmd_sweep_margin)

    p_abl = sub.add_parser("ablate", help="the four-run loss ablation")
    add_common(p_abl)
    p_abl.add_argument("--parallel", type=int, default=1)
    p_abl.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print("error: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
