"""Command-line entry points: gen / train / eval / matrix / report.

Config files are plain UTF-8 ``key = value`` lines with ``#`` comments;
unknown keys are errors so typos fail loudly.
"""

from __future__ import annotations

import os

# worker processes and tiny matrices both prefer unthreaded BLAS
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse
import sys
from dataclasses import replace
from pathlib import Path


class ConfigFileError(ValueError):
    pass


def parse_kv_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key or not val:
            raise ConfigFileError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _typed(schema: dict, raw: dict[str, str], what: str) -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigFileError(f"unknown {what} keys: {', '.join(unknown)}")
    out = {}
    for key, val in raw.items():
        typ = schema[key]
        try:
            if typ is bool:
                if val not in ("true", "false"):
                    raise ValueError("expected true/false")
                out[key] = val == "true"
            else:
                out[key] = typ(val)
        except ValueError as e:
            raise ConfigFileError(f"{key}: {e}") from None
    return out


GEN_SCHEMA = {
    "n_a": int, "n_b": int, "feature_dim": int, "t_min": int, "t_max": int,
    "p_switch": float, "noise_sigma": float, "min_tokens": int,
    "max_tokens": int, "mean_scale": float, "seed": int,
    "train_size": int, "valid_size": int, "dev_a_size": int, "dev_b_size": int,
    "ratio_train": float, "ratio_valid": float, "ratio_dev_a": float,
    "ratio_dev_b": float,
}

TRAIN_SCHEMA = {
    "system": str, "disentangle": bool, "epochs": int, "batch_size": int,
    "peak_lr": float, "warmup_steps": int, "beta1": float, "beta2": float,
    "epsilon": float, "clip_norm": float, "checkpoint_average_k": int,
    "seed": int, "lambda": float,
    "d_model": int, "ff_dim": int, "n_heads": int,
    "n_shared_blocks": int, "n_specific_blocks": int,
}

_MODEL_KEYS = ("d_model", "ff_dim", "n_heads", "n_shared_blocks",
               "n_specific_blocks")


def load_synth_spec(path) -> "SynthSpec":
    from .corpus import SynthSpec
    vals = _typed(GEN_SCHEMA, parse_kv_config(Path(path).read_text("utf-8")),
                  "generator")
    kwargs = {k: v for k, v in vals.items()
              if k in SynthSpec.__dataclass_fields__}
    sizes = dict(SynthSpec.__dataclass_fields__["split_sizes"].default_factory())
    ratios = dict(SynthSpec.__dataclass_fields__["ratios"].default_factory())
    for key, split in (("train_size", "train"), ("valid_size", "valid"),
                       ("dev_a_size", "dev_A_heavy"), ("dev_b_size", "dev_B_heavy")):
        if key in vals:
            sizes[split] = vals[key]
    for key, split in (("ratio_train", "train"), ("ratio_valid", "valid"),
                       ("ratio_dev_a", "dev_A_heavy"), ("ratio_dev_b", "dev_B_heavy")):
        if key in vals:
            ratios[split] = vals[key]
    return SynthSpec(split_sizes=sizes, ratios=ratios, **kwargs)


def load_train_config(path) -> tuple["TrainConfig", dict]:
    from .trainer import TrainConfig
    vals = _typed(TRAIN_SCHEMA, parse_kv_config(Path(path).read_text("utf-8")),
                  "training")
    model_overrides = {k: vals.pop(k) for k in list(vals) if k in _MODEL_KEYS}
    if "lambda" in vals:
        vals["lam"] = vals.pop("lambda")
    return TrainConfig(**vals), model_overrides


def _load_data(data_dir):
    from .corpus import read_dataset, read_vocabulary
    splits = {s.name: s for s in read_dataset(data_dir)}
    vocab = read_vocabulary(data_dir)
    return splits, vocab


def _model_config(splits, vocab, overrides):
    from .encoder import ModelConfig
    sample = next(iter(splits.values())).utterances[0]
    return ModelConfig(feature_dim=sample.features.shape[1],
                       vocab_size=vocab.size, **overrides)


def cmd_gen(args):
    from .corpus import build_vocabulary, generate_corpus, write_dataset
    spec = load_synth_spec(args.spec) if args.spec else None
    if spec is None:
        from .corpus import SynthSpec
        spec = SynthSpec()
    vocab = build_vocabulary(spec)
    splits = generate_corpus(spec)
    write_dataset(splits, args.out, vocab)
    for s in splits:
        print(f"{s.name}: {len(s.utterances)} utterances, "
              f"A-ratio {s.realized_ratio:.3f}, "
              f"switches/token {s.switches_per_token():.3f}")
    print(f"wrote corpus to {args.out}")
    return 0


def cmd_train(args):
    from .trainer import average_checkpoints, save_checkpoint, train
    train_cfg, overrides = load_train_config(args.config) if args.config \
        else (None, {})
    if train_cfg is None:
        from .trainer import TrainConfig
        train_cfg = TrainConfig()
    splits, vocab = _load_data(args.data)
    model_cfg = _model_config(splits, vocab, overrides)
    model_cfg = replace(
        model_cfg,
        fusion_mode="concat" if train_cfg.system == "concat_lae" else "moe",
        disentangle_enabled=train_cfg.disentangle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.tsv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("step\tlr\tl_man\tl_eng\tl_lang\tl_mix\tl_cd\tl_total\n")
        result = train(train_cfg, model_cfg, splits, vocab,
                       log_hook=lambda line: fh.write(line + "\n"))
    for ckpt in result.checkpoints:
        save_checkpoint(out / f"epoch_{ckpt.step:06d}.ckpt", ckpt,
                        model_cfg, train_cfg.system)
    k = min(train_cfg.checkpoint_average_k, len(result.checkpoints))
    averaged = average_checkpoints(result.checkpoints, k)
    save_checkpoint(out / "averaged.ckpt", averaged, model_cfg,
                    train_cfg.system)
    print(f"trained {train_cfg.system} for {train_cfg.epochs} epochs "
          f"({len(result.log_lines)} steps); averaged top {k} checkpoints")
    print(f"validation losses: "
          + " ".join(f"{c.val_loss:.4f}" for c in result.checkpoints))
    print(f"outputs in {out}")
    return 0


def cmd_eval(args):
    from .decode import strip_masks
    from .encoder import Model
    from .evalkit import SCORE_COLUMNS, compute_mer, score_row, write_csv
    from .trainer import load_checkpoint, transcribe
    ckpt, cfg, system = load_checkpoint(args.model)
    splits, vocab = _load_data(args.data)
    if args.split not in splits:
        print(f"error: split {args.split!r} not in {sorted(splits)}",
              file=sys.stderr)
        return 2
    model = Model(cfg, system, ckpt.params)
    refs, hyps = [], []
    masks_emitted = 0
    for utt in splits[args.split].utterances:
        hyp = transcribe(model, utt, beam_width=args.beam)
        masks_emitted += sum(1 for t in hyp.tokens.ids if vocab.is_mask(t))
        refs.append(utt.reference)
        hyps.append(strip_masks(hyp.tokens, vocab))
    report = compute_mer(refs, hyps, vocab)
    decoder = f"beam{args.beam}" if args.beam >= 2 else "greedy"
    print(f"system={system} split={args.split} decoder={decoder}")
    print(f"MER {report.mixed_error_rate:.4f}  "
          f"A-rate {report.lang_a_rate:.4f}  B-rate {report.lang_b_rate:.4f}")
    print(f"S={report.substitutions} I={report.insertions} "
          f"D={report.deletions} N={report.ref_len}  "
          f"masks_emitted={masks_emitted} (stripped before scoring)")
    if args.out:
        write_csv(args.out, SCORE_COLUMNS,
                  [score_row(system, args.split, decoder, report)])
        print(f"wrote {args.out}")
    return 0


def cmd_matrix(args):
    from .trainer import run_experiment_matrix, write_matrix_outputs
    train_cfg, overrides = load_train_config(args.config) if args.config \
        else (None, {})
    if train_cfg is None:
        from .trainer import TrainConfig
        train_cfg = TrainConfig()
    splits, vocab = _load_data(args.data)
    model_cfg = _model_config(splits, vocab, overrides)
    outcomes = run_experiment_matrix(train_cfg, model_cfg, splits, vocab,
                                     jobs=args.jobs)
    write_matrix_outputs(outcomes, args.out)
    for tag in sorted(outcomes):
        o = outcomes[tag]
        beam_b = o.scores[("dev_B_heavy", "beam10")].mixed_error_rate
        beam_a = o.scores[("dev_A_heavy", "beam10")].mixed_error_rate
        print(f"{tag:18s} MER dev_A {beam_a:.4f}  dev_B {beam_b:.4f}  "
              f"params {o.parameter_total}")
    print(f"wrote matrix outputs to {args.out}")
    return 0


def cmd_report(args):
    from .figures import render_run_report
    written = render_run_report(args.run)
    if not written:
        print(f"error: no report inputs found under {args.run}", file=sys.stderr)
        return 2
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cslab",
        description="Desk-scale code-switching recognition lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic bilingual corpus")
    p.add_argument("--spec", help="generator config file (key = value)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one system")
    p.add_argument("--config", help="training config file (key = value)")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--split", required=True, help="split name")
    p.add_argument("--beam", type=int, default=10,
                   help="beam width (<2 = greedy)")
    p.add_argument("--out", help="optional CSV output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run the full system-comparison matrix")
    p.add_argument("--config", help="training config file (key = value)")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="matrix output directory")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel system runs (independent processes)")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="render figures for a finished run")
    p.add_argument("--run", required=True, help="matrix output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigFileError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
