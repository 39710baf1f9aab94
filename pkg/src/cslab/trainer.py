"""Training loop (Adam + warmup/decay schedule), checkpoint averaging,
and the ablation matrix comparing the single-encoder baseline against the
two fusion variants with and without the disentanglement term.

Training is bit-reproducible given (config, seed): parameter init, data
order, and every reduction run in a fixed order.  The matrix can fan its
system runs out to worker processes; outputs are assembled in a canonical
order so the emitted CSVs and logs are byte-identical across invocations.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import DatasetSplit
from .decode import greedy_decode, prefix_beam_decode, strip_masks
from .encoder import (
    Model,
    ModelConfig,
    SYSTEMS,
    build_parameters,
    encode_utterance,
    parameter_count,
    project_to_logits,
    validate_parameters,
)
from .evalkit import (
    GATING_COLUMNS,
    PROJECTION_COLUMNS,
    SCORE_COLUMNS,
    SEPARATION_COLUMNS,
    ScoreReport,
    compute_mer,
    gating_report,
    gating_row,
    score_row,
    separation_row,
    separation_stats,
    write_csv,
)
from .objective import (
    LossBreakdown,
    ObjectiveConfig,
    TokenSequence,
    Vocabulary,
    ctc_loss,
    disentangle_loss,
    is_infeasible,
    language_loss,
    scalar_mean,
    total_loss,
)
from .tensorcore import Tape, Tensor, read_tensors, write_tensors


class NonFiniteLoss(FloatingPointError):
    pass


class FingerprintMismatch(ValueError):
    pass


class TooFew(ValueError):
    pass


SYSTEM_TAGS = ("baseline_single", "concat_lae", "concat_lae_dis",
               "moe_lae", "moe_lae_dis")


def system_variant(tag: str) -> tuple[str, bool]:
    """Matrix tag -> (system, disentangle)."""
    if tag.endswith("_dis"):
        return tag[:-4], True
    return tag, False


@dataclass(frozen=True)
class TrainConfig:
    system: str = "moe_lae"
    disentangle: bool = True
    epochs: int = 20
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    clip_norm: float = 5.0
    checkpoint_average_k: int = 5
    seed: int = 0
    lam: float = 10.0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}")
        if self.warmup_steps < 1 or self.checkpoint_average_k < 1:
            raise ValueError("warmup_steps and checkpoint_average_k must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch_size")


def lr_schedule(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to `peak` at `warmup`, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("step starts at 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(m={n: np.zeros(t.shape) for n, t in params.items()},
                   v={n: np.zeros(t.shape) for n, t in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98,
              epsilon: float = 1e-9) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; parameter order is fixed by the map."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name].data if isinstance(grads[name], Tensor) else grads[name]
        if g.shape != p.shape:
            from .tensorcore import ShapeMismatch
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + epsilon)
        out[name] = Tensor(p.data - lr * update)
    return out, state


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        arr = g.data if isinstance(g, Tensor) else g
        total += float((arr * arr).sum())
    return math.sqrt(total)


def clip_gradients(grads: dict, max_norm: float) -> dict:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    factor = max_norm / norm
    return {n: Tensor((g.data if isinstance(g, Tensor) else g) * factor)
            for n, g in grads.items()}


# ---------------------------------------------------------------------------
# The per-batch objective: forward all heads the system variant needs.
# ---------------------------------------------------------------------------


def batch_objective(tape: Tape, params: dict, cfg: ModelConfig, system: str,
                    disentangle: bool, lam: float, batch, vocab: Vocabulary):
    """Record the batch loss on the tape.

    Returns (total, LossBreakdown, n_excluded).  Utterances whose CTC
    target is infeasible are dropped from every term with a warning; the
    generator guarantees this never fires for synthetic data.
    """
    mix_terms, man_terms, eng_terms, pairs = [], [], [], []
    excluded = 0
    for utt in batch:
        x = tape.constant(utt.features)
        res = encode_utterance(tape, x, params, cfg, system)
        logits = project_to_logits(tape, res.fused, params, "mix")
        logp = tape.apply_primitive("log_softmax_last_dim", [logits])
        l_mix = ctc_loss(tape, logp, utt.reference, blank=vocab.blank)
        if system == "baseline_single":
            if is_infeasible(l_mix):
                excluded += 1
                continue
            mix_terms.append(l_mix)
            continue
        l_man, l_eng, _ = language_loss(tape, res.h_man, res.h_eng,
                                        utt.reference, params, vocab)
        if is_infeasible(l_mix) or is_infeasible(l_man) or is_infeasible(l_eng):
            excluded += 1
            continue
        mix_terms.append(l_mix)
        man_terms.append(l_man)
        eng_terms.append(l_eng)
        pairs.append((res.h_man, res.h_eng))
    if excluded:
        warnings.warn(f"excluded {excluded} utterances with infeasible CTC targets")
    if not mix_terms:
        raise NonFiniteLoss("every utterance in the batch was infeasible")
    l_mix = scalar_mean(tape, mix_terms)
    if system == "baseline_single":
        bd = LossBreakdown(0.0, 0.0, 0.0, l_mix.item(), 0.0, l_mix.item())
        return l_mix, bd, excluded
    l_man = scalar_mean(tape, man_terms)
    l_eng = scalar_mean(tape, eng_terms)
    half = tape.apply_primitive("add", [l_man, l_eng])
    l_lang = tape.apply_primitive("scale", [half], {"factor": 0.5})
    l_cd = disentangle_loss(tape, pairs) if disentangle and lam > 0 else None
    total = total_loss(tape, l_mix, l_lang, l_cd, ObjectiveConfig(lam=lam))
    bd = LossBreakdown(
        l_man=l_man.item(), l_eng=l_eng.item(), l_lang=l_lang.item(),
        l_mix=l_mix.item(), l_cd=l_cd.item() if l_cd is not None else 0.0,
        l_total=total.item(),
    )
    return total, bd, excluded


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------

_CKPT_HEADER = "cslab-ckpt v1"


def config_fingerprint(cfg: ModelConfig, system: str) -> str:
    fields = sorted((f, getattr(cfg, f)) for f in cfg.__dataclass_fields__)
    text = "|".join(f"{k}={v}" for k, v in fields) + f"|system={system}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Checkpoint:
    params: dict = field(repr=False)
    step: int
    val_loss: float
    fingerprint: str


def save_checkpoint(path, ckpt: Checkpoint, cfg: ModelConfig, system: str) -> None:
    with open(path, "wb") as fh:
        fh.write(f"{_CKPT_HEADER}\n".encode())
        fh.write(f"step {ckpt.step}\n".encode())
        fh.write(f"val_loss {ckpt.val_loss:.17g}\n".encode())
        fh.write(f"fingerprint {ckpt.fingerprint}\n".encode())
        cfg_items = " ".join(
            f"{f}={getattr(cfg, f)}" for f in cfg.__dataclass_fields__)
        fh.write(f"config {cfg_items}\n".encode())
        fh.write(f"system {system}\n".encode())
        write_tensors(fh, ckpt.params)


def load_checkpoint(path) -> tuple[Checkpoint, ModelConfig, str]:
    from .tensorcore import _read_line
    with open(path, "rb") as fh:
        if _read_line(fh) != _CKPT_HEADER:
            raise FingerprintMismatch(f"not a checkpoint file: {path}")
        step = int(_read_line(fh).split(" ", 1)[1])
        val_loss = float(_read_line(fh).split(" ", 1)[1])
        fingerprint = _read_line(fh).split(" ", 1)[1]
        cfg_line = _read_line(fh).split(" ")[1:]
        system = _read_line(fh).split(" ", 1)[1]
        kwargs = {}
        for item in cfg_line:
            key, val = item.split("=", 1)
            if key in ("fusion_mode",):
                kwargs[key] = val
            elif key == "disentangle_enabled":
                kwargs[key] = val == "True"
            else:
                kwargs[key] = int(val)
        cfg = ModelConfig(**kwargs)
        params = read_tensors(fh)
    expect = config_fingerprint(cfg, system)
    if expect != fingerprint:
        raise FingerprintMismatch(f"{path}: fingerprint {fingerprint} != {expect}")
    validate_parameters(params, cfg, system)
    return Checkpoint(params, step, val_loss, fingerprint), cfg, system


def average_checkpoints(ckpts: list[Checkpoint], k: int) -> Checkpoint:
    """Mean of the k best-validation checkpoints (ties to the earlier step).

    The average is computed as best + mean(offsets), which is exact when
    all selected checkpoints are identical and permutation-invariant via
    the deterministic selection order.
    """
    if not ckpts:
        raise TooFew("no checkpoints")
    fp = ckpts[0].fingerprint
    if any(c.fingerprint != fp for c in ckpts):
        raise FingerprintMismatch("checkpoints from different configurations")
    if len(ckpts) < k:
        raise TooFew(f"need {k} checkpoints, have {len(ckpts)}")
    chosen = sorted(ckpts, key=lambda c: (c.val_loss, c.step))[:k]
    base = chosen[0]
    avg = {}
    for name, t in base.params.items():
        acc = np.zeros(t.shape)
        for c in chosen[1:]:
            acc += c.params[name].data - t.data
        avg[name] = Tensor(t.data + acc / k)
    return Checkpoint(avg, base.step, base.val_loss, fp)


# ---------------------------------------------------------------------------
# The training loop.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    checkpoints: list
    log_lines: list
    fingerprint: str
    excluded_utterances: int


def _validation_loss(params, cfg, system, disentangle, lam, valid: DatasetSplit,
                     vocab, batch_size) -> float:
    total = 0.0
    n = 0
    utts = valid.utterances
    for start in range(0, len(utts), batch_size):
        batch = utts[start:start + batch_size]
        tape = Tape(check_finite=False)
        loss, _, _ = batch_objective(tape, params, cfg, system, disentangle,
                                     lam, batch, vocab)
        total += loss.item() * len(batch)
        n += len(batch)
    return total / n if n else 0.0


def train(train_cfg: TrainConfig, model_cfg: ModelConfig,
          splits: dict[str, DatasetSplit], vocab: Vocabulary,
          log_hook=None) -> TrainResult:
    """Full run: per-step forward/backward/clip/Adam, per-epoch validation
    and checkpoint.  Returns the initial checkpoint plus one per epoch."""
    system = train_cfg.system
    params = build_parameters(model_cfg, system, seed=train_cfg.seed)
    fp = config_fingerprint(model_cfg, system)
    state = AdamState.init(params)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([train_cfg.seed, 1]))
    train_split = splits["train"]
    valid_split = splits["valid"]
    logs: list[str] = []
    excluded_total = 0

    def checkpoint(step):
        val = _validation_loss(params, model_cfg, system, train_cfg.disentangle,
                               train_cfg.lam, valid_split, vocab,
                               train_cfg.batch_size)
        return Checkpoint(dict(params), step, val, fp)

    ckpts = [checkpoint(0)]
    step = 0
    for _epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(train_split.utterances))
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_split.utterances[i]
                     for i in order[start:start + train_cfg.batch_size]]
            step += 1
            lr = lr_schedule(step, train_cfg.peak_lr, train_cfg.warmup_steps)
            tape = Tape(check_finite=False)
            leaves = {n: tape.leaf(t) for n, t in params.items()}
            total, bd, excl = batch_objective(
                tape, leaves, model_cfg, system, train_cfg.disentangle,
                train_cfg.lam, batch, vocab)
            excluded_total += excl
            if not math.isfinite(bd.l_total):
                raise NonFiniteLoss(
                    f"step {step}: non-finite loss {bd} at lr {lr}")
            gradmap = tape.backward(total)
            grads = {n: tape.grad(gradmap, leaves[n]) for n in params}
            grads = clip_gradients(grads, train_cfg.clip_norm)
            params, state = adam_step(params, grads, state, lr,
                                      train_cfg.beta1, train_cfg.beta2,
                                      train_cfg.epsilon)
            line = (f"{step}\t{lr:.12g}\t{bd.l_man:.12g}\t{bd.l_eng:.12g}"
                    f"\t{bd.l_lang:.12g}\t{bd.l_mix:.12g}\t{bd.l_cd:.12g}"
                    f"\t{bd.l_total:.12g}")
            logs.append(line)
            if log_hook:
                log_hook(line)
        ckpts.append(checkpoint(step))
    return TrainResult(ckpts, logs, fp, excluded_total)


# ---------------------------------------------------------------------------
# Decoding and evaluation of a trained model.
# ---------------------------------------------------------------------------


def transcribe(model: Model, utt, beam_width: int = 0):
    """Decode one utterance on the mix head (greedy when beam_width < 2).
    Mask symbols are kept here; scoring strips them."""
    tape = Tape(check_finite=False)
    res = encode_utterance(tape, utt.features, model.params, model.cfg,
                           model.system)
    logits = project_to_logits(tape, res.fused, model.params, "mix")
    logp = tape.apply_primitive("log_softmax_last_dim", [logits])
    if beam_width >= 2:
        return prefix_beam_decode(logp, beam_width)
    return greedy_decode(logp)


def evaluate_split(model: Model, split: DatasetSplit, vocab: Vocabulary,
                   beam_width: int = 0) -> ScoreReport:
    refs, hyps = [], []
    for utt in split.utterances:
        hyp = transcribe(model, utt, beam_width)
        refs.append(utt.reference)
        hyps.append(strip_masks(hyp.tokens, vocab))
    return compute_mer(refs, hyps, vocab)


# ---------------------------------------------------------------------------
# The experiment matrix.
# ---------------------------------------------------------------------------

_DEV_SPLITS = ("dev_A_heavy", "dev_B_heavy")
_DECODERS = (("greedy", 0), ("beam10", 10))


@dataclass(frozen=True)
class SystemOutcome:
    tag: str
    cfg: ModelConfig
    system: str
    scores: dict                 # (split, decoder) -> ScoreReport
    gating: dict                 # split -> GatingReport (moe systems)
    separation: dict             # split -> SeparationReport (LAE systems)
    projection_points: dict      # split -> rows (moe systems)
    log_lines: list
    val_losses: list
    parameter_total: int
    averaged: Checkpoint


def run_system(tag: str, train_cfg: TrainConfig, model_cfg: ModelConfig,
               splits: dict, vocab: Vocabulary) -> SystemOutcome:
    system, disentangle = system_variant(tag)
    cfg = replace(model_cfg,
                  fusion_mode="concat" if system == "concat_lae" else "moe",
                  disentangle_enabled=disentangle)
    tc = replace(train_cfg, system=system, disentangle=disentangle)
    result = train(tc, cfg, splits, vocab)
    averaged = average_checkpoints(result.checkpoints,
                                   min(tc.checkpoint_average_k,
                                       len(result.checkpoints)))
    model = Model(cfg, system, averaged.params)
    scores = {}
    for split_name in _DEV_SPLITS:
        for dec_name, width in _DECODERS:
            scores[(split_name, dec_name)] = evaluate_split(
                model, splits[split_name], vocab, width)
    gating = {}
    separation = {}
    points = {}
    if system != "baseline_single":
        for split_name in _DEV_SPLITS:
            rep = separation_stats(model, splits[split_name], vocab)
            separation[split_name] = rep
            if system == "moe_lae":
                gating[split_name] = gating_report(model, splits[split_name], vocab)
                if rep.points is not None:
                    points[split_name] = rep.points
    return SystemOutcome(
        tag=tag, cfg=cfg, system=system, scores=scores, gating=gating,
        separation=separation, projection_points=points,
        log_lines=result.log_lines,
        val_losses=[c.val_loss for c in result.checkpoints],
        parameter_total=parameter_count(averaged.params),
        averaged=averaged,
    )


def _run_system_star(args):
    return run_system(*args)


def run_experiment_matrix(train_cfg: TrainConfig, model_cfg: ModelConfig,
                          splits: dict, vocab: Vocabulary,
                          tags: tuple = SYSTEM_TAGS,
                          jobs: int = 1) -> dict[str, SystemOutcome]:
    """Train and evaluate every system variant with a shared seed.

    Independent runs may execute in parallel worker processes; results are
    keyed and ordered by tag, so outputs do not depend on scheduling.
    """
    work = [(tag, train_cfg, model_cfg, splits, vocab) for tag in tags]
    if jobs > 1 and len(work) > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(min(jobs, len(work))) as pool:
            outcomes = pool.map(_run_system_star, work)
    else:
        outcomes = [run_system(*w) for w in work]
    return {o.tag: o for o in outcomes}


def write_matrix_outputs(outcomes: dict[str, SystemOutcome], out_dir) -> None:
    """Canonical delimited outputs for a finished matrix run."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    score_rows = []
    gating_rows = []
    separation_rows = []
    for tag in sorted(outcomes):
        o = outcomes[tag]
        for (split_name, dec_name) in sorted(o.scores):
            score_rows.append(score_row(tag, split_name, dec_name,
                                        o.scores[(split_name, dec_name)]))
        for split_name in sorted(o.gating):
            gating_rows.append(gating_row(tag, o.gating[split_name]))
        for split_name in sorted(o.separation):
            separation_rows.append(separation_row(tag, o.separation[split_name]))
    write_csv(out / "score_report.csv", SCORE_COLUMNS, score_rows)
    write_csv(out / "gating_report.csv", GATING_COLUMNS, gating_rows)
    write_csv(out / "separation_report.csv", SEPARATION_COLUMNS, separation_rows)
    for tag in sorted(outcomes):
        o = outcomes[tag]
        sys_dir = out / tag
        sys_dir.mkdir(exist_ok=True)
        with open(sys_dir / "train_log.tsv", "w", encoding="utf-8") as fh:
            fh.write("step\tlr\tl_man\tl_eng\tl_lang\tl_mix\tl_cd\tl_total\n")
            for line in o.log_lines:
                fh.write(line + "\n")
        save_checkpoint(sys_dir / "averaged.ckpt", o.averaged, o.cfg, o.system)
        for split_name, pts in sorted(o.projection_points.items()):
            write_csv(sys_dir / f"projection_points_{split_name}.csv",
                      PROJECTION_COLUMNS, pts)
        if o.projection_points:
            # canonical single-file name: the switch-rich dev split
            pick = "dev_B_heavy" if "dev_B_heavy" in o.projection_points \
                else sorted(o.projection_points)[0]
            write_csv(sys_dir / "projection_points.csv", PROJECTION_COLUMNS,
                      o.projection_points[pick])
