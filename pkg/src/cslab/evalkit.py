"""Scoring and analysis: mixed/per-language error rates, gating-weight
summaries, and expert-embedding separation statistics with a 2-D
principal-component projection.

Per-language rates are carved out of one mixed alignment: substitutions
and deletions belong to the language of the reference token involved;
insertions belong to the preceding reference token's language (insertions
before the first reference token go to the following token's language).
That rule partitions the mixed error count exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import DatasetSplit, Utterance
from .encoder import Model, encode_utterance
from .objective import TokenSequence, Vocabulary
from .tensorcore import Tape, Tensor


class LengthMismatch(ValueError):
    pass


class DegenerateCovariance(ValueError):
    pass


def edit_distance(ref, hyp) -> tuple[int, int, int, int]:
    """Levenshtein distance with unit costs, plus S/I/D counts from one
    optimal alignment (ties: substitution, then insertion, then deletion)."""
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ri != hyp[j - 1])
            ins = d[i, j - 1] + 1
            dele = d[i - 1, j] + 1
            d[i, j] = min(sub, ins, dele)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return int(d[n, m]), subs, ins, dels


def align_ops(ref, hyp):
    """The alignment behind :func:`edit_distance`, as left-to-right ops:
    ("match"|"sub", i, j), ("ins", j, prev_ref_index), ("del", i)."""
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = ref[i - 1]
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ri != hyp[j - 1]),
                          d[i, j - 1] + 1,
                          d[i - 1, j] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("match" if ref[i - 1] == hyp[j - 1] else "sub", i - 1, j - 1))
            i -= 1
            j -= 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ops.append(("ins", j - 1, i - 1))  # i-1: index of preceding ref token
            j -= 1
        else:
            ops.append(("del", i - 1))
            i -= 1
    ops.reverse()
    return ops


@dataclass(frozen=True)
class ScoreReport:
    """Error counts and rates for one hypothesis set (optionally with a
    per-split breakdown when merged across splits)."""

    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    ref_len_a: int
    ref_len_b: int
    errors_a: int
    errors_b: int
    per_split: dict = field(default_factory=dict)

    @staticmethod
    def _rate(errors: int, length: int) -> float:
        if length == 0:
            return 0.0 if errors == 0 else float("inf")
        return errors / length

    @property
    def error_count(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def mixed_error_rate(self) -> float:
        return self._rate(self.error_count, self.ref_len)

    @property
    def lang_a_rate(self) -> float:
        return self._rate(self.errors_a, self.ref_len_a)

    @property
    def lang_b_rate(self) -> float:
        return self._rate(self.errors_b, self.ref_len_b)

    @classmethod
    def merge(cls, named: dict[str, "ScoreReport"]) -> "ScoreReport":
        tot = dict(substitutions=0, insertions=0, deletions=0, ref_len=0,
                   ref_len_a=0, ref_len_b=0, errors_a=0, errors_b=0)
        for rep in named.values():
            for k in tot:
                tot[k] += getattr(rep, k)
        return cls(**tot, per_split=dict(named))


def compute_mer(refs: list[TokenSequence], hyps: list[TokenSequence],
                vocab: Vocabulary) -> ScoreReport:
    """Mixed and per-language token error rates over aligned lists."""
    if len(refs) != len(hyps):
        raise LengthMismatch(f"{len(refs)} refs vs {len(hyps)} hyps")
    subs = ins = dels = 0
    ref_len = ref_a = ref_b = err_a = err_b = 0
    for ref, hyp in zip(refs, hyps):
        sides = [vocab.side_of(t) for t in ref.ids]
        ref_len += len(ref)
        ref_a += sides.count("A")
        ref_b += sides.count("B")
        for op in align_ops(ref.ids, hyp.ids):
            kind = op[0]
            if kind == "match":
                continue
            if kind == "sub":
                lang = sides[op[1]]
                subs += 1
            elif kind == "del":
                lang = sides[op[1]]
                dels += 1
            else:  # insertion: preceding ref token's language, else following
                ins += 1
                prev_i = op[2]
                if sides:
                    lang = sides[prev_i] if prev_i >= 0 else sides[0]
                else:
                    # empty reference: fall back to the inserted token's side
                    lang = vocab.side_of(hyp.ids[op[1]])
            if lang == "A":
                err_a += 1
            else:
                err_b += 1
    return ScoreReport(subs, ins, dels, ref_len, ref_a, ref_b, err_a, err_b)


# ---------------------------------------------------------------------------
# Gating and separation analyses on a trained model.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GatingReport:
    split: str
    mean_gate_a_on_true_a: float
    mean_gate_a_on_true_b: float
    n_frames_a: int
    n_frames_b: int


@dataclass(frozen=True)
class SeparationReport:
    split: str
    mean_cosine_distance: float
    percentiles: dict            # {10: .., 50: .., 90: ..}
    mean_gate_a_on_true_a: float | None
    mean_gate_a_on_true_b: float | None
    points: list | None          # rows (frame_id, expert, x, y, true_lang)


def _expert_pass(model: Model, utt: Utterance):
    tape = Tape()
    return encode_utterance(tape, utt.features, model.params, model.cfg,
                            model.system)


def _frame_langs(utt: Utterance, vocab: Vocabulary):
    langs = utt.frame_languages(vocab)
    if len(langs) != utt.n_frames:
        raise ValueError(f"{utt.id}: no usable frame segmentation")
    return langs


def gating_report(model: Model, split: DatasetSplit,
                  vocab: Vocabulary) -> GatingReport:
    """Mean gate weight for the A expert over true-A and true-B frames."""
    if model.system != "moe_lae":
        raise ValueError("gating_report needs a moe_lae model")
    acc = {"A": [0.0, 0], "B": [0.0, 0]}
    for utt in split.utterances:
        res = _expert_pass(model, utt)
        g_a = res.gating.weights.data[:, 0]
        for lang, w in zip(_frame_langs(utt, vocab), g_a):
            acc[lang][0] += float(w)
            acc[lang][1] += 1
    return GatingReport(
        split=split.name,
        mean_gate_a_on_true_a=acc["A"][0] / acc["A"][1] if acc["A"][1] else 0.0,
        mean_gate_a_on_true_b=acc["B"][0] / acc["B"][1] if acc["B"][1] else 0.0,
        n_frames_a=acc["A"][1],
        n_frames_b=acc["B"][1],
    )


def _cosine_distances(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    dots = (u * v).sum(axis=-1)
    uu = (u * u).sum(axis=-1)
    vv = (v * v).sum(axis=-1)
    bad = (uu < 1e-24) | (vv < 1e-24)
    cross = np.sqrt(np.where(bad, 1.0, uu * vv))
    cos = np.clip(np.where(bad, 1.0, dots / cross), -1.0, 1.0)
    return 1.0 - cos


def pca_project(points: np.ndarray) -> np.ndarray:
    """Top-2 principal components with a fixed sign convention: each
    component's largest-magnitude loading is positive."""
    if np.unique(points, axis=0).shape[0] < 3:
        raise DegenerateCovariance("fewer than 3 distinct frames")
    centered = points - points.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(points.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, np.argsort(vals)[::-1][:2]]
    for k in range(comps.shape[1]):
        lead = np.argmax(np.abs(comps[:, k]))
        if comps[lead, k] < 0:
            comps[:, k] = -comps[:, k]
    return centered @ comps


def separation_stats(model: Model, split: DatasetSplit,
                     vocab: Vocabulary) -> SeparationReport:
    """Per-frame expert cosine distances plus the 2-D projection of the
    pooled expert outputs; gate means included for gated systems."""
    if model.system == "baseline_single":
        raise ValueError("separation_stats needs a two-expert model")
    cds = []
    man_rows, eng_rows = [], []
    ids = []
    gate_acc = {"A": [0.0, 0], "B": [0.0, 0]}
    langs_all = []
    for utt in split.utterances:
        res = _expert_pass(model, utt)
        hm = res.h_man.frames.data
        he = res.h_eng.frames.data
        cds.append(_cosine_distances(hm, he))
        man_rows.append(hm)
        eng_rows.append(he)
        langs = _frame_langs(utt, vocab)
        langs_all.extend(langs)
        ids.extend(f"{utt.id}:{k}" for k in range(utt.n_frames))
        if res.gating is not None:
            for lang, w in zip(langs, res.gating.weights.data[:, 0]):
                gate_acc[lang][0] += float(w)
                gate_acc[lang][1] += 1
    cds = np.concatenate(cds) if cds else np.zeros(0)
    pooled = np.vstack(man_rows + eng_rows) if man_rows else np.zeros((0, 1))
    try:
        proj = pca_project(pooled)
    except DegenerateCovariance:
        proj = None
    points = None
    if proj is not None:
        n = len(ids)
        points = []
        for k in range(n):
            points.append((ids[k], "man", float(proj[k, 0]), float(proj[k, 1]),
                           langs_all[k]))
        for k in range(n):
            points.append((ids[k], "eng", float(proj[n + k, 0]),
                           float(proj[n + k, 1]), langs_all[k]))
    has_gate = gate_acc["A"][1] or gate_acc["B"][1]
    return SeparationReport(
        split=split.name,
        mean_cosine_distance=float(cds.mean()) if cds.size else 0.0,
        percentiles={p: float(np.percentile(cds, p)) if cds.size else 0.0
                     for p in (10, 50, 90)},
        mean_gate_a_on_true_a=(gate_acc["A"][0] / gate_acc["A"][1]
                               if has_gate and gate_acc["A"][1] else None),
        mean_gate_a_on_true_b=(gate_acc["B"][0] / gate_acc["B"][1]
                               if has_gate and gate_acc["B"][1] else None),
        points=points,
    )


# ---------------------------------------------------------------------------
# Delimited outputs.  Column sets are fixed; see README for the data
# dictionary.
# ---------------------------------------------------------------------------

SCORE_COLUMNS = ("system", "split", "decoder", "lang_a_rate", "lang_b_rate",
                 "mer", "substitutions", "insertions", "deletions", "ref_len")
GATING_COLUMNS = ("system", "split", "mean_gate_a_on_true_a",
                  "mean_gate_a_on_true_b", "n_frames_a", "n_frames_b")
PROJECTION_COLUMNS = ("frame_id", "expert", "x", "y", "true_lang")
SEPARATION_COLUMNS = ("system", "split", "mean_cosine_distance",
                      "p10", "p50", "p90")


def _fmt_cell(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(c) for c in row) + "\n")


def score_row(system: str, split: str, decoder: str, report: ScoreReport):
    return (system, split, decoder, report.lang_a_rate, report.lang_b_rate,
            report.mixed_error_rate, report.substitutions, report.insertions,
            report.deletions, report.ref_len)


def gating_row(system: str, rep: GatingReport):
    return (system, rep.split, rep.mean_gate_a_on_true_a,
            rep.mean_gate_a_on_true_b, rep.n_frames_a, rep.n_frames_b)


def separation_row(system: str, rep: SeparationReport):
    return (system, rep.split, rep.mean_cosine_distance,
            rep.percentiles[10], rep.percentiles[50], rep.percentiles[90])
