"""Training losses: masked-target CTC, mixture CTC, cosine disentanglement.

The CTC negative log-likelihood and the per-utterance mean cosine distance
are registered as tape primitives with analytic vector-Jacobian products,
so the whole objective is differentiable end to end.  Both carry an
independent check: ``ctc_oracle`` enumerates alignment paths outright, and
the disentanglement gradient is covered by finite differences in the tests.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tensorcore import Tape, Tensor, register_primitive

NEG_INF = float("-inf")


class UnknownToken(ValueError):
    """A token index is outside the vocabulary or illegal in context."""


class TooLarge(ValueError):
    """The enumeration oracle was asked for an instance it cannot afford."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered symbol list with per-symbol language tags; blank at index 0."""

    symbols: tuple[str, ...]
    tags: tuple[str, ...]  # each: blank | A | B | mask_A | mask_B

    def __post_init__(self):
        if len(self.symbols) != len(self.tags):
            raise ValueError("symbols and tags must align")
        if self.tags.count("blank") != 1 or self.tags[0] != "blank":
            raise ValueError("exactly one blank, at index 0")
        for m in ("mask_A", "mask_B"):
            if self.tags.count(m) != 1:
                raise ValueError(f"exactly one {m} symbol required")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def blank(self) -> int:
        return 0

    def tag_of(self, index: int) -> str:
        if not 0 <= index < self.size:
            raise UnknownToken(f"index {index} outside vocabulary of {self.size}")
        return self.tags[index]

    def side_of(self, index: int) -> str:
        """Language side of a non-blank symbol: masks count as their language."""
        tag = self.tag_of(index)
        if tag in ("A", "mask_A"):
            return "A"
        if tag in ("B", "mask_B"):
            return "B"
        raise UnknownToken(f"index {index} is blank, not a language token")

    def mask_index(self, lang: str) -> int:
        return self.tags.index(f"mask_{lang}")

    def is_mask(self, index: int) -> bool:
        return self.tag_of(index) in ("mask_A", "mask_B")


@dataclass(frozen=True)
class TokenSequence:
    """Blank-free token indices; language tags come from the vocabulary."""

    ids: tuple[int, ...]

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def validate(self, vocab: Vocabulary) -> None:
        for i in self.ids:
            if not 0 <= i < vocab.size:
                raise UnknownToken(f"token {i} outside vocabulary")
            if i == vocab.blank:
                raise UnknownToken("target contains blank")


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """All scalar loss terms of one training step."""

    l_man: float
    l_eng: float
    l_lang: float
    l_mix: float
    l_cd: float
    l_total: float

    def check_identities(self, lam: float) -> None:
        assert self.l_lang == (self.l_man + self.l_eng) * 0.5
        assert self.l_total == 0.5 * (self.l_mix + self.l_lang) + lam * self.l_cd
        assert -2.0 <= self.l_cd <= 0.0


def lat_mask(y: TokenSequence, keep_lang: str, vocab: Vocabulary) -> TokenSequence:
    """Language-aware target: collapse each run of the other language's
    tokens to a single mask symbol of that language."""
    if keep_lang not in ("A", "B"):
        raise ValueError(f"keep_lang must be A or B, got {keep_lang!r}")
    y.validate(vocab)
    other = "B" if keep_lang == "A" else "A"
    mask = vocab.mask_index(other)
    out: list[int] = []
    in_run = False
    for tok in y.ids:
        if vocab.side_of(tok) == keep_lang:
            out.append(tok)
            in_run = False
        else:
            if not in_run:
                out.append(mask)
                in_run = True
    return TokenSequence(tuple(out))


# ---------------------------------------------------------------------------
# CTC negative log-likelihood over the blank-augmented target, in log space.
# ---------------------------------------------------------------------------


def _ctc_tables(labels: tuple[int, ...], blank: int):
    s = len(labels)
    m = 2 * s + 1
    aug = np.full(m, blank, dtype=np.intp)
    aug[1::2] = labels
    # skip transition s-2 -> s exists only into a non-blank that differs
    # from the previous non-blank
    skip = [i for i in range(3, m, 2) if aug[i] != aug[i - 2]]
    return aug, np.asarray(skip, dtype=np.intp)


def _ctc_alpha(logp: np.ndarray, aug: np.ndarray, skip: np.ndarray):
    t_len = logp.shape[0]
    m = aug.shape[0]
    em = logp[:, aug]  # (T, M) emission scores of augmented states
    alpha = np.empty((t_len, m))
    alpha[0] = NEG_INF
    alpha[0, 0] = em[0, 0]
    if m > 1:
        alpha[0, 1] = em[0, 1]
    has_skip = skip.size > 0
    skip_src = skip - 2
    for t in range(1, t_len):
        prev = alpha[t - 1]
        cur = alpha[t]
        cur[0] = prev[0]
        np.logaddexp(prev[1:], prev[:-1], out=cur[1:])
        if has_skip:
            cur[skip] = np.logaddexp(cur[skip], prev[skip_src])
        cur += em[t]
    return alpha, em


def _ctc_beta(em: np.ndarray, aug: np.ndarray, skip: np.ndarray):
    t_len, m = em.shape
    beta = np.empty((t_len, m))
    beta[t_len - 1] = NEG_INF
    beta[t_len - 1, m - 1] = 0.0
    if m > 1:
        beta[t_len - 1, m - 2] = 0.0
    has_skip = skip.size > 0
    skip_src = skip - 2
    nxt = np.empty(m)
    for t in range(t_len - 2, -1, -1):
        np.add(beta[t + 1], em[t + 1], out=nxt)
        cur = beta[t]
        cur[m - 1] = nxt[m - 1]
        np.logaddexp(nxt[:-1], nxt[1:], out=cur[:-1])
        if has_skip:
            cur[skip_src] = np.logaddexp(cur[skip_src], nxt[skip])
    return beta


def _ctc_fwd(inputs, attrs):
    (logp,) = inputs
    labels = attrs["labels"]
    blank = attrs.get("blank", 0)
    t_len, v = logp.shape
    aug, skip = _ctc_tables(labels, blank)
    required = len(labels) + sum(
        1 for a, b in zip(labels, labels[1:]) if a == b)
    if t_len < required:
        return np.asarray(float("inf")), None  # infeasible: no valid alignment
    alpha, em = _ctc_alpha(logp, aug, skip)
    m = aug.shape[0]
    tail = alpha[t_len - 1, m - 1]
    if m > 1:
        tail = np.logaddexp(tail, alpha[t_len - 1, m - 2])
    loss = -tail
    if not np.isfinite(loss):  # zero-probability target: flat inf, no gradient
        return np.asarray(float("inf")), None
    ctx = (logp.shape, aug, skip, alpha, em, float(-loss))
    return np.asarray(float(loss)), ctx


def _ctc_bwd(ctx, g):
    if ctx is None:
        return (None,)  # infeasible target: zero gradient
    shape, aug, skip, alpha, em, log_z = ctx
    beta = _ctc_beta(em, aug, skip)
    post = np.exp(alpha + beta - log_z)  # (T, M) state posteriors
    grad = np.zeros(shape)
    for s in range(aug.shape[0]):
        grad[:, aug[s]] -= post[:, s]
    return (grad * float(g),)


register_primitive("ctc_nll", _ctc_fwd, _ctc_bwd, allows_nonfinite=True)


def ctc_loss(tape: Tape, log_probs: Tensor, y: TokenSequence,
             blank: int = 0) -> Tensor:
    """-log P(y | log_probs) by the forward recursion over the
    blank-augmented target; differentiable w.r.t. log_probs.

    Infeasible targets (alignment would need more than L frames) come back
    as +inf with a zero gradient; callers test with :func:`is_infeasible`.
    """
    if any(i == blank for i in y.ids):
        raise UnknownToken("CTC target contains blank")
    return tape.apply_primitive("ctc_nll", [log_probs],
                                {"labels": tuple(y.ids), "blank": blank})


def is_infeasible(loss: Tensor) -> bool:
    return not np.isfinite(loss.data)


def ctc_oracle(log_probs: Tensor, y: TokenSequence, blank: int = 0) -> float:
    """Brute-force CTC: sum the probability of every length-L path whose
    blank-collapse equals y.  Exponential; only for tiny instances."""
    logp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    t_len, v = logp.shape
    if t_len > 8 or v > 5:
        raise TooLarge(f"oracle limited to L<=8, vocab<=5; got {t_len}, {v}")
    target = tuple(y.ids)
    total = NEG_INF
    for path in itertools.product(range(v), repeat=t_len):
        collapsed = []
        prev = None
        for sym in path:
            if sym != prev and sym != blank:
                collapsed.append(sym)
            prev = sym
        if tuple(collapsed) == target:
            score = 0.0
            for t, sym in enumerate(path):
                score += logp[t, sym]
            total = np.logaddexp(total, score)
    return float(-total)


# ---------------------------------------------------------------------------
# Cosine-distance disentanglement between the two experts' frame embeddings.
# ---------------------------------------------------------------------------


class _ZeroNormDiagnostics:
    """Counts frames whose expert embedding had (near-)zero norm."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


zero_norm_frames = _ZeroNormDiagnostics()

_NORM_FLOOR = 1e-12


def _cosine_mean_fwd(inputs, attrs):
    u, v = inputs
    if u.shape != v.shape or u.ndim != 2:
        from .tensorcore import ShapeMismatch
        raise ShapeMismatch(f"cosine_distance_mean: {u.shape} vs {v.shape}")
    dots = (u * v).sum(axis=-1)
    uu = (u * u).sum(axis=-1)
    vv = (v * v).sum(axis=-1)
    degenerate = (uu < _NORM_FLOOR ** 2) | (vv < _NORM_FLOOR ** 2)
    if degenerate.any():
        zero_norm_frames.count += int(degenerate.sum())
    # sqrt(uu*vv) keeps cos exactly +-1 for parallel vectors, so the anchor
    # values 0/-1/-2 come out exact; clip guards the odd ulp overshoot
    cross = np.sqrt(np.where(degenerate, 1.0, uu * vv))
    cos = np.clip(np.where(degenerate, 1.0, dots / cross), -1.0, 1.0)
    cd = 1.0 - cos
    out = cd.mean()
    return np.asarray(out), (u, v, uu, vv, cross, cos, degenerate)


def _cosine_mean_bwd(ctx, g):
    u, v, uu, vv, cross, cos, degenerate = ctx
    n_rows = u.shape[0]
    safe_uu = np.where(degenerate, 1.0, uu)
    safe_vv = np.where(degenerate, 1.0, vv)
    inv_cross = 1.0 / cross
    # d cos/du = v/(|u||v|) - cos * u/|u|^2 ; CD = 1 - cos flips the sign
    du = -(v * inv_cross[:, None] - (cos / safe_uu)[:, None] * u)
    dv = -(u * inv_cross[:, None] - (cos / safe_vv)[:, None] * v)
    du[degenerate] = 0.0
    dv[degenerate] = 0.0
    scale = float(g) / n_rows
    return du * scale, dv * scale


register_primitive("cosine_distance_mean", _cosine_mean_fwd, _cosine_mean_bwd)


def disentangle_loss(tape: Tape, pairs) -> Tensor:
    """Negated batch mean of per-frame cosine distance between expert
    embeddings: ``-(1/N) sum_i mean_j (1 - cos(h_man_ij, h_eng_ij))``.

    `pairs` holds (h_man, h_eng) per utterance, as HiddenSequence-likes
    exposing ``.frames`` or as plain Tensors.  Minimizing the result pushes
    the experts apart (range [-2, 0]).
    """
    if not pairs:
        raise ValueError("disentangle_loss needs at least one pair")
    per_utt = []
    for h_man, h_eng in pairs:
        u = getattr(h_man, "frames", h_man)
        v = getattr(h_eng, "frames", h_eng)
        per_utt.append(tape.apply_primitive("cosine_distance_mean", [u, v]))
    acc = per_utt[0]
    for term in per_utt[1:]:
        acc = tape.apply_primitive("add", [acc, term])
    return tape.apply_primitive("scale", [acc], {"factor": -1.0 / len(per_utt)})


def scalar_mean(tape: Tape, terms: list[Tensor]) -> Tensor:
    """On-tape arithmetic mean of rank-0 tensors, in the given order."""
    if not terms:
        raise ValueError("scalar_mean of nothing")
    acc = terms[0]
    for t in terms[1:]:
        acc = tape.apply_primitive("add", [acc, t])
    return tape.apply_primitive("scale", [acc], {"factor": 1.0 / len(terms)})


def language_loss(tape: Tape, h_man, h_eng, y: TokenSequence, params: dict,
                  vocab: Vocabulary):
    """Masked-target CTC for both experts plus their average.

    Returns (l_man, l_eng, l_lang) as recorded scalars; l_lang is the
    arithmetic mean of the two.
    """
    from .encoder import project_to_logits

    y_man = lat_mask(y, "A", vocab)
    y_eng = lat_mask(y, "B", vocab)
    out = []
    for h, target, head in ((h_man, y_man, "man"), (h_eng, y_eng, "eng")):
        logits = project_to_logits(tape, h, params, head)
        logp = tape.apply_primitive("log_softmax_last_dim", [logits])
        out.append(ctc_loss(tape, logp, target, blank=vocab.blank))
    l_man, l_eng = out
    half_sum = tape.apply_primitive("add", [l_man, l_eng])
    l_lang = tape.apply_primitive("scale", [half_sum], {"factor": 0.5})
    return l_man, l_eng, l_lang


def total_loss(tape: Tape, l_mix: Tensor, l_lang: Tensor,
               l_cd: Tensor | None, cfg: ObjectiveConfig) -> Tensor:
    """0.5 (L_mix + L_lang) + lambda * L_cd; the last term is omitted
    entirely when disentanglement is off (l_cd None or lambda 0)."""
    base = tape.apply_primitive("add", [l_mix, l_lang])
    base = tape.apply_primitive("scale", [base], {"factor": 0.5})
    if l_cd is None or cfg.lam == 0:
        return base
    weighted = tape.apply_primitive("scale", [l_cd], {"factor": cfg.lam})
    return tape.apply_primitive("add", [base, weighted])
