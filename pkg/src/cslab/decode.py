"""CTC decoding: blank-collapse, greedy best path, prefix beam search."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import TokenSequence, Vocabulary, _ctc_alpha, _ctc_tables
from .tensorcore import Tensor

NEG_INF = float("-inf")


def _exact_log_mass(logp: np.ndarray, labels: tuple[int, ...], blank: int) -> float:
    """log P(collapsed string | log_probs) by the forward recursion."""
    aug, skip = _ctc_tables(labels, blank)
    alpha, _ = _ctc_alpha(logp, aug, skip)
    m = aug.shape[0]
    tail = alpha[-1, m - 1]
    if m > 1:
        tail = np.logaddexp(tail, alpha[-1, m - 2])
    return float(tail)


@dataclass(frozen=True)
class Hypothesis:
    tokens: TokenSequence
    score: float  # log-probability


def collapse(path, blank: int = 0) -> TokenSequence:
    """Dedupe adjacent repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for sym in path:
        if sym != prev and sym != blank:
            out.append(int(sym))
        prev = sym
    return TokenSequence(tuple(out))


def strip_masks(tokens: TokenSequence, vocab: Vocabulary) -> TokenSequence:
    """Remove language-mask symbols (model errors on the mix head)."""
    return TokenSequence(tuple(t for t in tokens.ids if not vocab.is_mask(t)))


def greedy_decode(log_probs: Tensor, blank: int = 0) -> Hypothesis:
    """Best path: per-frame argmax (ties to the lowest index), collapsed.

    The score is the log-mass of the chosen path, not of the collapsed
    string."""
    logp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    picks = logp.argmax(axis=-1)
    score = float(logp[np.arange(logp.shape[0]), picks].sum())
    return Hypothesis(collapse(picks, blank), score)


def prefix_beam_decode(log_probs: Tensor, width: int, blank: int = 0) -> Hypothesis:
    """CTC prefix beam search.

    Per prefix we track (log-mass ending in blank, log-mass ending in the
    last symbol) and at each frame fold in stay/extend/repeat transitions.
    The accumulated masses steer the pruning; the survivors are then
    rescored exactly (forward recursion per string) so the reported score
    is the true collapsed-string probability and never decreases when the
    beam widens.  Ties break toward the lexicographically smaller token
    sequence.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    logp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    t_len, v = logp.shape
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(t_len):
        row = logp[t]
        nxt: dict[tuple[int, ...], tuple[float, float]] = {}
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            # emit blank: prefix unchanged, mass moves to the blank bucket
            b_old = nxt.get(prefix, (NEG_INF, NEG_INF))
            nxt[prefix] = (np.logaddexp(b_old[0], total + row[blank]), b_old[1])
            last = prefix[-1] if prefix else None
            for c in range(v):
                if c == blank:
                    continue
                p_c = row[c]
                if c == last:
                    # repeat without extension needs the non-blank bucket;
                    # extension is only reachable through a blank gap
                    cur = nxt.get(prefix, (NEG_INF, NEG_INF))
                    nxt[prefix] = (cur[0], np.logaddexp(cur[1], pnb + p_c))
                    ext = prefix + (c,)
                    cur = nxt.get(ext, (NEG_INF, NEG_INF))
                    nxt[ext] = (cur[0], np.logaddexp(cur[1], pb + p_c))
                else:
                    ext = prefix + (c,)
                    cur = nxt.get(ext, (NEG_INF, NEG_INF))
                    nxt[ext] = (cur[0], np.logaddexp(cur[1], total + p_c))
        ranked = sorted(nxt.items(),
                        key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
        beams = dict(ranked[:width])
    rescored = [(prefix, _exact_log_mass(logp, prefix, blank)) for prefix in beams]
    best_prefix, mass = min(rescored, key=lambda kv: (-kv[1], kv[0]))
    return Hypothesis(TokenSequence(best_prefix), mass)
