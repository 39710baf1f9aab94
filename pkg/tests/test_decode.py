import math

import numpy as np
import pytest

from cslab.decode import (
    Hypothesis,
    collapse,
    greedy_decode,
    prefix_beam_decode,
    strip_masks,
)
from cslab.objective import TokenSequence, Vocabulary
from cslab.tensorcore import Tensor


def enumerate_best(logp, blank=0):
    """Brute force: total mass per collapsed string; best with lexicographic
    tie-break.  Returns (tokens, log_mass)."""
    import itertools
    t_len, v = logp.shape
    masses = {}
    for path in itertools.product(range(v), repeat=t_len):
        key = collapse(path, blank).ids
        score = sum(logp[t, s] for t, s in enumerate(path))
        masses[key] = np.logaddexp(masses.get(key, -np.inf), score)
    best = min(masses.items(), key=lambda kv: (-kv[1], kv[0]))
    return best[0], best[1]


def sharp_logp(rng, t_len, v, sharpness=1.0):
    logits = rng.normal(size=(t_len, v)) * sharpness
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot_logp(symbols, v):
    eps = 1e-9
    rows = np.full((len(symbols), v), np.log(eps / (v - 1)))
    for t, s in enumerate(symbols):
        rows[t, s] = np.log(1.0 - eps)
    return rows


def test_collapse_canonical_cases():
    assert collapse([1, 1, 0, 2]).ids == (1, 2)
    assert collapse([1, 0, 1]).ids == (1, 1)
    assert collapse([0, 0]).ids == ()


def test_greedy_one_hot_case():
    logp = one_hot_logp([1, 1, 0, 2], v=3)
    hyp = greedy_decode(Tensor(logp))
    assert hyp.tokens.ids == (1, 2)
    assert hyp.score <= 0.0


def test_greedy_all_blank():
    logp = one_hot_logp([0, 0, 0], v=3)
    assert greedy_decode(Tensor(logp)).tokens.ids == ()


def test_greedy_tie_breaks_to_lowest_index():
    logp = np.log(np.full((2, 3), 1.0 / 3.0))
    assert greedy_decode(Tensor(logp)).tokens.ids == ()  # argmax -> index 0 = blank


def test_beam_one_hot_any_width():
    logp = one_hot_logp([1, 0, 1, 2], v=3)
    for width in (1, 2, 10):
        hyp = prefix_beam_decode(Tensor(logp), width)
        assert hyp.tokens.ids == (1, 1, 2)


def test_beam_width_one_matches_greedy_when_path_dominates():
    rng = np.random.default_rng(40)
    checked = 0
    while checked < 100:
        t_len = int(rng.integers(1, 6))
        v = int(rng.integers(2, 5))
        logp = sharp_logp(rng, t_len, v, sharpness=4.0)
        greedy = greedy_decode(Tensor(logp))
        if math.exp(greedy.score) <= 0.5:
            continue
        beam = prefix_beam_decode(Tensor(logp), width=1)
        assert beam.tokens.ids == greedy.tokens.ids
        checked += 1


def test_beam_exhaustive_matches_enumeration():
    rng = np.random.default_rng(41)
    for _ in range(30):
        t_len = int(rng.integers(1, 5))
        v = int(rng.integers(2, 4))
        logp = sharp_logp(rng, t_len, v)
        width = v ** t_len + 1
        hyp = prefix_beam_decode(Tensor(logp), width)
        want_tokens, want_mass = enumerate_best(logp)
        assert hyp.tokens.ids == want_tokens
        assert abs(hyp.score - want_mass) < 1e-9


def test_beam_mass_monotone_in_width():
    rng = np.random.default_rng(42)
    for _ in range(20):
        logp = sharp_logp(rng, 5, 4)
        masses = [prefix_beam_decode(Tensor(logp), w).score for w in (1, 2, 4, 8, 64)]
        for a, b in zip(masses, masses[1:]):
            assert b >= a - 1e-12


def test_beam_deterministic():
    rng = np.random.default_rng(43)
    logp = sharp_logp(rng, 6, 4)
    a = prefix_beam_decode(Tensor(logp), 3)
    b = prefix_beam_decode(Tensor(logp), 3)
    assert a == b


def test_beam_rejects_bad_width():
    with pytest.raises(ValueError):
        prefix_beam_decode(Tensor(np.zeros((1, 2))), 0)


def test_strip_masks():
    vocab = Vocabulary(
        symbols=("<blank>", "a1", "b1", "<A>", "<B>"),
        tags=("blank", "A", "B", "mask_A", "mask_B"),
    )
    toks = TokenSequence((1, 3, 2, 4, 1))
    assert strip_masks(toks, vocab).ids == (1, 2, 1)
