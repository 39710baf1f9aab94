"""Synthetic bilingual code-switching corpus.

Stands in for a licensed conversational corpus: two symbolic languages
whose token emissions live in disjoint halves of the feature space, with
utterance-level language runs driven by a two-state Markov chain.  Four
splits mirror the usual layout: train/valid plus two dev sets whose
language ratios are opposite (A-heavy 74/26 vs B-heavy 37/63), the
B-heavy one being the switch-rich, harder condition.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .objective import TokenSequence, Vocabulary
from .tensorcore import Tensor

FORMAT_HEADER = "cslab-corpus v1"
SPLIT_NAMES = ("train", "valid", "dev_A_heavy", "dev_B_heavy")


class InfeasibleSpec(ValueError):
    pass


class FormatVersionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """Generator knobs.  Defaults give a minutes-scale CPU corpus whose
    language identity is recoverable from the features but whose token
    identity stays genuinely noisy."""

    n_a: int = 12
    n_b: int = 12
    feature_dim: int = 16
    t_min: int = 3
    t_max: int = 5
    p_switch: float = 0.4           # switching intensity knob of the chain
    noise_sigma: float = 0.8
    min_tokens: int = 4
    max_tokens: int = 10
    mean_scale: float = 1.0
    split_sizes: dict = field(default_factory=lambda: {
        "train": 2000, "valid": 200, "dev_A_heavy": 200, "dev_B_heavy": 200})
    ratios: dict = field(default_factory=lambda: {
        "train": 0.68, "valid": 0.67, "dev_A_heavy": 0.74, "dev_B_heavy": 0.37})
    seed: int = 7

    def __post_init__(self):
        if self.n_a < 1 or self.n_b < 1:
            raise InfeasibleSpec("need at least one token per language")
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise InfeasibleSpec("feature_dim must be even and >= 2")
        if self.t_min < 3:
            # a 3-frame floor guarantees L >= 2S+1 even for all-repeat targets
            raise InfeasibleSpec("t_min < 3 cannot guarantee CTC feasibility")
        if self.t_max < self.t_min:
            raise InfeasibleSpec("t_max < t_min")
        if not 0.0 <= self.p_switch <= 1.0:
            raise InfeasibleSpec("p_switch must be in [0, 1]")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise InfeasibleSpec("bad utterance length range")
        for name, r in self.ratios.items():
            if not 0.0 < r < 1.0:
                raise InfeasibleSpec(f"ratio for {name} must be in (0,1)")
        if set(self.split_sizes) != set(self.ratios):
            raise InfeasibleSpec("split_sizes and ratios must name the same splits")


@dataclass(frozen=True)
class Utterance:
    id: str
    features: Tensor                 # L x D
    reference: TokenSequence
    switch_count: int
    durations: tuple[int, ...]       # frames per reference token

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def frame_languages(self, vocab: Vocabulary) -> tuple[str, ...]:
        """Ground-truth per-frame language from the generator segmentation."""
        out: list[str] = []
        for tok, dur in zip(self.reference.ids, self.durations):
            out.extend([vocab.side_of(tok)] * dur)
        return tuple(out)


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    utterances: tuple[Utterance, ...]
    realized_ratio: float  # fraction of language-A tokens

    @property
    def n_tokens(self) -> int:
        return sum(len(u.reference) for u in self.utterances)

    def switches_per_token(self) -> float:
        toks = self.n_tokens
        return sum(u.switch_count for u in self.utterances) / toks if toks else 0.0


def build_vocabulary(spec: SynthSpec) -> Vocabulary:
    """[blank, A tokens..., B tokens..., <A>, <B>] with language tags."""
    symbols = ["<blank>"]
    tags = ["blank"]
    for i in range(spec.n_a):
        symbols.append(f"a{i}")
        tags.append("A")
    for i in range(spec.n_b):
        symbols.append(f"b{i}")
        tags.append("B")
    symbols += ["<A>", "<B>"]
    tags += ["mask_A", "mask_B"]
    return Vocabulary(tuple(symbols), tuple(tags))


def token_means(spec: SynthSpec) -> np.ndarray:
    """Per-token emission means (vocab_size x D); language A occupies the
    first half of the coordinates, language B the second, masks/blank zero."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 99]))
    v = spec.n_a + spec.n_b + 3
    half = spec.feature_dim // 2
    means = np.zeros((v, spec.feature_dim))
    for i in range(spec.n_a):
        means[1 + i, :half] = rng.normal(0.0, spec.mean_scale, size=half)
    for i in range(spec.n_b):
        means[1 + spec.n_a + i, half:] = rng.normal(0.0, spec.mean_scale, size=half)
    return means


def _sample_utterance(rng, spec: SynthSpec, vocab: Vocabulary, means,
                      target_ratio: float, tok_a: int, tok_total: int,
                      remaining: int, uid: str) -> Utterance:
    # steer the chain so the split's token ratio closes its deficit, spread
    # over the remaining utterances: early corrections are gentle (keeping
    # per-utterance dynamics near the target, which preserves the splits'
    # switch-rate ordering) and sharpen only toward the end of the split
    mean_len = 0.5 * (spec.min_tokens + spec.max_tokens)
    horizon = max(remaining, 1) * mean_len
    wanted_a = target_ratio * (tok_total + horizon) - tok_a
    r = float(np.clip(wanted_a / horizon, 0.02, 0.98))
    k = spec.p_switch
    p_ab = min(1.0, k * (1.0 - r))   # stationary fraction of A stays r
    p_ba = min(1.0, k * r)
    n_tokens = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    lang = "A" if rng.random() < r else "B"
    tokens: list[int] = []
    langs: list[str] = []
    for _ in range(n_tokens):
        if lang == "A":
            tokens.append(1 + int(rng.integers(spec.n_a)))
        else:
            tokens.append(1 + spec.n_a + int(rng.integers(spec.n_b)))
        langs.append(lang)
        flip = p_ab if lang == "A" else p_ba
        if rng.random() < flip:
            lang = "B" if lang == "A" else "A"
    switch_count = sum(1 for a, b in zip(langs, langs[1:]) if a != b)
    durations = tuple(int(d) for d in
                      rng.integers(spec.t_min, spec.t_max + 1, size=n_tokens))
    frames = []
    for tok, dur in zip(tokens, durations):
        base = means[tok]
        noise = rng.normal(0.0, spec.noise_sigma, size=(dur, spec.feature_dim)) \
            if spec.noise_sigma > 0 else np.zeros((dur, spec.feature_dim))
        frames.append(base + noise)
    return Utterance(
        id=uid,
        features=Tensor(np.vstack(frames)),
        reference=TokenSequence(tuple(tokens)),
        switch_count=switch_count,
        durations=durations,
    )


def generate_corpus(spec: SynthSpec) -> list[DatasetSplit]:
    """Deterministic four-split corpus; every utterance satisfies the CTC
    feasibility bound L >= 2S+1 by the t_min >= 3 floor."""
    vocab = build_vocabulary(spec)
    means = token_means(spec)
    order = [n for n in SPLIT_NAMES if n in spec.split_sizes] + \
        [n for n in spec.split_sizes if n not in SPLIT_NAMES]
    splits = []
    for si, name in enumerate(order):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, si]))
        target = spec.ratios[name]
        utts = []
        tok_a = tok_total = 0
        n_utts = spec.split_sizes[name]
        for ui in range(n_utts):
            utt = _sample_utterance(rng, spec, vocab, means, target,
                                    tok_a, tok_total, n_utts - ui,
                                    uid=f"{name}-{ui:05d}")
            assert utt.n_frames >= 2 * len(utt.reference) + 1
            utts.append(utt)
            tok_a += sum(1 for t in utt.reference.ids if vocab.side_of(t) == "A")
            tok_total += len(utt.reference)
        realized = tok_a / tok_total if tok_total else 0.0
        if abs(realized - target) > 0.03:
            raise InfeasibleSpec(
                f"{name}: realized ratio {realized:.3f} misses target {target:.2f}")
        splits.append(DatasetSplit(name, tuple(utts), realized))
    return splits


# ---------------------------------------------------------------------------
# On-disk format, one file per split:
#   header "cslab-corpus v1 <n_utts> <D>"
#   per utterance:    "id L S switch_count"
#                     "token:lang token:lang ..." (blank line when S = 0)
#                     L lines of D floats at 17 significant digits
# Durations ride in a sidecar so ground-truth frame languages survive the
# round trip without touching the primary format.
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_dataset(splits: list[DatasetSplit], path, vocab: Vocabulary) -> None:
    from pathlib import Path
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "vocab.txt", "w", encoding="utf-8") as fh:
        for i, (sym, tag) in enumerate(zip(vocab.symbols, vocab.tags)):
            fh.write(f"{i} {sym} {tag}\n")
    for split in splits:
        d = split.utterances[0].features.shape[1] if split.utterances else 0
        with open(root / f"{split.name}.txt", "w", encoding="utf-8") as fh:
            fh.write(f"{FORMAT_HEADER} {len(split.utterances)} {d}\n")
            for u in split.utterances:
                s = len(u.reference)
                fh.write(f"{u.id} {u.n_frames} {s} {u.switch_count}\n")
                pairs = " ".join(f"{t}:{vocab.side_of(t)}" for t in u.reference.ids)
                fh.write(pairs + "\n")
                for row in u.features.data:
                    fh.write(" ".join(_fmt(x) for x in row) + "\n")
        with open(root / f"{split.name}.durations", "w", encoding="utf-8") as fh:
            for u in split.utterances:
                fh.write(u.id + " " + " ".join(str(d) for d in u.durations) + "\n")


def read_dataset(path) -> list[DatasetSplit]:
    from pathlib import Path
    root = Path(path)
    known = [n for n in SPLIT_NAMES if (root / f"{n}.txt").exists()]
    extra = sorted(p.stem for p in root.glob("*.txt")
                   if p.stem not in SPLIT_NAMES and p.name != "vocab.txt")
    splits = []
    for name in known + extra:
        f = root / f"{name}.txt"
        durations = {}
        dur_file = root / f"{name}.durations"
        if dur_file.exists():
            for line in dur_file.read_text(encoding="utf-8").splitlines():
                parts = line.split(" ")
                durations[parts[0]] = tuple(int(x) for x in parts[1:])
        with open(f, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            fields = header.rsplit(" ", 2)
            if fields[0] != FORMAT_HEADER:
                raise FormatVersionMismatch(f"bad header in {f}: {header!r}")
            n_utts = int(fields[1])
            utts = []
            tok_a = tok_total = 0
            for _ in range(n_utts):
                uid, l_str, s_str, sw_str = fh.readline().split(" ")
                l_frames, s_toks, switches = int(l_str), int(s_str), int(sw_str)
                pair_line = fh.readline().rstrip("\n")
                tokens, sides = [], []
                if pair_line:
                    for pair in pair_line.split(" "):
                        tok, side = pair.split(":")
                        tokens.append(int(tok))
                        sides.append(side)
                rows = [np.array([float(x) for x in fh.readline().split()])
                        for _ in range(l_frames)]
                utts.append(Utterance(
                    id=uid,
                    features=Tensor(np.vstack(rows)),
                    reference=TokenSequence(tuple(tokens)),
                    switch_count=switches,
                    durations=durations.get(uid, ()),
                ))
                tok_a += sum(1 for side in sides if side == "A")
                tok_total += len(tokens)
        realized = tok_a / tok_total if tok_total else 0.0
        splits.append(DatasetSplit(name, tuple(utts), realized))
    return splits


def read_vocabulary(path) -> Vocabulary:
    from pathlib import Path
    symbols, tags = [], []
    for line in (Path(path) / "vocab.txt").read_text(encoding="utf-8").splitlines():
        _, sym, tag = line.split(" ")
        symbols.append(sym)
        tags.append(tag)
    return Vocabulary(tuple(symbols), tuple(tags))


def dataset_hash(splits: list[DatasetSplit], vocab: Vocabulary) -> str:
    """Content hash over the serialized form (reproducibility checks)."""
    h = hashlib.sha256()
    for split in splits:
        h.update(split.name.encode())
        for u in split.utterances:
            h.update(u.id.encode())
            h.update(np.ascontiguousarray(u.features.data).tobytes())
            h.update(np.asarray(u.reference.ids, dtype=np.int64).tobytes())
            h.update(np.asarray(u.durations, dtype=np.int64).tobytes())
            h.update(np.int64(u.switch_count).tobytes())
    return h.hexdigest()
