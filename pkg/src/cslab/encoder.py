"""Transformer encoder stacks, the two-expert gating network, and fusion.

The model is a shared lower stack feeding two language-expert stacks.
Expert outputs are fused either by per-frame convex mixing under a
softmax gate (``moe``) or by concatenation plus a learned projection back
to model width (``concat``).  A single-stack variant of matching total
depth serves as the comparison baseline.

Blocks are pre-layer-norm with multi-head self-attention and a ReLU MLP;
the input is a linear projection of the features plus sinusoidal position
codes.  Everything runs through the tape, so one backward pass covers all
parameter groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import Tape, Tensor, ShapeMismatch, register_primitive

SYSTEMS = ("baseline_single", "concat_lae", "moe_lae")


# Fused primitives for the training hot path.  Each is a pure composition
# of the public op set with a hand-derived VJP (covered by the gradient
# tests); fusing keeps the tape short.

def _linear_fwd(inputs, attrs):
    x, w, b = inputs
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] \
            or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: {x.shape} @ {w.shape} + {b.shape}")
    return x @ w + b, (x, w)


def _linear_bwd(ctx, g):
    x, w = ctx
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _qkv_linear_fwd(inputs, attrs):
    x, wq, bq, wk, bk, wv, bv = inputs
    d = wq.shape[1]
    out = np.empty((x.shape[0], 3 * d))
    np.add(x @ wq, bq, out=out[:, :d])
    np.add(x @ wk, bk, out=out[:, d:2 * d])
    np.add(x @ wv, bv, out=out[:, 2 * d:])
    return out, (x, wq, wk, wv, d)


def _qkv_linear_bwd(ctx, g):
    x, wq, wk, wv, d = ctx
    gq, gk, gv = g[:, :d], g[:, d:2 * d], g[:, 2 * d:]
    gx = gq @ wq.T
    gx += gk @ wk.T
    gx += gv @ wv.T
    xt = x.T
    return (gx, xt @ gq, gq.sum(axis=0), xt @ gk, gk.sum(axis=0),
            xt @ gv, gv.sum(axis=0))


def _attention_head_fwd(inputs, attrs):
    (qkv,) = inputs
    start, stop = attrs["start"], attrs["stop"]
    d = attrs["d_model"]
    scale = attrs["scale"]
    qh = qkv[:, start:stop]
    kh = qkv[:, d + start:d + stop]
    vh = qkv[:, 2 * d + start:2 * d + stop]
    scores = (qh @ kh.T) * scale
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=-1, keepdims=True)
    return attn @ vh, (qkv.shape, qh, kh, vh, attn, start, d, scale)


def _attention_head_bwd(ctx, g):
    qkv_shape, qh, kh, vh, attn, start, d, scale = ctx
    dv = attn.T @ g
    da = g @ vh.T
    ds = (attn * (da - (da * attn).sum(axis=-1, keepdims=True))) * scale
    stop = start + qh.shape[1]
    gqkv = np.zeros(qkv_shape)
    gqkv[:, start:stop] = ds @ kh
    gqkv[:, d + start:d + stop] = ds.T @ qh
    gqkv[:, 2 * d + start:2 * d + stop] = dv
    return (gqkv,)


def _ffn_fwd(inputs, attrs):
    x, w1, b1, w2, b2 = inputs
    hidden = np.maximum(x @ w1 + b1, 0.0)
    return hidden @ w2 + b2, (x, w1, w2, hidden)


def _ffn_bwd(ctx, g):
    x, w1, w2, hidden = ctx
    gh = (g @ w2.T) * (hidden > 0)
    return (gh @ w1.T, x.T @ gh, gh.sum(axis=0),
            hidden.T @ g, g.sum(axis=0))


def _ln_fwd(x, gain, bias, eps=1e-5):
    inv_d = 1.0 / x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * inv_d
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _ln_bwd(dn, xhat, inv, gain):
    inv_d = 1.0 / xhat.shape[-1]
    dxhat = dn * gain
    m1 = dxhat.sum(axis=-1, keepdims=True) * inv_d
    m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * inv_d
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, (dn * xhat).sum(axis=0), dn.sum(axis=0)


# inputs: x, ln1.g, ln1.b, wq, bq, wk, bk, wv, bv, wo, bo,
#         ln2.g, ln2.b, ffn.w1, ffn.b1, ffn.w2, ffn.b2
def _encoder_block_fwd(inputs, attrs):
    (x, g1, b1, wq, bq, wk, bk, wv, bv, wo, bo,
     g2, b2, w1, b1f, w2, b2f) = inputs
    n_heads = attrs["n_heads"]
    d = x.shape[1]
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    n1, xhat1, inv1 = _ln_fwd(x, g1, b1)
    q = n1 @ wq + bq
    k = n1 @ wk + bk
    v = n1 @ wv + bv
    attns = []
    ctxv = np.empty_like(q)
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = (q[:, lo:hi] @ k[:, lo:hi].T) * scale
        shifted = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        a = e / e.sum(axis=-1, keepdims=True)
        attns.append(a)
        ctxv[:, lo:hi] = a @ v[:, lo:hi]
    x1 = x + (ctxv @ wo + bo)
    n2, xhat2, inv2 = _ln_fwd(x1, g2, b2)
    hid = np.maximum(n2 @ w1 + b1f, 0.0)
    out = x1 + (hid @ w2 + b2f)
    ctx = (xhat1, inv1, g1, n1, q, k, v, attns, ctxv, wq, wk, wv, wo,
           xhat2, inv2, g2, n2, hid, w1, w2, n_heads, dh, scale)
    return out, ctx


def _encoder_block_bwd(ctx, g):
    (xhat1, inv1, g1, n1, q, k, v, attns, ctxv, wq, wk, wv, wo,
     xhat2, inv2, g2, n2, hid, w1, w2, n_heads, dh, scale) = ctx
    # ffn branch
    ghid = (g @ w2.T) * (hid > 0)
    gw2 = hid.T @ g
    gb2f = g.sum(axis=0)
    gw1 = n2.T @ ghid
    gb1f = ghid.sum(axis=0)
    dn2 = ghid @ w1.T
    dx1_ln, gg2, gb2 = _ln_bwd(dn2, xhat2, inv2, g2)
    dx1 = g + dx1_ln
    # attention branch
    gwo = ctxv.T @ dx1
    gbo = dx1.sum(axis=0)
    dctxv = dx1 @ wo.T
    dq = np.empty_like(q)
    dk = np.empty_like(q)
    dv = np.empty_like(q)
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        a = attns[h]
        dc = dctxv[:, lo:hi]
        dv[:, lo:hi] = a.T @ dc
        da = dc @ v[:, lo:hi].T
        ds = (a * (da - (da * a).sum(axis=-1, keepdims=True))) * scale
        dq[:, lo:hi] = ds @ k[:, lo:hi]
        dk[:, lo:hi] = ds.T @ q[:, lo:hi]
    n1t = n1.T
    gwq, gbq = n1t @ dq, dq.sum(axis=0)
    gwk, gbk = n1t @ dk, dk.sum(axis=0)
    gwv, gbv = n1t @ dv, dv.sum(axis=0)
    dn1 = dq @ wq.T
    dn1 += dk @ wk.T
    dn1 += dv @ wv.T
    dx_ln, gg1, gb1 = _ln_bwd(dn1, xhat1, inv1, g1)
    dx = dx1 + dx_ln
    return (dx, gg1, gb1, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo,
            gg2, gb2, gw1, gb1f, gw2, gb2f)


register_primitive("linear", _linear_fwd, _linear_bwd)
register_primitive("qkv_linear", _qkv_linear_fwd, _qkv_linear_bwd)
register_primitive("attention_head", _attention_head_fwd, _attention_head_bwd)
register_primitive("ffn", _ffn_fwd, _ffn_bwd)
register_primitive("encoder_block", _encoder_block_fwd, _encoder_block_bwd)


class ConfigError(ValueError):
    pass


class WrongOrigin(ValueError):
    """A hidden sequence arrived from the wrong pipeline stage."""


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture extents. Defaults keep the 3:1:1 shared-to-expert
    layer ratio at desk scale."""

    feature_dim: int = 16
    d_model: int = 32
    ff_dim: int = 64
    n_heads: int = 2
    n_shared_blocks: int = 3
    n_specific_blocks: int = 1
    vocab_size: int = 27
    fusion_mode: str = "moe"
    disentangle_enabled: bool = True

    def __post_init__(self):
        for name in ("feature_dim", "d_model", "ff_dim", "n_heads",
                     "n_shared_blocks", "n_specific_blocks", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.fusion_mode not in ("moe", "concat"):
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")


@dataclass(frozen=True)
class HiddenSequence:
    frames: Tensor  # L x d_model
    origin: str     # shared | man | eng | concat | moe

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class GatingWeights:
    """Per-frame two-way simplex: column 0 weighs the man expert."""

    weights: Tensor  # L x 2

    def __len__(self):
        return self.weights.shape[0]


# -- parameters ---------------------------------------------------------------


def _block_names(prefix: str) -> list[str]:
    return [f"{prefix}.{leaf}" for leaf in (
        "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
        "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    )]


def parameter_names(cfg: ModelConfig, system: str) -> list[str]:
    """The closed name set for a system; order is the build order.

    One output projection serves all three CTC roles: the language
    restriction lives in the masked targets, so a single readout keeps the
    experts' features in one shared space (an expert cannot drift into a
    private representation the fused path cannot read)."""
    if system not in SYSTEMS:
        raise ConfigError(f"unknown system {system!r}")
    names = ["input.w", "input.b"]
    if system == "baseline_single":
        depth = cfg.n_shared_blocks + 2 * cfg.n_specific_blocks
        for i in range(depth):
            names += _block_names(f"enc.{i}")
        names += ["enc.final_ln.g", "enc.final_ln.b"]
        names += ["head.out.w", "head.out.b"]
        return names
    for i in range(cfg.n_shared_blocks):
        names += _block_names(f"shared.{i}")
    for expert in ("man", "eng"):
        for i in range(cfg.n_specific_blocks):
            names += _block_names(f"{expert}.{i}")
        names += [f"{expert}.final_ln.g", f"{expert}.final_ln.b"]
    if system == "moe_lae":
        names += ["gate.w", "gate.b"]
    else:
        names += ["concat.w", "concat.b"]
    names += ["head.out.w", "head.out.b"]
    return names


def _shape_of(name: str, cfg: ModelConfig) -> tuple[int, ...]:
    d, f, v = cfg.d_model, cfg.ff_dim, cfg.vocab_size
    leaf = name.split(".", 1)[1] if "." in name else name
    if name == "input.w":
        return (cfg.feature_dim, d)
    if name == "input.b":
        return (d,)
    if name == "gate.w":
        return (2 * d, 2)
    if name == "gate.b":
        return (2,)
    if name == "concat.w":
        return (2 * d, d)
    if name == "concat.b":
        return (d,)
    if name.startswith("head."):
        return (d, v) if name.endswith(".w") else (v,)
    if leaf.endswith(("ln1.g", "ln1.b", "ln2.g", "ln2.b")) or "final_ln" in name:
        return (d,)
    if leaf.endswith(("attn.wq", "attn.wk", "attn.wv", "attn.wo")):
        return (d, d)
    if leaf.endswith(("attn.bq", "attn.bk", "attn.bv", "attn.bo")):
        return (d,)
    if leaf.endswith("ffn.w1"):
        return (d, f)
    if leaf.endswith("ffn.b1"):
        return (f,)
    if leaf.endswith("ffn.w2"):
        return (f, d)
    if leaf.endswith("ffn.b2"):
        return (d,)
    raise ConfigError(f"no shape rule for {name!r}")


def build_parameters(cfg: ModelConfig, system: str, seed: int) -> dict[str, Tensor]:
    """Seeded initialization: N(0, 1/sqrt(fan_in)) weights, zero biases,
    unit layer-norm gains.  The gate starts at zero so an untrained model
    mixes the experts uniformly."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name in parameter_names(cfg, system):
        shape = _shape_of(name, cfg)
        if name.endswith(".g"):
            params[name] = Tensor(np.ones(shape))
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            params[name] = Tensor(np.zeros(shape))
        elif name.startswith("gate."):
            params[name] = Tensor(np.zeros(shape))
        elif name == "concat.w":
            # both fusion modes start as the uniform average of the experts,
            # so ablations isolate the fusion rule rather than its init
            d = cfg.d_model
            params[name] = Tensor(np.vstack([np.eye(d), np.eye(d)]) * 0.5)
        else:
            std = 1.0 / math.sqrt(shape[0])
            params[name] = Tensor(rng.normal(0.0, std, size=shape))
    return params


def validate_parameters(params: dict[str, Tensor], cfg: ModelConfig,
                        system: str) -> None:
    """The parameter map must be closed: exact names, exact shapes."""
    expected = parameter_names(cfg, system)
    missing = [n for n in expected if n not in params]
    extra = [n for n in params if n not in expected]
    if missing or extra:
        raise ConfigError(f"parameter map not closed: missing {missing}, extra {extra}")
    for name in expected:
        want = _shape_of(name, cfg)
        got = params[name].shape
        if got != want:
            raise ConfigError(f"{name}: shape {got}, expected {want}")


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


@dataclass(frozen=True)
class Model:
    """A trained or initialized system: config, variant, parameter map."""

    cfg: ModelConfig
    system: str
    params: dict[str, Tensor] = field(repr=False)

    def __post_init__(self):
        validate_parameters(self.params, self.cfg, self.system)


# -- forward pieces -----------------------------------------------------------

_PE_CACHE: dict[tuple[int, int], Tensor] = {}


def positional_encoding(length: int, d_model: int) -> Tensor:
    key = (length, d_model)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None]
        i = np.arange(0, d_model, 2)[None, :]
        angles = pos / np.power(10000.0, i / d_model)
        arr = np.zeros((length, d_model))
        arr[:, 0::2] = np.sin(angles)
        arr[:, 1::2] = np.cos(angles[:, : arr[:, 1::2].shape[1]])
        pe = Tensor(arr)
        _PE_CACHE[key] = pe
    return pe


def _linear(tape, x, w, b):
    return tape.apply_primitive("linear", [x, w, b])


def _attention(tape, x, p, prefix, cfg):
    d, n_heads = cfg.d_model, cfg.n_heads
    dh = d // n_heads
    qkv = tape.apply_primitive("qkv_linear", [
        x, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"],
        p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"],
        p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"]])
    heads = []
    for h in range(n_heads):
        heads.append(tape.apply_primitive(
            "attention_head", [qkv],
            {"start": h * dh, "stop": (h + 1) * dh, "d_model": d,
             "scale": 1.0 / math.sqrt(dh)}))
    ctxv = heads[0] if len(heads) == 1 else tape.apply_primitive(
        "concat_last_dim", heads)
    return _linear(tape, ctxv, p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"])


def _block(tape, x, p, prefix, cfg):
    return tape.apply_primitive("encoder_block", [
        x,
        p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"],
        p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.bq"],
        p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.bk"],
        p[f"{prefix}.attn.wv"], p[f"{prefix}.attn.bv"],
        p[f"{prefix}.attn.wo"], p[f"{prefix}.attn.bo"],
        p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"],
        p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"],
        p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"],
    ], {"n_heads": cfg.n_heads})


def _stack_input(tape, x: Tensor, p, cfg) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise ShapeMismatch(f"features {x.shape}, expected (L, {cfg.feature_dim})")
    h = _linear(tape, x, p["input.w"], p["input.b"])
    pe = tape.constant(positional_encoding(x.shape[0], cfg.d_model))
    return tape.apply_primitive("add", [h, pe])


def encode_shared(tape: Tape, x: Tensor, params: dict, cfg: ModelConfig) -> HiddenSequence:
    """Shared lower stack: features in, inter-lingual embedding out."""
    h = _stack_input(tape, x, params, cfg)
    for i in range(cfg.n_shared_blocks):
        h = _block(tape, h, params, f"shared.{i}", cfg)
    return HiddenSequence(h, "shared")


def encode_specific(tape: Tape, h_shared: HiddenSequence, lang: str,
                    params: dict, cfg: ModelConfig) -> HiddenSequence:
    """One expert stack on top of the shared embedding (lang: man|eng)."""
    if lang not in ("man", "eng"):
        raise ConfigError(f"lang must be man or eng, got {lang!r}")
    if h_shared.origin != "shared":
        raise WrongOrigin(f"expected shared input, got {h_shared.origin}")
    if cfg.n_specific_blocks < 1:
        raise ConfigError("n_specific_blocks must be >= 1")
    h = h_shared.frames
    for i in range(cfg.n_specific_blocks):
        h = _block(tape, h, params, f"{lang}.{i}", cfg)
    h = tape.apply_primitive(
        "layer_norm", [h, params[f"{lang}.final_ln.g"], params[f"{lang}.final_ln.b"]])
    return HiddenSequence(h, lang)


def encode_single(tape: Tape, x: Tensor, params: dict, cfg: ModelConfig) -> HiddenSequence:
    """Baseline: one stack of shared+2*specific depth, tagged as shared."""
    h = _stack_input(tape, x, params, cfg)
    for i in range(cfg.n_shared_blocks + 2 * cfg.n_specific_blocks):
        h = _block(tape, h, params, f"enc.{i}", cfg)
    h = tape.apply_primitive(
        "layer_norm", [h, params["enc.final_ln.g"], params["enc.final_ln.b"]])
    return HiddenSequence(h, "shared")


def gate(tape: Tape, h_man: HiddenSequence, h_eng: HiddenSequence,
         params: dict) -> GatingWeights:
    """Single linear layer over the frame-wise expert concatenation,
    softmaxed to two weights per frame."""
    if len(h_man) != len(h_eng):
        raise LengthMismatch(f"{len(h_man)} vs {len(h_eng)}")
    if h_man.origin != "man" or h_eng.origin != "eng":
        raise WrongOrigin(f"got origins {h_man.origin}/{h_eng.origin}")
    cat = tape.apply_primitive("concat_last_dim", [h_man.frames, h_eng.frames])
    logits = _linear(tape, cat, params["gate.w"], params["gate.b"])
    return GatingWeights(tape.apply_primitive("softmax_last_dim", [logits]))


def combine_moe(tape: Tape, h_man: HiddenSequence, h_eng: HiddenSequence,
                g: GatingWeights) -> HiddenSequence:
    """Frame-wise convex mix of the experts under the gating weights."""
    if not (len(h_man) == len(h_eng) == len(g)):
        raise LengthMismatch(f"{len(h_man)}/{len(h_eng)}/{len(g)}")
    g_man = tape.apply_primitive("split_last_dim", [g.weights], {"start": 0, "stop": 1})
    g_eng = tape.apply_primitive("split_last_dim", [g.weights], {"start": 1, "stop": 2})
    man_part = tape.apply_primitive("mul", [g_man, h_man.frames])
    eng_part = tape.apply_primitive("mul", [g_eng, h_eng.frames])
    return HiddenSequence(tape.apply_primitive("add", [man_part, eng_part]), "moe")


def combine_concat(tape: Tape, h_man: HiddenSequence, h_eng: HiddenSequence,
                   params: dict) -> HiddenSequence:
    """Frame-wise concatenation projected back to model width, so the same
    output head serves both fusion modes."""
    if len(h_man) != len(h_eng):
        raise LengthMismatch(f"{len(h_man)} vs {len(h_eng)}")
    cat = tape.apply_primitive("concat_last_dim", [h_man.frames, h_eng.frames])
    return HiddenSequence(_linear(tape, cat, params["concat.w"], params["concat.b"]),
                          "concat")


_HEAD_ORIGINS = {
    "man": ("man",),
    "eng": ("eng",),
    # the mix head also scores the baseline's single-stack output
    "mix": ("moe", "concat", "shared"),
}


def project_to_logits(tape: Tape, h: HiddenSequence, params: dict,
                      head: str) -> Tensor:
    """Per-frame unnormalized logits over the full shared vocabulary.

    The head name selects the role (origin check only); all roles read
    through the single shared output projection."""
    if head not in _HEAD_ORIGINS:
        raise ConfigError(f"unknown head {head!r}")
    if h.origin not in _HEAD_ORIGINS[head]:
        raise WrongOrigin(f"head {head} cannot score origin {h.origin}")
    return _linear(tape, h.frames, params["head.out.w"], params["head.out.b"])


@dataclass(frozen=True)
class EncodeResult:
    """Everything one utterance forward pass produces before the heads."""

    fused: HiddenSequence
    h_man: HiddenSequence | None = None
    h_eng: HiddenSequence | None = None
    gating: GatingWeights | None = None


def encode_utterance(tape: Tape, x: Tensor, params: dict, cfg: ModelConfig,
                     system: str) -> EncodeResult:
    """Run the full encoder for one utterance under the given system."""
    if system == "baseline_single":
        return EncodeResult(fused=encode_single(tape, x, params, cfg))
    h_shared = encode_shared(tape, x, params, cfg)
    h_man = encode_specific(tape, h_shared, "man", params, cfg)
    h_eng = encode_specific(tape, h_shared, "eng", params, cfg)
    if system == "moe_lae":
        g = gate(tape, h_man, h_eng, params)
        fused = combine_moe(tape, h_man, h_eng, g)
        return EncodeResult(fused=fused, h_man=h_man, h_eng=h_eng, gating=g)
    fused = combine_concat(tape, h_man, h_eng, params)
    return EncodeResult(fused=fused, h_man=h_man, h_eng=h_eng)
