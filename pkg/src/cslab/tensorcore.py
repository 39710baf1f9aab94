"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is deliberately small: just enough for transformer
encoder stacks, softmax gating and the sequence losses built on top.
Everything is recorded on an explicit :class:`Tape`; calling
:meth:`Tape.backward` on a scalar replays the recorded entries in reverse
and accumulates vector-Jacobian products into the registered leaves.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Input shapes do not conform to a primitive's shape rule."""


class NonFinite(FloatingPointError):
    """A primitive produced a non-finite value outside log-space ops."""


class NotScalar(ValueError):
    """backward() was asked to differentiate a non rank-0 node."""


class UnknownPrimitive(KeyError):
    """op_id is not registered."""


class Tensor:
    """Immutable dense array: a shape and row-major float64 data."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.flags.writeable:
            arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr) -> "Tensor":
        # fast path for primitive outputs: fresh C-contiguous float64 arrays
        # (0-d results come back as array scalars and need re-boxing)
        if type(arr) is not np.ndarray:
            arr = np.asarray(arr, dtype=np.float64)
        t = object.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        object.__setattr__(t, "data", arr)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitive definitions.  Each forward returns (out, ctx); each backward maps
# (ctx, grad_out) to a tuple of input gradients (None for no-grad inputs).
# Shape rules are enforced here; attrs are per-primitive keyword options.
# ---------------------------------------------------------------------------


def _matmul_fwd(inputs, attrs):
    a, b = inputs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _matmul_bwd(ctx, g):
    a, b = ctx
    return g @ b.T, a.T @ g


def _broadcast_check(a, b, op):
    # right-aligned numpy broadcasting; anything numpy rejects is a mismatch
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}") from None


def _add_fwd(inputs, attrs):
    a, b = inputs
    _broadcast_check(a, b, "add")
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _mul_fwd(inputs, attrs):
    a, b = inputs
    _broadcast_check(a, b, "mul")
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(inputs, attrs):
    (a,) = inputs
    f = attrs["factor"]
    return a * f, f


def _scale_bwd(ctx, g):
    return (g * ctx,)


def _concat_fwd(inputs, attrs):
    first = inputs[0]
    for t in inputs[1:]:
        if t.shape[:-1] != first.shape[:-1]:
            raise ShapeMismatch(f"concat_last_dim: {[i.shape for i in inputs]}")
    widths = [t.shape[-1] for t in inputs]
    return np.concatenate(inputs, axis=-1), widths


def _concat_bwd(ctx, g):
    out, pos = [], 0
    for w in ctx:
        out.append(g[..., pos:pos + w])
        pos += w
    return tuple(out)


def _split_fwd(inputs, attrs):
    (a,) = inputs
    start, stop = attrs["start"], attrs["stop"]
    if not (0 <= start < stop <= a.shape[-1]):
        raise ShapeMismatch(f"split_last_dim: [{start}:{stop}] of {a.shape}")
    return np.ascontiguousarray(a[..., start:stop]), (a.shape, start, stop)


def _split_bwd(ctx, g):
    shape, start, stop = ctx
    out = np.zeros(shape)
    out[..., start:stop] = g
    return (out,)


def _softmax_fwd(inputs, attrs):
    (a,) = inputs
    if a.ndim == 0:
        raise ShapeMismatch("softmax_last_dim: rank-0 input")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, out


def _softmax_bwd(ctx, g):
    s = ctx
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(inputs, attrs):
    (a,) = inputs
    if a.ndim == 0:
        raise ShapeMismatch("log_softmax_last_dim: rank-0 input")
    shifted = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    return out, np.exp(out)


def _log_softmax_bwd(ctx, g):
    s = ctx
    return (g - s * g.sum(axis=-1, keepdims=True),)


def _layer_norm_fwd(inputs, attrs):
    x, gain, bias = inputs
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    eps = attrs.get("eps", 1e-5) if attrs else 1e-5
    inv_d = 1.0 / d
    mu = x.sum(axis=-1, keepdims=True) * inv_d
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layer_norm_bwd(ctx, g):
    xhat, inv, gain = ctx
    inv_d = 1.0 / xhat.shape[-1]
    dxhat = g * gain
    m1 = dxhat.sum(axis=-1, keepdims=True) * inv_d
    m2 = (dxhat * xhat).sum(axis=-1, keepdims=True) * inv_d
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(g.ndim - 1))
    return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)


def _relu_fwd(inputs, attrs):
    (a,) = inputs
    return np.maximum(a, 0.0), a


def _relu_bwd(ctx, g):
    return (g * (ctx > 0),)


def _transpose_fwd(inputs, attrs):
    (a,) = inputs
    if a.ndim < 2:
        raise ShapeMismatch(f"transpose_last_two: rank {a.ndim}")
    return np.ascontiguousarray(a.swapaxes(-1, -2)), None


def _transpose_bwd(ctx, g):
    return (g.swapaxes(-1, -2),)


def _embedding_fwd(inputs, attrs):
    (table,) = inputs
    idx = np.asarray(attrs["indices"], dtype=np.intp)
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup: table rank {table.ndim}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatch("embedding_lookup: index out of range")
    return table[idx], (table.shape, idx)


def _embedding_bwd(ctx, g):
    shape, idx = ctx
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return (out,)


def _sum_fwd(inputs, attrs):
    (a,) = inputs
    return np.asarray(a.sum()), a.shape


def _sum_bwd(ctx, g):
    return (np.full(ctx, float(g)),)


def _mean_fwd(inputs, attrs):
    (a,) = inputs
    return np.asarray(a.mean()), a.shape


def _mean_bwd(ctx, g):
    n = 1
    for e in ctx:
        n *= e
    return (np.full(ctx, float(g) / n),)


# name -> (forward, backward, allows_nonfinite)
_PRIMITIVES: dict[str, tuple] = {
    "matmul": (_matmul_fwd, _matmul_bwd, False),
    "add": (_add_fwd, _add_bwd, False),
    "mul": (_mul_fwd, _mul_bwd, False),
    "scale": (_scale_fwd, _scale_bwd, False),
    "concat_last_dim": (_concat_fwd, _concat_bwd, False),
    "split_last_dim": (_split_fwd, _split_bwd, False),
    "softmax_last_dim": (_softmax_fwd, _softmax_bwd, False),
    "log_softmax_last_dim": (_log_softmax_fwd, _log_softmax_bwd, False),
    "layer_norm": (_layer_norm_fwd, _layer_norm_bwd, False),
    "relu": (_relu_fwd, _relu_bwd, False),
    "transpose_last_two": (_transpose_fwd, _transpose_bwd, False),
    "embedding_lookup": (_embedding_fwd, _embedding_bwd, False),
    "sum": (_sum_fwd, _sum_bwd, False),
    "mean": (_mean_fwd, _mean_bwd, False),
}


def register_primitive(op_id: str, forward, backward, allows_nonfinite: bool = False):
    """Register an extension primitive (e.g. a fused loss with a custom VJP).

    Extensions participate in taping, backward and replay exactly like the
    built-in set.
    """
    _PRIMITIVES[op_id] = (forward, backward, allows_nonfinite)


def primitive_ids() -> tuple[str, ...]:
    return tuple(_PRIMITIVES)


class Tape:
    """Ordered record of primitive applications over tensors.

    Leaves (parameters) are registered with :meth:`leaf`; inputs that never
    need gradients with :meth:`constant`.  Node ids are dense ints in
    topological order by construction, so replay and backward are single
    linear passes.
    """

    __slots__ = ("_values", "_tensors", "_entries", "_leaf_ids", "_id_of",
                 "check_finite")

    def __init__(self, check_finite: bool = True):
        self._values: list[np.ndarray] = []   # node id -> forward value
        self._tensors: list[Tensor] = []      # keeps id(tensor) stable
        self._entries: list[tuple] = []       # (op_id, input_ids, out_id, attrs, ctx, bwd)
        self._leaf_ids: list[int] = []
        self._id_of: dict[int, int] = {}      # id(tensor) -> node id
        self.check_finite = check_finite

    # -- graph sources ------------------------------------------------------

    def _source(self, t: Tensor) -> int:
        nid = self._id_of.get(id(t))
        if nid is not None:
            return nid
        nid = len(self._values)
        self._values.append(t.data)
        self._tensors.append(t)
        self._id_of[id(t)] = nid
        return nid

    def leaf(self, t: Tensor) -> Tensor:
        """Register a differentiable leaf (parameter/input); returns it."""
        nid = self._source(t)
        if nid not in self._leaf_ids:
            self._leaf_ids.append(nid)
        return t

    def constant(self, t: Tensor) -> Tensor:
        """Register a non-differentiable input; returns it."""
        self._source(t)
        return t

    def node_id(self, t: Tensor) -> int:
        return self._id_of[id(t)]

    @property
    def n_entries(self) -> int:
        return len(self._entries)

    # -- recording ----------------------------------------------------------

    def apply_primitive(self, op_id: str, inputs: list[Tensor],
                        attrs: dict | None = None) -> Tensor:
        """Apply a primitive, record the entry, return the forward value."""
        prim = _PRIMITIVES.get(op_id)
        if prim is None:
            raise UnknownPrimitive(op_id)
        fwd, bwd, allows_nf = prim
        id_of = self._id_of
        values = self._values
        tensors = self._tensors
        input_ids = []
        arrays = []
        for t in inputs:
            nid = id_of.get(id(t))
            if nid is None:
                nid = len(values)
                values.append(t.data)
                tensors.append(t)
                id_of[id(t)] = nid
            input_ids.append(nid)
            arrays.append(t.data)
        out, ctx = fwd(arrays, attrs)
        if self.check_finite and not allows_nf and not np.all(np.isfinite(out)):
            raise NonFinite(f"{op_id} produced non-finite values")
        out_t = Tensor._wrap(out)
        out_id = len(values)
        values.append(out_t.data)
        tensors.append(out_t)
        id_of[id(out_t)] = out_id
        self._entries.append((op_id, tuple(input_ids), out_id, attrs, ctx, bwd))
        return out_t

    # -- differentiation ----------------------------------------------------

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of a recorded scalar w.r.t. every leaf.

        Returns a node-id keyed map covering all leaves; leaves the loss
        does not depend on map to zero tensors.
        """
        loss_id = self._id_of.get(id(loss))
        if loss_id is None:
            raise KeyError("loss tensor was not recorded on this tape")
        if loss.data.ndim != 0:
            raise NotScalar(f"loss has shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss_id: np.asarray(1.0)}
        for op_id, input_ids, out_id, attrs, ctx, bwd in reversed(self._entries):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            in_grads = bwd(ctx, g)
            for nid, ig in zip(input_ids, in_grads):
                if ig is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = ig if acc is None else acc + ig
        out: dict[int, Tensor] = {}
        for nid in self._leaf_ids:
            g = grads.get(nid)
            if g is None:
                out[nid] = Tensor(np.zeros_like(self._values[nid]))
            else:
                out[nid] = Tensor(np.broadcast_to(g, self._values[nid].shape).copy()
                                  if g.shape != self._values[nid].shape else g)
        return out

    def grad(self, gradmap: dict[int, Tensor], t: Tensor) -> Tensor:
        return gradmap[self.node_id(t)]

    # -- verification -------------------------------------------------------

    def replay(self) -> bool:
        """Re-execute all entries from the recorded inputs.

        Returns True iff every recomputed output matches the recorded value
        bit-exactly (the determinism contract).
        """
        for op_id, input_ids, out_id, attrs, _ctx, _bwd in self._entries:
            fwd = _PRIMITIVES[op_id][0]
            arrays = [self._values[i] for i in input_ids]
            out, _ = fwd(arrays, attrs)
            if out.shape != self._values[out_id].shape:
                return False
            if not np.array_equal(out, self._values[out_id]):
                return False
        return True


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    return tape.backward(loss)


def finite_diff_check(f, params: list[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(tape, params) -> Tensor` must build a deterministic rank-0 loss on
    the given tape from the given parameter tensors.  The error for each
    parameter entry is |analytic - fd| / max(1, |analytic|); any non-finite
    difference reports +inf.
    """
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    loss = f(tape, leaves)
    gradmap = tape.backward(loss)
    analytic = [tape.grad(gradmap, p).data for p in leaves]

    def eval_at(ps):
        t = Tape()
        ls = [t.leaf(p) for p in ps]
        return f(t, ls).item()

    worst = 0.0
    for i, p in enumerate(params):
        flat = p.data.ravel()
        for j in range(flat.size):
            plus = flat.copy()
            plus[j] += h
            minus = flat.copy()
            minus[j] -= h
            ps_plus = list(params)
            ps_plus[i] = Tensor(plus.reshape(p.shape))
            ps_minus = list(params)
            ps_minus[i] = Tensor(minus.reshape(p.shape))
            fd = (eval_at(ps_plus) - eval_at(ps_minus)) / (2.0 * h)
            a = analytic[i].ravel()[j]
            if not np.isfinite(fd) or not np.isfinite(a):
                return float("inf")
            err = abs(a - fd) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# Serialization: per tensor a UTF-8 manifest line "name rank e1 ... ek"
# followed by the row-major values as little-endian float64.
# ---------------------------------------------------------------------------


def write_tensors(fh, tensors: dict[str, Tensor]) -> None:
    """Write a named tensor map to a binary file handle."""
    for name, t in tensors.items():
        if " " in name or "\n" in name:
            raise ValueError(f"tensor name may not contain whitespace: {name!r}")
        dims = " ".join(str(e) for e in t.shape)
        line = f"{name} {t.data.ndim}" + (f" {dims}" if dims else "") + "\n"
        fh.write(line.encode("utf-8"))
        fh.write(t.data.astype("<f8").tobytes())


def read_tensors(fh) -> dict[str, Tensor]:
    """Read a named tensor map written by :func:`write_tensors`."""
    out: dict[str, Tensor] = {}
    while True:
        line = _read_line(fh)
        if line is None:
            return out
        parts = line.split(" ")
        name, rank = parts[0], int(parts[1])
        shape = tuple(int(x) for x in parts[2:2 + rank])
        n = 1
        for e in shape:
            n *= e
        raw = fh.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError(f"truncated tensor data for {name!r}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        out[name] = Tensor(arr)


def _read_line(fh):
    buf = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            return None if not buf else buf.decode("utf-8")
        if ch == b"\n":
            return buf.decode("utf-8")
        buf += ch
