"""Tape-based reverse-mode differentiation over a small, closed set of array ops.

Each op computes its forward value with numpy and, when any input depends on
a trainable parameter, appends a record holding its inputs and a hand-written
adjoint rule. ``backward`` replays the records in reverse.

Non-smooth ops (``heaviside``, ``ste_mask``) differentiate through their
surrogates. Inside a :class:`Relaxation` their arguments are recorded on the
first pass and replayed as fixed anchors later, which turns the model into a
smooth function whose exact gradient is the surrogate gradient. Finite
differences of that function validate the surrogate adjoints.
"""

from __future__ import annotations

import numpy as np

from . import ssm
from .errors import InvalidArgumentError, InvalidStateError


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records = []
        self.params = {}

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        v = Var(np.asarray(value), self, True)
        self.params[name] = v
        return v

    def __len__(self):
        return len(self.records)


class Var:
    """An array value, optionally tracked by a tape."""

    __slots__ = ("value", "tape", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, value, tape=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Gradients(dict):
    """Parameter name -> adjoint array, one entry per parameter on the tape."""


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _record(out_value, inputs, adjoint):
    tape = None
    for v in inputs:
        if v.requires_grad:
            tape = v.tape
            break
    if tape is None:
        return Var(out_value)
    out = Var(out_value, tape, True)
    tape.records.append((out, inputs, adjoint))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, loss: Var, loss_adjoint=1.0) -> Gradients:
    """Reverse sweep from ``loss``; returns gradients for every tape parameter."""
    if tape is None or not tape.records or not isinstance(loss, Var) or loss.tape is not tape:
        raise InvalidStateError("backward requires a completed forward pass recorded on this tape")
    adj = {id(loss): np.broadcast_to(np.asarray(loss_adjoint, dtype=loss.value.dtype),
                                     loss.shape).copy()}
    for out, inputs, adjoint in reversed(tape.records):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        for v, gi in zip(inputs, adjoint(g)):
            if gi is None or not v.requires_grad:
                continue
            key = id(v)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
    return Gradients({
        name: adj.get(id(p), np.zeros_like(p.value)) for name, p in tape.params.items()
    })


# --- relaxation of non-smooth ops ------------------------------------------------

_RELAXATIONS = []


class Relaxation:
    """Freeze the branch points of non-smooth ops across repeated forward passes."""

    def __init__(self):
        self.anchors = []
        self.replaying = False
        self._cursor = 0

    def __enter__(self):
        _RELAXATIONS.append(self)
        return self

    def __exit__(self, *exc):
        _RELAXATIONS.pop()
        return False

    def freeze(self):
        """Switch from recording to replaying; call before each replayed pass."""
        self.replaying = True
        self._cursor = 0


def replaying():
    """True while a Relaxation replays a pass with perturbed parameters."""
    return bool(_RELAXATIONS) and _RELAXATIONS[-1].replaying


def _anchor(x):
    if not _RELAXATIONS:
        return None
    r = _RELAXATIONS[-1]
    if r.replaying:
        if r._cursor >= len(r.anchors):
            raise InvalidStateError("relaxed pass took a different path than the recorded one")
        a = r.anchors[r._cursor]
        r._cursor += 1
        return a
    r.anchors.append(np.array(x, copy=True))
    return None


# --- elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def relu(x):
    x = as_var(x)
    pos = x.value > 0
    return _record(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def identity(x):
    return as_var(x)


def sigmoid(x):
    x = as_var(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    x = as_var(x)
    y = np.tanh(x.value)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


ACTIVATIONS = {"relu": relu, "identity": identity, "tanh": tanh, "sigmoid": sigmoid}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown activation {name!r}") from None


# --- shape / reduction -----------------------------------------------------------

def getitem(x, idx):
    x = as_var(x)
    shape, dtype = x.shape, x.value.dtype

    def adjoint(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] += g
        return (out,)

    return _record(x.value[idx], (x,), adjoint)


def concat(a, b):
    """Join two Vars along the last axis."""
    a, b = as_var(a), as_var(b)
    split = a.value.shape[-1]
    value = np.concatenate([a.value, b.value], axis=-1)
    return _record(value, (a, b), lambda g: (g[..., :split], g[..., split:]))


def stack(xs, axis=0):
    xs = [as_var(x) for x in xs]
    out = np.stack([x.value for x in xs], axis=axis)

    def adjoint(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _record(out, tuple(xs), adjoint)


def flip(x, axis):
    x = as_var(x)
    return _record(np.flip(x.value, axis), (x,), lambda g: (np.flip(g, axis),))


def reduce_sum(x, axis=None):
    x = as_var(x)
    shape = x.shape

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.value, axis=axis), (x,), adjoint)


def mean(x, axis=None):
    x = as_var(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / count)


# --- linear algebra --------------------------------------------------------------

def matmul(a, b):
    """``a @ b`` for ``b`` a 2-D matrix and ``a`` of any rank >= 1."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if bv.ndim != 2:
        raise InvalidArgumentError("matmul expects a 2-D right operand")

    def adjoint(g):
        ga = g @ bv.T
        a2 = av.reshape(-1, av.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(av @ bv, (a, b), adjoint)


def linear(x, W, b=None):
    """x @ W.T + b with x of shape (..., in) and W of shape (out, in)."""
    x, W = as_var(x), as_var(W)
    xv, Wv = x.value, W.value
    if xv.shape[-1] != Wv.shape[1]:
        raise InvalidArgumentError(
            f"input width {xv.shape[-1]} does not match weight shape {Wv.shape}")
    y = xv @ Wv.T
    if b is None:
        def adjoint(g):
            return g @ Wv, g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return _record(y, (x, W), adjoint)
    b = as_var(b)

    def adjoint_b(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ Wv, g2.T @ xv.reshape(-1, xv.shape[-1]), g2.sum(axis=0).reshape(b.shape)

    return _record(y + b.value, (x, W, b), adjoint_b)


def softmax(x, axis=-1):
    x = as_var(x)
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


# --- state-space ops -------------------------------------------------------------

def scan(u, system: ssm.DiscreteSystem, method="auto", window=None,
         long_threshold=ssm.LONG_SEQUENCE):
    """Zero-state response of ``system`` to u (..., T) -> (..., T, order).

    ``window=(start, stop)`` returns only those output steps.
    """
    u = as_var(u)
    uv = u.value
    T = uv.shape[-1]
    if window is not None:
        start, stop = window
        taps = system.kernel(T).taps
        lag = np.arange(start, stop)[:, None] - np.arange(T)[None, :]
        gathered = np.where((lag >= 0)[..., None], taps[np.clip(lag, 0, None)], 0.0)
        out = np.einsum("...j,kjq->...kq", uv, gathered)
        return _record(out, (u,), lambda g: (np.einsum("...kq,kjq->...j", g, gathered),))
    if method == "auto":
        method = "chunked" if T >= long_threshold else "direct"
    out = ssm.convolve(system, uv, method)
    if method == "chunked":
        return _record(out, (u,), lambda g: (ssm.chunked_adjoint(system, g),))
    if method == "sequential":
        return _record(out, (u,), lambda g: (sequential_adjoint(system, g),))
    if method == "fft":
        return _record(out, (u,), lambda g: (_fft_adjoint(system, g),))
    return _record(out, (u,), lambda g: (_direct_adjoint(system, g),))


def sequential_adjoint(system, g):
    """Reverse recurrence lam[k] = g[k] + A_bar^T lam[k+1]; returns B_bar^T lam."""
    T = g.shape[-2]
    A = system.A_bar
    b = system.B_bar[:, 0]
    lam = np.zeros(g.shape[:-2] + (system.order,), dtype=g.dtype)
    gu = np.empty(g.shape[:-1], dtype=g.dtype)
    for k in range(T - 1, -1, -1):
        lam = g[..., k, :] + lam @ A
        gu[..., k] = lam @ b
    return gu


def _direct_adjoint(system, g):
    T = g.shape[-2]
    taps = system.kernel(T).taps
    gu = np.zeros(g.shape[:-1], dtype=g.dtype)
    for lag in range(T):
        gu[..., :T - lag] += g[..., lag:, :] @ taps[lag]
    return gu


def _fft_adjoint(system, g):
    import scipy.fft

    T = g.shape[-2]
    taps = system.kernel(T).taps
    nfft = ssm.fft_length(T)
    G = scipy.fft.rfft(np.flip(g, -2), n=nfft, axis=-2)
    K = scipy.fft.rfft(taps, n=nfft, axis=0)
    corr = scipy.fft.irfft(np.einsum("...fq,fq->...f", G, K), n=nfft, axis=-1)[..., :T]
    return np.ascontiguousarray(np.flip(corr, -1))


def scan_step(m_prev, u_k, system: ssm.DiscreteSystem):
    """One recurrence step: A_bar m_prev + B_bar u_k, u_k of shape (...)."""
    m_prev, u_k = as_var(m_prev), as_var(u_k)
    A = system.A_bar
    b = system.B_bar[:, 0]
    out = m_prev.value @ A.T + u_k.value[..., None] * b
    return _record(out, (m_prev, u_k),
                   lambda g: (_unbroadcast(g @ A, m_prev.shape), g @ b))


def _row_blocks(rows, T, q):
    # rows per block: keeps one block's working set within the L2 cache
    step = max(1, (1 << 16) // max(T * q, 1))
    return [slice(r, r + step) for r in range(0, rows, step)]


def _route(h, m, gates, forward):
    """h += sum_j shift_j(gates[..., j-1] * m), blockwise over rows of (R, T, q)."""
    T, n = m.shape[-2], gates.shape[-1]
    for blk in _row_blocks(m.shape[0], T, m.shape[-1]):
        hb, mb, gb = h[blk], m[blk], gates[blk]
        for j in range(1, min(n, T - 1) + 1):
            if forward:
                hb[:, j:, :] += gb[:, :-j, j - 1, None] * mb[:, :-j, :]
            else:
                hb[:, :-j, :] += gb[:, j:, j - 1, None] * mb[:, j:, :]


def _route_adjoint(gm, gg, m, gates, g, forward):
    T, n = m.shape[-2], gates.shape[-1]
    for blk in _row_blocks(m.shape[0], T, m.shape[-1]):
        gmb, mb, gb, g_b = gm[blk], m[blk], gates[blk], g[blk]
        for j in range(1, min(n, T - 1) + 1):
            if forward:
                gmb[:, :-j, :] += gb[:, :-j, j - 1, None] * g_b[:, j:, :]
                gg[blk, :-j, j - 1] = np.einsum("rtq,rtq->rt", mb[:, :-j, :], g_b[:, j:, :])
            else:
                gmb[:, j:, :] += gb[:, j:, j - 1, None] * g_b[:, :-j, :]
                gg[blk, j:, j - 1] = np.einsum("rtq,rtq->rt", mb[:, j:, :], g_b[:, :-j, :])


def combine_delayed(m, gates, back_gates=None):
    """h[k] = m[k] + sum_j gates[k-j, j-1] m[k-j] (+ backward terms).

    ``m`` is (..., T, q); gate tensors are (..., T, n). The gate emitted at
    step i routes m[i] to step i+j (forward) or i-j (backward).
    """
    m, gates = as_var(m), as_var(gates)
    inputs = (m, gates) if back_gates is None else (m, gates, as_var(back_gates))
    lead = np.broadcast_shapes(*(x.shape[:-2] for x in inputs))
    T, q = m.shape[-2:]

    def flat(x):
        return np.broadcast_to(x.value, lead + x.shape[-2:]).reshape((-1,) + x.shape[-2:])

    mv = flat(m)
    gvs = [flat(x) for x in inputs[1:]]
    h = mv.copy()
    for gv, forward in zip(gvs, (True, False)):
        _route(h, mv, gv, forward)

    def adjoint(g):
        g = np.broadcast_to(g, lead + (T, q)).reshape(-1, T, q)
        gm = g.copy()
        grads = []
        for gv, forward in zip(gvs, (True, False)):
            gg = np.zeros_like(gv)
            _route_adjoint(gm, gg, mv, gv, g, forward)
            grads.append(gg)
        outs = [gm.reshape(lead + (T, q))] + [gg.reshape(lead + gg.shape[-2:]) for gg in grads]
        return tuple(_unbroadcast(o, x.shape) for o, x in zip(outs, inputs))

    return _record(h.reshape(lead + (T, q)), inputs, adjoint)


# --- non-smooth ops with surrogate adjoints ---------------------------------------

def one_hot_argmax(values):
    """One-hot of the (first) maximum along the last axis."""
    values = np.asarray(values)
    idx = np.argmax(values, axis=-1)
    out = np.zeros_like(values, dtype=float)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def ste_mask(logits):
    """Argmax one-hot mask of ``logits`` with a straight-through (identity) adjoint."""
    logits = as_var(logits)
    lv = logits.value
    anchor = _anchor(lv)
    if anchor is None:
        out = one_hot_argmax(lv)
    else:
        out = one_hot_argmax(anchor) + (lv - anchor)
    return _record(out, (logits,), lambda g: (g,))


def triangle(x, width):
    return np.maximum(0.0, 1.0 - np.abs(x) / width) / width


def _ramp(x, width):
    # integral of the triangle surrogate from -inf to x
    t = np.clip(x / width, -1.0, 1.0)
    return np.where(t < 0, 0.5 * (1 + t) ** 2, 1.0 - 0.5 * (1 - t) ** 2)


def heaviside(x, width=1.0):
    """Spike nonlinearity: forward 1 where x >= 0, adjoint via the triangle surrogate."""
    x = as_var(x)
    xv = x.value
    anchor = _anchor(xv)
    if anchor is None:
        out = (xv >= 0).astype(xv.dtype)
    else:
        out = (anchor >= 0).astype(xv.dtype) + _ramp(xv, width) - _ramp(anchor, width)
    surr = triangle(xv, width)
    return _record(out, (x,), lambda g: (g * surr,))


def leaky_integrate(x, leak):
    """y[k] = leak * y[k-1] + x[k] along axis -2 (time)."""
    x = as_var(x)
    xv = x.value
    T = xv.shape[-2]
    y = np.empty_like(xv)
    acc = np.zeros(xv.shape[:-2] + xv.shape[-1:], dtype=xv.dtype)
    for k in range(T):
        acc = leak * acc + xv[..., k, :]
        y[..., k, :] = acc

    def adjoint(g):
        gx = np.empty_like(g)
        lam = np.zeros_like(acc)
        for k in range(T - 1, -1, -1):
            lam = g[..., k, :] + leak * lam
            gx[..., k, :] = lam
        return (gx,)

    return _record(y, (x,), adjoint)


# --- losses ----------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    logits = as_var(logits)
    lv = logits.value
    labels = np.asarray(labels, dtype=int)
    C = lv.shape[-1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise InvalidArgumentError(f"label out of range for {C} classes")
    z = lv - lv.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(lv.shape[0]) if lv.ndim == 2 else ()
    nll = -logp[rows, labels] if lv.ndim == 2 else -logp[labels]
    count = lv.shape[0] if lv.ndim == 2 else 1
    loss = np.asarray(nll).sum() / count

    def adjoint(g):
        p = np.exp(logp)
        if lv.ndim == 2:
            p[rows, labels] -= 1.0
        else:
            p[labels] -= 1.0
        return (g * p / count,)

    return _record(np.asarray(loss), (logits,), adjoint)


def mse(pred, target, weight=None):
    """Mean squared error; ``weight`` (broadcastable 0/1 mask) selects terms."""
    pred = as_var(pred)
    diff = pred.value - np.asarray(target)
    w = np.ones_like(diff) if weight is None else np.broadcast_to(weight, diff.shape)
    count = max(float(w.sum()), 1.0)
    loss = np.asarray(np.sum(w * diff * diff) / count)
    return _record(loss, (pred,), lambda g: (g * 2.0 * w * diff / count,))
