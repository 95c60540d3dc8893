"""Parallel Delayed Memory Unit layer.

A small gate state-space system driven by its own input projection emits,
at every step i, a softmax vector over n delay offsets. Entry j of that
vector routes the memory m[i] forward to step i + j, so the hidden state is

    h[k] = m[k] + sum_{j=1..n} gate_j[k - j] * m[k - j]

The same quantity is the column view of the banded gate matrix (row i holds
1 on the diagonal and gate_1[i] .. gate_n[i] to its right). Variants:

* ``plain``: as above.
* ``efficient``: only the arg-max gate of each row is kept (straight-through
  adjoint in training).
* ``bidirectional``: a second gate system run over the reversed input routes
  m[i] backward to i - j; parallel mode only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .errors import InvalidArgumentError, UnsupportedModeError
from .lmu_cell import _check_input, scan_method
from .ssm import DiscreteSystem, legendre_system

VARIANTS = ("plain", "efficient", "bidirectional")
DEFAULT_DELAYS = 5
MAX_DELAYS = 31


@dataclass(frozen=True)
class PdmuLayerParams:
    W_u: np.ndarray  # (1, M)
    b_u: np.ndarray  # (1,)
    W_v: np.ndarray  # (1, M)
    b_v: np.ndarray  # (1,)
    W_x: np.ndarray  # (N, M)
    W_h: np.ndarray  # (N, q)
    b_o: np.ndarray  # (N,)
    system: DiscreteSystem        # memory, order q
    gate_system: DiscreteSystem   # delay gates, order n
    variant: str = "plain"
    f_u: str = "relu"
    f_o: str = "relu"
    W_vb: np.ndarray | None = None  # backward gate projection (bidirectional)
    b_vb: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidArgumentError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        M, N, q = self.input_dim, self.hidden_dim, self.memory_order
        expected = {"W_u": (1, M), "b_u": (1,), "W_v": (1, M), "b_v": (1,),
                    "W_x": (N, M), "W_h": (N, q), "b_o": (N,)}
        if self.variant == "bidirectional":
            expected.update(W_vb=(1, M), b_vb=(1,))
            if self.W_vb is None or self.b_vb is None:
                raise InvalidArgumentError("bidirectional variant needs W_vb and b_vb")
        for name, shape in expected.items():
            if tuple(getattr(self, name).shape) != shape:
                raise InvalidArgumentError(
                    f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")
        if self.system.order != q:
            raise InvalidArgumentError(
                f"memory system order {self.system.order} does not match W_h width {q}")
        n = self.gate_system.order
        if not 1 <= n <= MAX_DELAYS:
            raise InvalidArgumentError(f"delay count must be in [1, {MAX_DELAYS}], got {n}")
        for f in (self.f_u, self.f_o):
            ag.activation(f)

    @property
    def trainable(self):
        names = ("W_u", "b_u", "W_v", "b_v", "W_x", "W_h", "b_o")
        return names + ("W_vb", "b_vb") if self.variant == "bidirectional" else names

    @property
    def input_dim(self):
        return self.W_x.shape[1]

    @property
    def hidden_dim(self):
        return self.W_x.shape[0]

    @property
    def memory_order(self):
        return self.W_h.shape[1]

    @property
    def delay_count(self):
        return self.gate_system.order

    def arrays(self):
        return {name: ag.value_of(getattr(self, name)) for name in self.trainable}

    def bind(self, tape, prefix=""):
        return replace(self, **{n: tape.param(prefix + n, getattr(self, n)) for n in self.trainable})

    def with_arrays(self, arrays, prefix=""):
        return replace(self, **{n: arrays[prefix + n] for n in self.trainable})


def init_pdmu(input_dim, hidden_dim, memory_order=None, delay_count=DEFAULT_DELAYS,
              variant="plain", theta=None, gate_theta=None, rng=None,
              f_u="relu", f_o="relu", dt=1.0):
    """Kaiming-uniform PDMU layer.

    The weights shared with an LMU layer are drawn first and in the same order
    as ``init_lmu``, so equal seeds give equal shared weights.
    """
    from .train import kaiming_init

    q = hidden_dim if memory_order is None else memory_order
    n = delay_count
    theta = float(q) if theta is None else float(theta)
    gate_theta = float(n) if gate_theta is None else float(gate_theta)
    rng = np.random.default_rng(rng)
    M, N = input_dim, hidden_dim
    W_u = kaiming_init((1, M), M, rng)
    b_u = kaiming_init((1,), M, rng)
    W_x = kaiming_init((N, M), M + q, rng)
    W_h = kaiming_init((N, q), M + q, rng)
    b_o = kaiming_init((N,), M + q, rng)
    W_v = kaiming_init((1, M), M, rng)
    b_v = kaiming_init((1,), M, rng)
    extra = {}
    if variant == "bidirectional":
        extra = dict(W_vb=kaiming_init((1, M), M, rng), b_vb=kaiming_init((1,), M, rng))
    return PdmuLayerParams(
        W_u=W_u, b_u=b_u, W_v=W_v, b_v=b_v, W_x=W_x, W_h=W_h, b_o=b_o,
        system=legendre_system(q, theta, dt),
        gate_system=legendre_system(n, gate_theta, dt),
        variant=variant, f_u=f_u, f_o=f_o, **extra)


# --- gates ------------------------------------------------------------------------

def _gate_logits(p, x, mode, window=None, backward=False):
    """Gate state d over the whole sequence or ``window`` as a Var (..., T', n)."""
    f_u = ag.activation(p.f_u)
    W, b = (p.W_vb, p.b_vb) if backward else (p.W_v, p.b_v)
    v = f_u(ag.linear(x, W, b))[..., 0]
    T = v.shape[-1]
    if backward:
        v = ag.flip(v, -1)
    if window is not None:
        start, stop = window
        if backward:
            start, stop = T - stop, T - start
        d = ag.scan(v, p.gate_system, window=(start, stop))
    else:
        d = ag.scan(v, p.gate_system, scan_method(mode))
    return ag.flip(d, -2) if backward else d


def _gates(p, d):
    g = ag.softmax(d, axis=-1)
    if p.variant == "efficient":
        g = g * ag.ste_mask(d)
    return g


def delay_gates(params: PdmuLayerParams, x, mode="parallel", backward=False):
    """Softmax gate rows (..., T, n); ``backward=True`` gives the reverse-time gates."""
    x = np.asarray(x, dtype=float)
    _check_input(x, params.input_dim)
    if backward and params.variant != "bidirectional":
        raise InvalidArgumentError("backward gates exist only for the bidirectional variant")
    return ag.softmax(_gate_logits(params, x, mode, backward=backward)).value


def efficient_mask(gates):
    """(one-hot arg-max mask, gates * mask); ties resolve to the lowest offset."""
    gates = np.asarray(gates, dtype=float)
    mask = ag.one_hot_argmax(gates)
    return mask, gates * mask


def combine_delayed(m, gates, variant="plain", back_gates=None):
    """Gated sum of delayed memories, array version of the layer's combine step."""
    if variant not in VARIANTS:
        raise InvalidArgumentError(f"unknown variant {variant!r}")
    gates = np.asarray(gates, dtype=float)
    if variant == "efficient":
        gates = efficient_mask(gates)[1]
    if variant == "bidirectional" and back_gates is None:
        raise InvalidArgumentError("bidirectional combine needs backward gates")
    bg = back_gates if variant == "bidirectional" else None
    return ag.combine_delayed(np.asarray(m, dtype=float), gates, bg).value


@dataclass(frozen=True)
class GateMatrix:
    """Banded gate matrix stored by rows.

    ``forward[i, j-1]`` sits at (i, i+j); ``backward[i, j-1]`` at (i, i-j).
    Entries that would fall outside the T x T matrix are kept in the band
    but dropped by :meth:`dense`.
    """

    forward: np.ndarray
    backward: np.ndarray | None = None

    @property
    def T(self):
        return self.forward.shape[0]

    @property
    def n(self):
        return self.forward.shape[1]

    def dense(self):
        T, n = self.T, self.n
        D = np.eye(T)
        for j in range(1, min(n, T - 1) + 1):
            i = np.arange(T - j)
            D[i, i + j] = self.forward[i, j - 1]
            if self.backward is not None:
                D[i + j, i] = self.backward[i + j, j - 1]
        return D

    def combine(self, m):
        """Column-wise sum of D o M: H[k] = sum_i D[i, k] m[i]."""
        return self.dense().T @ np.asarray(m, dtype=float)


def build_gate_matrix(gates, variant="plain", back_gates=None) -> GateMatrix:
    gates = np.asarray(gates, dtype=float)
    if gates.ndim != 2 or gates.shape[0] < 1:
        raise InvalidArgumentError(f"gates must have shape (T, n), got {gates.shape}")
    if variant == "efficient":
        gates = efficient_mask(gates)[1]
    back = None
    if variant == "bidirectional":
        if back_gates is None:
            raise InvalidArgumentError("bidirectional gate matrix needs backward gates")
        back = np.asarray(back_gates, dtype=float)
    return GateMatrix(gates, back)


def dump_gates(path, gate_matrix: GateMatrix):
    """Write the band as text: one row per emission step, columns = offsets 1..n."""
    band = gate_matrix.forward
    header = "forward gates; rows = emission step, columns = offsets 1..n"
    if gate_matrix.backward is not None:
        band = np.hstack([band, gate_matrix.backward])
        header += "; then backward offsets 1..n"
    np.savetxt(path, band, fmt="%.10g", header=header)


# --- layer forward ------------------------------------------------------------------

def pdmu_layer(p: PdmuLayerParams, x, mode="parallel", method="auto", tail=None):
    """Tape-aware forward returning (o, h) as Vars.

    ``tail`` restricts the outputs to the final ``tail`` steps; in parallel
    mode only the memory and gate states those steps depend on are computed.
    """
    if mode == "sequential":
        if p.variant == "bidirectional":
            raise UnsupportedModeError("the bidirectional variant is non-causal; use parallel mode")
        outs, hs = pdmu_sequential(p, _steps(x))
        if tail is not None:
            outs, hs = outs[-tail:], hs[-tail:]
        return ag.stack(outs, axis=-2), ag.stack(hs, axis=-2)
    scan_method(mode)
    T = _check_input(x, p.input_dim)
    n = p.delay_count
    f_u, f_o = ag.activation(p.f_u), ag.activation(p.f_o)
    window = None
    if tail is not None and tail < T:
        window = (max(0, T - tail - n), T)
    u = f_u(ag.linear(x, p.W_u, p.b_u))[..., 0]
    if window is None:
        m = ag.scan(u, p.system, method)
    else:
        m = ag.scan(u, p.system, window=window)
    g = _gates(p, _gate_logits(p, x, mode, window))
    gb = None
    if p.variant == "bidirectional":
        gb = ag.softmax(_gate_logits(p, x, mode, window, backward=True))
    h = ag.combine_delayed(m, g, gb)
    if window is not None:
        h = h[..., h.shape[-2] - tail:, :]
        x = ag.getitem(x, (Ellipsis, slice(T - tail, T), slice(None)))
    o = f_o(ag.linear(x, p.W_x, p.b_o) + ag.linear(h, p.W_h))
    return o, h


def _steps(x):
    if isinstance(x, list):
        return x
    if isinstance(x, ag.Var):
        return [x[..., k, :] for k in range(x.shape[-2])]
    x = np.asarray(x, dtype=float)
    return [x[..., k, :] for k in range(x.shape[-2])]


def initial_state(p: PdmuLayerParams, batch_shape=()):
    """Zeroed sequential-inference state: memory, gate state, pending ring."""
    q, n = p.memory_order, p.delay_count
    dtype = p.system.dtype
    return {
        "m": np.zeros(batch_shape + (q,), dtype=dtype),
        "d": np.zeros(batch_shape + (n,), dtype=dtype),
        "ring": [None] * n,
    }


def pdmu_step(p: PdmuLayerParams, x_k, state):
    """Advance one step; returns (o_k, h_k, new_state).

    ``ring[j-1]`` holds the gated memories already routed to the step j
    ahead, so the step needs no history beyond this state.
    """
    f_u, f_o = ag.activation(p.f_u), ag.activation(p.f_o)
    u = f_u(ag.linear(x_k, p.W_u, p.b_u))[..., 0]
    v = f_u(ag.linear(x_k, p.W_v, p.b_v))[..., 0]
    m = ag.scan_step(state["m"], u, p.system)
    d = ag.scan_step(state["d"], v, p.gate_system)
    g = _gates(p, d)
    ring = state["ring"]
    h = m if ring[0] is None else m + ring[0]
    ring = ring[1:] + [None]
    for j in range(p.delay_count):
        routed = g[..., j:j + 1] * m
        ring[j] = routed if ring[j] is None else ring[j] + routed
    o = f_o(ag.linear(x_k, p.W_x, p.b_o) + ag.linear(h, p.W_h))
    return o, h, {"m": m, "d": d, "ring": ring}


def pdmu_sequential(p: PdmuLayerParams, xs):
    """Run ``pdmu_step`` over a list of per-step inputs; returns (outputs, hiddens)."""
    if p.variant == "bidirectional":
        raise UnsupportedModeError("the bidirectional variant is non-causal; use parallel mode")
    first = ag.value_of(xs[0])
    if first.shape[-1] != p.input_dim:
        raise InvalidArgumentError(
            f"expected input width {p.input_dim}, got {first.shape[-1]}")
    state = initial_state(p, first.shape[:-1])
    outs, hs = [], []
    for x_k in xs:
        o, h, state = pdmu_step(p, x_k, state)
        outs.append(o)
        hs.append(h)
    return outs, hs


def pdmu_forward(params: PdmuLayerParams, x, mode="parallel"):
    """(o, h) arrays for x of shape (T, M) or (B, T, M)."""
    x = np.asarray(x, dtype=float)
    _check_input(x, params.input_dim)
    o, h = pdmu_layer(params, x, mode)
    return o.value, h.value


class PdmuStream:
    """Real-time inference: one input vector in, one output vector out.

    Holds exactly the memory (q), gate state (n) and last output (N), plus the
    ring of n pending routed memories. Single owner; not thread-safe.
    """

    def __init__(self, params: PdmuLayerParams):
        if params.variant == "bidirectional":
            raise UnsupportedModeError("the bidirectional variant cannot run as a stream")
        self.params = params
        self.reset()

    def reset(self):
        self.state = initial_state(self.params)
        self.output = np.zeros(self.params.hidden_dim)

    def step(self, x_k):
        o, _, state = pdmu_step(self.params, np.asarray(x_k, dtype=float), self.state)
        self.state = {"m": state["m"].value, "d": state["d"].value,
                      "ring": [None if r is None else r.value for r in state["ring"]]}
        self.output = o.value
        return self.output

    def core_state_size(self):
        return self.output.size + self.state["m"].size + self.state["d"].size

    def ring_size(self):
        return self.params.delay_count * self.params.memory_order


def param_count(params) -> int:
    """Number of trainable scalars (the frozen state-space matrices excluded)."""
    return int(sum(np.size(ag.value_of(getattr(params, n))) for n in params.trainable))


def runtime_state_count(params) -> int:
    """Core scalars retained between steps: N outputs + q memory + n gate states.

    The ring of n pending routed memories (n * q scalars) is reported
    separately by :func:`ring_buffer_size`.
    """
    n = getattr(params, "delay_count", 0)
    return params.hidden_dim + params.memory_order + n


def ring_buffer_size(params) -> int:
    return params.delay_count * params.memory_order
