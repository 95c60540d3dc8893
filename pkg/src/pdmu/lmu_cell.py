"""Legendre Memory Unit layer with a scalar, input-driven memory."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial import legendre

from . import autograd as ag
from .errors import InvalidArgumentError
from .ssm import DiscreteSystem, legendre_system

MODES = ("sequential", "parallel")


@dataclass(frozen=True)
class LmuLayerParams:
    W_u: np.ndarray  # (1, M)
    b_u: np.ndarray  # (1,)
    W_x: np.ndarray  # (N, M)
    W_m: np.ndarray  # (N, q)
    b_o: np.ndarray  # (N,)
    system: DiscreteSystem
    f_u: str = "relu"
    f_o: str = "relu"

    trainable = ("W_u", "b_u", "W_x", "W_m", "b_o")

    def __post_init__(self):
        M, N, q = self.input_dim, self.hidden_dim, self.memory_order
        expected = {"W_u": (1, M), "b_u": (1,), "W_x": (N, M), "W_m": (N, q), "b_o": (N,)}
        for name, shape in expected.items():
            if tuple(getattr(self, name).shape) != shape:
                raise InvalidArgumentError(
                    f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")
        if self.system.order != q:
            raise InvalidArgumentError(
                f"memory system order {self.system.order} does not match W_m width {q}")
        for f in (self.f_u, self.f_o):
            ag.activation(f)

    @property
    def input_dim(self):
        return self.W_x.shape[1]

    @property
    def hidden_dim(self):
        return self.W_x.shape[0]

    @property
    def memory_order(self):
        return self.W_m.shape[1]

    def arrays(self):
        return {name: ag.value_of(getattr(self, name)) for name in self.trainable}

    def bind(self, tape, prefix=""):
        """Copy whose trainable fields are parameters on ``tape``."""
        return replace(self, **{n: tape.param(prefix + n, getattr(self, n)) for n in self.trainable})

    def with_arrays(self, arrays, prefix=""):
        return replace(self, **{n: arrays[prefix + n] for n in self.trainable})


def init_lmu(input_dim, hidden_dim, memory_order=None, theta=None, rng=None,
             f_u="relu", f_o="relu", dt=1.0):
    """Kaiming-uniform weights; memory_order defaults to hidden_dim, theta to memory_order."""
    from .train import kaiming_init

    q = hidden_dim if memory_order is None else memory_order
    theta = float(q) if theta is None else float(theta)
    rng = np.random.default_rng(rng)
    M, N = input_dim, hidden_dim
    return LmuLayerParams(
        W_u=kaiming_init((1, M), M, rng),
        b_u=kaiming_init((1,), M, rng),
        W_x=kaiming_init((N, M), M + q, rng),
        W_m=kaiming_init((N, q), M + q, rng),
        b_o=kaiming_init((N,), M + q, rng),
        system=legendre_system(q, theta, dt),
        f_u=f_u, f_o=f_o,
    )


def scan_method(mode, method="auto"):
    if mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    return "sequential" if mode == "sequential" else method


def _check_input(x, M):
    xv = ag.value_of(x)
    if xv.ndim < 2 or xv.shape[-1] != M:
        raise InvalidArgumentError(f"expected input of shape (..., T, {M}), got {xv.shape}")
    if not np.all(np.isfinite(xv)):
        raise InvalidArgumentError("input contains non-finite values")
    return xv.shape[-2]


def lmu_layer(p: LmuLayerParams, x, mode="parallel", method="auto", tail=None):
    """Tape-aware forward; returns (o, m) as Vars. ``tail`` keeps only the final steps."""
    T = _check_input(x, p.input_dim)
    f_u, f_o = ag.activation(p.f_u), ag.activation(p.f_o)
    u = f_u(ag.linear(x, p.W_u, p.b_u))[..., 0]
    method = scan_method(mode, method)
    if tail is not None and mode == "parallel" and tail < T:
        m = ag.scan(u, p.system, window=(T - tail, T))
        x = ag.getitem(x, (Ellipsis, slice(T - tail, T), slice(None)))
    else:
        m = ag.scan(u, p.system, method)
        if tail is not None and tail < T:
            m = m[..., T - tail:, :]
            x = ag.getitem(x, (Ellipsis, slice(T - tail, T), slice(None)))
    o = f_o(ag.linear(x, p.W_x, p.b_o) + ag.linear(m, p.W_m))
    return o, m


def lmu_sequential(p: LmuLayerParams, xs):
    """Per-step evaluation over a list of step inputs; returns (outputs, memories)."""
    f_u, f_o = ag.activation(p.f_u), ag.activation(p.f_o)
    first = ag.value_of(xs[0])
    m = np.zeros(first.shape[:-1] + (p.memory_order,), dtype=p.system.dtype)
    outs, ms = [], []
    for x_k in xs:
        u = f_u(ag.linear(x_k, p.W_u, p.b_u))[..., 0]
        m = ag.scan_step(m, u, p.system)
        outs.append(f_o(ag.linear(x_k, p.W_x, p.b_o) + ag.linear(m, p.W_m)))
        ms.append(m)
    return outs, ms


def lmu_forward(params: LmuLayerParams, x, mode="parallel"):
    """(o, m) arrays for input x of shape (T, M) or (B, T, M)."""
    o, m = lmu_layer(params, np.asarray(x, dtype=float), mode)
    return o.value, m.value


def window_reconstruct(m_k, fraction):
    """Decode the input ``fraction`` of a window into the past from memory ``m_k``.

    Uses shifted Legendre polynomials P_i(2 * fraction - 1).
    """
    m_k = np.asarray(m_k, dtype=float)
    if not 0.0 <= fraction <= 1.0:
        raise InvalidArgumentError(f"fraction must lie in [0, 1], got {fraction}")
    return legendre.legval(2.0 * fraction - 1.0, np.moveaxis(m_k, -1, 0))


def lmu_param_count(params: LmuLayerParams) -> int:
    return int(np.sum([np.size(ag.value_of(getattr(params, n))) for n in params.trainable]))
