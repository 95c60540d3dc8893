"""Leaky integrate-and-fire neurons and the spiking delayed memory layer.

Spikes are exact {0, 1} values in the forward pass; gradients pass through
a triangular surrogate of the Heaviside derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .errors import InvalidArgumentError
from .lmu_cell import scan_method
from .pdmu_cell import PdmuLayerParams, init_pdmu

SPIKING_TRAINABLE = ("W_u", "W_v", "W_x", "W_h")


@dataclass(frozen=True)
class LifConfig:
    threshold: float = 1.0
    leak: float = 0.9
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise InvalidArgumentError(f"threshold must be positive, got {self.threshold}")
        if not 0.0 < self.leak <= 1.0:
            raise InvalidArgumentError(f"leak must lie in (0, 1], got {self.leak}")
        if not self.surrogate_width > 0:
            raise InvalidArgumentError(
                f"surrogate_width must be positive, got {self.surrogate_width}")


def lif_step(potential, current, cfg: LifConfig):
    """One LIF update: returns (spikes, new_potential). Spiking units reset to 0."""
    p = cfg.leak * np.asarray(potential, dtype=float) + np.asarray(current, dtype=float)
    spikes = (p - cfg.threshold >= 0).astype(float)
    return spikes, np.where(spikes > 0, 0.0, p)


def surrogate_grad(x, cfg: LifConfig = LifConfig()):
    """Triangular stand-in for dTheta/dx at x = potential - threshold."""
    return ag.triangle(np.asarray(x, dtype=float), cfg.surrogate_width)


def lif(current, cfg: LifConfig):
    """LIF over the time axis (-2) of ``current``; returns (spikes Var, potentials array).

    ``potentials[k]`` is the membrane potential after the reset of step k.
    """
    current = ag.as_var(current)
    I = current.value
    T = I.shape[-2]
    width, theta, leak = cfg.surrogate_width, cfg.threshold, cfg.leak
    pre = np.empty_like(I)
    spikes = np.empty_like(I)
    post = np.empty_like(I)
    p = np.zeros(I.shape[:-2] + I.shape[-1:], dtype=I.dtype)
    anchors = []
    for k in range(T):
        p_new = leak * p + I[..., k, :]
        a = p_new - theta
        anchor = ag._anchor(a)
        if anchor is None:
            s = (a >= 0).astype(I.dtype)
        else:
            s = (anchor >= 0).astype(I.dtype) + ag._ramp(a, width) - ag._ramp(anchor, width)
        anchors.append(anchor)
        p = p_new * (1.0 - s)
        pre[..., k, :], spikes[..., k, :], post[..., k, :] = p_new, s, p

    def adjoint(g):
        gI = np.empty_like(g)
        lam = np.zeros_like(p)
        for k in range(T - 1, -1, -1):
            p_new, s = pre[..., k, :], spikes[..., k, :]
            gs = g[..., k, :] - lam * p_new
            gp = lam * (1.0 - s) + gs * ag.triangle(p_new - theta, width)
            gI[..., k, :] = gp
            lam = leak * gp
        return (gI,)

    return ag._record(spikes, (current,), adjoint), post


def init_encoder(input_dim, channels, rng=None):
    from .train import kaiming_init

    rng = np.random.default_rng(rng)
    return {"W_e": kaiming_init((channels, input_dim), input_dim, rng),
            "b_e": kaiming_init((channels,), input_dim, rng)}


def encode(x, W_e, b_e, cfg: LifConfig):
    """Tape-aware encoding layer: LIF over a linear projection of x."""
    spikes, _ = lif(ag.linear(x, W_e, b_e), cfg)
    return spikes


def spike_encode(x, W_e, b_e, cfg: LifConfig = LifConfig()):
    """Binary spike trains (..., T, C) from real-valued x (..., T, M)."""
    return encode(np.asarray(x, dtype=float), W_e, b_e, cfg).value


def init_spiking_dmu(input_dim, hidden_dim, memory_order=None, delay_count=5,
                     theta=None, gate_theta=None, rng=None, dt=1.0):
    """Bias-free PDMU weights for a spiking layer."""
    p = init_pdmu(input_dim, hidden_dim, memory_order, delay_count, theta=theta,
                  gate_theta=gate_theta, rng=rng, dt=dt)
    zero = np.zeros(1)
    return replace(p, b_u=zero, b_v=zero, b_o=np.zeros(hidden_dim))


def bind_spiking(p: PdmuLayerParams, tape, prefix=""):
    return replace(p, **{n: tape.param(prefix + n, getattr(p, n)) for n in SPIKING_TRAINABLE})


def spiking_arrays(p: PdmuLayerParams):
    return {n: ag.value_of(getattr(p, n)) for n in SPIKING_TRAINABLE}


def _check_binary(x):
    xv = ag.value_of(x)
    # relaxed replays (finite-difference checks) carry continuous spike values
    if not ag.replaying() and not np.all((xv == 0) | (xv == 1)):
        raise InvalidArgumentError("spiking layer input must be binary (0/1)")
    return xv


def spiking_dmu_layer(p: PdmuLayerParams, cfg: LifConfig, spikes_in, mode="sequential"):
    """Tape-aware spiking DMU layer; returns (spikes Var, trace dict).

    u[k] = Theta(W_u x[k] - threshold), v[k] likewise with W_v; both drive the
    usual memory and gate scans, and an output LIF integrates W_h h + W_x x.
    The layer is bias-free so that silence stays silent.
    """
    xv = _check_binary(spikes_in)
    if xv.shape[-1] != p.input_dim:
        raise InvalidArgumentError(
            f"expected {p.input_dim} input channels, got {xv.shape[-1]}")
    method = scan_method(mode)
    width = cfg.surrogate_width
    u = ag.heaviside(ag.linear(spikes_in, p.W_u) - cfg.threshold, width)[..., 0]
    v = ag.heaviside(ag.linear(spikes_in, p.W_v) - cfg.threshold, width)[..., 0]
    m = ag.scan(u, p.system, method)
    d = ag.scan(v, p.gate_system, method)
    g = ag.softmax(d, axis=-1)
    if p.variant == "efficient":
        g = g * ag.ste_mask(d)
    h = ag.combine_delayed(m, g)
    current = ag.linear(spikes_in, p.W_x) + ag.linear(h, p.W_h)
    spikes, potentials = lif(current, cfg)
    synops = synaptic_ops(p, xv, u.value, v.value)
    trace = {"u": u.value, "v": v.value, "m": m.value, "gates": g.value, "h": h.value,
             "current": current.value, "potential": potentials, "synops": synops}
    return spikes, trace


def synaptic_ops(p: PdmuLayerParams, x, u, v):
    """Spike-triggered accumulates: each input spike fans out to W_x, W_u and W_v,
    each u spike into the q memory states, each v spike into the n gate states."""
    N, q, n = p.hidden_dim, p.memory_order, p.delay_count
    return int(np.sum(x) * (N + 2) + np.sum(u) * q + np.sum(v) * n)


def spiking_dmu_forward(p: PdmuLayerParams, cfg: LifConfig, spikes_in, mode="sequential"):
    """Output spikes (..., T, N) and the per-layer trace (incl. ``synops``)."""
    spikes, trace = spiking_dmu_layer(p, cfg, np.asarray(spikes_in, dtype=float), mode)
    return spikes.value, trace
