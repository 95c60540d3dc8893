"""Initialization, optimizer, losses and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import InvalidArgumentError, NumericOverflowError

log = logging.getLogger(__name__)


def kaiming_init(shape, fan_in, rng=None):
    """Kaiming-uniform samples on [-sqrt(6 / fan_in), sqrt(6 / fan_in)]."""
    if fan_in < 1:
        raise InvalidArgumentError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.default_rng(rng)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, clip=None) -> dict:
    """One bias-corrected Adam update; returns a new parameter dict.

    ``clip`` rescales the global gradient norm when it exceeds the value.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericOverflowError(f"non-finite gradient for parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise InvalidArgumentError(
                f"gradient shape {np.shape(g)} does not match parameter {name!r} "
                f"of shape {np.shape(params[name])}")
    scale = 1.0
    if clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip:
            scale = clip / norm
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    updated = dict(params)
    for name, g in grads.items():
        g = g * scale
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        updated[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return updated


def last_step_cross_entropy(logits, labels, decode="last"):
    """Cross-entropy on the final step of (B, T, C) or (T, C) logits.

    ``decode="mean"`` averages the logits over time instead.
    """
    logits = ag.as_var(logits)
    if logits.shape[-1] < 2:
        raise InvalidArgumentError("need at least two classes")
    if decode == "last":
        z = logits[..., -1, :]
    elif decode == "mean":
        z = ag.mean(logits, axis=-2)
    else:
        raise InvalidArgumentError(f"unknown decode {decode!r}")
    return ag.cross_entropy(z, labels)
