"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

import numpy as np

from . import autograd as ag


def relative_error(a, b, floor=1e-12):
    """||a - b|| / max(||a||, ||b||), with tiny norms treated as agreement."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def total_relative_error(analytic: dict, numeric: dict):
    """Norm-wise relative error over all parameters concatenated.

    Per-tensor errors blow up for tensors whose true gradient is zero but
    whose central difference picks up O(h) truncation at a surrogate's
    second-derivative kink; the concatenated norm does not.
    """
    names = sorted(numeric)
    return relative_error(np.concatenate([np.ravel(analytic[n]) for n in names]),
                          np.concatenate([np.ravel(numeric[n]) for n in names]))


def check_gradients(loss_fn, params: dict, h=1e-5, names=None):
    """Compare tape gradients of ``loss_fn`` with central differences.

    ``loss_fn(values)`` maps a name -> array-or-Var dict to a scalar Var.
    Non-smooth ops are anchored at the unperturbed point, so the reference
    is the surrogate-defined loss. Returns ``(errors, analytic, numeric)``
    keyed by parameter name.
    """
    names = list(params) if names is None else list(names)
    with ag.Relaxation() as relax:
        tape = ag.Tape()
        bound = dict(params)
        for name in names:
            bound[name] = tape.param(name, params[name])
        analytic = ag.backward(tape, loss_fn(bound))
        numeric = {}
        for name in names:
            base = np.array(params[name], dtype=float)
            grad = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                vals = []
                for step in (h, -h):
                    trial = base.copy()
                    trial[idx] += step
                    relax.freeze()
                    vals.append(float(loss_fn({**params, name: trial}).value))
                grad[idx] = (vals[0] - vals[1]) / (2 * h)
            numeric[name] = grad
    errors = {name: relative_error(analytic[name], numeric[name]) for name in names}
    return errors, analytic, numeric
