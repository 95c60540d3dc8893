"""Wall-clock cost of one training step for the parallel and per-step paths.

A timed step is a full forward pass, reverse sweep and Adam update. With
``bench_target = classify`` the loss reads a 10-way label off the final step,
as in sequence classification; ``sequence`` regresses a target at every step.
"""

from __future__ import annotations

import csv
import io
import time

import numpy as np

from . import autograd as ag
from .config import RunConfig
from .model import ModelSpec, build_network
from .train import AdamState, adam_step, kaiming_init

BENCH_COLUMNS = ("variant", "T", "batch", "N", "ms_per_step", "ratio_vs_sequential")


BENCH_CLASSES = 10


def init_lstm(input_dim, hidden, rng, outputs=1):
    fan_in = input_dim + hidden
    return {"W": kaiming_init((4 * hidden, fan_in), fan_in, rng),
            "b": kaiming_init((4 * hidden,), fan_in, rng),
            "W_y": kaiming_init((outputs, hidden), hidden, rng)}


def lstm_forward(params, x, classify=False):
    """Plain LSTM stepped one timestep at a time.

    Returns (B, C) logits from the final step when ``classify``, otherwise
    (B, T) per-step predictions.
    """
    B, T, _ = x.shape
    N = params["W_y"].shape[1]
    h = np.zeros((B, N))
    c = np.zeros((B, N))
    outs = []
    for k in range(T):
        z = ag.linear(ag.concat(x[:, k, :], h), params["W"], params["b"])
        i = ag.sigmoid(z[:, :N])
        f = ag.sigmoid(z[:, N:2 * N])
        o = ag.sigmoid(z[:, 2 * N:3 * N])
        cand = ag.tanh(z[:, 3 * N:])
        c = f * c + i * cand
        h = o * ag.tanh(c)
        if not classify:
            outs.append(ag.linear(h, params["W_y"])[:, 0])
    if classify:
        return ag.linear(h, params["W_y"])
    return ag.stack(outs, axis=-1)


def _time(step, repeats):
    step()  # warm-up: kernel caches and allocator
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        step()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def run_bench(cfg: RunConfig, T=None, batch=None, hidden=None, variants=None):
    """Rows of ``BENCH_COLUMNS``; ratios are sequential ms / variant ms."""
    T = T or cfg.seq_len
    batch = batch or cfg.batch
    N = hidden or cfg.hidden
    variants = variants or ("pdmu-parallel", "pdmu-sequential", "lstm-sequential")
    rng = np.random.default_rng([cfg.seed, 5])
    classify = cfg.bench_target == "classify"
    x = rng.uniform(-1.0, 1.0, size=(batch, T, 1))
    if classify:
        y = rng.integers(0, BENCH_CLASSES, size=batch)
    else:
        y = np.roll(x[..., 0], cfg.delay % T, axis=-1)
    outputs = BENCH_CLASSES if classify else 1
    spec = ModelSpec(variant="pdmu", input_dim=1, hidden=N, output_dim=outputs,
                     memory_order=cfg.memory_order, delays=cfg.delays, layers=cfg.layers,
                     theta=cfg.theta, gate_theta=cfg.gate_theta, classify=classify,
                     f_u=cfg.f_u, f_o=cfg.f_o)
    net = build_network(spec, cfg.seed)
    lstm = init_lstm(1, N, rng, outputs)
    lstm_loss = ag.cross_entropy if classify else ag.mse

    def pdmu_step(mode):
        def step():
            tape = ag.Tape()
            bound = net.bind(tape)
            loss = bound.loss(bound.forward(x, mode), y)
            grads = ag.backward(tape, loss)
            adam_step(AdamState(), net.params(), grads)
        return step

    def lstm_step():
        tape = ag.Tape()
        bound = {k: tape.param(k, v) for k, v in lstm.items()}
        loss = lstm_loss(lstm_forward(bound, x, classify), y)
        grads = ag.backward(tape, loss)
        adam_step(AdamState(), lstm, grads)

    steps = {"pdmu-parallel": pdmu_step("parallel"),
             "pdmu-sequential": pdmu_step("sequential"),
             "lstm-sequential": lstm_step}
    timings = {v: _time(steps[v], cfg.bench_repeats) for v in variants}
    ref = timings.get("pdmu-sequential")
    if ref is None:
        ref = _time(steps["pdmu-sequential"], cfg.bench_repeats)
    return [{"variant": v, "T": T, "batch": batch, "N": N, "ms_per_step": ms,
             "ratio_vs_sequential": ref / ms} for v, ms in timings.items()]


def format_bench(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "ms_per_step": f"{row['ms_per_step']:.3f}",
                         "ratio_vs_sequential": f"{row['ratio_vs_sequential']:.3f}"})
    return buf.getvalue()
