"""Task loading and the training loop.

Training follows the usual recipe for these models: build the Legendre and
gate systems, discretize them, Kaiming-initialize the weights, then iterate
forward pass, reverse sweep and Adam update until the epoch budget, the step
budget or the patience on validation loss runs out.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .config import RunConfig
from .datasets import (SequenceBatch, delay_recall_task, load_binned_spikes, psmnist_batch,
                       spike_pattern_task, split_indices)
from .errors import ConfigError
from .model import ModelSpec, Network, build_network
from .spiking import LifConfig
from .train import AdamState, adam_step

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "wall_seconds")


def mnist_paths(data_dir, split="train"):
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        images = os.path.join(data_dir, f"{prefix}-images-idx3-ubyte{suffix}")
        labels = os.path.join(data_dir, f"{prefix}-labels-idx1-ubyte{suffix}")
        if os.path.exists(images) and os.path.exists(labels):
            return images, labels
    return (os.path.join(data_dir, f"{prefix}-images-idx3-ubyte"),
            os.path.join(data_dir, f"{prefix}-labels-idx1-ubyte"))


def load_task(cfg: RunConfig):
    """(train, validation) batches for the configured task."""
    if cfg.task == "delay-recall":
        train = delay_recall_task(cfg.train_size, cfg.seq_len, cfg.delay, seed=[cfg.seed, 11])
        val = delay_recall_task(cfg.val_size, cfg.seq_len, cfg.delay, seed=[cfg.seed, 12])
        return train, val
    if cfg.task == "spike-pattern":
        full = spike_pattern_task(cfg.train_size + cfg.val_size, cfg.seq_len, cfg.channels,
                                  cfg.classes, seed=cfg.seed)
    elif cfg.task == "psmnist":
        if not cfg.data_dir:
            raise ConfigError("data_dir: required for the psmnist task")
        images, labels = mnist_paths(cfg.data_dir, "train")
        full = psmnist_batch(images, labels, seed=cfg.perm_seed,
                             limit=cfg.train_limit + cfg.val_limit)
    else:
        if not cfg.data_path:
            raise ConfigError("data_path: required for the spikes task")
        full = load_binned_spikes(cfg.data_path)
    train_idx, val_idx = split_indices(len(full), _val_fraction(cfg, len(full)), seed=cfg.seed)
    return full.take(train_idx), full.take(val_idx)


def _val_fraction(cfg, total):
    if total == 0:
        return 0.0
    if cfg.task == "psmnist":
        return cfg.val_limit / total
    if cfg.task == "spike-pattern":
        return cfg.val_size / total
    return 0.2


def spec_from_config(cfg: RunConfig, data: SequenceBatch) -> ModelSpec:
    classify = data.is_classification
    return ModelSpec(
        variant=cfg.variant, input_dim=data.inputs.shape[-1], hidden=cfg.hidden,
        output_dim=data.num_classes if classify else 1, memory_order=cfg.memory_order,
        delays=cfg.delays, layers=cfg.layers, theta=cfg.theta, gate_theta=cfg.gate_theta,
        classify=classify, decode=cfg.decode, encoder_channels=cfg.encoder_channels,
        lif=LifConfig(cfg.lif_threshold, cfg.lif_leak, cfg.surrogate_width),
        readout_leak=cfg.readout_leak, f_u=cfg.f_u, f_o=cfg.f_o)


@dataclass
class Evaluation:
    loss: float
    accuracy: float
    predictions: np.ndarray


def evaluate(net: Network, data: SequenceBatch, mode="parallel", batch=256) -> Evaluation:
    total, preds = 0.0, []
    dtype = net.dtype
    for start in range(0, len(data), batch):
        part = data.take(slice(start, start + batch))
        out = net.forward(part.inputs.astype(dtype), mode)
        total += float(net.loss(out, part.labels).value) * len(part)
        preds.append(np.argmax(out.value, axis=-1) if data.is_classification else out.value)
    predictions = np.concatenate(preds) if preds else np.zeros(0)
    acc = float(np.mean(predictions == data.labels)) if data.is_classification else float("nan")
    return Evaluation(total / max(len(data), 1), acc, predictions)


@dataclass
class TrainResult:
    network: Network
    optimizer: AdamState
    history: list = field(default_factory=list)
    rng: np.random.Generator | None = None
    steps: int = 0


def train_step(net: Network, optimizer: AdamState, part: SequenceBatch, mode, clip=None):
    tape = ag.Tape()
    bound = net.bind(tape)
    loss = bound.loss(bound.forward(part.inputs, mode), part.labels)
    grads = ag.backward(tape, loss)
    params = adam_step(optimizer, net.params(), grads, clip=clip)
    return net.with_params(params), float(loss.value)


def fit(cfg: RunConfig, train: SequenceBatch, val: SequenceBatch, network=None,
        on_epoch=None) -> TrainResult:
    dtype = np.dtype(cfg.dtype)
    net = network or build_network(spec_from_config(cfg, train), cfg.seed)
    if dtype != np.float64:
        net = net.astype(dtype)
    train = SequenceBatch(train.inputs.astype(dtype), train.labels, train.lengths, train.num_classes)
    optimizer = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    mode = "sequential" if cfg.variant == "spiking-dmu" else cfg.train_mode
    result = TrainResult(net, optimizer, rng=rng)
    best, stale = np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch):
            part = train.take(order[start:start + cfg.batch])
            net, loss = train_step(net, optimizer, part, mode, clip=cfg.clip or None)
            losses.append(loss)
            result.steps += 1
            if cfg.max_steps and result.steps >= cfg.max_steps:
                break
        ev = evaluate(net, val, cfg.eval_mode if cfg.variant != "spiking-dmu" else "sequential")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": ev.loss,
               "val_accuracy": ev.accuracy, "wall_seconds": time.perf_counter() - t0}
        result.history.append(row)
        log.info("epoch %d train %.5f val %.5f acc %.4f", epoch, row["train_loss"],
                 ev.loss, ev.accuracy)
        result.network = net
        if on_epoch is not None:
            on_epoch(result)
        if ev.loss < best:
            best, stale = ev.loss, 0
        else:
            stale += 1
        if cfg.max_steps and result.steps >= cfg.max_steps:
            break
        if cfg.patience and stale >= cfg.patience:
            break
    result.network = net
    return result
