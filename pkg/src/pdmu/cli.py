"""Command-line entry point.

    pdmu train --config run.cfg --out runs/a
    pdmu eval  --ckpt runs/a/model.ckpt --data runs/a/val.npz --mode seq
    pdmu bench --config bench.cfg
    pdmu gates --ckpt runs/a/model.ckpt --sample 3

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .bench import format_bench, run_bench
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import load_config
from .datasets import SequenceBatch, load_binned_spikes, psmnist_batch
from .errors import (ConfigError, FormatError, InvalidArgumentError, NumericOverflowError,
                     UnsupportedModeError)
from .experiment import METRIC_COLUMNS, evaluate, fit, load_task, mnist_paths
from .pdmu_cell import dump_gates

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.csv"
VAL_NAME = "val.npz"
_MODES = {"seq": "sequential", "par": "parallel", "sequential": "sequential",
          "parallel": "parallel"}

log = logging.getLogger("pdmu")


def write_metrics(path, rows, columns=METRIC_COLUMNS):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in columns})


def cmd_train(args):
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    train, val = load_task(cfg)
    val.save(os.path.join(args.out, VAL_NAME))
    ckpt_path = os.path.join(args.out, CHECKPOINT_NAME)
    metrics_path = os.path.join(args.out, METRICS_NAME)

    def checkpoint(result):
        write_metrics(metrics_path, result.history)
        save_checkpoint(ckpt_path, Checkpoint(cfg, result.network, result.optimizer,
                                              result.rng.bit_generator.state,
                                              result.history, result.steps))

    result = fit(cfg, train, val, on_epoch=checkpoint)
    last = result.history[-1]
    print(f"trained {cfg.variant} on {cfg.task}: {len(result.history)} epochs, "
          f"{result.steps} steps, val_loss={last['val_loss']:.6g}, "
          f"val_accuracy={last['val_accuracy']:.4f}")
    print(f"checkpoint: {ckpt_path}\nmetrics: {metrics_path}")
    return EXIT_OK


def load_eval_data(path, ckpt: Checkpoint) -> SequenceBatch:
    """Read a .npz batch, MNIST IDX data or a binned spike-event file."""
    cfg, spec = ckpt.config, ckpt.network.spec
    if os.path.isdir(path):
        images, labels = mnist_paths(path, "test")
        return psmnist_batch(images, labels, seed=cfg.perm_seed)
    name = os.path.basename(path)
    if name.endswith(".npz"):
        return SequenceBatch.load(path)
    if "idx3-ubyte" in name:
        labels = os.path.join(os.path.dirname(path), name.replace("images-idx3", "labels-idx1"))
        return psmnist_batch(path, labels, seed=cfg.perm_seed)
    return load_binned_spikes(path, num_classes=spec.output_dim if spec.classify else None)


def _check_compatible(data: SequenceBatch, ckpt: Checkpoint):
    spec = ckpt.network.spec
    width = spec.input_dim
    if data.inputs.shape[-1] != width:
        raise InvalidArgumentError(
            f"data has {data.inputs.shape[-1]} input channels per step, "
            f"checkpoint expects {width}")
    if spec.classify != data.is_classification:
        kind = "classification" if spec.classify else "regression"
        raise InvalidArgumentError(f"checkpoint is a {kind} model, data does not match")
    if spec.classify and data.num_classes > spec.output_dim:
        raise InvalidArgumentError(
            f"data has {data.num_classes} classes, checkpoint predicts {spec.output_dim}")


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    mode = _MODES[args.mode]
    data = load_eval_data(args.data, ckpt)
    _check_compatible(data, ckpt)
    if ckpt.network.spec.spiking:
        mode = "sequential"
    ev = evaluate(ckpt.network, data, mode)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, f"eval_{mode}.csv")
    write_metrics(metrics_path, [{"mode": mode, "samples": len(data), "loss": ev.loss,
                                  "accuracy": ev.accuracy}],
                  columns=("mode", "samples", "loss", "accuracy"))
    np.save(os.path.join(out_dir, f"predictions_{mode}.npy"), ev.predictions)
    print(f"mode={mode} samples={len(data)} loss={ev.loss:.6g} accuracy={ev.accuracy:.4f}")
    return EXIT_OK


def cmd_bench(args):
    cfg = load_config(args.config)
    text = format_bench(run_bench(cfg))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gates(args):
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.network.spec.variant == "lmu":
        raise UnsupportedModeError("gates: the lmu variant has no delay gates "
                                   "(use pdmu, bi-pdmu, epdmu or spiking-dmu)")
    data_path = args.data or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), VAL_NAME)
    data = load_eval_data(data_path, ckpt)
    _check_compatible(data, ckpt)
    if not 0 <= args.sample < len(data):
        raise InvalidArgumentError(f"sample {args.sample} out of range (data has {len(data)})")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    for i, gm in enumerate(ckpt.network.gate_matrices(data.inputs[args.sample])):
        path = os.path.join(out_dir, f"gates_sample{args.sample}_layer{i}.txt")
        dump_gates(path, gm)
        print(path)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="pdmu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True,
                   help=".npz batch, MNIST directory or idx3 file, or spike-event file")
    p.add_argument("--mode", choices=sorted(_MODES), default="par")
    p.add_argument("--out", help="directory for the metrics file (default: next to --ckpt)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time training steps of the parallel and per-step paths")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gates", help="dump per-layer gate bands for one sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--data", help="defaults to val.npz next to the checkpoint")
    p.add_argument("--out", help="output directory (default: next to --ckpt)")
    p.set_defaults(func=cmd_gates)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnsupportedModeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, InvalidArgumentError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericOverflowError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
