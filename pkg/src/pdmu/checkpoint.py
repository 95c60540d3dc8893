"""Single-file binary checkpoints.

Layout, all integers little-endian::

    b"PDMUCKPT"  u32 version  u64 header_length
    header: UTF-8 JSON (config echo, model spec, array manifest,
            optimizer scalars, rng state, metrics history)
    array payload: raw little-endian arrays at the offsets in the manifest
    u32 CRC-32 of every preceding byte

The JSON is written with sorted keys and the payload in manifest order, so
loading a file and saving it again reproduces it byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import ConfigError, FormatError
from .model import ModelSpec, Network, build_network
from .spiking import LifConfig
from .train import AdamState

MAGIC = b"PDMUCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CRC = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: RunConfig
    network: Network
    optimizer: AdamState = field(default_factory=AdamState)
    rng_state: dict | None = None
    history: list = field(default_factory=list)
    steps: int = 0

    def rng(self):
        """A generator resumed from the saved state (fresh PCG64 if none)."""
        gen = np.random.default_rng()
        if self.rng_state is not None:
            gen.bit_generator.state = self.rng_state
        return gen


def _spec_dict(spec: ModelSpec):
    d = dataclasses.asdict(spec)
    d["lif"] = dataclasses.asdict(spec.lif)
    return d


def _spec_from_dict(d):
    d = dict(d)
    d["lif"] = LifConfig(**d["lif"])
    return ModelSpec(**d)


def _arrays(ckpt: Checkpoint):
    out = [(f"param/{k}", v) for k, v in ckpt.network.params().items()]
    for name in sorted(ckpt.optimizer.m):
        out.append((f"adam_m/{name}", ckpt.optimizer.m[name]))
        out.append((f"adam_v/{name}", ckpt.optimizer.v[name]))
    return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in _arrays(ckpt):
        arr = np.asarray(arr)
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        manifest.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    opt = ckpt.optimizer
    header = {
        "config": ckpt.config.as_dict(),
        "model": _spec_dict(ckpt.network.spec),
        "arrays": manifest,
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                      "eps": opt.eps, "step": opt.step},
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "steps": ckpt.steps,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint):
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def decode_checkpoint(data: bytes, expect_config: RunConfig | None = None) -> Checkpoint:
    if len(data) < _PREFIX.size + _CRC.size:
        raise FormatError("checkpoint truncated: shorter than the fixed header", len(data))
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    body_end = len(data) - _CRC.size
    (crc,) = _CRC.unpack_from(data, body_end)
    header_end = _PREFIX.size + hlen
    if header_end > body_end:
        raise FormatError("checkpoint truncated inside the header", len(data))
    if zlib.crc32(data[:body_end]) != crc:
        raise FormatError("checkpoint checksum mismatch (truncated or corrupt)", body_end)
    try:
        header = json.loads(data[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint header is not valid JSON: {exc}", _PREFIX.size) from exc

    config = RunConfig(**header["config"])
    if expect_config is not None:
        saved, wanted = config.model_fields(), expect_config.model_fields()
        diff = sorted(k for k in saved if saved[k] != wanted[k])
        if diff:
            detail = ", ".join(f"{k}: checkpoint {saved[k]!r} vs config {wanted[k]!r}"
                               for k in diff)
            raise ConfigError(f"checkpoint does not match the config ({detail})")

    payload = header_end
    arrays = {}
    for entry in header["arrays"]:
        start = payload + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > body_end:
            raise FormatError(f"array {entry['name']!r} runs past the payload", start)
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=int))
        if count * dtype.itemsize != entry["nbytes"]:
            raise FormatError(f"array {entry['name']!r} has the wrong size", start)
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(
            np.dtype(entry["dtype"]).newbyteorder("="))

    spec = _spec_from_dict(header["model"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    net = build_network(spec, config.seed)
    if set(params) != set(net.params()):
        raise FormatError("checkpoint parameters do not match its model description")
    if config.dtype != "float64":
        net = net.astype(np.dtype(config.dtype))
    net = net.with_params(params)
    o = header["optimizer"]
    opt = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            opt.m[k[len("adam_m/"):]] = v
        elif k.startswith("adam_v/"):
            opt.v[k[len("adam_v/"):]] = v
    return Checkpoint(config, net, opt, header["rng_state"], header["history"], header["steps"])


def load_checkpoint(path, expect_config: RunConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, expect_config)
