"""Synthetic tasks and file loaders producing :class:`SequenceBatch` objects.

Event-list files (binned spike data)
------------------------------------
Binary layout, little-endian::

    header (16 bytes): magic b"SPKE" | version u32 (=1) | channels u32 | bin width in us u32
    records (12 bytes each): sample u32 | time_us u32 | channel i32

A record with channel -1 declares a sample and carries its class label in
the time field. Every other record is a spike event. Events falling in the
same bin collapse to a single 1.

Text layout: a first line ``spikes v1 channels=<C> bin_us=<W>`` followed by
``label <sample> <class>`` and ``<sample> <time_us> <channel>`` lines.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidArgumentError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
EVENT_MAGIC = b"SPKE"
EVENT_VERSION = 1
_EVENT_HEADER = struct.Struct("<4sIII")
_EVENT_RECORD = np.dtype([("sample", "<u4"), ("time", "<u4"), ("channel", "<i4")])


@dataclass
class SequenceBatch:
    inputs: np.ndarray   # (B, T, M)
    labels: np.ndarray   # (B,) class ids or (B, T) regression targets
    lengths: np.ndarray  # (B,)
    num_classes: int = 0  # 0 for regression

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        B, T = self.inputs.shape[:2]
        if self.labels.shape[0] != B or self.lengths.shape != (B,):
            raise InvalidArgumentError("inputs, labels and lengths disagree on batch size")
        if np.any(self.lengths > T) or np.any(self.lengths < 0):
            raise InvalidArgumentError("sequence lengths must lie in [0, T]")
        if self.num_classes and (np.any(self.labels < 0) or np.any(self.labels >= self.num_classes)):
            raise InvalidArgumentError(f"labels must lie in [0, {self.num_classes})")

    @property
    def is_classification(self):
        return self.num_classes > 0

    def __len__(self):
        return self.inputs.shape[0]

    def take(self, idx) -> SequenceBatch:
        return SequenceBatch(self.inputs[idx], self.labels[idx], self.lengths[idx], self.num_classes)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.inputs, self.labels, self.lengths):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def save(self, path):
        with open(path, "wb") as fh:
            np.savez(fh, inputs=self.inputs, labels=self.labels, lengths=self.lengths,
                     num_classes=np.array(self.num_classes))

    @classmethod
    def load(cls, path) -> SequenceBatch:
        try:
            with np.load(path) as z:
                return cls(z["inputs"], z["labels"], z["lengths"], int(z["num_classes"]))
        except (OSError, ValueError, KeyError) as exc:
            raise FormatError(f"cannot read sequence batch {path}: {exc}") from exc


def split_indices(count, val_fraction=0.1, seed=0):
    """Disjoint (train, val) index arrays covering range(count)."""
    if not 0.0 <= val_fraction < 1.0:
        raise InvalidArgumentError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(count)
    n_val = int(round(count * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# --- synthetic tasks ------------------------------------------------------------------

def delay_recall_task(batch, T, delay, seed=0) -> SequenceBatch:
    """Inputs uniform on [-1, 1]; target[t] = input[t - delay], zero before that."""
    if not 0 <= delay < T:
        raise InvalidArgumentError(f"delay must satisfy 0 <= delay < T, got {delay} with T={T}")
    x = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(batch, T))
    y = np.zeros_like(x)
    y[:, delay:] = x[:, :T - delay]
    return SequenceBatch(x[..., None], y, np.full(batch, T))


def spike_pattern_task(batch, T, channels, num_classes=4, rate=0.3, noise=0.02,
                       seed=0) -> SequenceBatch:
    """Binary spike trains whose channel-time firing template depends on the class."""
    rng = np.random.default_rng(seed)
    template_rng = np.random.default_rng(10_000 + num_classes * 131 + channels)
    templates = template_rng.random((num_classes, T, channels)) < 0.15
    labels = rng.integers(0, num_classes, size=batch)
    probs = np.where(templates[labels], rate, noise)
    x = (rng.random(probs.shape) < probs).astype(float)
    return SequenceBatch(x, labels, np.full(batch, T), num_classes)


# --- IDX (MNIST) ----------------------------------------------------------------------

def _open_bytes(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path, expected_magic=None):
    """Parse a big-endian IDX file into a uint8 array."""
    data = _open_bytes(path)
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(data))
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS) or (expected_magic and magic != expected_magic):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", offset=len(data))
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    size = int(np.prod(dims))
    if len(data) < header + size:
        raise FormatError(
            f"{path}: expected {size} data bytes, found {len(data) - header}", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path):
    """(images scaled to [0, 1] with shape (B, 28, 28), integer labels)."""
    images = read_idx(images_path, IDX_IMAGES).astype(float) / 255.0
    labels = read_idx(labels_path, IDX_LABELS).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def pixel_permutation(seed, size=784):
    return np.random.default_rng(seed).permutation(size)


def permute_sequence(images, seed=None, permutation=None):
    """Flatten images to (B, 784, 1) sequences under one fixed pixel permutation.

    ``seed=None`` and no explicit permutation keeps raster order.
    """
    flat = np.asarray(images).reshape(len(images), -1)
    if permutation is None and seed is not None:
        permutation = pixel_permutation(seed, flat.shape[1])
    if permutation is not None:
        flat = flat[:, permutation]
    return flat[..., None]


def psmnist_batch(images_path, labels_path, seed=0, limit=None, offset=0) -> SequenceBatch:
    images, labels = load_mnist_idx(images_path, labels_path)
    stop = None if limit is None else offset + limit
    images, labels = images[offset:stop], labels[offset:stop]
    x = permute_sequence(images, seed)
    return SequenceBatch(x, labels, np.full(len(x), x.shape[1]), 10)


# --- binned spike events ----------------------------------------------------------------

def write_binned_spikes(path, events, labels, channels, bin_us, binary=True):
    """Write (sample, time_us, channel) events and per-sample labels."""
    events = np.asarray(events, dtype=np.int64).reshape(-1, 3)
    if binary:
        rec = np.empty(len(labels) + len(events), dtype=_EVENT_RECORD)
        rec["sample"][:len(labels)] = np.arange(len(labels))
        rec["time"][:len(labels)] = labels
        rec["channel"][:len(labels)] = -1
        rec["sample"][len(labels):] = events[:, 0]
        rec["time"][len(labels):] = events[:, 1]
        rec["channel"][len(labels):] = events[:, 2]
        with open(path, "wb") as fh:
            fh.write(_EVENT_HEADER.pack(EVENT_MAGIC, EVENT_VERSION, channels, bin_us))
            fh.write(rec.tobytes())
        return
    with open(path, "w") as fh:
        fh.write(f"spikes v1 channels={channels} bin_us={bin_us}\n")
        for i, c in enumerate(labels):
            fh.write(f"label {i} {int(c)}\n")
        for s, t, ch in events:
            fh.write(f"{s} {t} {ch}\n")


def _read_binary_events(data, path):
    if len(data) < _EVENT_HEADER.size:
        raise FormatError(f"{path}: truncated event header", offset=len(data))
    magic, version, channels, bin_us = _EVENT_HEADER.unpack_from(data)
    if magic != EVENT_MAGIC:
        raise FormatError(f"{path}: bad event-file magic {magic!r}", offset=0)
    if version != EVENT_VERSION:
        raise FormatError(f"{path}: unsupported event-file version {version}", offset=4)
    body = len(data) - _EVENT_HEADER.size
    if body % _EVENT_RECORD.itemsize:
        raise FormatError(f"{path}: truncated event record",
                          offset=len(data) - body % _EVENT_RECORD.itemsize)
    rec = np.frombuffer(data, dtype=_EVENT_RECORD, offset=_EVENT_HEADER.size)
    offsets = _EVENT_HEADER.size + np.arange(len(rec)) * _EVENT_RECORD.itemsize
    return channels, bin_us, rec["sample"].astype(np.int64), rec["time"].astype(np.int64), \
        rec["channel"].astype(np.int64), offsets


def _read_text_events(data, path):
    lines = data.decode("ascii").splitlines()
    head = lines[0].split() if lines else []
    try:
        if head[:2] != ["spikes", "v1"]:
            raise ValueError
        fields = dict(f.split("=") for f in head[2:])
        channels, bin_us = int(fields["channels"]), int(fields["bin_us"])
    except (ValueError, KeyError):
        raise FormatError(f"{path}: bad event-list header line", offset=0) from None
    samples, times, chans, offsets = [], [], [], []
    pos = len(lines[0]) + 1
    for line in lines[1:]:
        parts = line.split()
        try:
            if parts and parts[0] == "label":
                samples.append(int(parts[1]))
                times.append(int(parts[2]))
                chans.append(-1)
            elif parts:
                s, t, c = (int(v) for v in parts)
                samples.append(s)
                times.append(t)
                chans.append(c)
        except (ValueError, IndexError):
            raise FormatError(f"{path}: malformed line {line!r}", offset=pos) from None
        if parts:
            offsets.append(pos)
        pos += len(line) + 1
    return channels, bin_us, np.array(samples, dtype=np.int64), np.array(times, dtype=np.int64), \
        np.array(chans, dtype=np.int64), np.array(offsets, dtype=np.int64)


def load_binned_spikes(path, n_steps=None, num_classes=None) -> SequenceBatch:
    """Bin an event-list file into a (samples, T, channels) binary grid.

    ``n_steps`` defaults to the last occupied bin + 1; later events are dropped.
    """
    data = _open_bytes(path)
    if data[:4] == EVENT_MAGIC:
        channels, bin_us, sample, time, channel, offsets = _read_binary_events(data, path)
    else:
        channels, bin_us, sample, time, channel, offsets = _read_text_events(data, path)
    if bin_us <= 0:
        raise FormatError(f"{path}: bin width must be positive", offset=12)
    decl = channel == -1
    bad = (~decl) & ((channel < 0) | (channel >= channels))
    if np.any(bad):
        i = int(np.argmax(bad))
        raise FormatError(f"{path}: event channel {channel[i]} outside [0, {channels})",
                          offset=int(offsets[i]))
    n_samples = int(sample.max()) + 1 if sample.size else 0
    labels = np.zeros(n_samples, dtype=np.int64)
    labels[sample[decl]] = time[decl]
    ev = ~decl
    bins = time[ev] // bin_us
    if n_steps is None:
        n_steps = int(bins.max()) + 1 if bins.size else 1
    keep = bins < n_steps
    grid = np.zeros((n_samples, n_steps, channels))
    grid[sample[ev][keep], bins[keep], channel[ev][keep]] = 1.0
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n_samples else 0
        num_classes = max(num_classes, 2)
    return SequenceBatch(grid, labels, np.full(n_samples, n_steps), num_classes)
