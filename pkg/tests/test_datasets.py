import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdmu.datasets import (SequenceBatch, delay_recall_task, load_binned_spikes, load_mnist_idx,
                           permute_sequence, pixel_permutation, psmnist_batch, read_idx,
                           spike_pattern_task, split_indices, write_binned_spikes)
from pdmu.errors import FormatError, InvalidArgumentError

MNIST_DIR = os.environ.get("PDMU_MNIST_DIR", "/root/data/mnist")


# --- synthetic tasks -----------------------------------------------------------------------

def test_delay_recall_shifts_input():
    b = delay_recall_task(4, 10, 3, seed=1)
    x = b.inputs[..., 0]
    np.testing.assert_array_equal(b.labels[:, :3], 0.0)
    np.testing.assert_array_equal(b.labels[:, 3:], x[:, :7])
    assert np.all(np.abs(x) <= 1.0)
    assert not b.is_classification


def test_delay_zero_is_identity():
    b = delay_recall_task(2, 5, 0)
    np.testing.assert_array_equal(b.labels, b.inputs[..., 0])


def test_delay_recall_determinism_and_validation():
    assert delay_recall_task(3, 8, 1, 5).checksum() == delay_recall_task(3, 8, 1, 5).checksum()
    assert delay_recall_task(3, 8, 1, 5).checksum() != delay_recall_task(3, 8, 1, 6).checksum()
    with pytest.raises(InvalidArgumentError):
        delay_recall_task(2, 5, 5)


def test_spike_pattern_is_binary_with_labels():
    b = spike_pattern_task(50, 20, 6, num_classes=3, seed=0)
    assert set(np.unique(b.inputs)) <= {0.0, 1.0}
    assert b.num_classes == 3 and set(b.labels) <= {0, 1, 2}


@given(st.integers(0, 500), st.floats(0.0, 0.9), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_splits_are_disjoint_and_cover(count, frac, seed):
    train, val = split_indices(count, frac, seed)
    assert len(np.intersect1d(train, val)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([train, val])), np.arange(count))


def test_split_rejects_bad_fraction():
    with pytest.raises(InvalidArgumentError):
        split_indices(10, 1.0)


def test_batch_validation_and_round_trip(tmp_path):
    with pytest.raises(InvalidArgumentError):
        SequenceBatch(np.zeros((2, 3, 1)), np.zeros(3), np.full(2, 3))
    with pytest.raises(InvalidArgumentError):
        SequenceBatch(np.zeros((2, 3, 1)), np.array([0, 5]), np.full(2, 3), num_classes=2)
    b = spike_pattern_task(5, 7, 3, seed=2)
    b.save(tmp_path / "b.npz")
    assert SequenceBatch.load(tmp_path / "b.npz").checksum() == b.checksum()
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        SequenceBatch.load(tmp_path / "junk.npz")


# --- IDX ---------------------------------------------------------------------------------------

def _write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def test_idx_round_trip(tmp_path):
    images = np.random.default_rng(0).integers(0, 256, (3, 28, 28))
    _write_idx(tmp_path / "img", images, 0x803)
    _write_idx(tmp_path / "lbl", [4, 0, 9], 0x801)
    x, y = load_mnist_idx(tmp_path / "img", tmp_path / "lbl")
    np.testing.assert_array_equal(x * 255.0, images)
    np.testing.assert_array_equal(y, [4, 0, 9])


def test_idx_bad_magic(tmp_path):
    _write_idx(tmp_path / "img", np.zeros((1, 2, 2)), 0x803)
    data = bytearray((tmp_path / "img").read_bytes())
    data[2] = 0x09
    (tmp_path / "img").write_bytes(bytes(data))
    with pytest.raises(FormatError) as err:
        read_idx(tmp_path / "img")
    assert err.value.offset == 0


def test_idx_truncation_reports_offset(tmp_path):
    _write_idx(tmp_path / "img", np.zeros((2, 4, 4)), 0x803)
    data = (tmp_path / "img").read_bytes()
    (tmp_path / "cut").write_bytes(data[:-5])
    with pytest.raises(FormatError) as err:
        read_idx(tmp_path / "cut")
    assert err.value.offset == len(data) - 5
    (tmp_path / "head").write_bytes(data[:7])
    with pytest.raises(FormatError) as err:
        read_idx(tmp_path / "head")
    assert err.value.offset == 7


def test_idx_expected_magic(tmp_path):
    _write_idx(tmp_path / "lbl", [1, 2], 0x801)
    with pytest.raises(FormatError):
        read_idx(tmp_path / "lbl", expected_magic=0x803)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_permutation_is_a_fixed_bijection(seed):
    perm = pixel_permutation(seed)
    np.testing.assert_array_equal(np.sort(perm), np.arange(784))
    np.testing.assert_array_equal(perm, pixel_permutation(seed))


def test_permute_sequence_preserves_pixels():
    img = np.random.default_rng(0).random((2, 28, 28))
    seq = permute_sequence(img, seed=3)
    assert seq.shape == (2, 784, 1)
    np.testing.assert_array_equal(np.sort(seq[..., 0], axis=1), np.sort(img.reshape(2, -1), axis=1))
    np.testing.assert_array_equal(permute_sequence(img)[..., 0], img.reshape(2, -1))


@pytest.mark.skipif(not os.path.exists(os.path.join(MNIST_DIR, "t10k-labels-idx1-ubyte")),
                    reason="MNIST files not present")
def test_mnist_test_split_class_counts():
    b = psmnist_batch(os.path.join(MNIST_DIR, "t10k-images-idx3-ubyte"),
                      os.path.join(MNIST_DIR, "t10k-labels-idx1-ubyte"), seed=0)
    assert b.inputs.shape == (10000, 784, 1)
    np.testing.assert_array_equal(np.bincount(b.labels),
                                  [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009])


# --- binned spike events -----------------------------------------------------------------------

@pytest.mark.parametrize("binary", [True, False])
def test_event_binning(tmp_path, binary):
    path = tmp_path / "ev"
    events = [(0, 15_000, 2), (0, 15_500, 2), (1, 0, 0), (1, 29_999, 3)]
    write_binned_spikes(path, events, labels=[1, 0], channels=4, bin_us=10_000, binary=binary)
    b = load_binned_spikes(path)
    assert b.inputs.shape == (2, 3, 4)
    # 15 ms with 10 ms bins lands in bin 1; two events in one bin collapse to one spike
    assert b.inputs[0, 1, 2] == 1.0 and b.inputs.sum() == 3
    assert b.inputs[1, 2, 3] == 1.0
    np.testing.assert_array_equal(b.labels, [1, 0])


def test_event_clipping_to_requested_length(tmp_path):
    write_binned_spikes(tmp_path / "ev", [(0, 5, 0), (0, 95, 1)], [0], channels=2, bin_us=10)
    b = load_binned_spikes(tmp_path / "ev", n_steps=5)
    assert b.inputs.shape == (1, 5, 2) and b.inputs.sum() == 1


def test_empty_event_file(tmp_path):
    write_binned_spikes(tmp_path / "ev", np.zeros((0, 3)), [], channels=3, bin_us=100)
    assert len(load_binned_spikes(tmp_path / "ev")) == 0


def test_event_channel_out_of_range(tmp_path):
    write_binned_spikes(tmp_path / "ev", [(0, 5, 0), (0, 7, 4)], [0], channels=4, bin_us=10)
    with pytest.raises(FormatError) as err:
        load_binned_spikes(tmp_path / "ev")
    # header 16 bytes, one label record, one good event, then the bad one
    assert err.value.offset == 16 + 2 * 12


def test_event_truncation_and_magic(tmp_path):
    write_binned_spikes(tmp_path / "ev", [(0, 5, 0)], [0], channels=1, bin_us=10)
    data = (tmp_path / "ev").read_bytes()
    (tmp_path / "cut").write_bytes(data[:-3])
    with pytest.raises(FormatError) as err:
        load_binned_spikes(tmp_path / "cut")
    assert err.value.offset == 16 + 12
    (tmp_path / "bad").write_bytes(b"spikes v9\n")
    with pytest.raises(FormatError):
        load_binned_spikes(tmp_path / "bad")


def test_checksums_are_stable():
    a = spike_pattern_task(20, 10, 4, seed=9)
    b = spike_pattern_task(20, 10, 4, seed=9)
    assert a.checksum() == b.checksum()
    assert len(a.checksum()) == 64
