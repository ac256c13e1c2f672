import struct

import numpy as np
import pytest

from maxent_transfer.data import (
    Dataset,
    augment_hflip,
    load_cifar_bin,
    load_idx,
    normalize_channels,
    read_idx_images,
    select_classes,
    split_random,
    synth_task,
)
from maxent_transfer.errors import DegenerateChannelError, ParseError
from maxent_transfer.tensor import make_rng


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


@pytest.fixture
def idx_files(tmp_path):
    pixels = [(i * 7 + j) % 256 for i in range(4) for j in range(28 * 28)]
    images = tmp_path / "images"
    labels = tmp_path / "labels"
    write_idx(images, 0x803, (4, 28, 28), pixels)
    write_idx(labels, 0x801, (4,), [3, 1, 4, 1])
    return images, labels, pixels


def test_idx_round_trip(idx_files):
    images, labels, pixels = idx_files
    ds = load_idx(images, labels)
    assert ds.images.shape == (4, 28, 28, 1)
    assert ds.images.dtype == np.float64
    np.testing.assert_array_equal(ds.labels, [3, 1, 4, 1])
    np.testing.assert_array_equal(ds.images.ravel(), pixels)
    assert ds.images[1, 0, 5, 0] == (7 + 5) % 256


def test_idx_wrong_magic(tmp_path):
    path = tmp_path / "bad"
    write_idx(path, 0x801, (4,), [0] * 4)
    with pytest.raises(ParseError) as info:
        read_idx_images(path)
    assert info.value.offset == 0


def test_idx_empty_file(tmp_path):
    path = tmp_path / "empty"
    path.write_bytes(b"")
    with pytest.raises(ParseError):
        read_idx_images(path)


def test_idx_truncated_payload(tmp_path):
    path = tmp_path / "short"
    write_idx(path, 0x803, (4, 28, 28), [0] * (4 * 28 * 28 - 1))
    with pytest.raises(ParseError) as info:
        read_idx_images(path)
    assert info.value.offset == 16 + 4 * 28 * 28 - 1


def test_idx_label_count_mismatch(tmp_path, idx_files):
    images, _, _ = idx_files
    labels = tmp_path / "few"
    write_idx(labels, 0x801, (3,), [0, 1, 2])
    with pytest.raises(ParseError):
        load_idx(images, labels)


def _cifar_record(label, fill, label_bytes=1):
    head = [0] * (label_bytes - 1) + [label]
    # red plane = fill, green = fill + 1, blue = pixel index mod 256
    return bytes(head + [fill] * 1024 + [fill + 1] * 1024 + [i % 256 for i in range(1024)])


def test_cifar_two_records(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(_cifar_record(2, 10) + _cifar_record(7, 50))
    ds = load_cifar_bin(path)
    assert ds.images.shape == (2, 32, 32, 3)
    np.testing.assert_array_equal(ds.labels, [2, 7])
    assert ds.images[0, 0, 0, 0] == 10 and ds.images[1, 5, 5, 1] == 51
    assert ds.images[0, 1, 3, 2] == (32 + 3) % 256


def test_cifar100_uses_fine_label(tmp_path):
    path = tmp_path / "train.bin"
    path.write_bytes(_cifar_record(42, 0, label_bytes=2))
    ds = load_cifar_bin(path, n_classes=100)
    assert ds.labels.tolist() == [42]


def test_cifar_truncated_record(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(_cifar_record(1, 0) + _cifar_record(1, 0)[:-1])
    with pytest.raises(ParseError) as info:
        load_cifar_bin(path)
    assert info.value.offset == 3073


def test_cifar_empty(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(b"")
    with pytest.raises(ParseError):
        load_cifar_bin(path)


def test_cifar_label_out_of_range(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(_cifar_record(10, 0))
    with pytest.raises(ValueError):
        load_cifar_bin(path, n_classes=10)


def test_synth_is_deterministic():
    a = synth_task(make_rng(4), 5, 8, 50)
    b = synth_task(make_rng(4), 5, 8, 50)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_is_balanced():
    ds = synth_task(make_rng(0), 7, 3, 70)
    assert np.bincount(ds.labels).tolist() == [10] * 7


def test_synth_easy_task_is_linearly_separable():
    ds = synth_task(make_rng(1), 4, 16, 400, difficulty=0.0)
    X = np.hstack([ds.images, np.ones((len(ds), 1))])
    Y = np.eye(4)[ds.labels]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    assert np.mean((X @ W).argmax(1) == ds.labels) == 1.0


@pytest.mark.parametrize("kw", [dict(n_classes=1, dim=3, m=5), dict(n_classes=3, dim=3, m=2),
                                dict(n_classes=3, dim=3, m=9, difficulty=-1)])
def test_synth_rejects_bad_arguments(kw):
    with pytest.raises(ValueError):
        synth_task(make_rng(0), **kw)


def test_normalize_gives_zero_mean_unit_std(rng):
    train = Dataset(rng.normal(3, 5, size=(200, 4, 4, 3)), np.zeros(200), 1)
    out = normalize_channels(train, train)
    np.testing.assert_allclose(out.images.mean(axis=(0, 1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(out.images.std(axis=(0, 1, 2)), 1, atol=1e-12)


def test_normalize_uses_train_statistics_for_test():
    train = Dataset(np.array([[0.0], [2.0]]), np.zeros(2), 1)
    test = Dataset(np.array([[1.0], [5.0]]), np.zeros(2), 1, split="test")
    out = normalize_channels(train, test)
    np.testing.assert_allclose(out.images.ravel(), [0.0, 4.0])
    assert out.split == "test" and out.channel_mean.tolist() == [1.0]


def test_normalize_constant_channel():
    train = Dataset(np.array([[1.0, 7.0], [2.0, 7.0]]), np.zeros(2), 1)
    with pytest.raises(DegenerateChannelError):
        normalize_channels(train, train)


def test_hflip_twice_is_identity(rng):
    images = rng.normal(size=(6, 5, 4, 2))
    flipped = augment_hflip(augment_hflip(images, make_rng(3), 1.0), make_rng(3), 1.0)
    np.testing.assert_array_equal(flipped, images)
    np.testing.assert_array_equal(augment_hflip(images, rng, 1.0)[:, :, ::-1], images)


def test_hflip_p0_is_identity(rng):
    images = rng.normal(size=(6, 5, 4, 2))
    np.testing.assert_array_equal(augment_hflip(images, rng, 0.0), images)


def test_hflip_rate(rng):
    images = np.tile(np.arange(4.0).reshape(1, 1, 4, 1), (20_000, 1, 1, 1))
    out = augment_hflip(images, rng, 0.5)
    rate = np.mean(out[:, 0, 0, 0] == 3.0)
    assert abs(rate - 0.5) <= 0.02


def test_hflip_needs_images(rng):
    with pytest.raises(ValueError):
        augment_hflip(np.zeros((3, 4)), rng)


def _labelled(n, c):
    return Dataset(np.arange(n, dtype=float)[:, None], np.arange(n) % c, c)


def test_split_p0_keeps_everything(rng):
    train, test = split_random(_labelled(100, 4), 0.0, rng)
    assert len(train) == 100 and len(test) == 0


def test_split_is_disjoint_and_complete(rng):
    train, test = split_random(_labelled(1000, 5), 0.3, rng)
    ids_train = set(train.images.ravel())
    ids_test = set(test.images.ravel())
    assert not ids_train & ids_test
    assert len(ids_train | ids_test) == 1000
    assert test.split == "test"


def test_split_rate(rng):
    _, test = split_random(_labelled(10_000, 10), 0.15, rng)
    assert abs(len(test) / 10_000 - 0.15) <= 0.03


def test_split_rejects_bad_probability(rng):
    with pytest.raises(ValueError):
        split_random(_labelled(10, 2), 1.5, rng)


def test_select_classes_relabels_in_order():
    ds = select_classes(_labelled(20, 10), [7, 2])
    assert ds.n_classes == 2
    assert sorted(ds.images.ravel().tolist()) == [2, 7, 12, 17]
    assert ds.labels[ds.images.ravel() == 7].tolist() == [0]


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), [0], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 3)), [2], 2)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 3), np.nan), [0], 2)
