import gzip

import numpy as np
import pytest

from prgrad import data as D


class FixedRng:
    """Stands in for a Generator: fixed crop offsets and flip draw."""

    def __init__(self, offsets, flip):
        self.offsets, self.flip = offsets, flip

    def integers(self, lo, hi, size):
        assert (lo, hi, size) == (0, 9, 2)
        return np.array(self.offsets)

    def random(self):
        return 0.0 if self.flip else 0.9


def idx_bytes(code, dims, payload):
    return bytes([0, 0, code, len(dims)]) + np.asarray(dims, ">u4").tobytes() + payload


def test_idx_images():
    arr = D.parse_idx(idx_bytes(0x08, (2, 2, 2), bytes(range(8))))
    assert arr.shape == (2, 2, 2)
    assert arr[1, 1, 1] == 7


def test_idx_labels_and_gzip():
    raw = idx_bytes(0x08, (3,), bytes([4, 0, 9]))
    np.testing.assert_array_equal(D.parse_idx(raw), [4, 0, 9])
    np.testing.assert_array_equal(D.parse_idx(gzip.compress(raw)), [4, 0, 9])


def test_idx_errors():
    with pytest.raises(D.DataFormatError, match="expected 8 bytes, got 5"):
        D.parse_idx(idx_bytes(0x08, (2, 2, 2), bytes(5)))
    with pytest.raises(D.DataFormatError, match="magic"):
        D.parse_idx(b"\x01\x00\x08\x01" + bytes(8))
    with pytest.raises(D.DataFormatError, match="type code"):
        D.parse_idx(idx_bytes(0x07, (1,), bytes(1)))


def test_idx_round_trip(rng):
    for dtype in (np.uint8, np.int16, np.float32, np.float64):
        arr = (rng.standard_normal((3, 4)) * 50).astype(dtype)
        np.testing.assert_array_equal(D.parse_idx(D.encode_idx(arr)), arr)


def cifar_shard(rng, n):
    rec = rng.integers(0, 256, size=(n, D.CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, size=n)
    return rec.tobytes()


def test_cifar_layout(rng):
    raw = cifar_shard(rng, 1)
    ds = D.parse_cifar10_bin(raw)
    assert ds.images.shape == (1, 3, 32, 32) and len(ds.labels) == 1
    assert ds.images[0, 0, 0, 0] == pytest.approx(raw[1] / 255.0)
    assert ds.images[0, 1, 0, 0] == pytest.approx(raw[1 + 1024] / 255.0)
    assert len(D.parse_cifar10_bin(cifar_shard(rng, 2))) == 2


def test_cifar_round_trip(rng):
    raw = cifar_shard(rng, 3)
    assert D.encode_cifar10_bin(D.parse_cifar10_bin(raw)) == raw


def test_cifar_errors(rng):
    with pytest.raises(D.DataFormatError, match="multiple of 3073"):
        D.parse_cifar10_bin(bytes(3072))
    bad = bytearray(cifar_shard(rng, 1))
    bad[0] = 10
    with pytest.raises(D.DataFormatError, match="label"):
        D.parse_cifar10_bin(bytes(bad))


def test_loaders_from_files(tmp_path, rng):
    for split, n in (("train", 4), ("t10k", 2)):
        imgs = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
        (tmp_path / f"{split}-images-idx3-ubyte.gz").write_bytes(gzip.compress(D.encode_idx(imgs)))
        (tmp_path / f"{split}-labels-idx1-ubyte").write_bytes(D.encode_idx(np.arange(n, dtype=np.uint8)))
    train, test = D.load_fashion_mnist(tmp_path)
    assert train.images.shape == (4, 1, 28, 28) and len(test) == 2
    assert 0 <= train.images.min() and train.images.max() <= 1

    cdir = tmp_path / "cifar-10-batches-bin"
    cdir.mkdir()
    for i in range(1, 6):
        (cdir / f"data_batch_{i}.bin").write_bytes(cifar_shard(rng, 2))
    (cdir / "test_batch.bin").write_bytes(cifar_shard(rng, 3))
    train, test = D.load_cifar10(tmp_path)
    assert len(train) == 10 and len(test) == 3
    with pytest.raises(FileNotFoundError):
        D.load_fashion_mnist(cdir)


def test_standardize(rng):
    ds = D.Dataset(rng.random((20, 3, 4, 4)).astype(np.float32), np.zeros(20, np.int64))
    mean, std = D.channel_stats(ds)
    z = D.standardize(ds.images, mean, std)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-4)


def test_augment_center_crop_is_identity(rng):
    img = rng.random((3, 32, 32))
    np.testing.assert_array_equal(D.augment_pad_crop_flip(img, FixedRng((4, 4), False)), img)


def test_augment_top_left_offset(rng):
    img = rng.random((3, 32, 32)) + 0.5
    out = D.augment_pad_crop_flip(img, FixedRng((0, 0), False))
    assert np.all(out[:, :4, :] == 0) and np.all(out[:, :, :4] == 0)
    np.testing.assert_array_equal(out[:, 4:, 4:], img[:, :28, :28])


def test_augment_flip(rng):
    img = rng.random((3, 32, 32))
    once = D.augment_pad_crop_flip(img, FixedRng((4, 4), True))
    np.testing.assert_array_equal(once, img[:, :, ::-1])
    np.testing.assert_array_equal(D.augment_pad_crop_flip(once, FixedRng((4, 4), True)), img)


def test_augment_shape_and_range(rng):
    imgs = rng.random((5, 3, 32, 32))
    out = D.augment_batch(imgs, np.random.default_rng(0))
    assert out.shape == imgs.shape and out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError, match="32"):
        D.augment_pad_crop_flip(np.zeros((3, 28, 28)), rng)


def test_batches():
    ds = D.Dataset(np.arange(5.0)[:, None], np.zeros(5, np.int64))
    assert [len(y) for _, y in D.make_batches(ds, 2)] == [2, 2, 1]
    ordered = np.concatenate([X[:, 0] for X, _ in D.make_batches(ds, 2, shuffle=False)])
    np.testing.assert_array_equal(ordered, np.arange(5))
    a = [X[:, 0].tolist() for X, _ in D.make_batches(ds, 2, seed=3, epoch=1)]
    b = [X[:, 0].tolist() for X, _ in D.make_batches(ds, 2, seed=3, epoch=1)]
    assert a == b
    with pytest.raises(ValueError):
        list(D.make_batches(ds, 0))
    with pytest.raises(ValueError, match="empty"):
        list(D.make_batches(ds.subset(0), 2))


def test_blobs():
    a = D.synthetic_blobs(1, 30, 3, 4, 5.0)
    b = D.synthetic_blobs(1, 30, 3, 4, 5.0)
    assert a.images.tobytes() == b.images.tobytes()
    np.testing.assert_array_equal(np.bincount(a.labels), [30, 30, 30])
    with pytest.raises(ValueError):
        D.synthetic_blobs(1, 3, 2, 2, 0.0)


def test_dataset_validation():
    with pytest.raises(ValueError, match="labels"):
        D.Dataset(np.zeros((2, 1)), np.array([0, 10]))
    with pytest.raises(ValueError, match="2 images but 1"):
        D.Dataset(np.zeros((2, 1)), np.array([0]))
