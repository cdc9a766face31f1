"""Dataset readers (IDX, CIFAR-10 binary), augmentation and batching."""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """``images`` is N x C x H x W (or N x features) float32; ``labels`` int64."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.name, self.num_classes)


def _maybe_gunzip(data: bytes) -> bytes:
    return gzip.decompress(data) if data[:2] == b"\x1f\x8b" else data


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX stream (gzip accepted) into an array of its stored type."""
    data = _maybe_gunzip(bytes(data))
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise DataFormatError(f"bad IDX magic {data[:4].hex()}")
    code, rank = data[2], data[3]
    if code not in IDX_TYPES:
        raise DataFormatError(f"unsupported IDX type code 0x{code:02x}")
    header = 4 + 4 * rank
    if len(data) < header:
        raise DataFormatError(f"IDX header truncated: need {header} bytes, got {len(data)}")
    dims = tuple(int(d) for d in np.frombuffer(data, ">u4", count=rank, offset=4))
    dtype = IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - header
    if actual != expected:
        raise DataFormatError(f"IDX payload length: expected {expected} bytes, got {actual}")
    arr = np.frombuffer(data, dtype, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    codes = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}
    code = codes[arr.dtype.newbyteorder("=")]
    head = bytes([0, 0, code, arr.ndim]) + np.asarray(arr.shape, ">u4").tobytes()
    return head + arr.astype(IDX_TYPES[code]).tobytes()


def parse_cifar10_bin(data: bytes, name="cifar10") -> Dataset:
    """Records of 1 label byte + 3072 pixel bytes (R, G, B planes, row-major 32x32)."""
    data = bytes(data)
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise DataFormatError(f"CIFAR-10 shard length {len(data)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(data, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DataFormatError(f"CIFAR-10 label {labels.max()} >= 10")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, name, 10)


def encode_cifar10_bin(ds: Dataset) -> bytes:
    pixels = np.rint(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    rec = np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1)
    return rec.tobytes()


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (data_dir / name).exists():
            return data_dir / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def load_fashion_mnist(data_dir):
    """(train, test) from the four standard IDX files, pixels scaled to [0, 1]."""
    data_dir = Path(data_dir)
    out = []
    for split in ("train", "t10k"):
        images = parse_idx(_find(data_dir, f"{split}-images-idx3-ubyte").read_bytes())
        labels = parse_idx(_find(data_dir, f"{split}-labels-idx1-ubyte").read_bytes())
        images = images.astype(np.float32)[:, None] / 255.0
        out.append(Dataset(images, labels.astype(np.int64), f"fashion_mnist/{split}", 10))
    return tuple(out)


def load_cifar10(data_dir):
    """(train, test) from the binary batches; accepts the extracted top-level dir too."""
    data_dir = Path(data_dir)
    if (data_dir / "cifar-10-batches-bin").is_dir():
        data_dir = data_dir / "cifar-10-batches-bin"
    shards = [parse_cifar10_bin(_find(data_dir, f"data_batch_{i}.bin").read_bytes())
              for i in range(1, 6)]
    train = Dataset(np.concatenate([s.images for s in shards]),
                    np.concatenate([s.labels for s in shards]), "cifar10/train", 10)
    t = parse_cifar10_bin(_find(data_dir, "test_batch.bin").read_bytes())
    return train, Dataset(t.images, t.labels, "cifar10/test", 10)


def channel_stats(ds: Dataset):
    """Per-channel mean and std over a N x C x H x W training set."""
    axes = (0, 2, 3)
    mean = ds.images.mean(axis=axes, dtype=np.float64)
    std = ds.images.std(axis=axes, dtype=np.float64)
    return mean.astype(np.float32), std.astype(np.float32)


def standardize(images, mean, std):
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


def augment_pad_crop_flip(image, rng, pad=4):
    """Zero-pad by ``pad``, take a random crop of the original size, flip with p=0.5."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1:] != (32, 32):
        raise ValueError(f"augment: expected C x 32 x 32, got {image.shape}")
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    out = padded[:, dy:dy + h, dx:dx + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images, rng):
    return np.stack([augment_pad_crop_flip(im, rng) for im in images])


def make_batches(ds: Dataset, batch_size, seed=0, shuffle=True, epoch=0):
    """Yield (X, y) batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if n == 0:
        raise ValueError("make_batches: empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def synthetic_blobs(seed, n_per_class, classes, dim, sep) -> Dataset:
    """Unit-variance Gaussian blobs around random unit-sphere centres times ``sep``."""
    if sep <= 0:
        raise ValueError("sep must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((classes, dim))
    centres *= sep / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), n_per_class)
    points = centres[labels] + rng.standard_normal((len(labels), dim))
    perm = rng.permutation(len(labels))
    return Dataset(points[perm].astype(np.float32), labels[perm].astype(np.int64),
                   "synthetic_blobs", classes)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
