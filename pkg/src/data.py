"""
plaincnn Dataset Module
Loads the binary on-disk datasets into memory, splits off a validation set,
and yields deterministic shuffled batches.

Supported sources:
  - MNIST IDX image/label pairs (optionally gzipped)
  - CIFAR-10 / CIFAR-100 binary record files
  - STL-10 binary files (labelled splits only)
  - Raw manifest + u8 blobs, for sets converted elsewhere (e.g. SVHN)

Every loader validates sizes before building anything, so a bad file
never yields a partial Dataset. Pixels are rescaled by 1/255 at load.
"""

import gzip
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from augment import DEFAULT_RESCALE, rescale
from errors import ConsistencyError, FormatError, TruncatedFileError
from tensor import SHUFFLE_STREAM, SPLIT_STREAM, TRAIN_DTYPE, substream


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR_SHAPE = (3, 32, 32)
CIFAR_PIXELS = 3 * 32 * 32
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR100_FILES = {"train": ["train.bin"], "test": ["test.bin"]}

STL10_SHAPE = (3, 96, 96)
STL10_FILES = {
    "train": ("train_X.bin", "train_y.bin"),
    "test": ("test_X.bin", "test_y.bin"),
}

MANIFEST_KEYS = ("name", "n", "c", "h", "w", "classes", "images", "labels")


@dataclass
class Dataset:
    images: np.ndarray      # [n, c, h, w], rescaled floats
    labels: np.ndarray      # [n] int64
    classes: int
    name: str

    def __post_init__(self):
        if len(self.labels) != len(self.images):
            raise ConsistencyError(
                f"{self.name}: {len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= self.classes:
            raise ConsistencyError(
                f"{self.name}: label {int(self.labels.max())} >= classes {self.classes}"
            )

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index, name=None):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.classes, name or self.name)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray     # positions in the source Dataset


def _to_dataset(raw_images, raw_labels, classes, name, factor=DEFAULT_RESCALE):
    images = rescale(raw_images.astype(TRAIN_DTYPE), factor)
    return Dataset(images, raw_labels.astype(np.int64), classes, name)


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------

def read_idx(path, expected_magic):
    """
    Parse one IDX file into a uint8 array.

    Layout (big-endian): u32 magic, one u32 per dimension, then the
    unsigned-byte payload. The low byte of the magic is the rank.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError(path, len(raw), 4 - len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(path, len(raw), header - len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = int(np.prod(dims))
    if len(raw) < header + payload:
        raise TruncatedFileError(path, len(raw), header + payload - len(raw))
    if len(raw) > header + payload:
        raise FormatError(
            f"{path}: {len(raw) - header - payload} unexpected trailing bytes after offset {header + payload}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=payload, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes=10, name="mnist", factor=DEFAULT_RESCALE):
    """Load an IDX image/label pair as a [n,1,h,w] Dataset."""
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels"
        )
    return _to_dataset(images[:, None, :, :], labels, classes, name, factor)


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures and conversions)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        f.write(array.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 / CIFAR-100
# ---------------------------------------------------------------------------

def _read_cifar_records(path, label_bytes):
    record = label_bytes + CIFAR_PIXELS
    raw = _read_bytes(path)
    if len(raw) % record:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of the {record}-byte record"
        )
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    # CIFAR-100 records are (coarse, fine); the fine label is the last label byte.
    labels = rows[:, label_bytes - 1]
    images = rows[:, label_bytes:].reshape(-1, *CIFAR_SHAPE)
    return images, labels


def load_cifar(directory, variant="cifar10", verbose=False, factor=DEFAULT_RESCALE):
    """Return (train, test) Datasets from the binary-version CIFAR files."""
    if variant == "cifar10":
        files, label_bytes, classes = CIFAR10_FILES, 1, 10
    elif variant == "cifar100":
        files, label_bytes, classes = CIFAR100_FILES, 2, 100
    else:
        raise ValueError(f"Unknown CIFAR variant: {variant}")

    out = []
    for split in ("train", "test"):
        parts = [_read_cifar_records(os.path.join(directory, fn), label_bytes) for fn in files[split]]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        ds = _to_dataset(images, labels, classes, f"{variant}-{split}", factor)
        if verbose:
            print(f"  Loaded {len(ds):,} {variant} {split} images from {directory}")
        out.append(ds)
    return tuple(out)


# ---------------------------------------------------------------------------
# STL-10
# ---------------------------------------------------------------------------

def _read_stl10_split(directory, split):
    images_fn, labels_fn = (os.path.join(directory, fn) for fn in STL10_FILES[split])
    raw = _read_bytes(images_fn)
    size = int(np.prod(STL10_SHAPE))
    if len(raw) % size:
        raise FormatError(f"{images_fn}: size {len(raw)} is not a multiple of the {size}-byte image")
    # Each channel plane is stored column-major.
    images = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3, 96, 96).transpose(0, 1, 3, 2)
    labels = np.frombuffer(_read_bytes(labels_fn), dtype=np.uint8)
    if len(labels) != len(images):
        raise ConsistencyError(f"{images_fn} has {len(images)} images but {labels_fn} has {len(labels)} labels")
    if len(labels) and labels.min() < 1:
        raise FormatError(f"{labels_fn}: labels are 1-indexed, found 0")
    return images, labels.astype(np.int64) - 1


def load_stl10(directory, verbose=False, factor=DEFAULT_RESCALE):
    """Return (train, test) from the labelled STL-10 binaries; the unlabelled split is ignored."""
    out = []
    for split in ("train", "test"):
        images, labels = _read_stl10_split(directory, split)
        ds = _to_dataset(np.ascontiguousarray(images), labels, 10, f"stl10-{split}", factor)
        if verbose:
            print(f"  Loaded {len(ds):,} stl10 {split} images from {directory}")
        out.append(ds)
    return tuple(out)


# ---------------------------------------------------------------------------
# Raw manifest
# ---------------------------------------------------------------------------

def read_manifest(manifest_path):
    """Parse `key = value` lines. Blob paths resolve against the manifest's directory."""
    fields = {}
    with open(manifest_path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{manifest_path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in MANIFEST_KEYS:
                raise FormatError(f"{manifest_path}:{lineno}: unknown key {key!r}")
            fields[key] = value
    missing = [k for k in MANIFEST_KEYS if k != "name" and k not in fields]
    if missing:
        raise FormatError(f"{manifest_path}: missing keys {', '.join(missing)}")

    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        out = {k: int(fields[k]) for k in ("n", "c", "h", "w", "classes")}
    except ValueError as e:
        raise FormatError(f"{manifest_path}: {e}") from e
    out["images"] = os.path.join(base, fields["images"])
    out["labels"] = os.path.join(base, fields["labels"])
    out["name"] = fields.get("name", os.path.splitext(os.path.basename(manifest_path))[0])
    return out


def load_raw(manifest_path, factor=DEFAULT_RESCALE):
    """Load a Dataset described by a raw manifest (row-major u8 image blob + u8 label blob)."""
    m = read_manifest(manifest_path)
    n, c, h, w = m["n"], m["c"], m["h"], m["w"]
    images = _read_bytes(m["images"])
    labels = _read_bytes(m["labels"])
    if len(images) != n * c * h * w:
        raise ConsistencyError(
            f"{m['images']}: {len(images)} bytes, manifest declares {n}x{c}x{h}x{w} = {n * c * h * w}"
        )
    if len(labels) != n:
        raise ConsistencyError(f"{m['labels']}: {len(labels)} bytes, manifest declares n = {n}")
    return _to_dataset(
        np.frombuffer(images, dtype=np.uint8).reshape(n, c, h, w),
        np.frombuffer(labels, dtype=np.uint8),
        m["classes"], m["name"], factor,
    )


def concat_datasets(a, b, name=None):
    """Stack two datasets with the same sample shape and class count."""
    if a.sample_shape != b.sample_shape or a.classes != b.classes:
        raise ConsistencyError(
            f"cannot concatenate {a.name} {list(a.sample_shape)}/{a.classes} "
            f"with {b.name} {list(b.sample_shape)}/{b.classes}"
        )
    return Dataset(
        np.concatenate([a.images, b.images]),
        np.concatenate([a.labels, b.labels]),
        a.classes, name or f"{a.name}+{b.name}",
    )


# ---------------------------------------------------------------------------
# Splitting and batching
# ---------------------------------------------------------------------------

def split_train_val(ds, val_fraction, seed):
    """
    Seeded split. The last ceil(n * val_fraction) items of a permutation
    become validation; the rest stay in training.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(ds)
    n_val = math.ceil(round(n * val_fraction, 9))
    if n_val >= n:
        raise ValueError(f"val_fraction {val_fraction} leaves no training samples out of {n}")
    perm = substream(seed, stream=SPLIT_STREAM).permutation(n)
    return ds.subset(perm[:n - n_val], f"{ds.name}-train"), ds.subset(perm[n - n_val:], f"{ds.name}-val")


def shuffled_batches(ds, batch_size, seed, epoch):
    """Yield consecutive slices of a fresh (seed, epoch) permutation; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = substream(seed, epoch, stream=SHUFFLE_STREAM).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        index = perm[start:start + batch_size]
        yield Batch(ds.images[index], ds.labels[index], index)


def ordered_batches(ds, batch_size):
    """Batches in dataset order (evaluation)."""
    for start in range(0, len(ds), batch_size):
        stop = min(start + batch_size, len(ds))
        yield Batch(ds.images[start:stop], ds.labels[start:stop], np.arange(start, stop))
