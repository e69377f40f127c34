"""Dataset ingestion, normalization, and the data-free access audit.

Three datasets are supported:

* ``shapes10`` -- a deterministic, procedurally generated 10-class image
  dataset (28x28 grayscale geometric patterns with jitter and noise). It is
  built into the package so the full pipeline runs on machines with no
  dataset files and no network; generation is seeded and checksum-verified.
* ``mnist`` -- ingested from the standard IDX ``.gz`` files if present under
  the data directory, md5-verified.
* ``cifar10`` -- ingested from the standard python-pickle archive
  (``cifar-10-python.tar.gz`` or the extracted ``cifar-10-batches-py``
  directory), md5-verified.

Every split read goes through :class:`DataStore`, which records the access in
an append-only :class:`AccessLog` and enforces the training-split embargo for
data-free pipeline cells.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import pickle
import struct
import tarfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .errors import DataFreeViolation, IngestionError

DATA_DIR_ENV = "DFQ_DATA_DIR"

SUPPORTED_DATASETS = ("shapes10", "mnist", "cifar10")

# Per-channel normalization applied to raw [0, 1] pixels. Fixed constants so
# test-split ingestion never needs to touch the training split.
NORMALIZATION = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    # Computed once from the generated shapes10 train split, then frozen.
    "shapes10": ((0.2258,), (0.2544,)),
}

MNIST_FILES = {
    "train": (
        ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
        ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ),
    "test": (
        ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
        ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
    ),
}

CIFAR10_ARCHIVE = ("cifar-10-python.tar.gz", "c58f30108f718f92721af3b95e74349a")

SHAPES10_CLASS_NAMES = [
    "disk", "ring", "h-bars", "v-bars", "cross",
    "plus", "box", "checker", "grating", "ripples",
]

# Frozen digests of the generated shapes10 arrays (raw uint8 images plus
# labels). Guards against silent drift of the procedural generator.
SHAPES10_COUNTS = {"train": 8000, "test": 4000}
SHAPES10_SHA256 = {
    "train": "c530977ee2846115546f5c9c748104d056bec61b05becb5e89ede5037e8533e9",
    "test": "343868f74cc2c1aabb2bccfea9477f156a79373575fe554f1463d95a0b84e538",
}


@dataclass
class DeskDataset:
    """A fully materialized split: normalized images plus labels."""

    name: str
    split: str
    images: torch.Tensor  # float32 (N, C, H, W), normalized
    labels: torch.Tensor  # int64 (N,)
    mean: tuple
    std: tuple
    class_names: list

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return self.images.shape[0]

    def manifest(self) -> dict:
        return {
            "dataset": self.name,
            "split": self.split,
            "count": len(self),
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "mean": list(self.mean),
            "std": list(self.std),
        }

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0):
        """Yield (images, labels) minibatches; deterministic under a seed."""
        n = len(self)
        if shuffle:
            order = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
        else:
            order = torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]

    def denormalize(self, images: torch.Tensor) -> torch.Tensor:
        """Map normalized images back to raw [0, 1] pixel space."""
        mean = torch.tensor(self.mean, dtype=images.dtype).view(1, -1, 1, 1)
        std = torch.tensor(self.std, dtype=images.dtype).view(1, -1, 1, 1)
        return (images * std + mean).clamp(0.0, 1.0)


def normalization_bounds(name: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel (low, high) of the normalized pixel space for a dataset.

    Raw pixels live in [0, 1]; after (x - mean) / std the valid range per
    channel is [-mean/std, (1 - mean)/std]. Generators emit into this range.
    """
    if name not in NORMALIZATION:
        raise IngestionError(
            f"unknown dataset {name!r}; supported: {', '.join(SUPPORTED_DATASETS)}"
        )
    mean, std = NORMALIZATION[name]
    mean_t = torch.tensor(mean, dtype=torch.float32)
    std_t = torch.tensor(std, dtype=torch.float32)
    return (0.0 - mean_t) / std_t, (1.0 - mean_t) / std_t


# ---------------------------------------------------------------------------
# shapes10: procedural 10-class desk dataset
# ---------------------------------------------------------------------------

_SHAPES10_SIZE = 28
_SHAPES10_SPLIT_SEED = {"train": 20240601, "test": 20240602}


def _render_shape(cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """Render one raw [0, 1] grayscale sample of the given class."""
    lin = np.linspace(-1.0, 1.0, size, dtype=np.float64)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    cx, cy = rng.uniform(-0.35, 0.35, size=2)
    scale = rng.uniform(0.50, 1.00)
    # Axis-aligned classes only wobble; oriented/texture classes rotate freely.
    if cls in (2, 3, 4, 5, 6):
        theta = rng.uniform(-0.18, 0.18)
    else:
        theta = rng.uniform(0.0, np.pi)
    ct, st = np.cos(theta), np.sin(theta)
    ux = (ct * (xx - cx) + st * (yy - cy)) / scale
    uy = (-st * (xx - cx) + ct * (yy - cy)) / scale
    rr = np.hypot(ux, uy)

    if cls == 0:
        mask = rr < 0.55
    elif cls == 1:
        mask = np.abs(rr - 0.55) < 0.16
    elif cls == 2:
        mask = (np.abs(uy - 0.33) < 0.14) | (np.abs(uy + 0.33) < 0.14)
    elif cls == 3:
        mask = (np.abs(ux - 0.33) < 0.14) | (np.abs(ux + 0.33) < 0.14)
    elif cls == 4:
        w = 0.16 * np.sqrt(2.0)
        mask = (np.abs(ux - uy) < w) | (np.abs(ux + uy) < w)
    elif cls == 5:
        mask = (np.abs(ux) < 0.16) | (np.abs(uy) < 0.16)
    elif cls == 6:
        box = np.maximum(np.abs(ux), np.abs(uy))
        mask = (box > 0.38) & (box < 0.62)
    elif cls == 7:
        f = rng.uniform(1.8, 2.6)
        mask = np.sin(np.pi * f * ux) * np.sin(np.pi * f * uy) > 0.0
    elif cls == 8:
        f = rng.uniform(2.2, 3.2)
        mask = np.sin(np.pi * f * ux) > 0.0
    elif cls == 9:
        f = rng.uniform(2.5, 3.5)
        mask = np.cos(np.pi * f * rr) > 0.3
    else:
        raise ValueError(f"shapes10 has 10 classes, got {cls}")

    if cls in (7, 8, 9):
        # Texture classes fill the frame; fade them out beyond the unit disk
        # so every class carries object-like spatial statistics.
        mask = mask & (rr < 1.05)

    fg = rng.uniform(0.55, 1.00)
    bg = rng.uniform(0.00, 0.15)
    img = bg + (fg - bg) * mask.astype(np.float64)
    img = gaussian_filter(img, sigma=rng.uniform(0.45, 0.90))
    img = img + rng.normal(0.0, rng.uniform(0.08, 0.18), size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_shapes10(split: str, count: int | None = None, seed: int | None = None):
    """Generate the raw shapes10 arrays: uint8 images (N, 1, 28, 28) + labels."""
    if split not in _SHAPES10_SPLIT_SEED:
        raise IngestionError(f"shapes10 has splits train/test, got {split!r}")
    count = SHAPES10_COUNTS[split] if count is None else count
    seed = _SHAPES10_SPLIT_SEED[split] if seed is None else seed
    rng = np.random.default_rng(seed)

    labels = np.tile(np.arange(10, dtype=np.int64), count // 10 + 1)[:count]
    rng.shuffle(labels)
    images = np.empty((count, 1, _SHAPES10_SIZE, _SHAPES10_SIZE), dtype=np.uint8)
    for i, cls in enumerate(labels):
        img = _render_shape(int(cls), rng, _SHAPES10_SIZE)
        images[i, 0] = np.round(img * 255.0).astype(np.uint8)
    return images, labels


def _shapes10_digest(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(images.tobytes())
    h.update(labels.tobytes())
    return h.hexdigest()


def _load_shapes10(split: str, data_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    """Load shapes10 from the npz cache, generating (and caching) on demand."""
    cache = data_dir / "shapes10" / f"{split}.npz"
    if cache.exists():
        with np.load(cache) as z:
            images, labels = z["images"], z["labels"]
    else:
        images, labels = generate_shapes10(split)
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(cache, images=images, labels=labels)
    digest = _shapes10_digest(images, labels)
    expected = SHAPES10_SHA256[split]
    if digest != expected:
        raise IngestionError(
            f"shapes10 {split} checksum mismatch: expected {expected}, got {digest}"
        )
    return images, labels


# ---------------------------------------------------------------------------
# MNIST (IDX files) and CIFAR-10 (python pickle batches)
# ---------------------------------------------------------------------------


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _checked_file(path: Path, expected_md5: str) -> Path:
    if not path.exists():
        raise IngestionError(
            f"dataset file missing: {path} (no network in this environment; "
            f"place the file there manually)"
        )
    actual = _md5(path)
    if actual != expected_md5:
        raise IngestionError(
            f"checksum mismatch for {path.name}: expected md5 {expected_md5}, got {actual}"
        )
    return path


def _read_idx(path: Path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into a numpy array."""
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IngestionError(f"{path.name}: not an unsigned-byte IDX file")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    array = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    return array.reshape(dims)


def _load_mnist(split: str, data_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    if split not in MNIST_FILES:
        raise IngestionError(f"mnist has splits train/test, got {split!r}")
    (img_name, img_md5), (lbl_name, lbl_md5) = MNIST_FILES[split]
    root = data_dir / "mnist"
    images = _read_idx(_checked_file(root / img_name, img_md5))
    labels = _read_idx(_checked_file(root / lbl_name, lbl_md5))
    return images[:, None, :, :], labels.astype(np.int64)


def _load_cifar10(split: str, data_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    if split not in ("train", "test"):
        raise IngestionError(f"cifar10 has splits train/test, got {split!r}")
    root = data_dir / "cifar10"
    extracted = root / "cifar-10-batches-py"
    if not extracted.exists():
        name, md5 = CIFAR10_ARCHIVE
        archive = _checked_file(root / name, md5)
        with tarfile.open(archive, "r:gz") as tar:
            tar.extractall(root)
    batch_names = (
        [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    )
    images, labels = [], []
    for bn in batch_names:
        with open(extracted / bn, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
        images.append(batch[b"data"].reshape(-1, 3, 32, 32))
        labels.extend(batch[b"labels"])
    return np.concatenate(images), np.asarray(labels, dtype=np.int64)


_CIFAR10_CLASS_NAMES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]


def class_names(name: str) -> list:
    if name == "shapes10":
        return list(SHAPES10_CLASS_NAMES)
    if name == "mnist":
        return [str(d) for d in range(10)]
    if name == "cifar10":
        return list(_CIFAR10_CLASS_NAMES)
    raise IngestionError(
        f"unknown dataset {name!r}; supported: {', '.join(SUPPORTED_DATASETS)}"
    )


# ---------------------------------------------------------------------------
# Ingestion entry point and the access audit
# ---------------------------------------------------------------------------


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".dfq-data"))


def ingest_dataset(name: str, split: str, data_dir=None) -> DeskDataset:
    """Load one split as a normalized image/label set.

    Raw uint8 pixels are scaled to [0, 1] and normalized per channel with the
    dataset's fixed constants (recorded in the manifest).
    """
    root = resolve_data_dir(data_dir)
    if name == "shapes10":
        images, labels = _load_shapes10(split, root)
        class_names = SHAPES10_CLASS_NAMES
    elif name == "mnist":
        images, labels = _load_mnist(split, root)
        class_names = [str(d) for d in range(10)]
    elif name == "cifar10":
        images, labels = _load_cifar10(split, root)
        class_names = _CIFAR10_CLASS_NAMES
    else:
        raise IngestionError(
            f"unknown dataset {name!r}; supported: {', '.join(SUPPORTED_DATASETS)}"
        )

    mean, std = NORMALIZATION[name]
    x = torch.from_numpy(images.astype(np.float32) / 255.0)
    mean_t = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
    std_t = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)
    x = (x - mean_t) / std_t
    y = torch.from_numpy(np.ascontiguousarray(labels)).long()
    return DeskDataset(
        name=name, split=split, images=x, labels=y,
        mean=mean, std=std, class_names=list(class_names),
    )


@dataclass
class AccessRecord:
    dataset: str
    split: str
    context: str
    timestamp: float


@dataclass
class AccessLog:
    """Append-only record of every dataset split read."""

    records: list = field(default_factory=list)

    def record(self, dataset: str, split: str, context: str) -> None:
        self.records.append(AccessRecord(dataset, split, context, time.time()))

    def reads(self, split: str | None = None, context_prefix: str = "") -> list:
        return [
            r for r in self.records
            if (split is None or r.split == split)
            and r.context.startswith(context_prefix)
        ]

    def to_json(self) -> str:
        return json.dumps(
            [vars(r) for r in self.records], indent=2, sort_keys=True
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


class DataStore:
    """Audited gateway to dataset splits, with a training-split embargo.

    Data-free pipeline cells run inside :meth:`embargo`; any attempt to load
    the embargoed split raises :class:`DataFreeViolation` before a byte is
    read, and every successful load lands in the access log.
    """

    def __init__(self, data_dir=None, log: AccessLog | None = None):
        self.data_dir = resolve_data_dir(data_dir)
        self.log = log if log is not None else AccessLog()
        self._embargoed: set[str] = set()
        self._cache: dict[tuple[str, str], DeskDataset] = {}

    def load(self, name: str, split: str, context: str = "") -> DeskDataset:
        if split in self._embargoed:
            raise DataFreeViolation(
                f"data-free violation: attempted to read {name}/{split} "
                f"during {context or 'an embargoed cell'}"
            )
        self.log.record(name, split, context)
        key = (name, split)
        if key not in self._cache:
            self._cache[key] = ingest_dataset(name, split, self.data_dir)
        return self._cache[key]

    @contextmanager
    def embargo(self, split: str = "train"):
        self._embargoed.add(split)
        try:
            yield self
        finally:
            self._embargoed.discard(split)
