"""Unit tests for dataset ingestion, the procedural desk dataset, and the
data-free access audit."""

import gzip
import hashlib
import pickle
import struct

import numpy as np
import pytest
import torch

from dfq.data import (AccessLog, DataStore, SHAPES10_COUNTS, class_names,
                      generate_shapes10, ingest_dataset, normalization_bounds)
from dfq.errors import DataFreeViolation, IngestionError


class TestShapes10:
    def test_generation_deterministic(self):
        a_img, a_lab = generate_shapes10("test", count=50, seed=99)
        b_img, b_lab = generate_shapes10("test", count=50, seed=99)
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_lab, b_lab)

    def test_ingest_counts_and_shape(self, tmp_path):
        ds = ingest_dataset("shapes10", "test", data_dir=tmp_path)
        assert len(ds) == SHAPES10_COUNTS["test"]
        assert ds.image_shape == (1, 28, 28)
        assert ds.num_classes == 10
        counts = torch.bincount(ds.labels)
        assert (counts == len(ds) // 10).all()

    def test_cache_round_trip(self, tmp_path):
        a = ingest_dataset("shapes10", "test", data_dir=tmp_path)
        assert (tmp_path / "shapes10" / "test.npz").exists()
        b = ingest_dataset("shapes10", "test", data_dir=tmp_path)
        assert torch.equal(a.images, b.images)

    def test_corrupt_cache_fails_checksum(self, tmp_path):
        ingest_dataset("shapes10", "test", data_dir=tmp_path)
        cache = tmp_path / "shapes10" / "test.npz"
        with np.load(cache) as z:
            images, labels = z["images"].copy(), z["labels"].copy()
        images[0, 0, 0, 0] ^= 0xFF
        np.savez_compressed(cache, images=images, labels=labels)
        with pytest.raises(IngestionError, match="checksum mismatch"):
            ingest_dataset("shapes10", "test", data_dir=tmp_path)

    def test_normalization_recorded_in_manifest(self, tmp_path):
        ds = ingest_dataset("shapes10", "train", data_dir=tmp_path)
        m = ds.manifest()
        assert m["mean"] == [0.2258] and m["std"] == [0.2544]
        assert m["count"] == SHAPES10_COUNTS["train"]
        # normalization actually applied
        assert abs(float(ds.images.mean())) < 0.05
        assert abs(float(ds.images.std()) - 1.0) < 0.1

    def test_splits_differ(self, tmp_path):
        tr = ingest_dataset("shapes10", "train", data_dir=tmp_path)
        te = ingest_dataset("shapes10", "test", data_dir=tmp_path)
        assert not torch.equal(tr.images[:100], te.images[:100])


class TestErrors:
    def test_unknown_dataset_lists_supported(self, tmp_path):
        with pytest.raises(IngestionError) as exc:
            ingest_dataset("imagenet", "train", data_dir=tmp_path)
        msg = str(exc.value)
        assert "shapes10" in msg and "mnist" in msg and "cifar10" in msg

    def test_missing_mnist_files(self, tmp_path):
        with pytest.raises(IngestionError, match="missing"):
            ingest_dataset("mnist", "train", data_dir=tmp_path)

    def test_checksum_mismatch_reports_both_digests(self, tmp_path):
        root = tmp_path / "mnist"
        root.mkdir(parents=True)
        (root / "train-images-idx3-ubyte.gz").write_bytes(b"bogus")
        (root / "train-labels-idx1-ubyte.gz").write_bytes(b"bogus")
        with pytest.raises(IngestionError) as exc:
            ingest_dataset("mnist", "train", data_dir=tmp_path)
        msg = str(exc.value)
        assert "expected md5" in msg
        assert hashlib.md5(b"bogus").hexdigest() in msg

    def test_unknown_split(self, tmp_path):
        with pytest.raises(IngestionError, match="splits train/test"):
            ingest_dataset("shapes10", "validation", data_dir=tmp_path)


def write_idx(path, array: np.ndarray, gz=True):
    header = struct.pack(">HBB", 0, 0x08, array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    raw = header + array.astype(np.uint8).tobytes()
    if gz:
        with gzip.open(path, "wb") as f:
            f.write(raw)
    else:
        path.write_bytes(raw)


class TestFileParsers:
    def test_idx_round_trip(self, tmp_path, monkeypatch):
        import dfq.data as data_mod
        images = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
        labels = np.array([3, 7], dtype=np.uint8)
        root = tmp_path / "mnist"
        root.mkdir()
        img_path = root / "train-images-idx3-ubyte.gz"
        lbl_path = root / "train-labels-idx1-ubyte.gz"
        write_idx(img_path, images)
        write_idx(lbl_path, labels)
        md5s = {p.name: hashlib.md5(p.read_bytes()).hexdigest()
                for p in (img_path, lbl_path)}
        monkeypatch.setitem(data_mod.MNIST_FILES, "train", (
            (img_path.name, md5s[img_path.name]),
            (lbl_path.name, md5s[lbl_path.name]),
        ))
        ds = ingest_dataset("mnist", "train", data_dir=tmp_path)
        assert len(ds) == 2
        assert ds.image_shape == (1, 28, 28)
        assert ds.labels.tolist() == [3, 7]

    def test_cifar10_batch_parsing(self, tmp_path):
        root = tmp_path / "cifar10" / "cifar-10-batches-py"
        root.mkdir(parents=True)
        rng = np.random.default_rng(0)
        for name, n in [("data_batch_1", 6), ("test_batch", 4)]:
            batch = {
                b"data": rng.integers(0, 256, size=(n, 3072), dtype=np.int64
                                      ).astype(np.uint8),
                b"labels": list(rng.integers(0, 10, size=n)),
            }
            with open(root / name, "wb") as f:
                pickle.dump(batch, f)
        for name in [f"data_batch_{i}" for i in range(2, 6)]:
            batch = {b"data": np.zeros((1, 3072), dtype=np.uint8), b"labels": [0]}
            with open(root / name, "wb") as f:
                pickle.dump(batch, f)
        ds = ingest_dataset("cifar10", "test", data_dir=tmp_path)
        assert len(ds) == 4
        assert ds.image_shape == (3, 32, 32)


class TestAccessAudit:
    def test_reads_are_logged_with_context(self, tmp_path):
        store = DataStore(tmp_path)
        store.load("shapes10", "test", context="cellA")
        store.load("shapes10", "test", context="cellB")
        assert len(store.log.reads(split="test")) == 2
        assert len(store.log.reads(split="test", context_prefix="cellA")) == 1
        assert len(store.log.reads(split="train")) == 0

    def test_embargo_blocks_training_split(self, tmp_path):
        store = DataStore(tmp_path)
        with store.embargo("train"):
            with pytest.raises(DataFreeViolation, match="data-free violation"):
                store.load("shapes10", "train", context="DF-PTQ_int8")
            store.load("shapes10", "test", context="DF-PTQ_int8")  # allowed
        # embargo lifted afterwards
        store.load("shapes10", "train", context="teacher")
        assert len(store.log.reads(split="train")) == 1

    def test_blocked_read_not_recorded(self, tmp_path):
        store = DataStore(tmp_path)
        with store.embargo("train"):
            with pytest.raises(DataFreeViolation):
                store.load("shapes10", "train", context="DF")
        assert store.log.reads(split="train") == []

    def test_log_save(self, tmp_path):
        store = DataStore(tmp_path)
        store.load("shapes10", "test", context="x")
        store.log.save(tmp_path / "audit.json")
        text = (tmp_path / "audit.json").read_text()
        assert '"split": "test"' in text


class TestHelpers:
    def test_normalization_bounds_bracket_zero(self):
        lo, hi = normalization_bounds("shapes10")
        assert float(lo) < 0 < float(hi)

    def test_class_names(self):
        assert len(class_names("shapes10")) == 10
        assert class_names("mnist")[3] == "3"
        with pytest.raises(IngestionError):
            class_names("svhn")

    def test_batches_deterministic_under_seed(self, tmp_path):
        ds = ingest_dataset("shapes10", "test", data_dir=tmp_path)
        a = [y for _, y in ds.batches(64, shuffle=True, seed=4)]
        b = [y for _, y in ds.batches(64, shuffle=True, seed=4)]
        assert all(torch.equal(x, z) for x, z in zip(a, b))

    def test_denormalize_round_trip(self, tmp_path):
        ds = ingest_dataset("shapes10", "test", data_dir=tmp_path)
        raw = ds.denormalize(ds.images[:8])
        assert raw.min() >= 0.0 and raw.max() <= 1.0
