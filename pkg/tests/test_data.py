import numpy as np
import pytest

from rselab.data import (CIFAR_RECORD, Dataset, gen_synthetic, load_cifar10,
                         parse_cifar_batch, serialize_cifar_batch,
                         split_and_shuffle)
from rselab.errors import FormatError, UsageError
from rselab.rng import RngStream


def fake_batch(n=20, seed=0):
    rng = RngStream(seed, 50)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, (n,))
    rec[:, 1:] = rng.integers(0, 256, (n, 3072))
    return rec.tobytes()


class TestCifarFormat:
    def test_parse_shapes_and_range(self):
        images, labels = parse_cifar_batch(fake_batch(20))
        assert images.shape == (20, 3, 32, 32) and images.dtype == np.float32
        assert images.min() >= 0.0 and images.max() <= 1.0
        assert labels.shape == (20,) and labels.max() <= 9

    def test_normalization(self):
        rec = np.zeros(CIFAR_RECORD, dtype=np.uint8)
        rec[0] = 7
        rec[1] = 255
        images, labels = parse_cifar_batch(rec.tobytes())
        assert labels[0] == 7
        assert images[0, 0, 0, 0] == 1.0

    def test_round_trip_bytes(self):
        buf = fake_batch(50, seed=3)
        images, labels = parse_cifar_batch(buf)
        assert serialize_cifar_batch(images, labels) == buf

    def test_bad_length_names_offset(self):
        with pytest.raises(FormatError, match=r"\d+"):
            parse_cifar_batch(fake_batch(3)[:-10])

    def test_bad_label_byte(self):
        rec = bytearray(fake_batch(2))
        rec[CIFAR_RECORD] = 10  # second record's label
        with pytest.raises(FormatError, match="label"):
            parse_cifar_batch(bytes(rec))

    def test_load_cifar10_dir(self, tmp_path):
        for i in range(1, 6):
            (tmp_path / f"data_batch_{i}.bin").write_bytes(fake_batch(10, i))
        (tmp_path / "test_batch.bin").write_bytes(fake_batch(10, 9))
        train, test = load_cifar10(tmp_path)
        assert len(train) == 50 and len(test) == 10
        assert train.split == "train" and test.split == "test"


class TestSynthetic:
    def test_deterministic(self):
        a = gen_synthetic(7, 10, 4, 16, split="train")
        b = gen_synthetic(7, 10, 4, 16, split="train")
        assert a.images.tobytes() == b.images.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_data(self):
        a = gen_synthetic(7, 10, 4, 16, split="train")
        b = gen_synthetic(8, 10, 4, 16, split="train")
        assert a.images.tobytes() != b.images.tobytes()

    def test_invariants(self):
        ds = gen_synthetic(7, 10, 6, 16, split="test")
        assert ds.images.shape == (60, 3, 16, 16)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert set(np.unique(ds.labels)) == set(range(6))

    def test_splits_differ(self):
        a = gen_synthetic(7, 10, 4, 16, split="train")
        b = gen_synthetic(7, 10, 4, 16, split="test")
        assert a.images.tobytes() != b.images.tobytes()

    def test_linear_probe_in_band(self):
        sklearn = pytest.importorskip("sklearn")
        from sklearn.linear_model import LogisticRegression

        tr = gen_synthetic(7, 100, 10, 16, split="train")
        te = gen_synthetic(7, 50, 10, 16, split="test")
        clf = LogisticRegression(max_iter=2000)
        clf.fit(tr.images.reshape(len(tr), -1), tr.labels)
        acc = clf.score(te.images.reshape(len(te), -1), te.labels)
        # The task is deliberately not linearly solvable but far above chance.
        assert 0.60 <= acc <= 0.90, acc


class TestDataset:
    def test_validation(self):
        with pytest.raises(UsageError):
            Dataset(images=np.zeros((0, 3, 4, 4), dtype=np.float32),
                    labels=np.zeros(0, dtype=np.int64), classes=2,
                    split="train", provenance="t")
        with pytest.raises(UsageError):
            Dataset(images=np.full((1, 3, 4, 4), 2.0, dtype=np.float32),
                    labels=np.zeros(1, dtype=np.int64), classes=2,
                    split="train", provenance="t")

    def test_split_and_shuffle(self):
        ds = gen_synthetic(7, 5, 2, 8, split="train")
        left, right = split_and_shuffle(ds, 0.5, seed=3)
        assert len(left) == 5 and len(right) == 5
        l2, r2 = split_and_shuffle(ds, 0.5, seed=3)
        assert left.images.tobytes() == l2.images.tobytes()
        with pytest.raises(UsageError):
            split_and_shuffle(ds, 0.0, seed=3)

    def test_subset(self):
        ds = gen_synthetic(7, 5, 2, 8, split="train")
        sub = ds.subset(np.array([0, 3]))
        assert len(sub) == 2
        assert sub.images[1].tobytes() == ds.images[3].tobytes()
