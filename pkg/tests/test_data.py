import struct

import numpy as np
import pytest

from onebit_fl.data import (Dataset, generate_synthetic, load_dataset,
                            partition_by_label, scale_unit_interval,
                            split_train_test)
from onebit_fl.errors import ConfigError, DataFormatError
from onebit_fl import rng as rngs


def _write_idx_pair(tmp_path, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img_path = tmp_path / "toy-images-idx3-ubyte"
    lbl_path = tmp_path / "toy-labels-idx1-ubyte"
    header = bytes([0, 0, 0x08, images.ndim]) + b"".join(
        struct.pack(">I", d) for d in images.shape)
    img_path.write_bytes(header + images.tobytes())
    lbl_header = bytes([0, 0, 0x08, 1]) + struct.pack(">I", labels.shape[0])
    lbl_path.write_bytes(lbl_header + labels.tobytes())
    return img_path, lbl_path


class TestSyntheticData:
    def test_zero_heterogeneity_shares_parameters(self):
        synth = generate_synthetic("logistic", 5, 10, 4, 0.0, seed=0)
        for k in range(1, 5):
            np.testing.assert_array_equal(synth.thetas[k], synth.thetas[0])

    def test_replay_determinism(self):
        a = generate_synthetic("linear", 3, 20, 6, 1.0, seed=9)
        b = generate_synthetic("linear", 3, 20, 6, 1.0, seed=9)
        np.testing.assert_array_equal(a.dataset.x, b.dataset.x)
        np.testing.assert_array_equal(a.dataset.y, b.dataset.y)

    def test_pooled_fit_separates_iid_data(self):
        # oracle: single-machine full-batch gradient descent on the pooled data
        synth = generate_synthetic("logistic", 4, 500, 10, 0.0, seed=1)
        x, y = synth.dataset.x, synth.dataset.y
        signs = 2.0 * y - 1.0
        w = np.zeros(10)
        for _ in range(400):
            margins = signs * (x @ w)
            sig = 1.0 / (1.0 + np.exp(np.clip(margins, -500, 500)))
            w += 0.5 * (x * (signs * sig)[:, None]).mean(axis=0)
        accuracy = float(np.mean((x @ w > 0) == (y == 1)))
        assert accuracy >= 0.95

    def test_partitions_cover_and_disjoint(self):
        synth = generate_synthetic("logistic", 4, 25, 3, 1.0, seed=2)
        joined = np.concatenate(synth.partitions)
        assert joined.size == 100
        assert np.unique(joined).size == 100

    def test_validation(self):
        with pytest.raises(ConfigError):
            generate_synthetic("poisson", 2, 10, 3, 0.0, seed=0)
        with pytest.raises(ConfigError):
            generate_synthetic("logistic", 2, 10, 3, -0.5, seed=0)


class TestPartitionByLabel:
    def test_label_skew_limits_distinct_labels(self):
        # 10 balanced classes cut into 40 single-label shards, 2 per client
        labels = np.repeat(np.arange(10), 400)
        labels = labels[np.random.default_rng(0).permutation(labels.size)]
        parts = partition_by_label(labels, 20, 2, seed=5)
        for part in parts:
            assert np.unique(labels[part]).size <= 2

    def test_single_client_takes_everything_dealt(self):
        labels = np.repeat(np.arange(4), 6)
        parts = partition_by_label(labels, 1, 4, seed=1)
        assert len(parts) == 1
        assert parts[0].size == 24

    def test_disjoint_under_many_seeds(self):
        labels = np.random.default_rng(1).integers(0, 10, size=500)
        for seed in range(100):
            parts = partition_by_label(labels, 8, 3, seed=seed)
            joined = np.concatenate(parts)
            assert np.unique(joined).size == joined.size

    def test_insufficient_data(self):
        with pytest.raises(ConfigError):
            partition_by_label(np.zeros(10), 4, 3, seed=0)


class TestSplits:
    def test_disjoint_and_reproducible(self):
        idx = np.arange(37)
        train1, test1 = split_train_test(idx, 0.1, rngs.stream(3, rngs.SPLIT, 0))
        train2, test2 = split_train_test(idx, 0.1, rngs.stream(3, rngs.SPLIT, 0))
        np.testing.assert_array_equal(train1, train2)
        np.testing.assert_array_equal(test1, test2)
        assert np.intersect1d(train1, test1).size == 0
        assert train1.size + test1.size == 37

    def test_both_sides_nonempty(self):
        train, test = split_train_test(np.arange(2), 0.01, np.random.default_rng(0))
        assert train.size == 1 and test.size == 1


class TestScaling:
    def test_idempotent(self):
        x = np.array([[0.0, 128.0], [255.0, 64.0]])
        once = scale_unit_interval(x)
        np.testing.assert_array_equal(scale_unit_interval(once), once)
        assert once.max() <= 1.0


class TestIdxLoader:
    def test_fixture_values(self, tmp_path):
        images = np.array([[[0, 51], [102, 255]],
                           [[255, 0], [0, 0]],
                           [[10, 20], [30, 40]],
                           [[1, 2], [3, 4]]], dtype=np.uint8)
        labels = np.array([3, 1, 4, 1], dtype=np.uint8)
        img_path, _ = _write_idx_pair(tmp_path, images, labels)
        x, y = load_dataset(img_path, "idx")
        assert x.shape == (4, 4)
        np.testing.assert_allclose(x[0], [0.0, 51 / 255.0, 102 / 255.0, 1.0])
        np.testing.assert_array_equal(y, [3, 1, 4, 1])

    def test_bad_magic_reports_offset(self, tmp_path):
        path = tmp_path / "bad-images-idx3-ubyte"
        path.write_bytes(b"\x01\x00\x08\x01" + struct.pack(">I", 0))
        with pytest.raises(DataFormatError, match="byte 0"):
            load_dataset(path, "idx")

    def test_truncated_data_detected(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        labels = np.zeros(2, dtype=np.uint8)
        img_path, _ = _write_idx_pair(tmp_path, images, labels)
        img_path.write_bytes(img_path.read_bytes()[:-3])
        with pytest.raises(DataFormatError, match="data bytes"):
            load_dataset(img_path, "idx")

    def test_missing_labels_file(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        labels = np.zeros(2, dtype=np.uint8)
        img_path, lbl_path = _write_idx_pair(tmp_path, images, labels)
        lbl_path.unlink()
        with pytest.raises(FileNotFoundError):
            load_dataset(img_path, "idx")

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((3, 2, 2), dtype=np.uint8)
        labels = np.zeros(2, dtype=np.uint8)
        img_path, _ = _write_idx_pair(tmp_path, images, labels)
        with pytest.raises(DataFormatError, match="labels"):
            load_dataset(img_path, "idx")


class TestCsvLoader:
    def test_fixture_shape(self, tmp_path):
        path = tmp_path / "toy.csv"
        path.write_text("1,0.5,2.0\n0,1.5,-1.0\n1,0.0,0.25\n")
        x, y = load_dataset(path, "csv")
        assert x.shape == (3, 2)
        np.testing.assert_array_equal(y, [1, 0, 1])
        assert y.dtype == np.int64

    def test_ragged_row_reports_line(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("1,2.0,3.0\n0,1.0\n")
        with pytest.raises(DataFormatError, match="ragged.csv:2"):
            load_dataset(path, "csv")

    def test_non_numeric_reports_line(self, tmp_path):
        path = tmp_path / "words.csv"
        path.write_text("1,2.0,3.0\n0,abc,1.0\n")
        with pytest.raises(DataFormatError, match="words.csv:2"):
            load_dataset(path, "csv")

    def test_float_labels_preserved(self, tmp_path):
        path = tmp_path / "reg.csv"
        path.write_text("0.5,1.0\n-0.25,2.0\n")
        _, y = load_dataset(path, "csv")
        assert y.dtype == np.float64

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.csv", "csv")
