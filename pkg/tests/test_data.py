import gzip
import os
import struct

import numpy as np
import pytest

from conftr import data
from conftr.errors import ContractError, FormatError

MNIST_DIR = os.environ.get("CONFTR_MNIST_DIR", "/root/data/mnist")


def small(n=9, d=3, k=3, seed=0):
    rng = np.random.default_rng(seed)
    return data.Dataset(rng.normal(size=(n, d)), rng.integers(0, k, size=n), n, 0, 0, k)


class TestDataset:
    def test_splits_are_contiguous_and_disjoint(self):
        ds = data.with_splits(small(10), 5, 3, 2)
        assert [len(part[1]) for part in (ds.train(), ds.cal(), ds.test())] == [5, 3, 2]
        np.testing.assert_array_equal(np.concatenate([ds.train()[0], ds.pool()[0]]), ds.features)

    def test_with_splits_is_idempotent(self):
        ds = data.with_splits(small(10), 5, 3, 2)
        again = data.with_splits(ds, 5, 3, 2)
        assert np.array_equal(again.features, ds.features)

    def test_sizes_must_sum(self):
        with pytest.raises(ContractError):
            data.Dataset(np.zeros((3, 2)), np.zeros(3, int), 1, 1, 0, 2)

    def test_labels_in_range(self):
        with pytest.raises(ContractError):
            data.Dataset(np.zeros((2, 2)), np.array([0, 2]), 2, 0, 0, 2)


class TestCsv:
    def test_three_rows(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,label,b\n1,0,2\n3,1,4\n5,2,6\n")
        ds = data.load_csv(path)
        assert (ds.n, ds.dim) == (3, 2)
        np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4], [5, 6]])
        np.testing.assert_array_equal(ds.labels, [0, 1, 2])

    def test_header_only(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,label\n")
        with pytest.raises(FormatError, match="no data rows"):
            data.load_csv(path)

    def test_bad_value_reports_line(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,label\n1,0\nx,1\n")
        with pytest.raises(FormatError, match=":3:"):
            data.load_csv(path)

    def test_label_outside_k(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,label\n1,0\n2,5\n")
        with pytest.raises(FormatError):
            data.load_csv(path, num_classes=3)

    def test_round_trip_is_bit_exact(self, tmp_path):
        ds = small(20, 4)
        data.write_csv(ds, tmp_path / "r.csv")
        back = data.load_csv(tmp_path / "r.csv", num_classes=3)
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)


class TestIdx:
    def write_pair(self, tmp_path, images, labels):
        data.write_idx(images, labels, tmp_path / "img", tmp_path / "lab")
        return tmp_path / "img", tmp_path / "lab"

    def test_hand_built(self, tmp_path):
        images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        raw = struct.pack(">IIII", 0x803, 2, 2, 2) + images.tobytes()
        (tmp_path / "img").write_bytes(raw)
        (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 2) + bytes([3, 7]))
        ds = data.load_idx(tmp_path / "img", tmp_path / "lab")
        assert (ds.n, ds.dim) == (2, 4)
        np.testing.assert_array_equal(ds.features[1], [4, 5, 6, 7])
        np.testing.assert_array_equal(ds.labels, [3, 7])

    def test_truncated(self, tmp_path):
        img, lab = self.write_pair(tmp_path, np.zeros((3, 2, 2)), np.zeros(3))
        img.write_bytes(img.read_bytes()[:-1])
        with pytest.raises(FormatError, match="bytes"):
            data.load_idx(img, lab)

    def test_bad_magic(self, tmp_path):
        img, lab = self.write_pair(tmp_path, np.zeros((1, 2, 2)), np.zeros(1))
        with pytest.raises(FormatError, match="magic"):
            data.load_idx(lab, lab)

    def test_count_mismatch(self, tmp_path):
        img, _ = self.write_pair(tmp_path, np.zeros((3, 2, 2)), np.zeros(3))
        data.write_idx(np.zeros((2, 2, 2)), np.zeros(2), tmp_path / "x", tmp_path / "lab2")
        with pytest.raises(FormatError):
            data.load_idx(img, tmp_path / "lab2")

    def test_gzip(self, tmp_path):
        img, lab = self.write_pair(tmp_path, np.full((2, 3, 3), 9), np.array([1, 0]))
        gz = tmp_path / "img.gz"
        gz.write_bytes(gzip.compress(img.read_bytes()))
        assert data.load_idx(gz, lab).features.max() == 9

    @pytest.mark.skipif(not os.path.isdir(MNIST_DIR), reason="MNIST files not available")
    def test_mnist_train_file(self):
        ds = data.load_idx(os.path.join(MNIST_DIR, "train-images-idx3-ubyte"),
                           os.path.join(MNIST_DIR, "train-labels-idx1-ubyte"))
        assert (ds.n, ds.dim) == (60000, 784)


def test_remap_keeps_split_membership():
    ds = data.Dataset(np.arange(6.0)[:, None], np.array([0, 1, 2, 1, 2, 0]), 3, 2, 1, 3)
    out = data.remap_labels(ds, {1: 0, 2: 1})
    assert (out.n_train, out.n_cal, out.n_test) == (2, 2, 0)
    np.testing.assert_array_equal(out.labels, [0, 1, 0, 1])


class TestFeatures:
    def test_camelyon_shape(self, tmp_path):
        ds = small(5, 31, 2)
        data.write_features(ds, tmp_path / "f.bin")
        back = data.load_features(tmp_path / "f.bin")
        assert (back.n, back.dim) == (5, 31)
        np.testing.assert_array_equal(back.features, ds.features.astype(np.float32))
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_empty(self, tmp_path):
        path = tmp_path / "f.bin"
        path.write_bytes(data.FEATURES_MAGIC + struct.pack("<QQQ", 1, 0, 4))
        with pytest.raises(FormatError, match="empty"):
            data.load_features(path)

    def test_header_body_mismatch(self, tmp_path):
        data.write_features(small(4, 2), tmp_path / "f.bin")
        raw = (tmp_path / "f.bin").read_bytes()
        (tmp_path / "f.bin").write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="header promises"):
            data.load_features(tmp_path / "f.bin")

    def test_csv_fallback(self, tmp_path):
        ds = small(4, 2)
        data.write_csv(ds, tmp_path / "f.csv")
        assert data.load_features(tmp_path / "f.csv").n == 4


class TestSynthetic:
    def test_deterministic(self):
        a = data.synthetic_gaussian_mixture(4, 5, 10, 5, 5, seed=3)
        b = data.synthetic_gaussian_mixture(4, 5, 10, 5, 5, seed=3)
        assert np.array_equal(a.features, b.features)

    def test_simplex_distances(self):
        means = data.class_means(5, 8, 3.0)
        dists = np.linalg.norm(means[:, None] - means[None], axis=2)[np.triu_indices(5, 1)]
        np.testing.assert_allclose(dists, 3.0)

    def test_uniform_label_marginals(self):
        ds = data.synthetic_gaussian_mixture(10, 20, 20000, 0, 0, seed=1)
        counts = np.bincount(ds.labels, minlength=10)
        p = 0.1
        assert np.all(np.abs(counts - 2000) <= 3 * np.sqrt(20000 * p * (1 - p)))

    @pytest.mark.parametrize("separation, lo, hi", [(40.0, 0.999, 1.0), (0.0, 0.05, 0.2)])
    def test_nearest_mean_accuracy(self, separation, lo, hi):
        ds = data.synthetic_gaussian_mixture(10, 20, 4000, 0, 0, separation=separation, seed=2)
        means = data.class_means(10, 20, separation, seed=2)
        pred = np.argmin(((ds.features[:, None] - means[None]) ** 2).sum(axis=2), axis=1)
        assert lo <= np.mean(pred == ds.labels) <= hi

    def test_rejects_tiny(self):
        with pytest.raises(ContractError):
            data.synthetic_gaussian_mixture(1, 5, 1, 1, 1)


class TestPreprocessing:
    def test_pixel_scale(self):
        ds = data.Dataset(np.array([[0.0, 255.0]]), np.array([0]), 1, 0, 0, 2)
        out, _ = data.fit_apply_preprocessing(ds, "pixel_scale_pm1")
        np.testing.assert_array_equal(out.features, [[-1.0, 1.0]])

    def test_constant_feature_whitens_to_zero(self):
        x = np.column_stack([np.full(6, 4.0), np.arange(6.0)])
        out, _ = data.fit_apply_preprocessing(data.Dataset(x, np.zeros(6, int), 6, 0, 0, 2), "per_feature_whiten")
        np.testing.assert_array_equal(out.features[:, 0], 0.0)

    def test_whitened_train_statistics(self):
        ds = data.with_splits(small(50, 4), 30, 10, 10)
        out, _ = data.fit_apply_preprocessing(ds, "per_feature_whiten")
        x, _ = out.train()
        np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(x.std(axis=0), 1.0)

    def test_cal_and_test_never_leak_into_statistics(self):
        ds = data.with_splits(small(50, 4), 30, 10, 10)
        poisoned = ds.features.copy()
        poisoned[30:] = 1e6
        a = data.fit_preprocessing(ds, "per_feature_whiten")
        b = data.fit_preprocessing(data.Dataset(poisoned, ds.labels, 30, 10, 10, 3), "per_feature_whiten")
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)

    def test_unknown(self):
        with pytest.raises(ContractError):
            data.fit_preprocessing(small(), "zca")
