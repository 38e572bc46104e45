import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernel_flows.data import (
    Dataset,
    IMAGES_MAGIC,
    LABELS_MAGIC,
    export_csv,
    filter_classes,
    gamma_heuristic,
    load_mnist,
    normalize_l2,
    one_hot,
    read_idx,
    select_subset,
    split_train_test,
    swiss_roll,
    write_idx,
)
from kernel_flows.errors import BadMagic, ConfigError, DimensionOverflow, TruncatedFile, ZeroVector

from oracles import perceptron_separates


class TestSwissRoll:
    def test_two_points_antipodal(self):
        d = swiss_roll(2)
        assert np.allclose(d.points[0], [-1.0, 0.0], atol=1e-15)
        assert np.array_equal(d.points[1], -d.points[0])
        assert d.signed.tolist() == [1.0, -1.0]

    def test_balanced_and_negated(self):
        d = swiss_roll(100)
        assert np.sum(d.labels == 1) == 50 == np.sum(d.labels == 0)
        assert np.array_equal(d.points[d.labels == 0], -d.points[d.labels == 1])
        assert np.linalg.norm(d.points, axis=1).max() == pytest.approx(4.5)

    def test_odd_rejected(self):
        with pytest.raises(ConfigError):
            swiss_roll(7)

    def test_seeded_jitter(self):
        a = swiss_roll(20, 0.1, np.random.default_rng(3))
        b = swiss_roll(20, 0.1, np.random.default_rng(3))
        assert np.array_equal(a.points, b.points)
        assert np.abs(a.points - swiss_roll(20).points).max() <= 0.1

    def test_not_linearly_separable(self):
        d = swiss_roll(100)
        assert not perceptron_separates(d.points, d.labels, epochs=10_000)


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims) + bytes(payload)


class TestIdx:
    def test_hand_built_images(self, tmp_path):
        p = tmp_path / "img"
        p.write_bytes(idx_bytes(IMAGES_MAGIC, (1, 2, 2), [0, 1, 254, 255]))
        a = read_idx(p)
        assert a.dtype == np.uint8 and a.shape == (1, 2, 2)
        assert a.tolist() == [[[0, 1], [254, 255]]]

    def test_round_trip_byte_exact(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
        labs = rng.integers(0, 10, 5, dtype=np.uint8)
        write_idx(tmp_path / "i", imgs)
        write_idx(tmp_path / "l", labs)
        assert np.array_equal(read_idx(tmp_path / "i"), imgs)
        assert np.array_equal(read_idx(tmp_path / "l"), labs)
        assert (tmp_path / "i").read_bytes() == idx_bytes(IMAGES_MAGIC, (5, 3, 4), imgs.tobytes())
        assert (tmp_path / "l").read_bytes() == idx_bytes(LABELS_MAGIC, (5,), labs.tobytes())

    def test_gzip(self, tmp_path):
        raw = idx_bytes(LABELS_MAGIC, (3,), [1, 2, 3])
        (tmp_path / "l.gz").write_bytes(gzip.compress(raw))
        assert read_idx(tmp_path / "l.gz").tolist() == [1, 2, 3]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(idx_bytes(0x00000802, (1,), [0]))
        with pytest.raises(BadMagic):
            read_idx(p)

    def test_label_file_with_image_magic(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(idx_bytes(IMAGES_MAGIC, (1, 1, 1), [4]))
        with pytest.raises(BadMagic):
            read_idx(p, expect=LABELS_MAGIC)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(idx_bytes(IMAGES_MAGIC, (2, 2, 2), [0] * 7))
        with pytest.raises(TruncatedFile):
            read_idx(p)
        p.write_bytes(struct.pack(">I", IMAGES_MAGIC) + b"\0\0")
        with pytest.raises(TruncatedFile):
            read_idx(p)
        p.write_bytes(b"\0\0")
        with pytest.raises(TruncatedFile):
            read_idx(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(idx_bytes(LABELS_MAGIC, (2,), [0, 1, 2]))
        with pytest.raises(TruncatedFile):
            read_idx(p)

    def test_dimension_overflow(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(idx_bytes(IMAGES_MAGIC, (2 ** 32 - 1, 2 ** 32 - 1, 2 ** 32 - 1), []))
        with pytest.raises(DimensionOverflow):
            read_idx(p)

    def test_load_mnist_layout(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (6, 28, 28), dtype=np.uint8)
        labs = np.arange(6, dtype=np.uint8)
        write_idx(tmp_path / "t10k-images-idx3-ubyte", imgs)
        write_idx(tmp_path / "t10k-labels-idx1-ubyte", labs)
        d = load_mnist(tmp_path, "test")
        assert d.points.shape == (6, 784) and d.n_classes == 10
        assert np.array_equal(d.points[2], imgs[2].ravel().astype(float))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 255), min_size=0, max_size=40))
    def test_label_round_trip_property(self, values):
        import os
        import tempfile
        a = np.array(values, dtype=np.uint8)
        with tempfile.TemporaryDirectory() as tmp:
            p = os.path.join(tmp, "l")
            write_idx(p, a)
            assert np.array_equal(read_idx(p), a)


class TestNormalizeAndGamma:
    def test_normalize(self):
        assert np.allclose(normalize_l2([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-15)
        assert np.array_equal(normalize_l2([[0.0, 1.0]]), [[0.0, 1.0]])
        with pytest.raises(ZeroVector):
            normalize_l2([[1.0, 0.0], [0.0, 0.0]])

    def test_unit_norm_property(self, rng):
        X = normalize_l2(rng.standard_normal((50, 7)) * 100)
        assert np.abs(np.linalg.norm(X, axis=1) - 1).max() <= 1e-12

    def test_gamma_two_points(self):
        assert gamma_heuristic([[0.0, 0.0], [2.0, 0.0]]) == pytest.approx(0.25)

    def test_gamma_homogeneity(self, rng):
        X = rng.standard_normal((30, 4))
        assert gamma_heuristic(3 * X) == pytest.approx(gamma_heuristic(X) / 9, rel=1e-12)

    def test_gamma_sampled_within_two_percent(self):
        X = np.random.default_rng(1).standard_normal((3000, 10))
        full = gamma_heuristic(X)
        assert abs(gamma_heuristic(X, method="sampled", seed=2) - full) <= 0.02 * full

    def test_gamma_degenerate(self):
        with pytest.raises(ZeroVector):
            gamma_heuristic([[1.0, 1.0], [1.0, 1.0]])


class TestSubsets:
    def data(self, rng, n=60, k=3):
        return Dataset(rng.standard_normal((n, 2)), np.arange(n) % k, k)

    def test_all(self, rng):
        d = self.data(rng)
        assert np.array_equal(select_subset(d, 60, rng=rng), np.arange(60))

    def test_balanced_one_per_class(self, rng):
        d = Dataset(rng.standard_normal((100, 2)), np.arange(100) % 10, 10)
        idx = select_subset(d, 10, balanced=True, rng=rng)
        assert sorted(d.labels[idx]) == list(range(10))

    def test_balanced_not_divisible(self, rng):
        with pytest.raises(ConfigError):
            select_subset(self.data(rng), 10, balanced=True, rng=rng)

    def test_balanced_class_too_small(self, rng):
        d = Dataset(rng.standard_normal((5, 2)), [0, 0, 0, 0, 1], 2)
        with pytest.raises(ConfigError):
            select_subset(d, 4, balanced=True, rng=rng)

    def test_deterministic(self):
        d = self.data(np.random.default_rng(0))
        a = select_subset(d, 12, True, np.random.default_rng(4))
        b = select_subset(d, 12, True, np.random.default_rng(4))
        assert np.array_equal(a, b)

    def test_filter_and_split(self, rng):
        d = Dataset(rng.standard_normal((100, 2)), np.arange(100) % 10, 10)
        f = filter_classes(d, [2, 4])
        assert len(f) == 20 and set(f.labels) == {0, 1} and f.n_classes == 2
        train, test = split_train_test(f, 10, 6, rng)
        assert len(train) == 10 and len(test) == 6
        common = {tuple(p) for p in train.points} & {tuple(p) for p in test.points}
        assert not common

    def test_one_hot(self):
        oh = one_hot([0, 2, 1], 3)
        assert np.array_equal(oh.sum(axis=1), np.ones(3))
        assert oh[1].tolist() == [0, 0, 1]

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 2)), [0, 2], 2)
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), [0, 1], 2)

    def test_export_csv(self, tmp_path):
        export_csv(tmp_path / "d.csv", [[1.0, 2.0]], [1])
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines == ["index,label,x0,x1", "0,1,1.0,2.0"]
