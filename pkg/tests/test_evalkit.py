import numpy as np
import pytest

from ipmc import evalkit
from ipmc.errors import ConfigError, ShapeError


class TestLinearProbe:
    def test_one_hot_features_perfect(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 3, size=120)
        x = np.eye(3)[y]
        acc = evalkit.linear_probe(x[:80], y[:80], x[80:], y[80:])
        assert acc == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2000, 8))
        y = rng.integers(0, 2, size=2000)
        acc = evalkit.linear_probe(x[:1000], y[:1000], x[1000:], y[1000:])
        assert 0.44 <= acc <= 0.56

    def test_duplicated_columns_change_little(self):
        rng = np.random.default_rng(2)
        y = rng.integers(0, 3, size=400)
        x = np.eye(3)[y] + 0.5 * rng.normal(size=(400, 3))
        base = evalkit.linear_probe(x[:300], y[:300], x[300:], y[300:])
        xx = np.concatenate([x, x], axis=1)
        dup = evalkit.linear_probe(xx[:300], y[:300], xx[300:], y[300:])
        assert abs(base - dup) <= 0.005

    def test_missing_class_rejected(self):
        x = np.zeros((4, 2))
        with pytest.raises(ConfigError):
            evalkit.linear_probe(x, np.array([0, 0, 0, 0]), x, np.array([0, 1, 0, 1]))


class TestKnn:
    def test_exact_duplicate_first(self):
        rng = np.random.default_rng(0)
        gallery = rng.normal(size=(10, 4))
        out = evalkit.knn_retrieve(gallery[7], gallery, 3)
        assert out[0] == 7

    def test_one_d_ordering(self):
        gallery = np.array([[0.0], [5.0], [10.0]])
        out = evalkit.knn_retrieve(np.array([4.0]), gallery, 2)
        assert out.tolist() == [1, 0]

    def test_tie_breaks_to_lower_index(self):
        gallery = np.array([[1.0], [-1.0], [1.0]])
        out = evalkit.knn_retrieve(np.array([0.0]), gallery, 3)
        assert out.tolist() == [0, 1, 2]

    def test_empty_gallery_rejected(self):
        with pytest.raises(ShapeError):
            evalkit.knn_retrieve(np.zeros(2), np.zeros((0, 2)), 1)

    def test_total_order_property(self):
        rng = np.random.default_rng(3)
        gallery = rng.integers(0, 3, size=(30, 4)).astype(float)
        query = rng.normal(size=4)
        order = evalkit.knn_retrieve(query, gallery, 30)
        dists = np.sum(np.abs(gallery - query), axis=1)
        for a, b in zip(order[:-1], order[1:]):
            assert (dists[a], a) < (dists[b], b)


class TestViewDiscriminability:
    def test_identical_views_near_chance(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=(300, 6))
        pooled = np.concatenate([base, base.copy()], axis=0)
        labels = np.repeat([0, 1], 300)
        acc = evalkit.view_discriminability(pooled, labels)
        assert abs(acc - 0.5) < 0.1

    def test_disjoint_views_separable(self):
        rng = np.random.default_rng(5)
        a = np.abs(rng.normal(size=(200, 8)))
        a[:, 4:] = 0.0
        b = np.abs(rng.normal(size=(200, 8)))
        b[:, :4] = 0.0
        pooled = np.concatenate([a, b], axis=0)
        labels = np.repeat([0, 1], 200)
        assert evalkit.view_discriminability(pooled, labels) > 0.95

    def test_single_view_rejected(self):
        with pytest.raises(ConfigError):
            evalkit.view_discriminability(np.zeros((10, 3)), np.zeros(10, dtype=int))


class TestEmbedding2d:
    def test_centered_2d_preserves_distances(self):
        rng = np.random.default_rng(6)
        data = rng.normal(size=(40, 2))
        data -= data.mean(axis=0)
        coords = evalkit.export_embedding_2d(data)
        orig = np.linalg.norm(data[:, None] - data[None, :], axis=2)
        new = np.linalg.norm(coords[:, None] - coords[None, :], axis=2)
        np.testing.assert_allclose(orig, new, atol=1e-9)

    def test_identical_points_zero(self):
        data = np.ones((5, 3))
        coords = evalkit.export_embedding_2d(data)
        np.testing.assert_allclose(coords, 0.0, atol=1e-12)

    def test_explained_variance_non_increasing(self):
        rng = np.random.default_rng(7)
        data = rng.normal(size=(100, 6)) * np.array([5, 3, 1, 1, 1, 1])
        coords = evalkit.export_embedding_2d(data)
        assert coords[:, 0].var() >= coords[:, 1].var()

    def test_rank_deficient_second_component(self, caplog):
        line = np.outer(np.linspace(-1, 1, 20), np.array([1.0, 2.0]))
        with caplog.at_level("WARNING"):
            coords = evalkit.export_embedding_2d(line)
        np.testing.assert_allclose(coords[:, 1], 0.0, atol=1e-9)

    def test_too_few_samples(self):
        with pytest.raises(ShapeError):
            evalkit.export_embedding_2d(np.zeros((2, 3)))

    def test_deterministic_sign(self):
        rng = np.random.default_rng(8)
        data = rng.normal(size=(50, 4))
        a = evalkit.export_embedding_2d(data)
        b = evalkit.export_embedding_2d(data.copy())
        np.testing.assert_array_equal(a, b)
