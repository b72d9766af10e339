import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltssl.dataset import (
    AugmentConfig,
    LongTailSpec,
    SampleSet,
    build_splits,
    generate_mixture,
    longtail_counts,
    read_bundle,
    reveal_hidden_labels,
    sample_batches,
    strong_augment,
    swap_coordinates,
    unlabeled_batch_size,
    weak_augment,
    write_bundle,
)
from ltssl.numerics import RandomStream


class TestLongtailCounts:
    def test_endpoints(self):
        spec = LongTailSpec(num_classes=10)
        counts = longtail_counts(spec, 500, 100)
        assert counts[0] == 500
        assert counts[9] == 5

    def test_second_class_rounds_to_300(self):
        # 500 * 100 ** (-1/9) = 299.742 (mpmath)
        assert longtail_counts(LongTailSpec(num_classes=10, rounding="round"), 500, 100)[1] == 300
        assert longtail_counts(LongTailSpec(num_classes=10, rounding="floor"), 500, 100)[1] == 299

    def test_floor_keeps_exact_endpoint(self):
        assert longtail_counts(LongTailSpec(num_classes=10, rounding="floor"), 500, 100)[9] == 5

    def test_clamped_to_one(self):
        assert longtail_counts(LongTailSpec(num_classes=4), 2, 1000)[-1] == 1

    def test_invalid(self):
        with pytest.raises(ValueError):
            longtail_counts(LongTailSpec(), 10, 0.5)

    @settings(max_examples=300)
    @given(st.integers(2, 30), st.integers(1, 5000), st.floats(1, 500), st.sampled_from(["floor", "round"]))
    def test_non_increasing(self, C, head, gamma, rounding):
        counts = longtail_counts(LongTailSpec(num_classes=C, rounding=rounding), head, gamma)
        assert counts[0] == head
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert min(counts) >= 1


class TestMixture:
    def test_distance_and_overlap(self):
        m = generate_mixture(2, 2, 4.0, RandomStream(0, "m"))
        assert np.linalg.norm(m.means[0] - m.means[1]) == pytest.approx(4 * np.sqrt(2))
        # Monte-Carlo overlap: fraction of draws closer to the other mean
        x, y = m.sample([20000, 20000], RandomStream(0, "mc"))
        d = ((x[:, None, :] - m.means[None]) ** 2).sum(-1)
        assert (d.argmin(1) != y).mean() < 0.01

    def test_deterministic(self):
        a = generate_mixture(5, 8, 2.0, RandomStream(3, "m")).means
        b = generate_mixture(5, 8, 2.0, RandomStream(3, "m")).means
        np.testing.assert_array_equal(a, b)

    def test_zero_separation_collapses(self):
        m = generate_mixture(3, 4, 0.0, RandomStream(0, "m"))
        np.testing.assert_array_equal(m.means, np.zeros((3, 4)))

    def test_more_classes_than_dims(self):
        m = generate_mixture(6, 2, 3.0, RandomStream(0, "m"))
        np.testing.assert_allclose(np.linalg.norm(m.means, axis=1), 3.0)


class TestSplits:
    def _build(self, **kw):
        spec = LongTailSpec(**kw)
        m = generate_mixture(spec.num_classes, 8, 2.0, RandomStream(0, "m"))
        return spec, build_splits(spec, m, RandomStream(0, "s"))

    def test_labeled_counts(self):
        _, (lab, unl, test) = self._build(num_classes=6, n1=100, gamma_l=10, m1=1000, gamma_u=10)
        assert np.bincount(lab.labels).tolist() == [100, 63, 40, 25, 16, 10]
        assert np.bincount(reveal_hidden_labels(unl)).tolist() == [1000, 631, 398, 251, 158, 100]
        assert unl.labels is None

    def test_balanced_limit(self):
        _, (lab, unl, _) = self._build(num_classes=4, n1=30, gamma_l=1, m1=50, gamma_u=1)
        assert np.bincount(lab.labels).tolist() == [30] * 4
        assert np.bincount(reveal_hidden_labels(unl)).tolist() == [50] * 4

    def test_test_set_balanced(self):
        _, (_, _, test) = self._build(test_per_class=37)
        assert set(np.bincount(test.labels).tolist()) == {37}

    def test_unknown_unlabeled_distribution(self):
        _, (_, unl, _) = self._build(gamma_u="unknown")
        counts = np.bincount(reveal_hidden_labels(unl), minlength=6)
        assert counts.max() == 1000 and counts.min() >= 1

    def test_no_hidden_labels(self):
        with pytest.raises(ValueError):
            reveal_hidden_labels(SampleSet(np.zeros((2, 2)), np.array([0, 1])))

    def test_bundle_round_trip(self, tmp_path):
        spec, (lab, unl, test) = self._build()
        m = generate_mixture(spec.num_classes, 8, 2.0, RandomStream(0, "m"))
        write_bundle(tmp_path, spec, m, lab, unl, test)
        spec2, m2, lab2, unl2, test2 = read_bundle(tmp_path)
        assert spec2 == spec
        np.testing.assert_array_equal(m2.means, m.means)
        np.testing.assert_array_equal(lab2.features, lab.features)
        np.testing.assert_array_equal(lab2.labels, lab.labels)
        np.testing.assert_array_equal(unl2.features, unl.features)
        np.testing.assert_array_equal(reveal_hidden_labels(unl2), reveal_hidden_labels(unl))
        np.testing.assert_array_equal(test2.features, test.features)
        first = (tmp_path / "unlabeled.tsv").read_text().splitlines()[0].split("\t")
        assert len(first) == 9 and first[-1] == "-1"


class TestAugment:
    def test_weak_none_is_identity(self, rng):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(weak_augment(x, AugmentConfig(weak_sigma=0.0), rng), x)

    def test_weak_noise_energy(self):
        d = 5
        x = np.zeros((40000, d))
        out = weak_augment(x, AugmentConfig(weak_sigma=0.1, strong_sigma=0.2), RandomStream(0, "w"))
        assert ((out - x) ** 2).sum(1).mean() == pytest.approx(0.01 * d, rel=0.02)

    def test_weak_replay(self):
        x = np.ones((3, 4))
        cfg = AugmentConfig(weak_sigma=0.3, strong_sigma=0.3)
        a = weak_augment(x, cfg, RandomStream(1, "w"))
        b = weak_augment(x, cfg, RandomStream(1, "w"))
        np.testing.assert_array_equal(a, b)

    def test_strong_identity(self, rng):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(strong_augment(x, AugmentConfig(0.0, 0, 0.0), rng), x)

    def test_single_swap(self):
        np.testing.assert_array_equal(swap_coordinates([1.0, 2.0, 3.0], [(0, 2)]), [3.0, 2.0, 1.0])

    @settings(max_examples=100)
    @given(st.integers(0, 10), st.integers(0, 2**31))
    def test_swaps_preserve_multiset(self, n, seed):
        x = np.random.default_rng(seed).standard_normal((4, 6))
        out = strong_augment(x, AugmentConfig(0.0, n, 0.0), RandomStream(seed, "s"))
        np.testing.assert_array_equal(np.sort(out, axis=1), np.sort(x, axis=1))

    def test_strong_actually_moves(self, rng):
        x = np.arange(8.0)[None, :].repeat(50, 0)
        out = strong_augment(x, AugmentConfig(), rng)
        assert np.abs(out - x).sum() > 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AugmentConfig(weak_sigma=0.5, strong_sigma=0.1).validate()
        with pytest.raises(ValueError):
            AugmentConfig(strong_swaps=0).validate()
        AugmentConfig().validate()


class TestBatches:
    def test_sizes(self, rng):
        lab = SampleSet(np.zeros((10, 2)), np.zeros(10, dtype=int))
        unl = SampleSet(np.zeros((30, 2)))
        li, ui = sample_batches(lab, unl, 4, 1.0, rng)
        assert len(li) == 4 and len(ui) == 4
        li, ui = sample_batches(lab, unl, 1, 7.0, rng)
        assert len(li) == 1 and len(ui) == 7

    def test_floor(self):
        assert unlabeled_batch_size(4, 1.9) == 7

    def test_replay(self):
        lab = SampleSet(np.zeros((10, 2)), np.zeros(10, dtype=int))
        unl = SampleSet(np.zeros((30, 2)))
        a = sample_batches(lab, unl, 4, 2.0, RandomStream(2, "b"))
        b = sample_batches(lab, unl, 4, 2.0, RandomStream(2, "b"))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
