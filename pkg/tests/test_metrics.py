import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmex import metrics
from kmex.data import AttributeTable
from kmex.prototypes import PrototypeSet
from kmex.similarity import Similarity


def pset(vectors, classes, reps=None, sim="neg_l2"):
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    classes = np.asarray(classes)
    index = np.zeros(len(classes), dtype=int)
    imp = np.zeros(len(classes))
    for k in np.unique(classes):
        m = np.flatnonzero(classes == k)
        index[m] = np.arange(len(m))
        imp[m] = 1.0 / len(m)
    reps = np.zeros(len(classes), dtype=int) if reps is None else reps
    return PrototypeSet(vectors, classes, index, imp, reps, Similarity(sim))


def brute_ghosting(vectors, classes, points):
    """Scan every point against every prototype; lowest (class, index) wins ties."""
    n = len(vectors)
    ident = []
    seen = {}
    for c in classes:
        ident.append((c, seen.get(c, 0)))
        seen[c] = seen.get(c, 0) + 1
    hit = [False] * n
    for z in points:
        best, best_j = None, None
        for j in range(n):
            s = -math.sqrt(sum((a - b) ** 2 for a, b in zip(z, vectors[j])))
            if best is None or s > best or (s == best and ident[j] < ident[best_j]):
                best, best_j = s, j
        hit[best_j] = True
    return 1 - sum(hit) / n


class TestGhosting:
    def test_hand_example(self):
        ps = pset([0, 10, 100, 110], [0, 0, 1, 1])
        assert metrics.ghosting_score(ps, [[0.1], [0.2], [100.1], [109.9]]) == 0.25

    def test_prototypes_on_data(self):
        z = np.random.default_rng(0).normal(size=(6, 3))
        assert metrics.ghosting_score(pset(z, [0, 0, 0, 1, 1, 1]), z) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics.ghosting_score(pset([0, 1], [0, 1]), np.zeros((0, 1)))

    @pytest.mark.parametrize("trial", range(50))
    def test_matches_brute_force(self, trial):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(1, 201))
        kl = int(rng.integers(2, 21))
        dim = int(rng.integers(1, 4))
        protos = np.round(rng.normal(size=(kl, dim)) * 2)  # rounding creates ties
        classes = np.sort(rng.integers(0, 3, kl))
        points = np.round(rng.normal(size=(n, dim)) * 2)
        ps = pset(protos, classes)
        assert metrics.ghosting_score(ps, points) == brute_ghosting(protos.tolist(), classes.tolist(),
                                                                     points.tolist())


class TestDiversity:
    def test_collapse(self):
        assert metrics.diversity_score(pset(np.ones((6, 2)), [0, 0, 1, 1, 2, 2])) == pytest.approx(1.0, abs=1e-12)

    def test_far_apart(self):
        assert metrics.diversity_score(pset([0, 1e4], [0, 1])) < 1e-12

    def test_hand_value(self):
        h = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert h == pytest.approx(0.5623, abs=1e-4)
        got = metrics.diversity_score(pset([0, math.log(3)], [0, 1]))
        assert got == pytest.approx(h / math.log(2), abs=1e-12)
        assert got == pytest.approx(0.8113, abs=1e-4)

    def test_undefined_for_one(self):
        with pytest.raises(ValueError):
            metrics.diversity_score(pset([0.0], [0]))

    @given(shift=st.lists(st.floats(-50, 50), min_size=2, max_size=2), seed=st.integers(0, 100))
    @settings(max_examples=30, deadline=None)
    def test_permutation_and_translation(self, shift, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(5, 2))
        ps = pset(v, [0, 0, 1, 1, 1])
        base = metrics.diversity_score(ps)
        assert metrics.diversity_score(ps.permuted(rng.permutation(5))) == pytest.approx(base, abs=1e-12)
        assert metrics.diversity_score(ps.with_vectors(v + np.array(shift))) == pytest.approx(base, abs=1e-9)


class TestRelevanceNormalization:
    def test_delta(self):
        m = np.zeros((3, 3))
        m[1, 2] = -4.0
        out = metrics.normalize_relevance(m)
        assert out.values[1, 2] == 1.0 and out.values.sum() == 1.0

    def test_channel_max_of_absolutes(self):
        m = np.zeros((2, 2, 2))
        m[0, 0, 0], m[1, 0, 0] = -3.0, 2.0
        m[0, 1, 1] = 3.0
        np.testing.assert_allclose(metrics.normalize_relevance(m).values, [[0.5, 0], [0, 0.5]])

    def test_hand_values(self):
        m = np.array([[1.0, -1.0], [2.0, 4.0]])
        np.testing.assert_allclose(metrics.normalize_relevance(m).values, [[0.125, 0.125], [0.25, 0.5]])

    def test_all_zero_is_uniform_and_flagged(self):
        out = metrics.normalize_relevance(np.zeros((2, 2)))
        assert out.degenerate
        np.testing.assert_allclose(out.values, 0.25)

    def test_pixel_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(3, 4, 4))
        perm = rng.permutation(16)
        a = metrics.normalize_relevance(m).values.ravel()[perm]
        b = metrics.normalize_relevance(m.reshape(3, 16)[:, perm].reshape(3, 4, 4)).values.ravel()
        np.testing.assert_allclose(a, b)


class TestDivergence:
    def test_identity(self):
        p = metrics.normalize_relevance(np.random.default_rng(1).normal(size=(5, 5)))
        assert metrics.explanation_divergence(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_hand_kl(self):
        got = metrics.explanation_divergence(np.array([0.5, 0.5]), np.array([0.25, 0.75]))
        want = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert got == pytest.approx(want, abs=1e-6)
        assert got == pytest.approx(0.1438, abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.explanation_divergence(np.ones(4) / 4, np.ones(5) / 5)

    @given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.lists(st.floats(0, 10), min_size=4, max_size=4))
    @settings(max_examples=50, deadline=None)
    def test_non_negative(self, a, b):
        p = metrics.normalize_relevance(np.array(a).reshape(2, 2))
        q = metrics.normalize_relevance(np.array(b).reshape(2, 2))
        assert metrics.explanation_divergence(p, q) >= 0


def const_model(p):
    def predict(batch):
        return np.tile(p, (len(batch), 1))
    return predict


def brightness_model(batch):
    """Class 0 probability rises with mean pixel value."""
    m = 1 / (1 + np.exp(-np.asarray(batch).reshape(len(batch), -1).mean(axis=1)))
    return np.stack([m, 1 - m], axis=1)


class TestRO:
    def test_first_point_is_clean_image(self):
        img = np.full((1, 4, 4), 2.0)
        c = metrics.ro_curve(brightness_model, img, np.ones((4, 4)), steps=8, seed=0)
        assert c.mean[0] == pytest.approx(brightness_model(img[None])[0, 0])

    def test_constant_model_flat(self):
        imgs = np.random.default_rng(0).normal(size=(3, 1, 4, 4))
        c = metrics.ro_curve(const_model([0.3, 0.7]), imgs, None, 10, 0, metrics.RANDOM)
        np.testing.assert_allclose(c.mean, 0.7)

    def test_masking_counts(self):
        f, n = metrics.masking_counts(256, 50)
        assert n[0] == 0 and n[-1] == 256 and n[25] == 128
        assert np.all(np.diff(f) > 0)

    def test_least_relevant_first(self):
        rel = np.arange(16.0).reshape(4, 4)
        order = metrics.pixel_order(rel)
        assert order[:3].tolist() == [0, 1, 2]
        assert metrics.pixel_order(np.zeros(5)).tolist() == [0, 1, 2, 3, 4]

    def test_masked_pixels_and_noise_shared(self):
        seen = []

        def spy(batch):
            seen.append(batch.copy())
            return const_model([1.0])(batch)
        img = np.zeros((1, 2, 2))
        metrics.ro_curve(spy, img, np.array([[3.0, 0.0], [2.0, 1.0]]), 4, seed=5)
        metrics.ro_curve(spy, img, None, 4, seed=5, mode=metrics.RANDOM)
        rel_batch, rand_batch = seen
        # one pixel per step, least relevant (flat index 1) first
        assert (rel_batch[1] != 0).sum() == 1 and rel_batch[1][0, 0, 1] != 0
        # both modes draw identical noise values
        np.testing.assert_array_equal(np.sort(rel_batch[-1].ravel()), np.sort(rand_batch[-1].ravel()))

    def test_noise_clipped_to_bounds(self):
        seen = []

        def spy(batch):
            seen.append(batch.copy())
            return const_model([1.0])(batch)
        bounds = (np.array([-0.5]), np.array([0.5]))
        metrics.ro_curve(spy, np.zeros((1, 8, 8)), None, 2, 0, metrics.RANDOM, bounds)
        assert np.abs(seen[0]).max() <= 0.5

    def test_deterministic(self):
        imgs = np.random.default_rng(2).normal(size=(4, 1, 5, 5))
        a = metrics.ro_curve(brightness_model, imgs, None, 10, 3, metrics.RANDOM)
        b = metrics.ro_curve(brightness_model, imgs, None, 10, 3, metrics.RANDOM)
        assert a.mean.tobytes() == b.mean.tobytes()

    def test_rejects_non_probability(self):
        with pytest.raises(ValueError, match="probability"):
            metrics.ro_curve(lambda b: np.full((len(b), 2), 3.0), np.zeros((1, 1, 2, 2)), None, 2, 0,
                             metrics.RANDOM)

    def test_independent_random_orders_agree(self):
        imgs = np.random.default_rng(4).normal(0.3, 0.5, size=(100, 1, 8, 8))
        a = metrics.ro_curve(brightness_model, imgs, None, 20, 1, metrics.RANDOM)
        b = metrics.ro_curve(brightness_model, imgs, None, 20, 2, metrics.RANDOM)
        assert np.abs(a.mean - b.mean).mean() <= 0.02


class TestAuroc:
    def test_constant(self):
        assert metrics.auroc(np.full(11, 0.4)) == pytest.approx(0.4)

    def test_linear(self):
        assert metrics.auroc(np.linspace(1, 0, 51)) == pytest.approx(0.5)

    def test_piecewise(self):
        assert metrics.auroc(np.array([1.0, 1.0, 0.0]), np.array([0, 0.5, 1])) == pytest.approx(0.75)

    @given(st.lists(st.floats(0, 1), min_size=5, max_size=5), st.lists(st.floats(0, 1), min_size=5, max_size=5))
    @settings(max_examples=50, deadline=None)
    def test_pointwise_max_dominates(self, a, b):
        a, b = np.array(a), np.array(b)
        top = metrics.auroc(np.maximum(a, b))
        assert top >= metrics.auroc(a) - 1e-12 and top >= metrics.auroc(b) - 1e-12
        assert 0 <= top <= 1


class TestAttributes:
    def test_captured(self):
        t = AttributeTable(np.array([[0, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 1]]), tuple("abcd"))
        assert metrics.captured_attributes(pset([0], [0], reps=[0]), t) == 0
        assert metrics.captured_attributes(pset([0, 1], [0, 1], reps=[1, 2]), t) == 3

    def test_mae_hand(self):
        # rho_train = +1 and rho_proto = -1 on four samples; the off-diagonal MAE is 2
        train = np.array([[1, 1], [0, 0], [1, 1], [0, 0]])
        proto = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
        full, _ = metrics.correlation_matrix(train)
        rep, _ = metrics.correlation_matrix(proto)
        assert full[0, 1] == pytest.approx(1.0) and rep[0, 1] == pytest.approx(-1.0)
        off = ~np.eye(2, dtype=bool)
        assert np.abs(full - rep)[off].mean() == pytest.approx(2.0)

    def test_mae_through_representatives(self):
        t = AttributeTable(np.array([[1, 1], [0, 0], [1, 1], [0, 0], [1, 0], [0, 1]]), ("a", "b"))
        rho = np.corrcoef(t.values.T)[0, 1]
        got = metrics.attribute_correlation_mae(pset([0, 1], [0, 1], reps=[4, 5]), t)
        assert got == pytest.approx(abs(rho - (-1.0)))

    def test_all_rows_as_representatives(self):
        v = np.random.default_rng(0).integers(0, 2, size=(40, 5))
        t = AttributeTable(v, tuple("abcde"))
        ps = pset(np.arange(40.0), np.zeros(40, dtype=int), reps=np.arange(40))
        assert metrics.attribute_correlation_mae(ps, t) == pytest.approx(0.0, abs=1e-12)

    def test_single_prototype_convention(self):
        v = np.random.default_rng(1).integers(0, 2, size=(50, 4))
        t = AttributeTable(v, tuple("abcd"))
        full, _ = metrics.correlation_matrix(v)
        off = ~np.eye(4, dtype=bool)
        got = metrics.attribute_correlation_mae(pset([0.0], [0], reps=[3]), t)
        assert got == pytest.approx(np.abs(full[off]).mean())


class TestRadar:
    def report(self, **kw):
        base = dict(acc_base=99.0, acc_sem=99.0, acc_delta=0.0, d_tsp=0.0, d_dvs=0.0,
                    d_fdl_mean=0.0, d_fdl_std=0.0, auroc_mean=0.6, auroc_std=0.0)
        base.update(kw)
        return metrics.MetricReport(**base)

    def test_perfect(self):
        assert list(metrics.radar_summary(self.report()).values()) == pytest.approx([1, 1, 1, 0.6, 1])

    def test_endpoints(self):
        r = metrics.radar_summary(self.report(d_fdl_mean=2.0, acc_delta=5.0))
        assert r["Faith.Expl."] == 0 and r["Faith.Acc."] == 0
        assert metrics.radar_summary(self.report(acc_delta=9.0))["Faith.Acc."] == 0
        assert metrics.radar_summary(self.report(acc_delta=-2.5))["Faith.Acc."] == 1.5
        assert metrics.radar_summary(self.report(d_fdl_mean=7.0))["Faith.Expl."] == 0

    def test_range_checks(self):
        with pytest.raises(ValueError):
            self.report(d_tsp=1.5)
        with pytest.raises(ValueError):
            self.report(auroc_mean=-0.1)

    def test_accuracy_faithfulness(self):
        acc = metrics.accuracy_faithfulness([0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 0, 0])
        assert acc.delta == 0 and acc.base == 75.0
