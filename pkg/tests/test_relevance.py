import numpy as np
import pytest

from kmex import nn, relevance
from kmex.prototypes import PrototypeSet
from kmex.similarity import Similarity


def ws(*tensors):
    return nn.WeightStore(tuple(np.asarray(t, dtype=float) for t in tensors), "float64")


class TestLrpRules:
    def test_single_active_input_takes_everything(self):
        stack = nn.LayerStack((3,), (nn.Dense(3, 2), nn.Softmax()), 0)
        w = ws([[1.0, 2.0, -1.0], [0.5, 0.5, 0.5]], [0.0, 0.0])
        trace = nn.forward(stack, w, [0.0, 4.0, 0.0])
        r = relevance.lrp_backward(stack, w, trace, [0.0, 1.0], composite="epsilon_plus")
        np.testing.assert_allclose(r.values, [0.0, 1.0, 0.0], atol=1e-6)

    def test_parallel_paths_split_evenly(self):
        stack = nn.LayerStack((2,), (nn.Dense(2, 2), nn.ReLU(), nn.Dense(2, 1), nn.Softmax()), 0)
        w = ws([[1.0, 0.0], [0.0, 1.0]], [0, 0], [[1.0, 1.0]], [0.0])
        trace = nn.forward(stack, w, [3.0, 3.0])
        r = relevance.lrp_backward(stack, w, trace, [0.8], composite="epsilon_plus")
        np.testing.assert_allclose(r.values, [0.4, 0.4], rtol=1e-6)

    def test_hand_epsilon_rule(self):
        """2 inputs -> 3 hidden (relu) -> 2 logits, executed by hand with explicit loops."""
        W1 = np.array([[1.0, -0.5], [0.3, 0.8], [-1.0, 0.2]])
        b1 = np.array([0.1, 0.0, 0.2])
        W2 = np.array([[0.5, 1.0, -0.7], [-0.2, 0.6, 0.9]])
        b2 = np.array([0.0, 0.1])
        stack = nn.LayerStack((2,), (nn.Dense(2, 3), nn.ReLU(), nn.Dense(3, 2), nn.Softmax()), 0)
        w = ws(W1, b1, W2, b2)
        x = np.array([0.7, 0.4])
        eps = 1e-6
        # forward by hand
        h = [max(0.0, W1[j, 0] * x[0] + W1[j, 1] * x[1] + b1[j]) for j in range(3)]
        logits = [sum(W2[c, j] * h[j] for j in range(3)) + b2[c] for c in range(2)]
        c = int(np.argmax(logits))
        r_out = 0.9
        # epsilon rule with bias-free denominators
        zc = sum(h[j] * W2[c, j] for j in range(3))
        r_h = [h[j] * W2[c, j] / (zc + eps * np.sign(zc)) * r_out for j in range(3)]
        r_x = [0.0, 0.0]
        for j in range(3):
            if h[j] <= 0:
                continue
            zj = W1[j, 0] * x[0] + W1[j, 1] * x[1]
            for i in range(2):
                r_x[i] += x[i] * W1[j, i] / (zj + eps * np.sign(zj)) * r_h[j]
        seed = np.zeros(2)
        seed[c] = r_out
        got = relevance.lrp_backward(stack, w, nn.forward(stack, w, x), seed, composite="epsilon_plus")
        np.testing.assert_allclose(got.values, r_x, rtol=1e-9)

    def test_conv_plus_rule_matches_loops(self):
        stack = nn.LayerStack((1, 3, 3), (nn.Conv2d(1, 2, 2, 2), nn.ReLU(), nn.Flatten(),
                                          nn.Dense(8, 2), nn.Softmax()), 0)
        rng = np.random.default_rng(0)
        kern = rng.normal(size=(2, 1, 2, 2))
        w = ws(kern, np.zeros(2), rng.normal(size=(2, 8)), np.zeros(2))
        x = rng.normal(size=(1, 3, 3))
        r_out = rng.random((2, 2, 2))
        trace = nn.forward(stack, w, x)
        got = relevance.lrp_backward(stack, w, trace, r_out, start=1, composite="epsilon_plus")
        want = np.zeros((3, 3))
        degenerate = False
        for o in range(2):
            for i in range(2):
                for j in range(2):
                    patch = x[0, i:i + 2, j:j + 2]
                    k = kern[o, 0]
                    contrib = np.maximum(patch * k, 0)  # alpha=1, beta=0
                    z = contrib.sum()
                    if z > 0:
                        want[i:i + 2, j:j + 2] += contrib / (z + 1e-6) * r_out[o, i, j]
                    else:  # no positive contribution: flat over the receptive field
                        want[i:i + 2, j:j + 2] += r_out[o, i, j] / 4
                        degenerate = True
        np.testing.assert_allclose(got.values[0], want, rtol=1e-9, atol=1e-12)
        assert (relevance.DEGENERATE in got.flags) == degenerate

    def test_maxpool_routes_to_first_winner(self):
        x = np.array([[[[1.0, 3.0], [3.0, 0.0]]]])
        mask = nn.MaxPool2.winners(x)
        assert mask[0, 0].tolist() == [[0, 1], [0, 0]]

    def test_flat_first_layer(self):
        stack = nn.LayerStack((3,), (nn.Dense(3, 2), nn.Softmax()), 0)
        w = ws([[5.0, 0.0, 0.0], [1.0, 1.0, 1.0]], [0, 0])
        r = relevance.lrp_backward(stack, w, nn.forward(stack, w, [1.0, 0.0, 0.0]), [0.6, 0.0])
        np.testing.assert_allclose(r.values, [0.2, 0.2, 0.2])

    def test_degenerate_denominator_flagged(self):
        stack = nn.LayerStack((2,), (nn.Dense(2, 2), nn.ReLU(), nn.Dense(2, 1), nn.Softmax()), 0)
        w = ws([[-1.0, -1.0], [-1.0, -1.0]], [0, 0], [[1.0, 1.0]], [0.5])
        trace = nn.forward(stack, w, [1.0, 1.0])  # every hidden unit is dead
        r = relevance.lrp_backward(stack, w, trace, [1.0], composite="epsilon_plus")
        assert relevance.DEGENERATE in r.flags
        assert r.total == pytest.approx(0.0)  # relu blocks the flat fallback


@pytest.mark.parametrize("seed", range(5))
def test_toy_cnn_conservation(seed):
    stack = nn.toy_cnn()
    w = nn.init_weights(stack, seed, "float64")
    x = np.random.default_rng(seed).normal(size=(1, 16, 16))
    r = relevance.lrp_map(stack, w, x)
    assert r.drift <= 0.05
    assert r.total == pytest.approx(nn.forward(stack, w, x).probs.max(), rel=0.05)


def identity_stack(d):
    return nn.LayerStack((d,), (nn.Dense(d, 2), nn.Softmax()), 0)


class TestPrp:
    def test_identity_encoder_1d(self):
        stack = identity_stack(1)
        w = nn.init_weights(stack, 0, "float64")
        r = relevance.prp_map(stack, w, [2.0], [5.0])
        assert r.values.tolist() == pytest.approx([-3.0])
        assert r.seed_total == pytest.approx(-3.0)

    def test_symmetric_prototypes_mirror_seeds(self):
        stack = identity_stack(3)
        w = nn.init_weights(stack, 0, "float64")
        z = np.array([1.0, 2.0, -0.5])
        d = np.array([0.3, -0.2, 0.4])
        a = relevance.prp_map(stack, w, z, z + d)
        b = relevance.prp_map(stack, w, z, z - d)
        np.testing.assert_allclose(np.abs(a.values), np.abs(b.values), rtol=1e-9)

    def test_locality(self):
        stack = identity_stack(4)
        w = nn.init_weights(stack, 0, "float64")
        z = np.array([1.0, 0.0, 2.0, 3.0])
        p = np.array([0.0, 5.0, 2.0, 1.0])  # dims 1 (z=0) and 2 (z=p) get zero seed
        r = relevance.prp_map(stack, w, z, p)
        assert r.values[1] == 0 and r.values[2] == 0
        assert np.all(r.values[[0, 3]] != 0)

    def test_zero_embedding_dot_gives_uniform_seed(self):
        stack = identity_stack(3)
        w = nn.init_weights(stack, 0, "float64")
        r = relevance.prp_map(stack, w, np.zeros(3), [1.0, 2.0, 3.0], "dot")
        assert relevance.UNIFORM_SEED in r.flags
        np.testing.assert_array_equal(r.values, 0.0)

    def test_toy_cnn_scripted_oracle(self):
        stack = nn.toy_cnn()
        w = nn.init_weights(stack, 42, "float64")
        rng = np.random.default_rng(42)
        x = rng.normal(size=(1, 16, 16))
        trace = nn.forward(stack, w, x)
        z = trace[stack.encoder_cut]
        p = z + rng.normal(scale=0.1, size=z.shape)
        # seeding formula, written out for neg_l2: s = -||z-p||, grad = -(z-p)/||z-p||
        dist = np.sqrt(((z - p) ** 2).sum())
        g = -(z - p) / dist
        gz = g * z
        seed = gz / (gz.sum() + np.sign(gz.sum()) * 1e-9) * (-dist)
        want = relevance.lrp_backward(stack, w, trace, seed, start=stack.encoder_cut)
        got = relevance.prp_map(stack, w, x, p)
        np.testing.assert_allclose(got.values, want.values, rtol=1e-9, atol=1e-15)
        assert got.drift <= 0.05


class TestClassProbabilityMap:
    def test_identity_encoder_1d(self):
        stack = identity_stack(1)
        w = nn.init_weights(stack, 0, "float64")
        ps = PrototypeSet([[0.0], [np.log(3)]], [0, 1], [0, 0], [1, 1], [0, 0], Similarity())
        r = relevance.class_probability_map(stack, w, ps, [0.0 + 1e-3])
        assert r.seed_total == pytest.approx(0.75, abs=1e-3)
        assert r.total == pytest.approx(r.seed_total, rel=1e-5)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        ps = PrototypeSet(rng.normal(size=(6, 4)), [0, 0, 1, 1, 2, 2], [0, 1] * 3, [0.5] * 6, [0] * 6,
                          Similarity())
        z = rng.normal(size=4)
        c, prob, grad = relevance.class_probability_grad(ps, z)
        from kmex.prototypes import class_scores
        h = 1e-6
        num = np.array([(class_scores(ps, z + h * e)[c] - class_scores(ps, z - h * e)[c]) / (2 * h)
                        for e in np.eye(4)])
        assert prob == pytest.approx(class_scores(ps, z)[c])
        np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-8)
