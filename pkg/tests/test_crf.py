"""Test the grid CRF: potentials, TRW inference and clique-loss training."""

import itertools
import math
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy.special import softmax

# Add project root to path to import from gshdl
sys.path.insert(0, str(Path(__file__).parent.parent))

from gshdl.crf import (
    Beliefs,
    CrfExample,
    CrfWeights,
    GridGraph,
    InferenceOptions,
    Potentials,
    build_potentials,
    clique_loss,
    contrast_factors,
    dataset_loss_and_gradient,
    labeling_energy,
    load_model,
    loss_and_gradient,
    save_model,
    segment,
    segment_many,
    train_crf,
    trw_infer,
    trw_infer_many,
)
from gshdl.errors import ConfigError, DataError, DimensionError
from gshdl.numerics import OptimizerOptions


def random_potentials(rng, height, width, labels, scale=1.0, pairwise_scale=None):
    edges = 2 * height * width - height - width
    pairwise = rng.normal(scale=scale if pairwise_scale is None else pairwise_scale, size=(edges, labels, labels))
    return Potentials(rng.normal(scale=scale, size=(height, width, labels)), pairwise)


def exact_marginals(potentials):
    """Node marginals by enumerating every labeling."""
    h, w, c = potentials.unary.shape
    marginals = np.zeros((h * w, c))
    total = 0.0
    for labels in itertools.product(range(c), repeat=h * w):
        weight = math.exp(-labeling_energy(potentials, np.array(labels)))
        total += weight
        marginals[np.arange(h * w), labels] += weight
    return (marginals / total).reshape(h, w, c)


def random_example(rng, height=3, width=3, features=2, labels=2):
    return CrfExample(
        features=rng.normal(size=(features, height, width)),
        image=rng.random((3, height, width)),
        labels=rng.integers(0, labels, size=(height, width)),
    )


def random_weights(rng, labels=2, features=2, beta=0.7):
    pairwise = rng.normal(size=(labels, labels))
    return CrfWeights(rng.normal(size=(labels, features + 1)), pairwise + pairwise.T, beta)


class TestGrid(unittest.TestCase):
    """Test grid structure and potentials."""

    def test_edge_count(self):
        """A 3x4 grid has 2HW - H - W = 17 edges."""
        graph = GridGraph(3, 4)
        self.assertEqual(graph.num_edges, 17)
        self.assertEqual(len(graph.endpoints[0]), 17)
        self.assertAlmostEqual(graph.rho, 11 / 17)

    def test_degrees(self):
        """Corners have two neighbours, interior nodes four."""
        degree = GridGraph(3, 4).degree.reshape(3, 4)
        self.assertEqual(degree[0, 0], 2)
        self.assertEqual(degree[0, 1], 3)
        self.assertEqual(degree[1, 1], 4)

    def test_schedule_covers_every_message_once(self):
        """The raster schedule updates each directed edge exactly once per iteration."""
        graph = GridGraph(4, 5)
        ordered = np.concatenate(graph.schedule("sequential"))
        np.testing.assert_array_equal(np.sort(ordered), np.arange(2 * graph.num_edges))

    def test_zero_weights(self):
        """Zero weights give zero potentials."""
        rng = np.random.default_rng(0)
        potentials = build_potentials(rng.normal(size=(3, 4, 5)), rng.random((3, 4, 5)), CrfWeights.zeros(3, 3))
        np.testing.assert_array_equal(potentials.unary, 0.0)
        np.testing.assert_array_equal(potentials.pairwise, 0.0)

    def test_uniform_image_contrast(self):
        """A flat image has contrast factor 1 on every edge for any beta."""
        for beta in (None, 0.0, 2.5, 100.0):
            np.testing.assert_array_equal(contrast_factors(np.full((3, 4, 4), 0.3), beta), 1.0)

    def test_potts_structure(self):
        """Pairwise tables vanish on the diagonal and scale with contrast."""
        rng = np.random.default_rng(1)
        image = rng.random((3, 3, 3))
        weights = random_weights(rng, labels=3, features=1, beta=0.5)
        potentials = build_potentials(rng.normal(size=(1, 3, 3)), image, weights)
        contrast = contrast_factors(image, 0.5)
        for e in range(12):
            np.testing.assert_allclose(np.diag(potentials.pairwise[e]), 0.0)
            self.assertAlmostEqual(potentials.pairwise[e, 0, 2], weights.pairwise[0, 2] * contrast[e], places=12)

    def test_unary_definition(self):
        """theta_u(p, l) = -(w_l . [f(p); 1])."""
        rng = np.random.default_rng(2)
        features = rng.normal(size=(2, 2, 3))
        weights = random_weights(rng, labels=3)
        potentials = build_potentials(features, rng.random((2, 3)), weights)
        expected = -(np.einsum("ld,dhw->hwl", weights.unary[:, :2], features) + weights.unary[:, 2])
        np.testing.assert_allclose(potentials.unary, expected, atol=1e-12)

    def test_mismatched_sizes(self):
        """Features and image must share their size."""
        with self.assertRaises(DataError):
            build_potentials(np.zeros((2, 3, 3)), np.zeros((3, 4)), CrfWeights.zeros(2, 2))

    def test_asymmetric_pairwise(self):
        """Pairwise weights must be symmetric."""
        with self.assertRaises(DataError):
            CrfWeights(np.zeros((2, 3)), np.array([[0.0, 1.0], [2.0, 0.0]]))

    def test_vector_layout(self):
        """Weights pack into C(D+1) + C(C-1)/2 numbers and unpack unchanged."""
        weights = random_weights(np.random.default_rng(3), labels=4, features=3)
        vector = weights.to_vector()
        self.assertEqual(len(vector), 4 * 4 + 6)
        again = CrfWeights.from_vector(vector, 4, 3, weights.beta)
        np.testing.assert_array_equal(again.unary, weights.unary)
        np.testing.assert_array_equal(again.pairwise * (1 - np.eye(4)), weights.pairwise * (1 - np.eye(4)))
        with self.assertRaises(DimensionError):
            CrfWeights.from_vector(vector[:-1], 4, 3)


class TestInference(unittest.TestCase):
    """Test tree-reweighted message passing."""

    def test_single_node(self):
        """No edges: belief is softmax(-theta_u)."""
        unary = np.array([[[0.3, -1.2, 2.0]]])
        beliefs = trw_infer(Potentials(unary, np.zeros((0, 3, 3))))
        np.testing.assert_allclose(beliefs.node_beliefs[0, 0], softmax(-unary[0, 0]), atol=1e-12)

    def test_zero_potentials_uniform(self):
        """Zero potentials give uniform node and edge beliefs."""
        beliefs = trw_infer(Potentials(np.zeros((3, 4, 3)), np.zeros((17, 3, 3))))
        np.testing.assert_allclose(beliefs.node_beliefs, 1 / 3, atol=1e-12)
        np.testing.assert_allclose(beliefs.edge_beliefs, 1 / 9, atol=1e-12)

    def test_chain_exact(self):
        """TRW is exact on chains."""
        rng = np.random.default_rng(4)
        for n, c in ((2, 2), (5, 3), (8, 2)):
            potentials = random_potentials(rng, 1, n, c)
            beliefs = trw_infer(potentials, max_iterations=30, damping=0.0)
            np.testing.assert_allclose(beliefs.node_beliefs, exact_marginals(potentials), atol=1e-6)

    def test_vertical_chain_exact(self):
        """Column chains are trees too."""
        potentials = random_potentials(np.random.default_rng(5), 6, 1, 3)
        beliefs = trw_infer(potentials, max_iterations=50, damping=0.5)
        np.testing.assert_allclose(beliefs.node_beliefs, exact_marginals(potentials), atol=1e-6)

    def test_beliefs_normalized_and_consistent(self):
        """Node beliefs sum to one and converged edge beliefs marginalize to them."""
        potentials = random_potentials(np.random.default_rng(6), 3, 3, 3, scale=0.5)
        beliefs = trw_infer(potentials, max_iterations=200, damping=0.5, tolerance=1e-12)
        np.testing.assert_allclose(beliefs.node_beliefs.sum(axis=2), 1.0, atol=1e-12)
        np.testing.assert_allclose(beliefs.edge_beliefs.sum(axis=(1, 2)), 1.0, atol=1e-12)
        u, v = GridGraph(3, 3, 3).endpoints
        node = beliefs.node_beliefs.reshape(-1, 3)
        np.testing.assert_allclose(beliefs.edge_beliefs.sum(axis=2), node[u], atol=1e-6)
        np.testing.assert_allclose(beliefs.edge_beliefs.sum(axis=1), node[v], atol=1e-6)

    def test_batched_matches_single(self):
        """Joint inference on a batch equals per-image inference."""
        rng = np.random.default_rng(7)
        items = [random_potentials(rng, 3, 4, 2) for _ in range(3)]
        options = InferenceOptions(iterations=10)
        batched = trw_infer_many(items, options)
        for item, joint in zip(items, batched):
            single = trw_infer(item, max_iterations=10)
            np.testing.assert_allclose(joint.node_beliefs, single.node_beliefs, atol=1e-12)

    def test_parallel_schedule(self):
        """The parallel schedule also normalizes its beliefs."""
        beliefs = trw_infer(random_potentials(np.random.default_rng(8), 3, 3, 2), schedule="parallel")
        np.testing.assert_allclose(beliefs.node_beliefs.sum(axis=2), 1.0, atol=1e-12)

    def test_invalid_options(self):
        """Damping outside [0, 1) and unknown schedules are config errors."""
        with self.assertRaises(ConfigError):
            InferenceOptions(damping=1.0)
        with self.assertRaises(ConfigError):
            InferenceOptions(schedule="random")


class TestSegment(unittest.TestCase):
    """Test labelings from node beliefs."""

    def test_unary_only(self):
        """Zero pairwise terms give the per-pixel argmin of theta_u."""
        unary = np.random.default_rng(9).normal(size=(4, 5, 3))
        labels = segment(Potentials(unary, np.zeros((31, 3, 3))))
        np.testing.assert_array_equal(labels, np.argmin(unary, axis=2))

    def test_chain_matches_exact_marginal_argmax(self):
        """On a chain the labeling is the argmax of exact marginals."""
        rng = np.random.default_rng(10)
        for _ in range(10):
            potentials = random_potentials(rng, 1, 4, 2)
            expected = np.argmax(exact_marginals(potentials), axis=2)
            np.testing.assert_array_equal(segment(potentials, inference_iterations=30, damping=0.0), expected)

    def test_loop_energy_against_exact_marginals(self):
        """On a 2x2 loop the labeling rarely loses to the exact marginal argmax."""
        rng = np.random.default_rng(11)
        wins = 0
        for _ in range(100):
            potentials = random_potentials(rng, 2, 2, 2, pairwise_scale=0.2)
            predicted = segment(potentials, inference_iterations=50)
            reference = np.argmax(exact_marginals(potentials), axis=2)
            if labeling_energy(potentials, predicted) <= labeling_energy(potentials, reference) + 1e-12:
                wins += 1
        self.assertGreaterEqual(wins, 95)

    def test_deterministic(self):
        """Identical potentials give identical labelings."""
        potentials = random_potentials(np.random.default_rng(12), 5, 6, 3)
        np.testing.assert_array_equal(segment(potentials), segment(potentials))

    def test_shift_invariance(self):
        """Adding a constant to every unary leaves the labeling unchanged."""
        potentials = random_potentials(np.random.default_rng(13), 4, 4, 3)
        shifted = Potentials(potentials.unary + 5.0, potentials.pairwise)
        np.testing.assert_array_equal(segment(potentials), segment(shifted))

    def test_segment_many_mixed_sizes(self):
        """Images of different sizes keep their order."""
        rng = np.random.default_rng(14)
        items = [random_potentials(rng, 3, 3, 2), random_potentials(rng, 2, 5, 2), random_potentials(rng, 3, 3, 2)]
        labels = segment_many(items, InferenceOptions(iterations=5))
        self.assertEqual([grid.shape for grid in labels], [(3, 3), (2, 5), (3, 3)])
        np.testing.assert_array_equal(labels[1], segment(items[1], inference_iterations=5))


class TestCliqueLoss(unittest.TestCase):
    """Test the node and edge clique loss."""

    def test_uniform_single_node(self):
        """Uniform beliefs on one node cost log C."""
        for c in (2, 3, 7):
            beliefs = Beliefs(np.full((1, 1, c), 1 / c), np.zeros((0, c, c)), 0)
            self.assertAlmostEqual(clique_loss(beliefs, np.array([[c - 1]])), math.log(c), places=12)

    def test_perfect_beliefs(self):
        """Beliefs concentrated on the truth cost nothing."""
        labels = np.array([[0, 1], [1, 1]])
        node = np.eye(2)[labels]
        u, v = GridGraph(2, 2).endpoints
        flat = labels.ravel()
        edge = np.zeros((4, 2, 2))
        edge[np.arange(4), flat[u], flat[v]] = 1.0
        self.assertLessEqual(abs(clique_loss(Beliefs(node, edge, 0), labels)), 1e-6)

    def test_void_pixels_skipped(self):
        """Void pixels drop their node term and every touching edge."""
        beliefs = trw_infer(random_potentials(np.random.default_rng(15), 2, 2, 2))
        labels = np.array([[0, 1], [-1, 1]])
        node = beliefs.node_beliefs.reshape(-1, 2)
        edge = beliefs.edge_beliefs
        # edges: (0,1), (2,3), (0,2), (1,3); node weight 1 - (3/4) * 2
        expected = (0.5 * (math.log(node[0, 0]) + math.log(node[1, 1]) + math.log(node[3, 1]))
                    - math.log(edge[0, 0, 1]) - math.log(edge[3, 1, 1]))
        self.assertAlmostEqual(clique_loss(beliefs, labels), expected, places=10)
        self.assertNotAlmostEqual(clique_loss(beliefs, np.array([[0, 1], [0, 1]])), expected)

    def test_subsampled_grid(self):
        """The stride-2 subgrid keeps even nodes and their right and down edges."""
        beliefs = trw_infer(random_potentials(np.random.default_rng(15), 2, 2, 2))
        labels = np.array([[0, 1], [1, 1]])
        node = beliefs.node_beliefs.reshape(-1, 2)
        edge = beliefs.edge_beliefs
        expected = 0.5 * math.log(node[0, 0]) - math.log(edge[0, 0, 1]) - math.log(edge[2, 0, 1])
        self.assertAlmostEqual(clique_loss(beliefs, labels, subsample=True), expected, places=10)

    def test_zero_belief_clamped(self):
        """A zero true-label belief is clamped at 1e-12 with a warning."""
        beliefs = Beliefs(np.array([[[1.0, 0.0]]]), np.zeros((0, 2, 2)), 0)
        with self.assertLogs("gshdl.crf", level="WARNING"):
            loss = clique_loss(beliefs, np.array([[1]]))
        self.assertAlmostEqual(loss, -math.log(1e-12), places=9)

    def test_unary_offset_invariance(self):
        """A constant added to one node's unaries leaves the loss unchanged."""
        rng = np.random.default_rng(16)
        potentials = random_potentials(rng, 3, 3, 3)
        labels = rng.integers(0, 3, size=(3, 3))
        shifted_unary = potentials.unary.copy()
        shifted_unary[1, 2] += 4.0
        a = clique_loss(trw_infer(potentials), labels)
        b = clique_loss(trw_infer(Potentials(shifted_unary, potentials.pairwise)), labels)
        self.assertAlmostEqual(a, b, places=9)

    def test_bad_labels(self):
        """Labels outside [-1, C) are data errors."""
        beliefs = Beliefs(np.full((1, 1, 2), 0.5), np.zeros((0, 2, 2)), 0)
        with self.assertRaises(DataError):
            clique_loss(beliefs, np.array([[2]]))


class TestGradient(unittest.TestCase):
    """Test the unrolled-inference gradient."""

    def finite_difference(self, weights, example, inference, step=1e-5, subsample=False):
        def loss_at(vector):
            bumped = CrfWeights.from_vector(vector, weights.num_labels, weights.num_features, weights.beta)
            return loss_and_gradient(bumped, example, inference, subsample=subsample)[0]

        vector = weights.to_vector()
        numeric = np.zeros_like(vector)
        for i in range(len(vector)):
            bumped = vector.copy()
            bumped[i] += step
            plus = loss_at(bumped)
            bumped[i] -= 2 * step
            minus = loss_at(bumped)
            numeric[i] = (plus - minus) / (2 * step)
        return numeric

    def test_matches_central_differences(self):
        """3x3, C=2: analytic and numeric gradients agree."""
        rng = np.random.default_rng(17)
        for _ in range(3):
            example = random_example(rng)
            weights = random_weights(rng)
            inference = InferenceOptions(iterations=5, damping=0.5)
            _, gradient = loss_and_gradient(weights, example, inference)
            numeric = self.finite_difference(weights, example, inference)
            self.assertLessEqual(np.max(np.abs(gradient - numeric)) / np.max(np.abs(numeric)), 1e-4)

    def test_three_labels_with_void(self):
        """Gradients stay exact with three labels and void pixels."""
        rng = np.random.default_rng(18)
        example = random_example(rng, height=3, width=4, labels=3)
        example.labels[0, 1] = -1
        weights = random_weights(rng, labels=3, beta=None)
        inference = InferenceOptions(iterations=4, damping=0.3)
        _, gradient = loss_and_gradient(weights, example, inference)
        numeric = self.finite_difference(weights, example, inference)
        self.assertLessEqual(np.max(np.abs(gradient - numeric)) / np.max(np.abs(numeric)), 1e-4)

    def test_parallel_schedule_on_subgrid(self):
        """The parallel schedule with the stride-2 subgrid also has an exact gradient."""
        rng = np.random.default_rng(23)
        example = random_example(rng, height=4, width=4)
        weights = random_weights(rng)
        inference = InferenceOptions(iterations=4, damping=0.5, schedule="parallel")
        _, gradient = loss_and_gradient(weights, example, inference, subsample=True)
        numeric = self.finite_difference(weights, example, inference, subsample=True)
        self.assertLessEqual(np.max(np.abs(gradient - numeric)) / np.max(np.abs(numeric)), 1e-4)

    def test_zero_iterations_is_softmax_regression(self):
        """Without messages the unary gradient is a weighted per-pixel softmax gradient."""
        rng = np.random.default_rng(19)
        example = random_example(rng, labels=3)
        weights = random_weights(rng, labels=3)
        weights.pairwise[:] = 0.0
        _, gradient = loss_and_gradient(weights, example, InferenceOptions(iterations=0))

        graph = GridGraph(3, 3, 3)
        design = np.vstack([example.features.reshape(2, -1), np.ones((1, 9))]).T
        probs = softmax(design @ weights.unary.T, axis=1)
        onehot = np.eye(3)[example.labels.ravel()]
        pixel_weight = 1 + (1 - graph.rho) * graph.degree
        expected = ((probs - onehot) * pixel_weight[:, None]).T @ design
        np.testing.assert_allclose(gradient[:9].reshape(3, 3), expected, atol=1e-10)

    def test_duplicate_doubles(self):
        """A duplicated example doubles the loss and gradient."""
        rng = np.random.default_rng(20)
        example = random_example(rng)
        weights = random_weights(rng)
        loss, gradient = loss_and_gradient(weights, example, 6)
        loss2, gradient2 = dataset_loss_and_gradient(weights, [example, example], 6)
        self.assertAlmostEqual(loss2, 2 * loss, delta=1e-12 * abs(loss))
        np.testing.assert_allclose(gradient2, 2 * gradient, rtol=1e-12, atol=1e-15)

    def test_label_permutation(self):
        """Permuting labels in weights and truth leaves the loss unchanged."""
        rng = np.random.default_rng(21)
        example = random_example(rng, labels=3)
        weights = random_weights(rng, labels=3)
        permutation = np.array([2, 0, 1])
        permuted = CrfExample(example.features, example.image, permutation[example.labels])
        a, _ = loss_and_gradient(weights, example, 5)
        b, _ = loss_and_gradient(weights.permuted(permutation), permuted, 5)
        self.assertAlmostEqual(a, b, places=9)


class TestTraining(unittest.TestCase):
    """Test LBFGS training of CRF weights."""

    def test_separable_pixels(self):
        """Single-pixel images with separable features are fit perfectly."""
        rng = np.random.default_rng(22)
        values = np.concatenate([rng.uniform(0.5, 2.0, 10), -rng.uniform(0.5, 2.0, 10)])
        truth = (values > 0).astype(int)
        dataset = [CrfExample(np.array([[[x]]]), np.zeros((1, 1)), np.array([[y]])) for x, y in zip(values, truth)]
        weights = train_crf(dataset, OptimizerOptions(max_iterations=100), inference_iterations=1, l2=1e-4)
        predictions = [segment(build_potentials(e.features, e.image, weights))[0, 0] for e in dataset]
        np.testing.assert_array_equal(predictions, truth)

    def test_heavy_ridge(self):
        """l2 = 1e6 keeps the weights near zero."""
        rng = np.random.default_rng(23)
        dataset = [random_example(rng) for _ in range(2)]
        weights = train_crf(dataset, OptimizerOptions(max_iterations=30), inference_iterations=3, l2=1e6)
        self.assertLessEqual(np.linalg.norm(weights.to_vector()), 1e-3)

    def test_unary_only_keeps_pairwise(self):
        """unary_only training leaves the pairwise weights at zero."""
        rng = np.random.default_rng(24)
        dataset = [random_example(rng) for _ in range(2)]
        weights = train_crf(dataset, OptimizerOptions(max_iterations=10), inference_iterations=3, unary_only=True)
        np.testing.assert_array_equal(weights.pairwise, 0.0)
        self.assertGreater(np.abs(weights.unary).sum(), 0.0)

    def test_deterministic(self):
        """Two identical runs give identical weights."""
        rng = np.random.default_rng(25)
        dataset = [random_example(rng), random_example(rng, height=2, width=4)]
        opts = OptimizerOptions(max_iterations=5)
        a = train_crf(dataset, opts, inference_iterations=3, workers=2)
        b = train_crf(dataset, opts, inference_iterations=3)
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())

    def test_rejects_bad_input(self):
        """Empty datasets and negative ridge are rejected."""
        with self.assertRaises(DataError):
            train_crf([])
        with self.assertRaises(ConfigError):
            train_crf([random_example(np.random.default_rng(0))], l2=-1.0)

    def test_model_file(self):
        """Saved weights and inference settings load back."""
        weights = random_weights(np.random.default_rng(26))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.gshd"
            save_model(path, weights, InferenceOptions(iterations=7, damping=0.25))
            loaded, inference = load_model(path)
        np.testing.assert_array_equal(loaded.unary, weights.unary)
        self.assertEqual(loaded.beta, weights.beta)
        self.assertEqual((inference.iterations, inference.damping), (7, 0.25))


if __name__ == "__main__":
    unittest.main()
