import numpy as np
import pytest

from causalcascade.autodiff import ShapeMismatchError, Tensor, finite_diff_check
from causalcascade.gcn import (
    IndexOutOfRangeError,
    gcn_forward,
    init_gcn_params,
    normalize_adjacency,
)


class TestNormalizeAdjacency:
    def test_two_node_hand_value(self):
        # D^-1/2 (A + I) D^-1/2 with one symmetrized edge: degrees both 2.
        got = normalize_adjacency([(0, 1)], 2)
        np.testing.assert_allclose(got, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_isolated_node_keeps_unit_self_loop(self):
        got = normalize_adjacency([(0, 1)], 3)
        assert got[2, 2] == 1.0
        assert np.all(got[2, :2] == 0.0)

    def test_duplicate_edges_are_set_semantics(self):
        once = normalize_adjacency([(0, 1)], 2)
        twice = normalize_adjacency([(0, 1), (0, 1)], 2)
        np.testing.assert_array_equal(once, twice)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(0)
        n = 8
        edges = [(int(a), int(b)) for a, b in rng.integers(0, n, size=(12, 2)) if a != b]
        got = normalize_adjacency(edges, n)
        np.testing.assert_allclose(got, got.T, atol=1e-15)
        assert got.min() >= 0.0 and got.max() <= 1.0

    def test_out_of_range_edge_rejected(self):
        with pytest.raises(IndexOutOfRangeError):
            normalize_adjacency([(0, 5)], 3)
        with pytest.raises(IndexOutOfRangeError):
            normalize_adjacency([(1, 1)], 3)


def _identity_params(d):
    return {
        "gcn.weight": Tensor(np.eye(d), requires_grad=True),
        "gcn.bias": Tensor(np.zeros(d), requires_grad=True),
    }


class TestGcnForward:
    def test_two_node_hand_value(self):
        h = np.array([[[1.0, 2.0], [3.0, 5.0]]])
        expected = np.array([[0.5, 0.5], [0.5, 0.5]]) @ h[0]
        out = gcn_forward(Tensor(h), [[(0, 1)]], np.ones((1, 2)), _identity_params(2))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-14)

    def test_zero_features_zero_output(self):
        out = gcn_forward(
            Tensor(np.zeros((1, 3, 4))),
            [[(0, 1), (0, 2)]],
            np.ones((1, 3)),
            _identity_params(4),
        )
        np.testing.assert_array_equal(out.data, np.zeros((1, 3, 4)))

    def test_padded_rows_ignored_and_zero(self):
        rng = np.random.default_rng(1)
        params = {
            "gcn.weight": Tensor(rng.normal(size=(4, 4)), requires_grad=True),
            "gcn.bias": Tensor(rng.normal(size=4), requires_grad=True),
        }
        h = rng.normal(size=(1, 5, 4))
        M = np.array([[1.0, 1.0, 1.0, 0.0, 0.0]])
        base = gcn_forward(Tensor(h), [[(0, 1), (1, 2)]], M, params).data
        perturbed = h.copy()
        perturbed[0, 3:] += rng.normal(size=(2, 4))
        again = gcn_forward(Tensor(perturbed), [[(0, 1), (1, 2)]], M, params).data
        np.testing.assert_array_equal(base, again)
        assert np.all(base[0, 3:] == 0.0)

    def test_no_cross_graph_messages(self):
        rng = np.random.default_rng(2)
        params = _identity_params(3)
        h = rng.normal(size=(2, 4, 3))
        M = np.ones((2, 4))
        edges = [[(0, 1), (1, 2), (2, 3)], [(0, 3)]]
        base = gcn_forward(Tensor(h), edges, M, params).data
        other = h.copy()
        other[1] += 10.0
        again = gcn_forward(Tensor(other), edges, M, params).data
        np.testing.assert_array_equal(base[0], again[0])

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        d, n = 3, 5
        params = {
            "gcn.weight": Tensor(rng.normal(size=(d, d)), requires_grad=True),
            "gcn.bias": Tensor(rng.normal(size=d), requires_grad=True),
        }
        h = rng.normal(size=(1, n, d))
        edges = [(0, 1), (1, 2), (2, 3), (1, 4)]
        out = gcn_forward(Tensor(h), [edges], np.ones((1, n)), params).data[0]

        perm = np.array([3, 0, 4, 1, 2])  # perm[i] = new position of node i
        h_perm = np.zeros_like(h)
        h_perm[0, perm] = h[0]
        edges_perm = [(int(perm[a]), int(perm[b])) for a, b in edges]
        out_perm = gcn_forward(
            Tensor(h_perm), [edges_perm], np.ones((1, n)), params
        ).data[0]
        np.testing.assert_allclose(out_perm[perm], out, atol=1e-12)

    def test_single_layer_locality(self):
        # Node 0's output depends only on itself and 1-hop neighbors.
        rng = np.random.default_rng(4)
        params = _identity_params(2)
        h = rng.normal(size=(1, 4, 2))
        edges = [[(0, 1), (1, 2), (2, 3)]]
        base = gcn_forward(Tensor(h), edges, np.ones((1, 4)), params).data[0, 0]
        far = h.copy()
        far[0, 3] += 100.0  # two hops away from node 0
        again = gcn_forward(Tensor(far), edges, np.ones((1, 4)), params).data[0, 0]
        np.testing.assert_array_equal(base, again)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            gcn_forward(Tensor(np.zeros((1, 2, 3))), [[]], np.ones((2, 2)), _identity_params(3))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(300 + seed)
        d = 3
        params = init_gcn_params(rng, d)
        h = Tensor(rng.normal(scale=0.8, size=(2, 4, d)), requires_grad=True)
        M = np.array([[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 0.0]])
        edges = [[(0, 1), (1, 2), (0, 3)], [(0, 1), (1, 2)]]
        probe = Tensor(rng.normal(size=(2, 4, d)))

        def f(ht, w, b):
            local = {"gcn.weight": w, "gcn.bias": b}
            out = gcn_forward(ht, edges, M, local)
            return (out * probe).sum()

        report = finite_diff_check(
            f, [h, params["gcn.weight"], params["gcn.bias"]], tol=1e-4
        )
        assert report.passed, report
