import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causalcascade.autodiff import ShapeMismatchError, Tensor, finite_diff_check, grad
from causalcascade.causal import (
    CausalHyper,
    EmptyGraphError,
    acyclicity,
    acyclicity_value,
    causal_adjacency,
    notears_fit,
    notears_loss,
    simulate_dag,
    simulate_linear_sem,
    simulate_parameters,
    structural_hamming_distance,
)
from causalcascade.data import is_acyclic


def series_h(w, terms=40):
    """Oracle: truncated-series trace of e^{W o W} minus n."""
    m = np.asarray(w, dtype=np.float64) ** 2
    n = m.shape[0]
    acc = np.eye(n)
    term = np.eye(n)
    for k in range(1, terms + 1):
        term = term @ m / k
        acc = acc + term
    return float(np.trace(acc) - n)


class TestCausalAdjacency:
    def test_identity_rows(self):
        w = causal_adjacency(Tensor(np.eye(2)))
        np.testing.assert_allclose(w.data, np.eye(2) / 2.0, atol=1e-15)

    def test_all_ones(self):
        w = causal_adjacency(Tensor(np.ones((2, 2))))
        np.testing.assert_allclose(w.data, np.ones((2, 2)), atol=1e-15)

    def test_symmetric_for_random_inputs(self):
        rng = np.random.default_rng(0)
        w = causal_adjacency(Tensor(rng.normal(size=(5, 7)))).data
        np.testing.assert_allclose(w, w.T, atol=1e-14)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ShapeMismatchError):
            causal_adjacency(Tensor(np.zeros(3)))
        with pytest.raises(EmptyGraphError):
            causal_adjacency(Tensor(np.zeros((0, 4))))


class TestAcyclicity:
    def test_zero_matrix(self):
        assert float(acyclicity(Tensor(np.zeros((3, 3)))).data) == 0.0

    def test_single_edge_is_nilpotent(self):
        w = np.zeros((2, 2))
        w[0, 1] = 0.7
        got = float(acyclicity(Tensor(w)).data)
        assert got == pytest.approx(0.0, abs=1e-12)
        assert series_h(w) == pytest.approx(0.0, abs=1e-12)

    def test_two_cycle_closed_form(self):
        # W o W for the unit 2-cycle is the antidiagonal ones matrix, whose
        # exponential has trace 2 cosh(1).
        w = np.array([[0.0, 1.0], [1.0, 0.0]])
        expected = 2.0 * math.cosh(1.0) - 2.0
        assert expected == pytest.approx(1.086161, abs=1e-6)
        assert float(acyclicity(Tensor(w)).data) == pytest.approx(expected, abs=1e-12)

    def test_matches_series_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            w = rng.uniform(-1.0, 1.0, size=(6, 6))
            assert acyclicity_value(w) == pytest.approx(series_h(w), abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(
        arrays(
            np.float64,
            (4, 4),
            elements=st.floats(min_value=-1.5, max_value=1.5, allow_nan=False),
        )
    )
    def test_depends_only_on_magnitudes(self, w):
        assert acyclicity_value(w) == pytest.approx(acyclicity_value(np.abs(w)), abs=1e-12)
        assert acyclicity_value(w) >= -1e-12

    def test_monotone_in_cycle_strength(self):
        # strengthening any edge of a directed cycle strictly increases h
        for scale in (0.5, 1.0, 1.5):
            two = np.array([[0.0, scale], [scale + 0.3, 0.0]])
            stronger = two.copy()
            stronger[0, 1] += 0.2
            assert acyclicity_value(stronger) > acyclicity_value(two)
        three = np.zeros((3, 3))
        three[0, 1] = three[1, 2] = three[2, 0] = 0.8
        stronger = three.copy()
        stronger[2, 0] = 1.0
        assert acyclicity_value(stronger) > acyclicity_value(three)

    def test_gradient_zero_at_origin(self):
        w = Tensor(np.zeros((4, 4)), requires_grad=True)
        (g,) = grad(lambda t: acyclicity(t), [w])
        np.testing.assert_array_equal(g, np.zeros((4, 4)))

    def test_rejects_non_square(self):
        with pytest.raises(ShapeMismatchError):
            acyclicity(Tensor(np.zeros((2, 3))))


class TestNotearsLoss:
    def test_zero_hidden_states(self):
        loss = notears_loss(Tensor(np.zeros((3, 4))), CausalHyper())
        assert float(loss.data) == 0.0

    def test_identity_reconstruction_value(self):
        # W = I/2, residual = I/2, squared Frobenius norm = 2 * 0.25
        loss = notears_loss(Tensor(np.eye(2)), CausalHyper(l1=0.0, acyclic=0.0))
        assert float(loss.data) == pytest.approx(0.5, abs=1e-12)

    def test_l1_term_is_sum_of_entry_magnitudes(self):
        from causalcascade.autodiff import absolute

        w = Tensor(np.array([[0.0, -0.3], [0.2, 0.0]]))
        assert float(absolute(w).sum().data) == pytest.approx(0.5, abs=1e-15)
        # and wired into the loss: H = I gives W = I/2, |W|_1 = 1
        base = notears_loss(Tensor(np.eye(2)), CausalHyper(l1=0.0, acyclic=0.0))
        with_l1 = notears_loss(Tensor(np.eye(2)), CausalHyper(l1=1.0, acyclic=0.0))
        assert float(with_l1.data) - float(base.data) == pytest.approx(1.0, abs=1e-12)

    def test_acyclicity_term_wired_in(self):
        h = Tensor(np.eye(2))
        no_pen = notears_loss(h, CausalHyper(l1=0.0, acyclic=0.0))
        with_pen = notears_loss(h, CausalHyper(l1=0.0, acyclic=2.0))
        expected_h = acyclicity_value(np.eye(2) / 2.0)
        assert float(with_pen.data) - float(no_pen.data) == pytest.approx(
            2.0 * expected_h, abs=1e-12
        )

    def test_asymmetric_projection_variant(self):
        rng = np.random.default_rng(2)
        h = Tensor(rng.normal(size=(4, 3)))
        p1 = Tensor(rng.normal(size=(3, 3)))
        p2 = Tensor(rng.normal(size=(3, 3)))
        loss = notears_loss(h, CausalHyper(), projections=(p1, p2))
        assert np.isfinite(float(loss.data))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(500 + seed)
        h = Tensor(rng.normal(scale=0.6, size=(4, 3)), requires_grad=True)
        report = finite_diff_check(
            lambda t: notears_loss(t, CausalHyper(l1=0.01, acyclic=1.0)), [h], tol=1e-4
        )
        assert report.passed, report

    def test_hyper_validation(self):
        with pytest.raises(ValueError):
            CausalHyper(l1=-0.1).validate()


class TestNotearsFit:
    def test_independent_noise_yields_empty_graph(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(500, 4))
        result = notears_fit(X, l1=0.1, tau=0.3)
        assert result.graph.edges == []
        assert result.converged

    def test_planted_chain_recovered(self):
        rng = np.random.default_rng(11)
        W = np.zeros((3, 3))
        W[0, 1] = W[1, 2] = 1.5
        X = simulate_linear_sem(W, 500, rng)
        result = notears_fit(X, l1=0.1, tau=0.3)
        est = (result.graph.weights != 0).astype(int)
        assert structural_hamming_distance(W, est) <= 1

    def test_thresholded_support_is_acyclic(self):
        rng = np.random.default_rng(12)
        for seed in range(3):
            rng = np.random.default_rng(40 + seed)
            adj = simulate_dag(6, 7, rng)
            X = simulate_linear_sem(simulate_parameters(adj, rng), 300, rng)
            result = notears_fit(X, l1=0.05, tau=0.3)
            assert is_acyclic(result.graph.edges, 6)

    def test_rejects_degenerate_input(self):
        with pytest.raises(ShapeMismatchError):
            notears_fit(np.zeros((1, 5)))
        with pytest.raises(ShapeMismatchError):
            notears_fit(np.zeros(10))


class TestSemHelpers:
    def test_simulated_dag_is_acyclic_with_expected_density(self):
        rng = np.random.default_rng(5)
        adj = simulate_dag(10, 12, rng)
        edges = [(int(i), int(j)) for i, j in zip(*np.nonzero(adj))]
        assert is_acyclic(edges, 10)
        counts = [simulate_dag(10, 12, np.random.default_rng(s)).sum() for s in range(30)]
        assert 8 <= np.mean(counts) <= 16

    def test_sem_sampling_matches_linear_model(self):
        rng = np.random.default_rng(6)
        W = np.zeros((2, 2))
        W[0, 1] = 2.0
        X = simulate_linear_sem(W, 20000, rng, noise_scale=0.1)
        slope = np.polyfit(X[:, 0], X[:, 1], 1)[0]
        assert slope == pytest.approx(2.0, abs=0.02)

    def test_shd_counts_reversals_adds_deletes(self):
        a = np.zeros((3, 3))
        a[0, 1] = a[1, 2] = 1
        assert structural_hamming_distance(a, a) == 0
        reversed_edge = np.zeros((3, 3))
        reversed_edge[1, 0] = reversed_edge[1, 2] = 1
        assert structural_hamming_distance(a, reversed_edge) == 1
        missing = np.zeros((3, 3))
        missing[0, 1] = 1
        assert structural_hamming_distance(a, missing) == 1
        extra = a.copy()
        extra[0, 2] = 1
        assert structural_hamming_distance(a, extra) == 1
