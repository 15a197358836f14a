import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowkl.core import (
    BasisTruncation,
    DiscreteKernel,
    EigenSystem,
    FlowEnsemble,
    FlowSample,
    Grid,
    GridMismatchError,
    ShapeError,
    l2_inner,
    stack,
    unstack,
)


# squares of these neither overflow nor underflow
MODERATE = st.floats(-100, 100).filter(lambda x: x == 0 or abs(x) > 1e-100)


def flow(coeffs, domain_length=1.0):
    coeffs = np.asarray(coeffs, dtype=float)
    return FlowSample(Grid(coeffs.shape[0], domain_length), BasisTruncation(coeffs.shape[1]), coeffs)


class TestGrid:
    def test_midpoint_nodes(self):
        g = Grid(4)
        np.testing.assert_allclose(g.nodes, [0.125, 0.375, 0.625, 0.875])
        assert g.weight == 0.25

    def test_weight_times_n_is_length(self):
        for n, L in [(3, 1.0), (7, 2.5), (1000, 0.1)]:
            g = Grid(n, L)
            assert g.weight * g.n == pytest.approx(L, rel=1e-15)
            assert np.all(np.diff(g.nodes) > 0)
            assert 0 < g.nodes[0] and g.nodes[-1] < L

    @pytest.mark.parametrize("n", [0, -1, 2.5])
    def test_rejects_bad_size(self, n):
        with pytest.raises(ValueError):
            Grid(n)

    def test_rejects_bad_length(self):
        with pytest.raises(ValueError):
            Grid(4, 0.0)

    def test_nodes_read_only(self):
        with pytest.raises(ValueError):
            Grid(3).nodes[0] = 1.0


def test_truncation_positive():
    with pytest.raises(ValueError):
        BasisTruncation(0)


class TestStack:
    @pytest.mark.parametrize(
        "coeffs, expected",
        [
            ([[3, 4]], [3, 4]),
            ([[5], [6]], [5, 6]),
            ([[1, 2], [3, 4]], [1, 2, 3, 4]),
        ],
    )
    def test_block_order(self, coeffs, expected):
        np.testing.assert_array_equal(stack(flow(coeffs)), expected)

    def test_unstack(self):
        s = unstack([1, 2, 3, 4], Grid(2), BasisTruncation(2))
        np.testing.assert_array_equal(s.coeffs, [[1, 2], [3, 4]])
        s = unstack([7], Grid(1), BasisTruncation(1))
        np.testing.assert_array_equal(s.coeffs, [[7]])

    def test_unstack_length_mismatch(self):
        with pytest.raises(ShapeError):
            unstack(np.arange(5.0), Grid(2), BasisTruncation(2))

    @given(
        st.integers(1, 6).flatmap(
            lambda n: st.integers(1, 4).flatmap(
                lambda m: arrays(np.float64, n * m, elements=st.floats(-1e6, 1e6)).map(lambda v: (n, m, v))
            )
        )
    )
    def test_round_trip(self, nmv):
        n, m, v = nmv
        s = unstack(v, Grid(n), BasisTruncation(m))
        np.testing.assert_array_equal(stack(s), v)
        np.testing.assert_array_equal(unstack(stack(s), Grid(n), BasisTruncation(m)).coeffs, s.coeffs)


class TestInner:
    def test_zero_flow(self):
        z = flow(np.zeros((3, 2)))
        assert l2_inner(z, z) == 0.0

    def test_constant_unit_flow(self):
        f = flow([[1], [1]])
        assert l2_inner(f, f) == 1.0

    def test_disjoint_support(self):
        assert l2_inner(flow([[1], [0]]), flow([[0], [1]])) == 0.0

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            l2_inner(flow([[1], [0]]), flow([[1], [0]], domain_length=2.0))
        with pytest.raises(GridMismatchError):
            l2_inner(flow([[1, 0]]), flow([[1]]))

    @settings(max_examples=50)
    @given(
        arrays(np.float64, (4, 3), elements=MODERATE),
        arrays(np.float64, (4, 3), elements=MODERATE),
        arrays(np.float64, (4, 3), elements=MODERATE),
        st.floats(-10, 10),
    )
    def test_symmetric_bilinear_positive(self, a, b, c, alpha):
        f, g, h = flow(a), flow(b), flow(c)
        assert l2_inner(f, g) == pytest.approx(l2_inner(g, f), rel=1e-12, abs=1e-9)
        lhs = l2_inner(f * alpha + g, h)
        rhs = alpha * l2_inner(f, h) + l2_inner(g, h)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-6)
        assert l2_inner(f, f) >= 0
        assert (l2_inner(f, f) == 0) == (not np.any(a))

    def test_midpoint_refinement_order(self):
        # f(t) = (sin(pi t), t^2): exact |f|^2 integral on [0, 1] is 1/2 + 1/5
        exact = 0.5 + 0.2

        def err(n):
            t = Grid(n).nodes
            f = FlowSample(Grid(n), BasisTruncation(2), np.column_stack([np.sin(np.pi * t), t**2]))
            return abs(l2_inner(f, f) - exact)

        ratios = [err(n) / err(2 * n) for n in (16, 32, 64)]
        np.testing.assert_allclose(ratios, 4.0, rtol=0.02)


class TestContainers:
    def test_flow_shape_checked(self):
        with pytest.raises(ShapeError):
            FlowSample(Grid(2), BasisTruncation(2), np.zeros((2, 3)))

    def test_flow_finite(self):
        with pytest.raises(ValueError):
            FlowSample(Grid(1), BasisTruncation(1), [[np.nan]])

    def test_immutable(self):
        f = flow([[1.0, 2.0]])
        with pytest.raises(ValueError):
            f.coeffs[0, 0] = 5

    def test_ensemble_columns_are_samples(self):
        X = np.arange(12.0).reshape(4, 3)
        ens = FlowEnsemble(Grid(2), BasisTruncation(2), X)
        assert ens.N == 3
        np.testing.assert_array_equal(ens.sample(1).coeffs, [[1, 4], [7, 10]])
        np.testing.assert_array_equal(ens.coeff_tensor()[:, :, 1], [[1, 4], [7, 10]])
        again = FlowEnsemble.from_samples(ens.samples())
        np.testing.assert_array_equal(again.X, X)

    def test_empty_ensemble(self):
        ens = FlowEnsemble(Grid(3), BasisTruncation(2), np.zeros((6, 0)))
        assert ens.N == 0

    def test_ensemble_row_count(self):
        with pytest.raises(ShapeError):
            FlowEnsemble(Grid(3), BasisTruncation(2), np.zeros((5, 2)))

    def test_kernel_assembly_round_trip(self, rng):
        g, t = Grid(3), BasisTruncation(2)
        B = rng.standard_normal((6, 6))
        A = B @ B.T
        K = DiscreteKernel.from_assembly(g, t, A)
        np.testing.assert_array_equal(K.assembly(), np.triu(A) + np.triu(A, 1).T)
        # block (k, l) entry (i, i') sits at row k m + i, column l m + i'
        for k in range(3):
            for l in range(3):
                np.testing.assert_array_equal(K.block(k, l), K.assembly()[2 * k : 2 * k + 2, 2 * l : 2 * l + 2])
        assert K.symmetry_defect() == 0.0

    def test_kernel_rejects_asymmetric(self, rng):
        blocks = rng.standard_normal((2, 2, 2, 2))
        with pytest.raises(ValueError, match="symmetric"):
            DiscreteKernel(Grid(2), BasisTruncation(2), blocks)

    def test_eigensystem_invariants(self):
        g, t = Grid(2), BasisTruncation(1)
        phi = np.array([[[1.0], [1.0]], [[1.0], [-1.0]]])
        eig = EigenSystem(g, t, [2.0, 1.0], phi)
        np.testing.assert_allclose(eig.gram(), np.eye(2))
        with pytest.raises(ValueError, match="nonincreasing"):
            EigenSystem(g, t, [1.0, 2.0], phi)
        with pytest.raises(ValueError, match="orthonormal"):
            EigenSystem(g, t, [2.0, 1.0], 2 * phi)
