"""Matrix primitive contracts: products, SPD solves, Gram symmetry."""

import numpy as np
import pytest

from frn import linalg


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(linalg.matmul(np.eye(2), a), a)

    def test_orthogonal_rows(self):
        out = linalg.matmul(np.array([[1.0, 0.0]]), np.array([[0.0], [5.0]]))
        np.testing.assert_array_equal(out, [[0.0]])

    def test_hand_computed_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(linalg.matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])

    def test_dimension_mismatch(self):
        with pytest.raises(linalg.ShapeError):
            linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 3, 5))
        b = rng.standard_normal((4, 5, 2))
        out = linalg.matmul(a, b)
        for i in range(4):
            np.testing.assert_array_equal(out[i], a[i] @ b[i])

    def test_associativity_on_well_conditioned_triples(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = rng.standard_normal((6, 5))
            b = rng.standard_normal((5, 7))
            c = rng.standard_normal((7, 4))
            left = linalg.matmul(linalg.matmul(a, b), c)
            right = linalg.matmul(a, linalg.matmul(b, c))
            np.testing.assert_allclose(left, right, rtol=1e-4, atol=1e-10)


class TestSpdSolve:
    def test_scaled_identity(self):
        x = linalg.spd_solve(2.0 * np.eye(2), np.eye(2))
        np.testing.assert_allclose(x, 0.5 * np.eye(2))

    def test_two_by_two_against_explicit_inverse(self):
        # inv([[2,1],[1,2]]) = [[2,-1],[-1,2]] / 3, so x = [2/3, -1/3]
        a = np.array([[2.0, 1.0], [1.0, 2.0]])
        b = np.array([[1.0], [0.0]])
        x = linalg.spd_solve(a, b)
        np.testing.assert_allclose(x, [[2.0 / 3.0], [-1.0 / 3.0]], atol=1e-14)

    def test_identity_returns_rhs(self):
        rng = np.random.default_rng(2)
        b = rng.standard_normal((3, 4))
        np.testing.assert_allclose(linalg.spd_solve(np.eye(3), b), b, atol=1e-14)

    def test_residual_bound_f64(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(1, 17))
            g = rng.standard_normal((n, n))
            a = g @ g.T + np.eye(n)
            b = rng.standard_normal((n, int(rng.integers(1, 5))))
            x = linalg.spd_solve(a, b)
            resid = np.linalg.norm(a @ x - b)
            assert resid <= 1e-10 * max(np.linalg.norm(b), 1e-300)

    def test_residual_bound_f32(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            n = int(rng.integers(1, 17))
            g = rng.standard_normal((n, n)).astype(np.float32)
            a = (g @ g.T + np.eye(n, dtype=np.float32)).astype(np.float32)
            a = ((a + a.T) / 2).astype(np.float32)
            b = rng.standard_normal((n, 3)).astype(np.float32)
            x = linalg.spd_solve(a, b)
            assert x.dtype == np.float32
            resid = np.linalg.norm(a @ x - b)
            assert resid <= 1e-4 * np.linalg.norm(b)

    def test_non_positive_pivot_reports_index(self):
        a = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
        with pytest.raises(linalg.NumericalError) as err:
            linalg.spd_solve(a, np.eye(2))
        assert err.value.pivot == 1

    def test_asymmetric_rejected(self):
        a = np.array([[2.0, 1.0], [0.0, 2.0]])
        with pytest.raises(ValueError):
            linalg.spd_solve(a, np.eye(2))

    def test_shape_errors(self):
        with pytest.raises(linalg.ShapeError):
            linalg.spd_solve(np.ones((2, 3)), np.ones((2, 1)))
        with pytest.raises(linalg.ShapeError):
            linalg.spd_solve(np.eye(2), np.ones((3, 1)))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(5)
        a = np.empty((3, 4, 4))
        for i in range(3):
            g = rng.standard_normal((4, 4))
            a[i] = g @ g.T + np.eye(4)
        b = rng.standard_normal((3, 4, 2))
        out = linalg.spd_solve(a, b)
        for i in range(3):
            np.testing.assert_array_equal(out[i], linalg.spd_solve(a[i], b[i]))


class TestGram:
    def test_identity_both_modes(self):
        np.testing.assert_array_equal(linalg.gram(np.eye(2), "outer"), np.eye(2))
        np.testing.assert_array_equal(linalg.gram(np.eye(2), "inner"), np.eye(2))

    def test_row_vector(self):
        s = np.array([[1.0, 1.0]])
        np.testing.assert_array_equal(linalg.gram(s, "outer"), [[2.0]])
        np.testing.assert_array_equal(linalg.gram(s, "inner"), [[1.0, 1.0], [1.0, 1.0]])

    def test_exact_symmetry(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            s = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 9))))
            for mode in ("outer", "inner"):
                g = linalg.gram(s, mode)
                assert np.array_equal(g, g.T)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            linalg.gram(np.eye(2), "sideways")


class TestSolveRoundTrip:
    def test_solve_then_multiply_reproduces_rhs(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            n = int(rng.integers(1, 13))
            g = rng.standard_normal((n, n))
            a = g @ g.T + np.eye(n)
            b = rng.standard_normal((n, 2))
            x = linalg.spd_solve(a, b)
            np.testing.assert_allclose(linalg.matmul(a, x), b, atol=1e-10 * (1 + np.abs(b).max()))


class TestValidation:
    def test_as_matrix_rejects_non_2d(self):
        with pytest.raises(linalg.ShapeError):
            linalg.as_matrix(np.ones(3))

    def test_as_matrix_rejects_non_finite(self):
        with pytest.raises(linalg.NumericalError):
            linalg.as_matrix(np.array([[1.0, np.nan]]))

    def test_as_batched(self):
        arr = linalg.as_batched(np.ones((2, 3, 4)))
        assert arr.shape == (2, 3, 4)
        with pytest.raises(linalg.ShapeError):
            linalg.as_batched(np.ones((2, 3)))

    def test_resolve_dtype(self):
        assert linalg.resolve_dtype("f32") == np.float32
        assert linalg.resolve_dtype("f64") == np.float64
        with pytest.raises(ValueError):
            linalg.resolve_dtype("f16")

    def test_add_ridge_does_not_mutate(self):
        a = np.zeros((2, 2))
        out = linalg.add_ridge(a, 0.5)
        np.testing.assert_array_equal(a, np.zeros((2, 2)))
        np.testing.assert_array_equal(out, 0.5 * np.eye(2))
