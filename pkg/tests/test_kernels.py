import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlgp.exceptions import DimensionError, NumericalError
from mlgp.kernels import (
    KernelSpec,
    KronChain,
    feature_map,
    gram_matrix,
    kernel_eval,
    kron,
    kron_chain_matvec,
    robust_cholesky,
    utilde_row,
)


class TestKernelSpec:
    def test_linear_value(self):
        assert kernel_eval(KernelSpec("linear", 1.0, 2.0, 0.5), 1.5, 2.5) == pytest.approx(1 + 2 * 1.0 * 2.0)

    def test_sqexp_value(self):
        k = KernelSpec("sqexp", 2.0, c=0.5)
        assert kernel_eval(k, 0.0, 1.0) == pytest.approx(2.0 * np.exp(-1.0))

    def test_periodic_is_periodic(self):
        k = KernelSpec("periodic", 1.3, c=0.7)
        assert kernel_eval(k, 0.2, 0.9) == pytest.approx(kernel_eval(k, 1.2, 0.9), abs=1e-14)

    @pytest.mark.parametrize("family", ["sqexp", "periodic"])
    @pytest.mark.parametrize("a,c", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_invalid_parameters(self, family, a, c):
        with pytest.raises(ValueError):
            KernelSpec(family, a, c=c)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            KernelSpec("matern")

    def test_round_trip(self):
        k = KernelSpec("periodic", 1.5, 0.0, 0.25)
        assert KernelSpec.from_dict(k.to_dict()) == k


@pytest.mark.parametrize("family", ["linear", "sqexp", "periodic"])
def test_gram_symmetric_psd(family):
    pts = np.linspace(0, 1, 9)
    G = gram_matrix(KernelSpec(family, 1.0, 1.0, 0.3), pts)
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() > -1e-10


def test_gram_empty_rejected():
    with pytest.raises(DimensionError):
        gram_matrix(KernelSpec("sqexp"), [])


class TestKron:
    def test_identity(self):
        assert np.array_equal(kron(np.eye(2), np.eye(3)), np.eye(6))

    def test_last_factor_fastest(self, rng):
        A, B = rng.standard_normal((2, 2)), rng.standard_normal((3, 3))
        K = kron(A, B)
        assert K[1 * 3 + 2, 0 * 3 + 1] == pytest.approx(A[1, 0] * B[2, 1])

    def test_mixed_product(self, rng):
        A, B, C, D = (rng.standard_normal((3, 3)) for _ in range(4))
        assert np.allclose(kron(A, B) @ kron(C, D), kron(A @ C, B @ D), atol=1e-12)

    def test_size_guard(self):
        with pytest.raises(DimensionError):
            KronChain([np.zeros((2**10, 1))] * 3).materialize()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=3),
           st.integers(0, 2**31))
    def test_matvec_matches_dense(self, shapes, seed):
        r = np.random.default_rng(seed)
        chain = KronChain([r.standard_normal(s) for s in shapes])
        v = r.standard_normal(chain.shape[1])
        assert np.allclose(kron_chain_matvec(chain, v), chain.materialize() @ v, atol=1e-12)


class TestUtildeRow:
    def test_matches_kron_of_selected_rows(self, rng):
        U1, U2, U3 = rng.standard_normal((4, 2)), rng.standard_normal((3, 2)), rng.standard_normal((2, 1))
        x = rng.standard_normal(4)
        want = np.kron(np.kron(U3[1], U2[2]), x @ U1)
        assert np.allclose(utilde_row([U1, U2, U3], (2, 1), x), want, atol=1e-14)

    def test_equals_phi_times_kron(self, rng):
        U1, U2 = rng.standard_normal((3, 2)), rng.standard_normal((2, 2))
        x = rng.standard_normal(3)
        e = np.eye(2)[1]
        row = utilde_row([U1, U2], (1,), x)
        assert np.allclose(row, np.kron(e, x) @ np.kron(U2, U1), atol=1e-14)

    def test_bad_index(self, rng):
        with pytest.raises(IndexError):
            utilde_row([np.eye(2), np.eye(3)], (3,), np.ones(2))

    def test_wrong_arity(self):
        with pytest.raises(DimensionError):
            utilde_row([np.eye(2), np.eye(3)], (0, 0), np.ones(2))


def test_feature_map_identity_and_kernel():
    X = np.array([[0.1], [0.6]])
    assert np.array_equal(feature_map(X), X)
    k = KernelSpec("sqexp", 1.0, c=0.1)
    Phi = feature_map(X, k, 5)
    assert Phi.shape == (2, 5)
    assert Phi[0, 0] == pytest.approx(kernel_eval(k, 0.1, 0.0))


class TestRobustCholesky:
    def test_exact_when_pd(self, rng):
        A = rng.standard_normal((5, 5))
        A = A @ A.T + 5 * np.eye(5)
        L, jitter = robust_cholesky(A)
        assert jitter == 0.0
        assert np.allclose(L @ L.T, A)

    def test_jitter_on_singular(self):
        v = np.ones((4, 1))
        L, jitter = robust_cholesky(v @ v.T)
        assert jitter > 0

    def test_raises_on_indefinite(self):
        with pytest.raises(NumericalError):
            robust_cholesky(np.diag([1.0, -1.0]))
