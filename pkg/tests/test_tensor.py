import numpy as np
import pytest
from hypothesis import given, strategies as st

from grate.errors import CapabilityError, DimensionError, DomainError
from grate.tensor import (FactorModel, as_tensor, cpd_reconstruct, fold_mode_n,
                          identifiability_check, khatri_rao, kruskal_rank, masked_sq_error,
                          mode_n_unfold, numerical_rank)


def random_model(rng, shape, rank):
    return FactorModel([rng.standard_normal((s, rank)) for s in shape])


shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple)


class TestKhatriRao:
    def test_definition_example(self):
        out = khatri_rao([np.array([[1, 2], [3, 4]]), np.array([[0, 1], [1, 0]])])
        np.testing.assert_array_equal(out, [[0, 2], [1, 0], [0, 4], [3, 0]])

    def test_ones_row_is_identity(self, rng):
        a = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(khatri_rao([a, np.ones((1, 3))]), a)

    def test_shape(self, rng):
        assert khatri_rao([rng.random((2, 3)), rng.random((4, 3))]).shape == (8, 3)

    def test_column_mismatch(self):
        with pytest.raises(DimensionError):
            khatri_rao([np.ones((2, 3)), np.ones((2, 2))])

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
           st.integers(0, 2**31))
    def test_associative(self, i, j, k, r, seed):
        g = np.random.default_rng(seed)
        a, b, c = g.random((i, r)), g.random((j, r)), g.random((k, r))
        np.testing.assert_allclose(khatri_rao([a, khatri_rao([b, c])]), khatri_rao([a, b, c]))
        np.testing.assert_allclose(khatri_rao([khatri_rao([a, b]), c]), khatri_rao([a, b, c]))

    def test_columns_are_kronecker_products(self, rng):
        a, b = rng.random((3, 2)), rng.random((4, 2))
        kr = khatri_rao([a, b])
        for r in range(2):
            np.testing.assert_allclose(kr[:, r], np.kron(a[:, r], b[:, r]))


class TestUnfolding:
    t = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1, 1)

    def test_mode0_example(self):
        np.testing.assert_array_equal(mode_n_unfold(self.t, 0), [[1, 3], [2, 4]])

    def test_mode1_example(self):
        np.testing.assert_array_equal(mode_n_unfold(self.t, 1), [[1, 2], [3, 4]])

    def test_fold_example(self):
        np.testing.assert_array_equal(fold_mode_n([[1, 3], [2, 4]], 0, (2, 2, 1, 1)), self.t)

    def test_fold_singleton(self):
        assert fold_mode_n([[5.0]], 0, (1, 1, 1)).shape == (1, 1, 1)

    def test_fold_wrong_rows(self):
        with pytest.raises(DimensionError):
            fold_mode_n(np.ones((3, 2)), 0, (2, 2, 1, 1))

    def test_bad_mode(self):
        with pytest.raises(DimensionError):
            mode_n_unfold(self.t, 4)

    @given(shapes, st.data())
    def test_fold_inverts_unfold_bitwise(self, shape, data):
        n = data.draw(st.integers(0, len(shape) - 1))
        t = np.random.default_rng(len(shape)).standard_normal(shape)
        assert np.array_equal(fold_mode_n(mode_n_unfold(t, n), n, shape), t)

    @given(st.lists(st.integers(1, 5), min_size=2, max_size=4), st.integers(1, 4),
           st.integers(0, 2**31))
    def test_unfold_identity(self, shape, rank, seed):
        g = np.random.default_rng(seed)
        model = random_model(g, shape, rank)
        x = cpd_reconstruct(model)
        for n in range(len(shape)):
            rest = [a for m, a in enumerate(model.factors) if m != n]
            np.testing.assert_allclose(mode_n_unfold(x, n), khatri_rao(rest) @ model.factors[n].T,
                                       rtol=1e-10, atol=1e-12)


class TestReconstruct:
    def test_rank1_example(self):
        m = FactorModel([[[1], [2]], [[1], [1]], [[2]], [[1]]])
        np.testing.assert_array_equal(cpd_reconstruct(m), np.array([[2, 2], [4, 4]]).reshape(2, 2, 1, 1))

    def test_zero_factor(self, rng):
        m = random_model(rng, (3, 4, 2), 2)
        m.factors[1][:] = 0
        assert not cpd_reconstruct(m).any()

    def test_linearity(self, rng):
        m = random_model(rng, (3, 4, 2, 2), 2)
        parts = [FactorModel([a[:, [r]] for a in m.factors]) for r in range(2)]
        np.testing.assert_allclose(cpd_reconstruct(m), sum(cpd_reconstruct(p) for p in parts))

    def test_matches_explicit_sum(self, rng):
        m = random_model(rng, (2, 3, 2, 2), 3)
        a, b, c, d = m.factors
        want = np.einsum("ir,jr,kr,lr->ijkl", a, b, c, d)
        np.testing.assert_allclose(cpd_reconstruct(m), want)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            cpd_reconstruct(random_model(rng, (2, 3), 1), shape=(3, 2))

    def test_factor_rank_mismatch(self):
        with pytest.raises(DimensionError):
            FactorModel([np.ones((2, 2)), np.ones((3, 1))])

    def test_nonneg_model_rejects_negatives(self):
        with pytest.raises(DomainError):
            FactorModel([-np.ones((2, 1))], nonneg=True)


class TestMaskedError:
    def test_identical(self, rng):
        t = rng.random((2, 3))
        assert masked_sq_error(t, t) == 0

    def test_full_mask(self):
        assert masked_sq_error([1.0, 2.0], [0.0, 0.0]) == 5

    def test_hidden_first(self):
        assert masked_sq_error([1.0, 2.0], [0.0, 0.0], [False, True]) == 4

    @given(st.integers(0, 2**31))
    def test_full_mask_is_frobenius(self, seed):
        g = np.random.default_rng(seed)
        a, b = g.standard_normal((3, 2, 2)), g.standard_normal((3, 2, 2))
        assert masked_sq_error(a, b, np.ones(a.shape, bool)) == pytest.approx(np.linalg.norm(a - b) ** 2)


class TestValidation:
    def test_nonfinite(self):
        with pytest.raises(DomainError):
            as_tensor([1.0, np.nan])

    def test_too_many_modes(self):
        with pytest.raises(DimensionError):
            as_tensor(np.ones((1, 1, 1, 1, 1)))

    def test_reshape_count(self):
        with pytest.raises(DimensionError):
            as_tensor(np.ones(5), shape=(2, 2))


class TestKruskal:
    def test_identity(self):
        assert kruskal_rank(np.eye(3)) == 3

    def test_duplicate_columns(self):
        assert kruskal_rank(np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 1.0], [0.0, 0.0, 3.0]])) == 1

    def test_zero_column(self):
        assert kruskal_rank(np.array([[1.0, 0.0], [0.0, 0.0]])) == 0

    def test_generic_wide_matrix(self, rng):
        assert kruskal_rank(rng.standard_normal((3, 6))) == 3

    def test_column_cap(self):
        with pytest.raises(CapabilityError):
            kruskal_rank(np.ones((2, 13)))

    @given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31), st.booleans())
    def test_bounded_by_matrix_rank(self, rows, cols, seed, dup):
        m = np.random.default_rng(seed).standard_normal((rows, cols))
        if dup and cols > 1:
            m[:, -1] = m[:, 0]
        assert kruskal_rank(m) <= numerical_rank(m)


class TestIdentifiability:
    def test_satisfied_at_equality(self):
        a = [np.random.default_rng(s).standard_normal((3, 7)) for s in range(3)]
        rep = identifiability_check(*a, 7)
        assert (rep.k2, rep.k3, rep.k4) == (3, 3, 3)
        assert rep.satisfied

    def test_not_satisfied(self):
        a = np.array([[1.0, 1.0]])
        rep = identifiability_check(a, a, a, 2)
        assert (rep.k2, rep.k3, rep.k4) == (1, 1, 1)
        assert not rep.satisfied

    def test_frozen_random_factors(self, frozen):
        case = frozen["khatri_rao_rank"]
        mats = [np.array(m) for m in case["factors"]]
        rep = identifiability_check(*mats, 5)
        assert rep.satisfied
        kr = khatri_rao(mats)
        assert list(kr.shape) == case["kr_shape"]
        assert numerical_rank(kr) == case["matrix_rank"] == 5

    def test_rank_mismatch(self):
        with pytest.raises(DimensionError):
            identifiability_check(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 3)), 2)
