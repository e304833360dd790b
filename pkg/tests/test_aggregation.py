import numpy as np
import pytest
from hypothesis import given, strategies as st

from grate.aggregation import (AggregationKind, CompoundTensor, aggregation_tolerance,
                               build_compound, check_aggregation, inexact_constraint_values,
                               latent_equality_residual, selector_vectors)
from grate.errors import DimensionError, DomainError
from grate.tensor import FactorModel, cpd_reconstruct

EXACT, INEXACT = AggregationKind.EXACT, AggregationKind.INEXACT


def fiber(values, kind=EXACT):
    data = np.array(values, dtype=float).reshape(-1, 1, 1, 1)
    return CompoundTensor(data, None, kind)


def compound_model(rng, i1, trailing, rank, equality=False, nonneg=False):
    draw = (lambda s: rng.uniform(0, 1, s)) if nonneg else rng.standard_normal
    a1 = draw((i1 + 1, rank))
    if equality:
        a1[-1] = a1[:-1].sum(axis=0)
    return FactorModel([a1] + [draw((s, rank)) for s in trailing], nonneg=nonneg)


class TestBuild:
    def test_exact_fiber(self):
        c = build_compound(np.array([3.0, 4.0]).reshape(2, 1, 1, 1))
        np.testing.assert_array_equal(c.data.ravel(), [3, 4, 7])
        assert c.mask.all()

    def test_inexact_fiber(self):
        c = build_compound(np.array([3.0, 4.0]).reshape(2, 1, 1, 1), kind=INEXACT,
                           residual=np.ones((1, 1, 1)))
        np.testing.assert_array_equal(c.data.ravel(), [3, 4, 8])

    def test_negative_residual(self):
        with pytest.raises(DomainError):
            build_compound(np.ones((2, 1, 1, 1)), kind=INEXACT, residual=np.full((1, 1, 1), -0.5))

    def test_residual_shape(self):
        with pytest.raises(DimensionError):
            build_compound(np.ones((2, 2, 1, 1)), kind=INEXACT, residual=np.ones((1, 1, 1)))

    def test_exact_rejects_residual(self):
        with pytest.raises(DomainError):
            build_compound(np.ones((2, 1, 1, 1)), residual=np.ones((1, 1, 1)))

    def test_partial_fiber_leaves_aggregate_missing(self):
        mask = np.ones((2, 2, 1, 1), bool)
        mask[0, 1] = False
        c = build_compound(np.ones((2, 2, 1, 1)), mask)
        assert c.aggregate_mask[0, 0, 0] and not c.aggregate_mask[1, 0, 0]
        np.testing.assert_array_equal(c.detailed_mask, mask)

    def test_needs_aggregate_slab(self):
        with pytest.raises(DimensionError):
            CompoundTensor(np.ones((1, 2)), None, EXACT)

    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
    def test_build_then_check_passes(self, i1, i2, i3, seed):
        g = np.random.default_rng(seed)
        det = g.uniform(0, 100, (i1, i2, i3, 2))
        assert check_aggregation(build_compound(det), tol=1e-12).ok
        res = g.uniform(0, 5, (i2, i3, 2))
        assert check_aggregation(build_compound(det, kind=INEXACT, residual=res), tol=1e-12).ok

    def test_kind_parse(self):
        assert AggregationKind.parse("Inexact") is INEXACT
        with pytest.raises(DomainError):
            AggregationKind.parse("approximate")


class TestCheck:
    def test_exact_ok(self):
        assert check_aggregation(fiber([3, 4, 7]), tol=1e-9).ok

    def test_exact_violation(self):
        rep = check_aggregation(fiber([3, 4, 6.9]), tol=1e-6)
        assert len(rep.violations) == 1
        idx, gap = rep.violations[0]
        assert idx == (0, 0, 0) and gap == pytest.approx(-0.1)

    def test_inexact(self):
        assert check_aggregation(fiber([3, 4, 8], INEXACT)).ok
        assert len(check_aggregation(fiber([3, 4, 6.9], INEXACT)).violations) == 1

    def test_exact_flags_surplus(self):
        assert not check_aggregation(fiber([3, 4, 8])).ok

    def test_partially_observed_fibers_skipped(self):
        c = fiber([3, 4, 100])
        mask = c.mask.copy()
        mask[0] = False
        assert check_aggregation(c.with_mask(mask)).ok

    def test_default_tolerance(self):
        np.testing.assert_allclose(aggregation_tolerance(np.array([1e6, 1.0, 0.0])), [1.0, 1e-6, 1e-9])


class TestSelectors:
    def test_i1_2(self):
        s = selector_vectors(2)
        np.testing.assert_array_equal(s.e_s, [0, 0, 1])
        np.testing.assert_array_equal(s.e_b, [1, 1, 0])
        np.testing.assert_array_equal(s.e, [1, 1, -1])

    def test_i1_1(self):
        s = selector_vectors(1)
        np.testing.assert_array_equal(s.e_s, [0, 1])
        np.testing.assert_array_equal(s.e_b, [1, 0])

    @given(st.integers(1, 50))
    def test_orthogonal_and_complementary(self, i1):
        s = selector_vectors(i1)
        assert s.e_s @ s.e_b == 0
        np.testing.assert_array_equal(s.e_s + s.e_b, np.ones(i1 + 1))

    def test_invalid(self):
        with pytest.raises(DomainError):
            selector_vectors(0)


class TestLatentQuantities:
    def test_equality_residual_examples(self):
        np.testing.assert_array_equal(latent_equality_residual(FactorModel([[[1], [2], [3]]])), [0])
        np.testing.assert_array_equal(latent_equality_residual(FactorModel([[[1], [2], [4]]])), [1])

    def test_constraint_value_example(self):
        m = FactorModel([[[1], [2], [5]], [[1]], [[1]], [[1]]])
        np.testing.assert_array_equal(inexact_constraint_values(m), [2])

    def test_zero_when_equality_holds(self, rng):
        m = compound_model(rng, 3, (2, 3, 2), 2, equality=True)
        np.testing.assert_allclose(latent_equality_residual(m), 0, atol=1e-14)
        np.testing.assert_allclose(inexact_constraint_values(m), 0, atol=1e-13)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
    def test_matches_reconstruction_gap(self, i1, rank, seed):
        m = compound_model(np.random.default_rng(seed), i1, (3, 2, 2), rank)
        x = cpd_reconstruct(m)
        gap = np.zeros((3, 2, 2))
        for i2 in range(3):
            for i3 in range(2):
                for i4 in range(2):
                    gap[i2, i3, i4] = x[-1, i2, i3, i4] - sum(x[i, i2, i3, i4] for i in range(i1))
        np.testing.assert_allclose(inexact_constraint_values(m), gap.ravel(), atol=1e-10)
