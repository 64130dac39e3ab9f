import math

import numpy as np
import pytest

from graphgames.gfhm import (
    CriticValidationError,
    GfhmCritic,
    default_critic,
    generalized_inputs,
    gradient_matrix,
    value,
    value_gradient,
)


def _random_critic(rng):
    n = int(rng.integers(1, 5))
    translations = tuple(
        tuple(rng.uniform(-1, 1, size=int(rng.integers(1, 4)))) for _ in range(n)
    )
    m = sum(len(row) for row in translations)
    phi = rng.uniform(0.3, 2.0, size=m)
    weights = rng.uniform(0.5, 2.0, size=m) * rng.choice([-1.0, 1.0], size=m)
    return GfhmCritic(translations, phi=phi, weights=weights)


class TestGeneralizedInputs:
    def test_zero_offsets_identity(self):
        c = default_critic(3)
        e = np.array([0.2, -0.4, 1.1])
        np.testing.assert_array_equal(generalized_inputs(c, e), e)

    def test_single_offset(self):
        c = GfhmCritic(((0.5,),))
        np.testing.assert_allclose(generalized_inputs(c, [0.0]), [-0.5])

    def test_two_translations_per_component(self):
        c = GfhmCritic(((-1.0, 1.0), (-1.0, 1.0)))
        np.testing.assert_allclose(
            generalized_inputs(c, [0.3, -0.2]), [1.3, -0.7, 0.8, -1.2]
        )

    def test_dimension_mismatch(self):
        c = default_critic(2)
        with pytest.raises(CriticValidationError):
            generalized_inputs(c, [1.0, 2.0, 3.0])


class TestValue:
    def test_zero_weights(self):
        c = default_critic(4)
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert value(c, rng.uniform(-2, 2, size=4)) == 0.0

    def test_zero_error_zero_offsets(self):
        c = default_critic(2, weights=[3.0, -1.0])
        assert value(c, [0.0, 0.0]) == 0.0

    def test_scalar_hand_value(self):
        c = default_critic(1, weights=[2.0])
        assert value(c, [1.0]) == pytest.approx(2.0 * math.tanh(1.0), rel=1e-15)

    def test_bounded_by_weight_l1_norm(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(1, 4))
            w = rng.uniform(-3, 3, size=n)
            c = default_critic(n, weights=w)
            e = rng.uniform(-10, 10, size=n)
            assert abs(value(c, e)) <= np.abs(w).sum() + 1e-12

    def test_odd_symmetry_with_zero_offsets(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 4))
            c = default_critic(n, weights=rng.uniform(-2, 2, size=n))
            e = rng.uniform(-2, 2, size=n)
            assert value(c, -e) == pytest.approx(-value(c, e), abs=1e-14)


class TestGradient:
    def test_identity_at_zero(self):
        c = default_critic(3, weights=[1.0, 1.0, 1.0])
        np.testing.assert_allclose(gradient_matrix(c, np.zeros(3)), np.eye(3))

    def test_zero_weights_zero_gradient(self):
        c = default_critic(2)
        np.testing.assert_array_equal(value_gradient(c, [0.3, -0.8]), np.zeros(2))

    def test_gradient_equals_matrix_times_weights(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            c = _random_critic(rng)
            e = rng.uniform(-1.5, 1.5, size=c.error_dim)
            np.testing.assert_allclose(
                value_gradient(c, e), gradient_matrix(c, e) @ c.weights, atol=1e-14
            )

    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(4)
        h = 1e-5
        for _ in range(100):
            c = _random_critic(rng)
            e = rng.uniform(-1.5, 1.5, size=c.error_dim)
            grad = value_gradient(c, e)
            fd = np.empty_like(grad)
            for z in range(c.error_dim):
                step = np.zeros(c.error_dim)
                step[z] = h
                fd[z] = (value(c, e + step) - value(c, e - step)) / (2 * h)
            denom = max(float(np.linalg.norm(grad)), 1e-3)
            assert np.linalg.norm(fd - grad) / denom < 1e-6


class TestValidation:
    def test_phi_must_be_positive(self):
        with pytest.raises(CriticValidationError):
            GfhmCritic(((0.0,), (0.0,)), phi=[1.0, 0.0])
        with pytest.raises(CriticValidationError):
            GfhmCritic(((0.0,),), phi=[-1.0])

    def test_constant_offset_fixed_at_zero(self):
        with pytest.raises(CriticValidationError):
            GfhmCritic(((0.0,),), zeta=0.5)

    def test_empty_translation_row_rejected(self):
        with pytest.raises(CriticValidationError):
            GfhmCritic(((0.0,), ()))

    def test_basis_dimension_counts_pairs(self):
        c = GfhmCritic(((0.0, 0.3), (0.0,), (-0.2, 0.0, 0.2)))
        assert c.gen_dim == 6
        assert c.error_dim == 3

    def test_with_weights_keeps_structure(self):
        c = GfhmCritic(((0.0, 0.5), (0.0,)), phi=[1.0, 2.0, 0.5])
        c2 = c.with_weights([1.0, 2.0, 3.0])
        assert c2.translations == c.translations
        np.testing.assert_array_equal(c2.phi, c.phi)
        np.testing.assert_array_equal(c2.weights, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(c.weights, np.zeros(3))
