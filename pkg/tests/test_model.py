import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcw.model import (DomainError, ModelParams, Stability, classify_origin, flip_rate,
                       interaction_potential, lienard_g, lienard_g_positive_zero,
                       linearization_eigenvalues)

finite = st.floats(-50, 50, allow_nan=False)
rates = st.floats(0, 20, allow_nan=False)


def tanh_from_exp(x):
    # oracle independent of math.tanh
    e = math.exp(-2.0 * abs(x))
    return math.copysign((1.0 - e) / (1.0 + e), x)


def test_params_validation():
    with pytest.raises(DomainError):
        ModelParams(-1, 1, 0)
    with pytest.raises(DomainError):
        ModelParams(1, math.nan, 0)
    with pytest.raises(DomainError):
        ModelParams(1, 1, math.inf)
    with pytest.raises(DomainError):
        ModelParams(1, 1, 0, n_particles=0)
    assert ModelParams(3, 3, 0).supercritical
    assert not ModelParams(3, 2.5, 0).supercritical


def test_flip_rate_examples():
    assert flip_rate(1, 0.0) == 1.0
    assert flip_rate(-1, 30.0) < 1e-12
    assert flip_rate(1, 3.0) == pytest.approx(1.0 + tanh_from_exp(3.0), rel=1e-15)
    assert flip_rate(1, 3.0) == pytest.approx(1.99505, abs=1e-5)
    with pytest.raises(DomainError):
        flip_rate(1, math.nan)


@given(st.sampled_from([-1, 1]), finite)
def test_flip_rates_of_both_spins_sum_to_two(s, lam):
    assert flip_rate(s, lam) + flip_rate(-s, lam) == pytest.approx(2.0, abs=1e-15)
    assert 0.0 <= flip_rate(s, lam) <= 2.0


def test_interaction_potential():
    p3, p1 = ModelParams(0, 3, 0), ModelParams(0, 1, 0)
    assert interaction_potential(0.0, p3) == 0.0
    assert interaction_potential(1.0, p3) == -3.0
    assert interaction_potential(-0.5, p1) == 0.5
    with pytest.raises(DomainError):
        interaction_potential(1.5, p1)


def test_lienard_g_examples():
    assert lienard_g(0.0, ModelParams(3, 1, 0)) == 0.0
    assert lienard_g(1.0, ModelParams(3, 1, 0)) == pytest.approx(5.0 - 2.0 * tanh_from_exp(1.0), rel=1e-14)
    assert lienard_g(1.0, ModelParams(3, 1, 0)) == pytest.approx(3.4768, abs=1e-4)


def test_lienard_g_positive_zero():
    p = ModelParams(3, 3, 0)
    lam = lienard_g_positive_zero(p)
    # oracle: fixed-point iteration lambda = (6/5) tanh(lambda), contracting near the root
    x = 1.0
    for _ in range(2000):
        x = 1.2 * tanh_from_exp(x)
    assert lam == pytest.approx(x, abs=1e-10)
    assert lam == pytest.approx(0.79, abs=0.01)
    assert lienard_g_positive_zero(ModelParams(3, 1, 0)) is None


@given(finite, rates, rates)
def test_lienard_g_is_odd(lam, alpha, beta):
    p = ModelParams(alpha, beta, 0)
    assert lienard_g(-lam, p) == -lienard_g(lam, p)


@given(st.floats(0.01, 10), st.floats(0, 1), st.floats(-20, 20).filter(lambda v: abs(v) > 1e-6))
def test_subcritical_g_has_sign_of_lambda(alpha, frac, lam):
    p = ModelParams(alpha, frac * (alpha / 2 + 1), 0)
    assert lam * lienard_g(lam, p) > 0


def _numeric_jacobian_eigs(alpha, beta):
    def field(x):
        m, lam = x
        d = m + math.tanh(lam)
        return np.array([-2 * d, 2 * beta * d - alpha * lam])

    h = 1e-6
    J = np.column_stack([(field(e * h) - field(-e * h)) / (2 * h) for e in np.eye(2)])
    return sorted(np.linalg.eigvals(J), key=lambda z: (z.real, z.imag))


@pytest.mark.parametrize("alpha,beta", [(3, 1), (3, 2.5), (3, 3), (0.5, 0.2), (6, 10)])
def test_eigenvalues_match_numeric_jacobian(alpha, beta):
    got = sorted(linearization_eigenvalues(ModelParams(alpha, beta, 0)), key=lambda z: (z.real, z.imag))
    for a, b in zip(got, _numeric_jacobian_eigs(alpha, beta)):
        assert abs(a - b) < 1e-7


def test_eigenvalue_examples():
    xp, xm = linearization_eigenvalues(ModelParams(3, 1, 0))
    assert xp.real == pytest.approx(-1.5) and abs(xp.imag) == pytest.approx(math.sqrt(3.75))
    xp, xm = linearization_eigenvalues(ModelParams(3, 2.5, 0))
    assert xp.real == 0.0 and abs(xp.imag) == pytest.approx(math.sqrt(6))
    xp, xm = linearization_eigenvalues(ModelParams(3, 3, 0))
    assert xp.real == pytest.approx(0.5) and abs(xp.imag) == pytest.approx(math.sqrt(5.75))
    assert xp == xm.conjugate()


def test_classification_examples():
    assert classify_origin(ModelParams(3, 1, 0)) is Stability.STABLE
    assert classify_origin(ModelParams(3, 3, 0)) is Stability.UNSTABLE
    assert classify_origin(ModelParams(0, 1, 0)) is Stability.CRITICAL
    assert classify_origin(ModelParams(3, 2.5, 0)) is Stability.CRITICAL
    assert classify_origin(ModelParams(3, math.nextafter(2.5, 3), 0)) is Stability.UNSTABLE
    assert classify_origin(ModelParams(3, math.nextafter(2.5, 0), 0)) is Stability.STABLE
    # decimal-exact threshold: 0.1/2 + 1 = 1.05
    assert classify_origin(ModelParams(0.1, 1.05, 0)) is Stability.CRITICAL


def test_classification_uses_exact_arithmetic():
    for alpha in np.linspace(0, 8, 57):
        beta = float(Fraction(repr(float(alpha))) / 2 + 1)
        expected = Fraction(repr(beta)) - Fraction(repr(float(alpha))) / 2 - 1
        got = classify_origin(ModelParams(alpha, beta, 0))
        assert got is (Stability.CRITICAL if expected == 0 else
                       Stability.UNSTABLE if expected > 0 else Stability.STABLE)


def test_classification_agrees_with_eigenvalues_on_grid():
    for alpha in np.linspace(0, 10, 100):
        for beta in np.linspace(0, 10, 100):
            p = ModelParams(alpha, beta, 0)
            re = linearization_eigenvalues(p)[0].real
            cls = classify_origin(p)
            if cls is Stability.STABLE:
                # alpha = 0 leaves a neutral direction: x+ = 0 while x- < 0
                assert re < 0 or (alpha == 0 and re == 0)
            elif cls is Stability.UNSTABLE:
                assert re > 0
            else:
                assert abs(re) < 1e-12
