import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate as sint
from scipy import special

from femtolb.numerics import (Bracket, InvalidBracket, QuadratureSpec, ToleranceNotMet, bisect,
                              golden_section, integrate, lower_incomplete_gamma, minimize_1d)


# incomplete gamma --------------------------------------------------------

@given(st.floats(0, 50))
def test_incomplete_gamma_a1_closed_form(b):
    assert lower_incomplete_gamma(1.0, b) == pytest.approx(-math.expm1(-b), rel=1e-12, abs=1e-300)


def test_incomplete_gamma_zero_upper_limit():
    assert lower_incomplete_gamma(0.5, 0.0) == 0.0


def test_incomplete_gamma_half_two():
    # substitute t = u^2: int_0^2 t^-1/2 e^-t dt = sqrt(pi) erf(sqrt 2)
    expect = math.sqrt(math.pi) * math.erf(math.sqrt(2.0))
    assert lower_incomplete_gamma(0.5, 2.0) == pytest.approx(expect, rel=1e-10)


@given(st.floats(0.05, 20), st.floats(0, 80))
def test_incomplete_gamma_matches_scipy(a, b):
    expect = special.gammainc(a, b) * special.gamma(a)
    assert lower_incomplete_gamma(a, b) == pytest.approx(expect, rel=1e-12, abs=1e-300)


@given(st.floats(0.1, 5), st.floats(0, 30), st.floats(0, 30))
def test_incomplete_gamma_monotone_and_bounded(a, b1, b2):
    lo, hi = sorted((b1, b2))
    g_lo, g_hi = lower_incomplete_gamma(a, lo), lower_incomplete_gamma(a, hi)
    assert g_lo <= g_hi * (1 + 1e-14)
    assert g_hi <= math.gamma(a) * (1 + 1e-12)


def test_incomplete_gamma_tends_to_gamma():
    assert lower_incomplete_gamma(2.5, 200.0) == pytest.approx(math.gamma(2.5), rel=1e-13)


@pytest.mark.parametrize("a, b", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5)])
def test_incomplete_gamma_domain(a, b):
    with pytest.raises(ValueError):
        lower_incomplete_gamma(a, b)


# quadrature --------------------------------------------------------------

def test_integrate_constant():
    assert integrate(lambda x: np.full_like(x, 3.5), 0.0, 1.0) == pytest.approx(3.5, rel=1e-14)


def test_integrate_radial_density():
    assert integrate(lambda r: 2 * r, 0.0, 1.0) == pytest.approx(1.0, rel=1e-14)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.floats(-3, 3), st.floats(0.1, 4))
def test_integrate_exact_on_cubics(coef, lo, width):
    hi = lo + width
    poly = np.polynomial.Polynomial(coef)
    exact = poly.integ()(hi) - poly.integ()(lo)
    assert integrate(poly, lo, hi) == pytest.approx(exact, abs=1e-12 * max(1, abs(exact)))


def test_integrate_matches_incomplete_gamma_closed_form():
    beta, dm = 2.7e-12, 800.0
    closed = beta ** -0.5 / 4 * lower_incomplete_gamma(0.5, beta * dm ** 4)
    assert integrate(lambda r: r * np.exp(-beta * r ** 4), 0.0, dm) == pytest.approx(closed, rel=1e-8)


def test_integrate_against_scipy_quad():
    f = lambda r: np.exp(-r) * np.sin(3 * r) ** 2
    expect, _ = sint.quad(f, 0, 7, epsabs=1e-13, epsrel=1e-13)
    assert integrate(f, 0.0, 7.0) == pytest.approx(expect, rel=1e-9)


def test_integrate_reports_tolerance_failure():
    with pytest.raises(ToleranceNotMet):
        integrate(lambda x: np.sign(x - 0.3333), 0.0, 1.0, QuadratureSpec(1e-15, 1e-15, 3))


def test_integrate_empty_interval():
    assert integrate(lambda x: x, 2.0, 2.0) == 0.0


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(0.0, 1e-9, 10)
    with pytest.raises(ValueError):
        QuadratureSpec(1e-9, 1e-9, 0)


# root finding ------------------------------------------------------------

def test_bisect_linear():
    assert bisect(lambda x: x - 2, Bracket.of(lambda x: x - 2, 0, 4), 1e-12) == pytest.approx(2, abs=1e-12)


def test_bisect_log2():
    f = lambda x: math.exp(x) - 2
    assert bisect(f, Bracket.of(f, 0, 1), 1e-13) == pytest.approx(math.log(2), abs=1e-12)


def test_bisect_invalid_bracket():
    with pytest.raises(InvalidBracket):
        bisect(lambda x: x * x + 1, Bracket(0.0, 1.0, 1.0, 2.0), 1e-6)


@given(st.floats(-10, 10), st.floats(1e-9, 1e-2))
def test_bisect_iteration_bound_and_side(root, tol):
    calls = []

    def f(x):
        calls.append(x)
        return x - root

    lo, hi = root - 3.7, root + 11.1
    br = Bracket(lo, hi, f(lo), f(hi))
    calls.clear()
    got = bisect(f, br, tol, side="lo")
    assert len(calls) <= math.ceil(math.log2((hi - lo) / tol))
    assert got <= root + 1e-12 and root - got <= tol * (1 + 1e-9) + 1e-12


# minimisation ------------------------------------------------------------

def test_minimize_quadratic():
    x, fx = minimize_1d(lambda x: (x - 1) ** 2, 0.0, 3.0)
    assert x == pytest.approx(1.0, abs=3e-6)
    assert fx == pytest.approx(0.0, abs=1e-10)


def test_minimize_boundary():
    x, _ = minimize_1d(lambda x: x, 2.0, 5.0)
    assert x == pytest.approx(2.0, abs=3e-6)


def test_minimize_multimodal_uses_grid():
    f = lambda x: math.sin(5 * x) + 0.1 * x
    x, _ = minimize_1d(f, 0.0, 10.0)
    grid = np.linspace(0, 10, 200001)
    assert x == pytest.approx(grid[np.argmin(np.sin(5 * grid) + 0.1 * grid)], abs=1e-4)


def test_golden_section_unimodal():
    x, _ = golden_section(lambda x: (x - 0.3) ** 4 + 1, -1.0, 2.0, 1e-9)
    assert x == pytest.approx(0.3, abs=1e-3)
