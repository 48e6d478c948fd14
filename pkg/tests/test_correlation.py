import math
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from conftest import random_baths, random_network
from varpolaron.correlation import (
    ScopeError,
    analytic_propagator,
    assemble_correlation_tables,
    brute_force_lambda,
    filon_cumulative,
    matsubara_poles,
    phi_xy,
    phi_yz,
    phi_zz,
    sample_propagators,
)
from varpolaron.expsum import ExponentialSum, correlation_expansion, fit_exponentials, rate_gamma
from varpolaron.network import Network
from varpolaron.spectral import DrudeLorentz, SuperOhmic
from varpolaron.units import cm, ev, kelvin_to_beta
from varpolaron.variational import fixed_solution, renorm_factor, solve_self_consistent

BETA = kelvin_to_beta(300)
SO = SuperOhmic.from_lambda(0.628, cm(300))


def _oracle(sd, alpha, beta, t, kind):
    """Plain adaptive quadrature of the propagator integrals with F written out."""
    def F(w):
        wt = w * math.tanh(0.5 * beta * w)
        return wt / (wt + alpha)

    coth = lambda w: 1.0 / math.tanh(0.5 * beta * w)
    if kind == "zz":
        fc = lambda w: sd(w) * (1 - F(w)) ** 2 * coth(w)
        fs = lambda w: sd(w) * (1 - F(w)) ** 2
    else:
        fc = lambda w: sd(w) * F(w) ** 2 * coth(w) / w**2
        fs = lambda w: sd(w) * F(w) ** 2 / w**2
    top = 60 * cm(300)
    kw = dict(limit=4000, epsabs=1e-13, epsrel=1e-12, points=[cm(30), cm(300), cm(1500)])
    re = integrate.quad(lambda w: fc(w) * math.cos(w * t), 1e-12, top, **kw)[0]
    im = integrate.quad(lambda w: fs(w) * math.sin(w * t), 1e-12, top, **kw)[0]
    return complex(re, -im)


# ---------------------------------------------------------------- propagators


def test_phi_xy_weak_frame_vanishes():
    for t in (0.0, 0.1, 1.0):
        assert phi_xy(SO, np.inf, BETA, t) == 0


def test_phi_xy_at_zero_is_log_renormalization():
    for alpha in (cm(10), cm(60), cm(400)):
        v = phi_xy(SO, alpha, BETA, 0.0)
        assert v.imag == 0
        assert v.real == pytest.approx(-2 * math.log(renorm_factor(SO, alpha, BETA)), rel=1e-8)


def test_phi_polaron_frame_weights_vanish():
    assert phi_zz(SO, 0.0, BETA, 0.2) == 0
    assert phi_yz(SO, 0.0, BETA, 0.2) == 0
    assert phi_yz(SO, np.inf, BETA, 0.2) == 0


def test_phi_zz_weak_frame_is_bare_correlation():
    t = 0.05
    assert phi_zz(SO, np.inf, BETA, t) == pytest.approx(_oracle(SO, np.inf, BETA, t, "zz"), rel=1e-7)


@pytest.mark.parametrize("kind", ["zz", "xy"])
def test_super_ohmic_propagators_vs_quadrature(kind):
    t, alpha = 0.05, cm(60)
    f = phi_zz if kind == "zz" else phi_xy
    assert f(SO, alpha, BETA, t) == pytest.approx(_oracle(SO, alpha, BETA, t, kind), rel=1e-7)


def test_sampled_propagators_match_pointwise_quadrature():
    alpha = cm(60)
    t = np.linspace(0, 0.5, 6)
    props = sample_propagators([SO], np.array([alpha]), BETA, t)
    for k, tk in enumerate(t):
        assert props.xy[0, k] == pytest.approx(phi_xy(SO, alpha, BETA, tk), rel=1e-7)
        assert props.zz[0, k] == pytest.approx(phi_zz(SO, alpha, BETA, tk), rel=1e-7, abs=1e-9)
        assert props.yz[0, k] == pytest.approx(phi_yz(SO, alpha, BETA, tk), rel=1e-7, abs=1e-9)
    assert props.xy[0, 0].imag == 0


def test_phi_xy_time_reversal_on_grid():
    t = np.linspace(-0.4, 0.4, 81)
    xy = sample_propagators([SO], np.array([cm(60)]), BETA, t).xy[0]
    np.testing.assert_allclose(xy[::-1], np.conj(xy), rtol=1e-12, atol=1e-14)


def test_phi_xy_decays():
    t = np.array([0.0, 4.0])
    xy = sample_propagators([SO], np.array([cm(60)]), BETA, t).xy[0]
    assert abs(xy[1]) < 1e-6 * abs(xy[0])


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        phi_xy(SO, 1.0, BETA, -0.1)


# ------------------------------------------------------------------- poles


def test_poles_zero_alpha_are_bare_matsubara():
    x = matsubara_poles(0.0, BETA, 6)
    np.testing.assert_allclose(x.imag, 2 * np.pi * np.arange(6) / BETA, rtol=1e-15)
    small = matsubara_poles(1e-10, BETA, 6)
    np.testing.assert_allclose(small.imag[1:], x.imag[1:], rtol=1e-9)
    assert small.imag[0] < 1e-3


def test_poles_split_zero_frequency():
    x = matsubara_poles(ev(0.1), BETA, 3)
    nu = 2 * np.pi / BETA
    assert 0 < x[0].imag < 0.5 * nu
    assert nu < x[1].imag < 1.5 * nu
    assert np.all(np.diff(x.imag) > 0)
    assert np.all(x.real == 0)


def test_poles_vs_bisection():
    alpha = ev(0.005)
    x = matsubara_poles(alpha, BETA, 6)
    T = 1 / BETA
    for k in range(1, 6):
        f = lambda y: y - alpha / math.tan(0.5 * BETA * y)
        lo, hi = 2 * np.pi * k * T, (2 * k + 1) * np.pi * T
        y = optimize.bisect(f, lo * (1 + 1e-14), hi * (1 - 1e-14), xtol=1e-14, maxiter=400)
        assert x[k].imag == pytest.approx(y, rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1e3), st.floats(1e-3, 1.0))
def test_poles_solve_root_equation(alpha, beta):
    x = matsubara_poles(alpha, beta, 5)
    y = x.imag
    T = 1 / beta
    k = np.arange(5)
    assert np.all(y >= 2 * np.pi * k * T) and np.all(y <= (2 * k + 1) * np.pi * T)
    # x + alpha coth(beta x / 2) = 0 with x = i y  <=>  y = alpha cot(beta y / 2)
    resid = y * np.sin(0.5 * beta * y) - alpha * np.cos(0.5 * beta * y)
    assert np.all(np.abs(resid) <= 1e-9 * (y + alpha))


def test_poles_preconditions():
    with pytest.raises(ValueError):
        matsubara_poles(1.0, BETA, 0)
    with pytest.raises(ValueError):
        matsubara_poles(-1.0, BETA, 2)


# ------------------------------------------------------- analytic propagator


def test_analytic_propagator_limits():
    sd = DrudeLorentz.single(ev(0.1), ev(0.1))
    alpha = ev(0.005)
    e = analytic_propagator(sd, alpha, BETA)
    assert np.all(e.gamma.real > 0)
    assert abs(e(50.0)) < 1e-12
    q = integrate.quad(lambda w: sd(w) * (w * math.tanh(0.5 * BETA * w) / (w * math.tanh(0.5 * BETA * w) + alpha)) ** 2
                       / (w**2 * math.tanh(0.5 * BETA * w)), 0, np.inf, limit=2000, epsrel=1e-12)[0]
    # the pole series converges like 1/N_m: the automatic cutoff is loose, a long one is tight
    assert e(0.0).real == pytest.approx(q, rel=1e-4)
    full = analytic_propagator(sd, alpha, BETA, n_m=2000)
    assert full(0.0).real == pytest.approx(q, rel=1e-6)
    assert abs(full(0.0).imag) < 1e-9 * abs(q)


def test_analytic_propagator_scope():
    with pytest.raises(ScopeError):
        analytic_propagator(SO, 1.0, BETA)
    with pytest.raises(ScopeError):
        analytic_propagator(DrudeLorentz.single(1.0, 1.0), 0.0, BETA)


# ---------------------------------------------------------------- fitting


def test_fit_recovers_single_exponential():
    t = np.linspace(0, 2, 401)
    c, g = 0.7 - 0.2j, 3.0 + 5.0j
    f = fit_exponentials(t, c * np.exp(-g * t), 1)
    assert f.a[0] == pytest.approx(c, abs=1e-8)
    assert f.gamma[0] == pytest.approx(g, abs=1e-8)
    assert f.max_residual < 1e-10


def test_fit_zero_function():
    f = fit_exponentials(np.linspace(0, 1, 21), np.zeros(21), 3)
    assert f.n_terms == 0
    assert np.all(f(np.linspace(0, 1, 5)) == 0)


def test_fit_rejects_nonuniform_grid():
    with pytest.raises(ValueError):
        fit_exponentials(np.array([0, 0.1, 0.3, 0.4]), np.ones(4), 1)


def test_exponential_sum_requires_decay():
    with pytest.raises(ValueError):
        ExponentialSum([1.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        ExponentialSum([1.0], [0.0], [-1.0 + 2j])


def test_exponential_sum_roundtrip():
    e = ExponentialSum([1 + 2j, 0.5], [0, 0.1j], [1.0, 2 + 3j], 1e-9)
    back = ExponentialSum.from_dict(__import__("json").loads(e.dumps()))
    t = np.linspace(0, 3, 7)
    np.testing.assert_array_equal(back(t), e(t))


def test_exponential_sum_closed_form_rate_with_linear_part():
    e = ExponentialSum([0.3 + 0.1j], [0.7 - 0.2j], [2.0 + 1.0j])
    w, t = 1.3, 0.8
    f = lambda s: np.exp(1j * w * s) * e(s)
    re = integrate.quad(lambda s: f(s).real, 0, t, epsabs=1e-14)[0]
    im = integrate.quad(lambda s: f(s).imag, 0, t, epsabs=1e-14)[0]
    assert e.rate(w, t) == pytest.approx(complex(re, im), rel=1e-10)


# -------------------------------------------------------------- expansion


def test_expansion_order_two_single_term():
    c, g = 0.4 + 0.1j, 2.0 + 0.5j
    phi = ExponentialSum([c], [0], [g])
    t = np.linspace(0, 3, 13)
    for sign in (1, -1):
        ex = correlation_expansion(phi, sign, order=2)
        ref = sign * c * np.exp(-g * t) + c**2 / 2 * np.exp(-2 * g * t)
        np.testing.assert_allclose(ex(t), ref, rtol=1e-14)


def test_expansion_of_zero():
    ex = correlation_expansion(ExponentialSum.empty(), 1)
    assert ex.n_terms == 0
    assert np.all(ex(np.linspace(0, 1, 4)) == 0)
    assert rate_gamma(ex, 1.0, 2.0) == 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 6))
def test_expansion_term_count_and_bound(seed, m, order):
    rng = np.random.default_rng(seed)
    a = 0.4 * (rng.normal(size=m) + 1j * rng.normal(size=m)) / m
    g = rng.uniform(0.5, 5, m) + 1j * rng.normal(size=m)
    phi = ExponentialSum(a, np.zeros(m), g)
    t = np.linspace(0, 4, 201)
    pm = float(np.abs(phi(t)).max())
    lo = correlation_expansion(phi, 1, order=order, phi_max=pm)
    hi = correlation_expansion(phi, 1, order=2 * order, phi_max=pm)
    assert lo.n_terms == comb(m + order, order) - 1
    assert np.all(lo.Gamma.real > 0)
    # bound on the Taylor remainder covers both the exact and the refined value
    assert np.abs(lo(t) - hi(t)).max() <= lo.bound * (1 + 1e-9) + 1e-14
    assert np.abs(lo(t) - np.expm1(phi(t))).max() <= lo.bound * (1 + 1e-9) + 1e-14


def test_expansion_cap():
    phi = ExponentialSum(np.full(30, 0.1), np.zeros(30), np.arange(1, 31))
    with pytest.raises(ValueError, match="cap"):
        correlation_expansion(phi, 1, order=8, cap=1000)


# ------------------------------------------------------------------- rates


def test_rate_gamma_limits():
    ex = correlation_expansion(ExponentialSum([0.3 + 0.2j], [0], [2.0 + 1.0j]), 1, order=1)
    w = np.linspace(-5, 5, 11)
    assert np.all(rate_gamma(ex, w, 0.0) == 0)
    np.testing.assert_allclose(rate_gamma(ex, w), ex.F[0] / (ex.Gamma[0] - 1j * w), rtol=1e-14)


def test_rate_gamma_resonant_term():
    ex = correlation_expansion(ExponentialSum([0.5], [0], [1e-14 + 3.0j]), 1, order=1)
    assert rate_gamma(ex, 3.0, 2.0) == pytest.approx(0.5 * 2.0, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(-20, 20))
def test_rate_gamma_increment_is_integral(t1, t2, w):
    t1, t2 = sorted((t1, t2))
    phi = ExponentialSum([0.5 + 0.3j, -0.2 + 0.1j], [0, 0], [1.5 + 4j, 6.0 - 2j])
    ex = correlation_expansion(phi, -1, order=6)
    f = lambda s: np.exp(1j * w * s) * ex(s)
    re = integrate.quad(lambda s: f(s).real, t1, t2, epsabs=1e-13, limit=200)[0]
    im = integrate.quad(lambda s: f(s).imag, t1, t2, epsabs=1e-13, limit=200)[0]
    d = rate_gamma(ex, w, t2) - rate_gamma(ex, w, t1)
    assert d == pytest.approx(complex(re, im), rel=1e-9, abs=1e-12)


def test_filon_cumulative_on_exponential():
    g, w = 2.0 + 1.0j, np.array([-3.0, 0.0, 4.0])
    t = np.linspace(0, 2, 401)
    got = filon_cumulative(np.exp(-g * t)[None], t[1] - t[0], w, stride=40)[0]
    ts = t[::40]
    z = g + 1j * w[:, None]
    ref = (1 - np.exp(-z * ts)) / z
    np.testing.assert_allclose(got, ref, rtol=1e-8, atol=1e-12)


# ---------------------------------------------------------- correlation tables


def _tables(net, baths, sol, k=3):
    t = np.linspace(0, 0.3, 7)
    props = sample_propagators(baths, sol.alpha, BETA, t)
    tab = assemble_correlation_tables(sol, baths, net, props)
    return tab, props, k


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 4))
def test_tables_match_quadruple_loop(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    V = net.couplings.copy()
    V[(V == 0) & ~np.eye(n, dtype=bool)] = cm(1.0)
    net = Network(net.energies, V)
    baths = random_baths(rng, n)
    sol = solve_self_consistent(net, baths, BETA)
    tab, props, k = _tables(net, baths, sol)
    assert tab.n_ops == n * n
    L = tab.lambda_matrix(k=k)
    ref = brute_force_lambda(sol, net, props.xy[:, k], props.zz[:, k], props.yz[:, k])
    scale = np.abs(ref).max()
    assert np.abs(L - ref).max() <= 1e-12 * scale


def test_tables_sparsity():
    net = Network.from_cm([0, 100, 200, 300], np.zeros((4, 4)))
    baths = [SO] * 4
    sol = fixed_solution(net, baths, BETA, "weak")
    tab, _, _ = _tables(net, baths, sol)
    assert tab.pairs == []
    assert tab.n_ops == 4
    assert set(tab.coeffs) == {(a, a) for a in range(4)}
    assert all(tab.basis[f][0] == "zz" for cf in tab.coeffs.values() for f in cf)


def test_tables_chain_materializes_only_shared_pairs():
    V = np.diag([50.0] * 4, 1)
    net = Network.from_cm([0, 80, 160, 240, 320], V + V.T)
    baths = [SO] * 5
    sol = solve_self_consistent(net, baths, BETA)
    tab, props, k = _tables(net, baths, sol)
    assert len(tab.pairs) == 4
    for (i, j) in tab.coeffs:
        ki, kj = tab.op_kind[i], tab.op_kind[j]
        if ki[0] != "z" and kj[0] != "z":
            assert set(ki[1:]) & set(kj[1:])


def test_lambda_xx_polaron_at_zero():
    net = Network.from_cm([0, 100], [[0, 80], [80, 0]])
    baths = [SO, SO]
    sol = fixed_solution(net, baths, BETA, "polaron")
    assert np.all(sol.B > 0)
    tab, props, _ = _tables(net, baths, sol)
    L = tab.lambda_matrix(k=0)
    x = tab.op_kind.index(("x", 0, 1))
    phi0 = props.xy[0, 0].real
    Vt = net.couplings[0, 1] * sol.B[0] * sol.B[1]
    ref = 0.5 * Vt**2 * (np.exp(2 * phi0) + np.exp(-2 * phi0) - 2)
    assert L[x, x].real == pytest.approx(ref, rel=1e-12)
    assert L[x, x].real >= 0
    assert abs(L[x, x].imag) < 1e-12 * ref


def test_tables_reject_missing_bath():
    net = Network.from_cm([0, 100], [[0, 80], [80, 0]])
    sol = fixed_solution(net, [SO, SO], BETA, "weak")
    with pytest.raises(ValueError, match="missing"):
        assemble_correlation_tables(sol, [SO], net)
