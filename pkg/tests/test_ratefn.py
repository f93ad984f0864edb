import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brwre.env import EnvironmentSpec, sample_path
from brwre.model import CategoricalSteps, Offspring, ReproductionLaw, StateLaw, categorical_model
from brwre.ratefn import (RateFunction, RateFunctionError, alpha0_inf, conjugate_at_gradient, empirical_pressure,
                          grad_lambda, in_I, lam, legendre, region, spectrum_curve, truncated_rate)
from brwre.sim import run_generations

DET = EnvironmentSpec.deterministic()
IID = EnvironmentSpec.iid([0.5, 0.5])


def binary_star(a):
    return a * math.atanh(a) + 0.5 * math.log(1 - a * a) - math.log(2)


def test_lambda_examples(binary, gauss2):
    rf = RateFunction(binary, DET)
    assert lam(rf, 1.0) == pytest.approx(math.log(2 * math.cosh(1)), rel=1e-14)
    assert lam(rf, 1.0) == pytest.approx(1.126928, abs=5e-7)
    rf2 = RateFunction(gauss2, IID)
    assert lam(rf2, 1.0) == pytest.approx(math.log(2) + 0.75, rel=1e-14)
    assert lam(rf2, 0.0) == pytest.approx(math.log(2))


def test_stationary_weights_used(gauss2, sym_markov):
    rf = RateFunction(gauss2, sym_markov)
    assert lam(rf, 2.0) == pytest.approx(math.log(2) + 1.5 * 2.0, rel=1e-14)
    assert grad_lambda(rf, 0.5)[0] == pytest.approx(0.75)


def test_subcritical_rejected():
    law = ReproductionLaw(1, (StateLaw(Offspring.fixed(1), CategoricalSteps(((1.0,), (-1.0,)), (0.5, 0.5))),))
    with pytest.raises(RateFunctionError):
        RateFunction(law, DET)
    RateFunction(law, DET, require_supercritical=False)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
def test_lambda_convex(a, b, w):
    rf = RateFunction(categorical_model([[1.0], [-1.0], [5.0], [-5.0]], [0.1, 0.2, 0.3, 0.4]), DET)
    mid = w * a + (1 - w) * b
    assert lam(rf, mid) <= w * lam(rf, a) + (1 - w) * lam(rf, b) + 1e-12


def test_legendre_examples(binary, gauss2, sym_markov):
    rf = RateFunction(gauss2, sym_markov)
    r = legendre(rf, [0.0])
    assert r.converged and r.value == pytest.approx(-math.log(2), abs=1e-10) and abs(r.t[0]) < 1e-8
    r = legendre(RateFunction(binary, DET), [0.4])
    assert r.value == pytest.approx(binary_star(0.4), abs=1e-10)
    assert r.value == pytest.approx(-0.610864, abs=5e-7)


def test_legendre_gradient_identity():
    law = categorical_model([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [0.5, -0.5]], [0.3, 0.3, 0.2, 0.2], b=3)
    rf = RateFunction(law, DET)
    g = np.random.default_rng(0)
    for t in g.uniform(-1.5, 1.5, size=(50, 2)):
        r = legendre(rf, rf.grad(t))
        assert r.converged
        assert r.value == pytest.approx(conjugate_at_gradient(rf, t), abs=1e-8)


def test_legendre_boundary_and_outside(binary):
    rf = RateFunction(binary, DET)
    edge = legendre(rf, [1.0])
    assert edge.value == pytest.approx(0.0, abs=1e-8)
    out = legendre(rf, [1.5])
    assert not out.converged and out.value > 10


def test_in_I_examples(binary, gauss):
    rf = RateFunction(binary, DET)
    assert in_I(rf, 0.0) and conjugate_at_gradient(rf, 0.0) == pytest.approx(-math.log(2))
    assert in_I(rf, 3.0)
    assert conjugate_at_gradient(rf, 3.0) == pytest.approx(3 * math.tanh(3) - math.log(2 * math.cosh(3)), rel=1e-12)
    rg = RateFunction(gauss, DET)
    assert in_I(rg, 1.0) and not in_I(rg, 1.2)
    edge = math.sqrt(2 * math.log(2))
    assert in_I(rg, edge - 1e-6) and not in_I(rg, edge + 1e-6)


def test_alpha0_examples(binary):
    r = alpha0_inf(binary, 0, [0.0], 0.1)
    assert r.value == pytest.approx(2 * math.cos(0.1), abs=1e-4)
    assert r.value >= 2 * math.cos(0.1) - 1e-12
    small = alpha0_inf(binary, 0, [0.3 + 0.2j], 1e-6)
    assert small.value == pytest.approx(abs(2 * np.cosh(0.3 + 0.2j)), rel=1e-5)
    trivial = ReproductionLaw(1, (StateLaw(Offspring.fixed(1), CategoricalSteps(((0.0,),), (1.0,))),))
    assert alpha0_inf(trivial, 0, [0.5], 0.3).value == pytest.approx(1.0)


def test_alpha0_2d_budget():
    law = categorical_model([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5])
    r = alpha0_inf(law, 0, [0.2, 0.1], 0.1)
    assert r.points <= 2_000_000 and r.value > 0


def test_region_report(binary, gauss):
    rep = region(RateFunction(binary, DET), 0.5, delta=0.1)
    assert rep.in_I and rep.in_J_image
    assert rep.legendre_value == pytest.approx(rep.conjugate_value, abs=1e-8)
    # binary: E_xi Z~_1(t)^p = (2 cosh t)^p exactly
    for p, val, se in rep.omega1_diag:
        assert val == pytest.approx(p * math.log(2 * math.cosh(0.5)), rel=1e-12) and se == 0
    assert np.isfinite(rep.omega2_diag[1])
    rg = region(RateFunction(gauss, DET), 0.5, samples=50_000)
    for p, val, se in rg.omega1_diag:
        assert se > 0 and val > 0


def test_spectrum_curve(binary):
    rf = RateFunction(binary, DET)
    alphas = np.linspace(-1, 1, 21)
    rows = spectrum_curve(rf, alphas)
    vals = {round(float(r["alpha"][0]), 6): r for r in rows}
    assert vals[0.0]["dimension"] == pytest.approx(math.log(2), abs=1e-10)
    assert vals[1.0]["dimension"] == pytest.approx(0.0, abs=1e-8) and not vals[1.0]["in_J_tilde"]
    assert not vals[-1.0]["in_J_tilde"] and vals[0.5]["in_J_tilde"]
    for a in alphas:
        assert vals[round(a, 6)]["dimension"] == pytest.approx(vals[round(-a, 6)]["dimension"], abs=1e-8)


def test_empirical_pressure_binary_equality(binary):
    run = run_generations(binary, sample_path(DET, 9, 0), 9, seed=0)
    rf = RateFunction(binary, DET)
    for row in empirical_pressure(run, np.linspace(-1, 1, 5), rf):
        assert row["pressure"] == pytest.approx(math.log(2 * math.cosh(row["t"][0])), rel=1e-12)
        assert row["pressure"] == pytest.approx(row["Lambda"], rel=1e-12)


def test_empirical_pressure_t0_is_counts(gauss):
    run = run_generations(gauss, sample_path(DET, 6, 0), 6, seed=1)
    row = empirical_pressure(run, [[0.0]])[0]
    assert row["pressure"] == pytest.approx(math.log(run.frame(6).size) / 6)


def test_truncated_rate(four_step):
    rf = RateFunction(four_step, DET)
    ts = np.linspace(-2, 2, 21)
    tab = truncated_rate(rf, [1, 2, 4, 8, 16], ts, [[0.0], [0.3]])
    assert np.allclose(tab.lam[0], np.log(0.5 * np.cosh(ts)), atol=1e-14)
    assert np.allclose(tab.lam[1], np.log(np.cosh(ts)), atol=1e-14)
    assert np.allclose(tab.lam[2], np.log(np.cosh(ts)), atol=1e-14)
    assert np.allclose(tab.lam[3], tab.lam[-1], atol=1e-14)
    assert np.all(np.diff(tab.lam, axis=0) >= -1e-14)


def test_vacuous_truncation(binary):
    rf = RateFunction(binary, DET)
    tr = rf.truncated(50.0)
    for t in (-1.0, 0.2, 2.0):
        assert tr(t) == pytest.approx(rf(t), abs=1e-10)
    assert legendre(tr, [0.3]).value == pytest.approx(legendre(rf, [0.3]).value, abs=1e-10)


def test_step_constant(gauss):
    rf = RateFunction(gauss, DET)
    from scipy.stats import chi2
    assert rf.step_constant(1.0) == pytest.approx(1 / chi2.cdf(1.0, 1), rel=1e-12)
