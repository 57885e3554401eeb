import numpy as np
import pytest

from branchforge.fitting import fit_convergence_order, fit_power_law


def test_exact_power_law_recovered():
    t = np.array([0.5, 0.25, 0.125, 0.0625])
    y = 3.0 * t**2.54
    slope, amp, resid = fit_power_law(t, y)
    assert slope == pytest.approx(2.54, abs=1e-12)
    assert amp == pytest.approx(np.log(3.0), abs=1e-12)
    assert resid < 1e-13


def test_noise_shows_in_residual():
    rng = np.random.default_rng(5)
    t = np.geomspace(1e-3, 1, 20)
    y = t**1.5 * np.exp(rng.normal(0, 0.05, 20))
    slope, _, resid = fit_power_law(t, y)
    assert slope == pytest.approx(1.5, abs=0.1)
    assert 0.005 < resid < 0.2


def test_nonpositive_samples_dropped():
    slope, _, resid = fit_power_law([1.0, 0.5, 0.25], [1.0, 0.0, -2.0])
    assert not np.isfinite(resid)


def test_convergence_order_wrapper():
    h = np.array([0.1, 0.05, 0.025])
    p, resid = fit_convergence_order(h, 7.0 * h**2)
    assert p == pytest.approx(2.0, abs=1e-10)
