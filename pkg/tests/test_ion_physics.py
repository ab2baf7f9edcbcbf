import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapcal.core import CONSTANTS, UM
from trapcal.ion_physics import (EquilibriumError, EquilibriumOptions, MultipleRootsWarning, UnstableAxisError,
                                 coulomb_force, coulomb_probe, curvature_for_frequency, equilibrium_positions,
                                 secular_frequency, single_ion_equilibrium, stable_equilibrium)

from oracles import brute_force_chain, harmonic

TWO_PI = 2 * np.pi
e, M, ke = CONSTANTS.e, CONSTANTS.M_ion, CONSTANTS.coulomb_k


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_chain_matches_energy_minimisation(n):
    f, phi = harmonic(TWO_PI * 150e3, x0=12 * UM, cubic=-3e8)
    start = 12 * UM + 8 * UM * (np.arange(n) - (n - 1) / 2)
    sol = equilibrium_positions(f, n, start)
    ref = brute_force_chain(phi, n, start)
    assert np.max(np.abs(sol.positions - ref)) < 1e-9


@pytest.mark.parametrize("f_khz", [190.0, 380.0, 600.0])
@pytest.mark.parametrize("strategy", ["md", "auto"])
def test_two_ion_spacing(f_khz, strategy):
    w = TWO_PI * f_khz * 1e3
    f, _ = harmonic(w)
    sol = equilibrium_positions(f, 2, opts=EquilibriumOptions(strategy=strategy))
    expect = (2 * ke * e**2 / (M * w**2)) ** (1 / 3)
    assert abs(np.diff(sol.positions)[0] - expect) < 1e-9


def test_md_relaxation_from_rough_start():
    f, _ = harmonic(TWO_PI * 200e3)
    sol = equilibrium_positions(f, 7, np.linspace(-40, 40, 7) * UM, EquilibriumOptions(strategy="md"))
    assert sol.md_steps > 0
    assert np.max(np.abs(coulomb_probe(sol.positions) - f(sol.positions)[0])) < 1e-3


def test_equilibrium_errors():
    f, _ = harmonic(TWO_PI * 200e3)
    with pytest.raises(ValueError):
        equilibrium_positions(f)
    with pytest.raises(ValueError):
        equilibrium_positions(f, 3, [0.0, 1e-6])
    with pytest.raises(ValueError):
        EquilibriumOptions(dt=-1.0)

    def push(x):
        return np.full_like(np.asarray(x, float), 50.0), np.zeros_like(np.asarray(x, float))

    with pytest.raises((EquilibriumError, ValueError)):
        equilibrium_positions(push, 2, [0.0, 10e-6], EquilibriumOptions(max_steps=5000, region=(-1e-3, 1e-3)))


def test_single_ion_root_finding():
    f, _ = harmonic(TWO_PI * 300e3, x0=17.3 * UM)
    assert single_ion_equilibrium(f, (-200 * UM, 200 * UM)) == pytest.approx(17.3 * UM, abs=1e-12)
    with pytest.raises(ValueError):
        single_ion_equilibrium(f, (50 * UM, 100 * UM))

    def two_roots(x):
        x = np.asarray(x, float)
        return -(x - 10 * UM) * (x + 60 * UM) * 1e12, (2 * x + 50 * UM) * 1e12

    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        x = single_ion_equilibrium(two_roots, (-100 * UM, 100 * UM))
    assert any(issubclass(i.category, MultipleRootsWarning) for i in w)
    assert x == pytest.approx(10 * UM, abs=1e-10)
    # only the confining root qualifies as stable
    assert stable_equilibrium(two_roots, -60 * UM, 200 * UM) == pytest.approx(10 * UM, abs=1e-10)


def test_secular_frequency_roundtrip():
    w = TWO_PI * 250e3
    assert secular_frequency(curvature_for_frequency(w)) == pytest.approx(w)
    with pytest.raises(UnstableAxisError):
        secular_frequency(0.0)
    with pytest.raises(UnstableAxisError):
        secular_frequency(np.array([1e6, -1.0]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-300, 300, allow_nan=False), min_size=2, max_size=12, unique=True))
def test_coulomb_forces_balance(xs):
    x = np.array(xs) * UM
    if np.min(np.diff(np.sort(x))) < 0.1 * UM:
        return
    F = coulomb_force(x)
    assert abs(F.sum()) <= 1e-9 * np.abs(F).max()
    # mirror image flips every force
    np.testing.assert_allclose(coulomb_force(-x), -F, rtol=1e-12)
    order = np.argsort(x)
    assert F[order[0]] < 0 < F[order[-1]]
