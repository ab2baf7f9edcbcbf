import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapcal.calibrate_interp import (UnitPotentialCurve, align_and_average, calibrate_interpolation,
                                      central_difference_field, find_sweeps, fit_lorentz_field,
                                      integrate_probe_potential, unit_potential_pair)
from trapcal import analytic_field as af
from trapcal.core import UM, VoltageSetting
from trapcal.ion_physics import equilibrium_positions
from trapcal.parametric import LorentzParams, eval_lorentz, eval_stray
from trapcal.synthetic import IonStringObservation, ROI

TWO_PI = 2 * np.pi


def harmonic_chain(D0, x0, n):
    f = lambda x: (-D0 * (np.asarray(x) - x0), np.full(np.shape(x), D0))
    init = x0 + 6 * UM * (np.arange(n) - (n - 1) / 2)
    return equilibrium_positions(f, n, init).positions


def test_integrated_potential_of_harmonic_chain():
    D0 = 5e5
    x = harmonic_chain(D0, 3 * UM, 15)
    xs, phi = integrate_probe_potential(x)
    exact = 0.5 * D0 * ((xs - 3 * UM) ** 2 - (xs[0] - 3 * UM) ** 2)
    assert phi[0] == 0.0
    # trapezoid is exact for a linear field
    np.testing.assert_allclose(phi, exact, atol=1e-12)


def test_integrate_needs_two_ions():
    with pytest.raises(ValueError):
        integrate_probe_potential([1e-6])


def test_unit_potential_pair_recovers_linear_change():
    # a uniform extra field g per volt tilts the potential by -g x per volt
    D0, g, delta = 6e5, 40.0, 0.02
    xa = harmonic_chain(D0, 0.0, 12)
    xb = harmonic_chain(D0, g * delta / D0, 12)
    u0 = VoltageSetting({1: 0.0})
    c = unit_potential_pair(IonStringObservation(u0, xa, 0.0), IonStringObservation(u0.with_voltage(1, delta), xb, 0.0),
                            1, delta)
    assert c.n_overlap >= 3
    slope = np.polyfit(c.x, c.phi, 1)[0]
    assert slope == pytest.approx(-g, rel=1e-3)
    # no overlap
    xc = xa + 500 * UM
    assert unit_potential_pair(IonStringObservation(u0, xa, 0.0), IonStringObservation(u0, xc, 0.0), 1, delta) is None
    with pytest.raises(ValueError):
        unit_potential_pair(IonStringObservation(u0, xa, 0.0), IonStringObservation(u0, xb, 0.0), 1, 0.0)


def test_find_sweeps_groups_runs():
    base = VoltageSetting({4: 0.0, 5: 1.0})
    obs = []
    for j in range(5):
        obs.append(IonStringObservation(base.with_voltage(4, 0.02 * j), np.array([0.0, 1e-5]), 0.0))
    for j in range(4):
        obs.append(IonStringObservation(base.with_voltage(5, 1.0 - 0.02 * j), np.array([0.0, 1e-5]), 0.0))
    sw = find_sweeps(obs)
    assert [(s.k, len(s.strings)) for s in sw] == [(4, 5), (5, 4)]
    assert sw[1].delta == pytest.approx(-0.02)


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(6)), st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_averaging_ignores_order_and_offsets(perm, offsets):
    grid = np.arange(-100, 101) * UM
    truth = eval_lorentz(LorentzParams(1.4e-5, 340 * UM, 0.0), grid)[0]
    curves = []
    for j, off in enumerate(offsets):
        sl = slice(20 * j, 20 * j + 80)
        curves.append(UnitPotentialCurve(8, grid[sl], truth[sl] + off, 5))
    x1, p1, n1, _ = align_and_average(curves)
    x2, p2, n2, _ = align_and_average([curves[i] for i in perm])
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    np.testing.assert_array_equal(n1, n2)
    # averaged curve equals the truth up to one constant
    d = p1 - np.interp(x1, grid, truth)
    assert np.ptp(d) < 1e-12


def test_field_fit_recovers_lorentz():
    p = LorentzParams(1.4e-5, 347 * UM, -157 * UM)
    x = np.arange(-110, 111) * UM
    _, ex, _ = eval_lorentz(p, x)
    phi = eval_lorentz(p, x)[0]
    np.testing.assert_allclose(central_difference_field(x, phi), ex, rtol=1e-4, atol=1e-3)
    q = fit_lorentz_field(x, ex, p.x_c)
    assert q.A == pytest.approx(p.A, rel=1e-8)
    assert q.gamma == pytest.approx(p.gamma, rel=1e-8)


def test_noiseless_interpolation_calibration(noiseless, layout, truth):
    model, diag = calibrate_interpolation(noiseless, layout)
    x = np.arange(-110, 111) * UM
    for k in layout.active:
        # reference: the same field fit applied to the closed-form unit field
        ref = fit_lorentz_field(x, af.pair_fields(layout, k, x, layout.y0)[1], layout.pair(k).x_center)
        assert model.pairs[k].gamma == pytest.approx(ref.gamma, rel=0.03)
        assert model.pairs[k].A == pytest.approx(ref.A, rel=0.03)
        d = diag["pairs"][str(k)]
        assert len(d["x_um"]) == len(d["phi_avg"]) == len(d["Ex_raw"]) == len(d["n_overlap"])
    xs = np.linspace(*ROI, 29)
    err = eval_stray(model.stray, xs)[0] - eval_stray(truth.stray, xs)[0]
    assert np.max(np.abs(err)) < 1.0


def test_interpolation_needs_every_pair(noiseless, layout):
    from trapcal.synthetic import Dataset

    partial = Dataset(strings=[s for s in noiseless.strings if not s.setting.id.startswith("p4_")])
    with pytest.raises(ValueError):
        calibrate_interpolation(partial, layout)


def test_noisy_curves_fluctuate_most_at_region_ends(truth, plan, layout):
    from trapcal.synthetic import NoiseSpec, generate_dataset

    _, diag = calibrate_interpolation(generate_dataset(truth, plan, noise=NoiseSpec(rng_seed=1)), layout)
    for k, d in diag["pairs"].items():
        x = np.array(d["x_um"])
        r = np.array(d["Ex_raw"]) - np.array(d["Ex_fit"])
        q = (x - x.min()) / np.ptp(x)
        ends, mid = (q < 0.15) | (q > 0.85), (q > 0.35) & (q < 0.65)
        assert np.var(r[ends]) > np.var(r[mid]), k
        assert np.mean(np.array(d["n_overlap"])[ends]) < np.mean(np.array(d["n_overlap"])[mid])
