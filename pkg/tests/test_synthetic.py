import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapcal.core import UM, VoltageSetting
from trapcal.ion_physics import coulomb_probe, secular_frequency
from trapcal.synthetic import (NOISELESS, NoiseSpec, build_truth, design_well, generate_dataset, ion_count_schedule,
                               recheck_dataset, sweep_protocol)

TWO_PI = 2 * np.pi


def test_truth_tables_match_closed_form(truth):
    u = VoltageSetting({k: np.sin(k) for k in truth.keys})
    x = np.linspace(-300, 300, 211) * UM
    E, D = truth.field(u)(x)
    _, ex, d = truth.unit_fields(x)
    from trapcal.parametric import eval_stray

    es, ds = eval_stray(truth.stray, x)
    V = u.vector(truth.keys)
    np.testing.assert_allclose(E, V @ ex + es, rtol=1e-7, atol=1e-6)
    np.testing.assert_allclose(D, V @ d + ds, rtol=1e-5, atol=1e-1)


def test_height_modes(layout, truth):
    vt = build_truth(layout, truth.stray, "voltage_dependent")
    u = VoltageSetting({k: 1.0 for k in layout.active})
    assert truth.height(u) == layout.y0
    assert vt.height(u) == pytest.approx(layout.y0 + vt.beta.sum())
    assert np.all(vt.beta < 0)
    with pytest.raises(ValueError):
        build_truth(layout, truth.stray, "floating")


def test_sweep_protocol_steps():
    base = VoltageSetting({4: 0.5, 5: -1.0})
    s = sweep_protocol(5, base, 0.02, 31)
    assert len(s) == 31
    np.testing.assert_allclose(np.diff([u[5] for u in s]), 0.02)
    assert all(u[4] == 0.5 for u in s)
    assert s[3].id == "p5_s03"


@pytest.mark.parametrize("x0,f_khz", [(-80 * UM, 190.0), (0.0, 300.0), (90 * UM, 600.0)])
def test_design_well(truth, x0, f_khz):
    u = design_well(truth, x0, TWO_PI * f_khz * 1e3)
    E, D = truth.field(u)(np.array([x0]))
    assert abs(E[0]) < 1e-6
    assert secular_frequency(D[0]) == pytest.approx(TWO_PI * f_khz * 1e3, rel=1e-6)


def test_ion_counts_within_range():
    counts = ion_count_schedule(500, (6, 19), np.random.default_rng(3))
    assert min(counts) >= 6 and max(counts) <= 19
    assert np.any(np.diff(counts) != 0)


def test_noiseless_strings_are_equilibria(truth, noiseless):
    for obs in noiseless.strings[::25]:
        E, _ = truth.field(obs.setting)(obs.positions)
        np.testing.assert_allclose(coulomb_probe(obs.positions), E, atol=1e-3)


def test_reference_scale_dataset(plan, noiseless):
    assert len(plan.sweeps) == 9
    assert all(s.n_steps >= 30 and abs(s.delta) == pytest.approx(0.02) for s in plan.sweeps)
    assert len(noiseless.freqs) == 31 and noiseless.n_fit_freqs == 20
    assert len(noiseless.singles) == 2
    assert noiseless.n_position_points > 3500
    assert not noiseless.report["skipped"]
    sizes = {o.positions.size for o in noiseless.strings}
    assert min(sizes) >= 6 and max(sizes) <= 19
    f = np.array([o.omega_x for o in noiseless.freqs]) / TWO_PI / 1e3
    assert f[:20].min() == pytest.approx(190) and f[:20].max() == pytest.approx(380)
    assert f[20:].max() == pytest.approx(600)


def test_seeded_noise_is_reproducible(truth, plan, noiseless):
    a = generate_dataset(truth, plan, noise=NoiseSpec(rng_seed=4))
    b = generate_dataset(truth, plan, noise=NoiseSpec(rng_seed=4))
    c = generate_dataset(truth, plan, noise=NoiseSpec(rng_seed=5))
    xa = np.concatenate([o.positions for o in a.strings])
    assert np.array_equal(xa, np.concatenate([o.positions for o in b.strings]))
    assert not np.array_equal(xa, np.concatenate([o.positions for o in c.strings]))
    clean = generate_dataset(truth, plan, noise=NoiseSpec(0.0, 0.0, rng_seed=4))
    resid = xa - np.concatenate([o.positions for o in clean.strings])
    assert np.std(resid) == pytest.approx(0.4 * UM, rel=0.05)


def test_magnification_bias_scales_about_centre(truth, plan, noiseless):
    b = generate_dataset(truth, plan, noise=NoiseSpec(0.0, 0.0, magnification_bias=0.005))
    for o0, o1 in zip(noiseless.strings[:40], b.strings[:40]):
        np.testing.assert_allclose(o1.positions, 1.005 * o0.positions, rtol=1e-12)
        np.testing.assert_allclose(coulomb_probe(o1.positions), coulomb_probe(o0.positions) / 1.005**2, rtol=1e-9)


def test_recheck_dataset(truth, plan):
    ds = recheck_dataset(truth, plan, NOISELESS)
    assert len(ds.strings) == len(plan.freq_settings)
    assert all(o.positions.size == 8 for o in ds.strings)
    assert len(ds.singles) == 2


@settings(max_examples=30, deadline=None)
@given(sp=st.floats(0.0, 2.0), sf=st.floats(0.0, 5.0), bias=st.floats(-0.02, 0.02))
def test_noise_spec_accepts_valid(sp, sf, bias):
    n = NoiseSpec(sp * UM, TWO_PI * sf * 1e3, bias)
    assert n.sigma_pos >= 0 and n.sigma_freq >= 0


def test_noise_spec_rejects_negative():
    with pytest.raises(ValueError):
        NoiseSpec(sigma_pos=-1.0)
