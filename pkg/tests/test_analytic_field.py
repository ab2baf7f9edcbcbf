import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trapcal import analytic_field as af
from trapcal.core import UM, ElectrodeRect

from oracles import richardson as rich, solid_angle_potential


@pytest.mark.parametrize("point", [(0.0, 1.0, 0.0), (0.3, 0.5, -0.2), (2.5, 0.8, 1.5), (-1.0, 3.0, 0.4)])
def test_rect_potential_matches_quadrature(point):
    rect = ElectrodeRect(-0.5, -0.7, 0.9, 0.6)
    assert abs(af.rect_potential(rect, *point) - solid_angle_potential(rect, *point)) < 1e-8


def test_square_viewed_from_cube_centre():
    rect = ElectrodeRect(-1.0, -1.0, 1.0, 1.0)
    assert af.rect_potential(rect, 0.0, 1.0) == pytest.approx(1 / 3, abs=1e-14)


def test_nonpositive_height_rejected():
    rect = ElectrodeRect(0.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        af.rect_potential(rect, 0.0, 0.0)
    with pytest.raises(ValueError):
        af.rect_axial_derivatives(rect, 0.0, -1.0)


def test_derivatives_match_finite_differences():
    rng = np.random.default_rng(11)
    rect = ElectrodeRect(-73.5 * UM, 257 * UM, 73.5 * UM, 1197 * UM)
    x = rng.uniform(-800, 800, 1000) * UM
    y = rng.uniform(60, 300, 1000) * UM
    z = rng.uniform(-100, 100, 1000) * UM
    h = 1e-3 * UM

    ex, d = af.rect_axial_derivatives(rect, x, y, z)
    ex_fd = -rich(lambda s: af.rect_potential(rect, x + s, y, z), 10 * h)
    d_fd = -rich(lambda s: af.rect_axial_derivatives(rect, x + s, y, z)[0], 10 * h)
    ey_fd = -rich(lambda s: af.rect_potential(rect, x, y + s, z), 10 * h)
    ey = af.rect_height_field(rect, x, y, z)
    for a, b in ((ex, ex_fd), (d, d_fd), (ey, ey_fd)):
        scale = np.max(np.abs(a))
        assert np.max(np.abs(a - b)) / scale < 1e-6


def test_pair_profile_symmetric_about_centre(layout):
    xs = np.linspace(-500, 500, 101) * UM
    for k in (4, 8, 12):
        xc = layout.pair(k).x_center
        phi, ex, d = af.pair_fields(layout, k, xc + xs, layout.y0)
        np.testing.assert_allclose(phi, phi[::-1], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(ex, -ex[::-1], rtol=1e-9, atol=1e-9)
        assert np.argmax(phi) == 50


def test_height_sensitivity_regression(layout):
    # frozen from the quadrature oracle (solid-angle kernel derivative, dy = 1 um)
    xs = np.array([0.0, 50.0, 73.5, 150.0, 300.0]) * UM
    ref = [0.0, 0.04226605472468137, 0.06478772465921878, 0.14782128229927594, 0.23784286132710974]
    got = af.height_sensitivity(layout, 8, 150 * UM, 1 * UM, xs)
    np.testing.assert_allclose(got, ref, rtol=1e-8, atol=1e-12)
    assert np.all(af.height_sensitivity(layout, 8, 150 * UM, 0.0, xs) == 0)


def test_profile_csv(tmp_path, layout):
    samples = af.pair_profile(layout, 8, layout.y0, np.linspace(-100, 100, 5) * UM)
    path = tmp_path / "p.csv"
    af.write_profile_csv(path, samples)
    lines = path.read_text().splitlines()
    assert lines[0] == "x_um,phi_V,Ex_V_per_m,D_V_per_m2"
    assert len(lines) == 6


finite = dict(allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(-5, 5, **finite), y=st.floats(0.05, 5, **finite), z=st.floats(-5, 5, **finite),
       w=st.floats(0.1, 3, **finite), l=st.floats(0.1, 3, **finite))
def test_potential_bounded_and_additive(x, y, z, w, l):
    left = ElectrodeRect(-w, 0.0, 0.0, l)
    right = ElectrodeRect(0.0, 0.0, w, l)
    whole = ElectrodeRect(-w, 0.0, w, l)
    p = af.rect_potential(whole, x, y, z)
    assert 0.0 < p < 1.0
    assert p == pytest.approx(af.rect_potential(left, x, y, z) + af.rect_potential(right, x, y, z), abs=1e-12)
