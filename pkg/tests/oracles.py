"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
from scipy.integrate import dblquad
from scipy.optimize import minimize

from trapcal.core import CONSTANTS, UM

e, M, ke = CONSTANTS.e, CONSTANTS.M_ion, CONSTANTS.coulomb_k


def solid_angle_potential(rect, x, y, z=0.0):
    """Reference: numerically integrate y / (2 pi R^3) over the electrode."""
    f = lambda zz, xx: y / (2 * np.pi * ((xx - x) ** 2 + y**2 + (zz - z) ** 2) ** 1.5)
    val, _ = dblquad(f, rect.x1, rect.x2, rect.z1, rect.z2, epsabs=1e-13, epsrel=1e-13)
    return val


def richardson(f, step):
    """Richardson-extrapolated central difference of ``f(s)`` at ``s = 0``."""
    d1 = (f(step) - f(-step)) / (2 * step)
    d2 = (f(step / 2) - f(-step / 2)) / step
    return (4 * d2 - d1) / 3


def harmonic(omega, x0=0.0, cubic=0.0):
    """Field of the potential (M w^2 / 2e) u^2 + cubic u^3, u = x - x0."""
    D0 = M * omega**2 / e

    def f(x):
        u = np.asarray(x, dtype=float) - x0
        return -(D0 * u + 3 * cubic * u * u), D0 + 6 * cubic * u

    def phi(x):
        u = np.asarray(x, dtype=float) - x0
        return 0.5 * D0 * u * u + cubic * u**3

    return f, phi


def brute_force_chain(phi, n, start):
    """Reference: minimise the total energy directly, coordinates in um."""
    scale = e * phi(np.array([start[0] + 10 * UM]))[0] + 1e-30

    def energy(xu):
        x = xu * UM
        d = np.abs(x[:, None] - x[None, :])[np.triu_indices(n, 1)]
        return (e * np.sum(phi(x)) + ke * e**2 * np.sum(1 / d)) / abs(scale)

    res = minimize(energy, start / UM, method="Powell", options={"xtol": 1e-10, "ftol": 1e-15, "maxiter": 200000})
    res = minimize(energy, res.x, method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-16, "maxiter": 200000, "maxfev": 400000})
    return np.sort(res.x) * UM
