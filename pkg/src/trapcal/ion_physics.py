"""Ions as field probes: Coulomb force balance, chain equilibria and secular
frequencies.

A *field* here is any callable ``x -> (E, D)`` returning the axial field
(V/m) and curvature ``D = -dE/dx`` (V/m^2) at an array of positions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import CONSTANTS, UM, PhysicalConstants

Field = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class EquilibriumError(RuntimeError):
    pass


class UnstableAxisError(ValueError):
    """Raised when the axial curvature is not confining (D <= 0)."""


class MultipleRootsWarning(UserWarning):
    pass


def _as_chain(positions) -> np.ndarray:
    x = np.asarray(positions, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("positions must be a non-empty 1D sequence")
    if x.size > 1 and np.any(np.diff(np.sort(x)) == 0):
        raise ValueError("coincident ions")
    return x


def coulomb_force(positions, const: PhysicalConstants = CONSTANTS) -> np.ndarray:
    """Net Coulomb force (N) on each ion from all the others."""
    x = _as_chain(positions)
    d = x[:, None] - x[None, :]
    np.fill_diagonal(d, np.inf)
    return const.coulomb_k * const.e**2 * np.sum(np.sign(d) / (d * d), axis=1)


def coulomb_probe(positions, const: PhysicalConstants = CONSTANTS) -> np.ndarray:
    """External field each ion must feel to sit still: ``-F_ion / e``."""
    return -coulomb_force(positions, const) / const.e


def _coulomb_stiffness(x: np.ndarray, const: PhysicalConstants) -> np.ndarray:
    # d F_i / d x_j
    d = x[:, None] - x[None, :]
    np.fill_diagonal(d, np.inf)
    k = 2 * const.coulomb_k * const.e**2 / np.abs(d) ** 3
    np.fill_diagonal(k, -k.sum(axis=1))
    return k


@dataclass(frozen=True)
class EquilibriumOptions:
    dt: float | None = None  # s; default 0.02 / omega_max
    damping: float | None = None  # 1/s; default 0.5 * omega_max
    force_tol: float | None = None  # N; default 1e-4 * e * D_typ * 1 um
    max_steps: int = 2_000_000
    newton_polish: bool = True
    region: tuple[float, float] = (-2e-3, 2e-3)
    # "md": damped MD then Newton polish; "auto": try Newton from init first, MD on failure
    strategy: str = "md"

    def __post_init__(self):
        for name in ("dt", "damping", "force_tol"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ChainSolution:
    positions: np.ndarray
    max_force: float
    md_steps: int
    newton_steps: int


def _net_force(field: Field, x: np.ndarray, const: PhysicalConstants):
    e_ext, d_ext = field(x)
    return const.e * np.asarray(e_ext) + coulomb_force(x, const), np.asarray(d_ext)


def _check_region(x, opts):
    lo, hi = opts.region
    if not np.all(np.isfinite(x)) or x.min() < lo or x.max() > hi:
        raise EquilibriumError("ion chain escaped the search region")


def _newton(field, x, const, tol, opts, max_iter=60):
    """Damped Newton on the force balance; keeps the ordering intact."""
    g, d = _net_force(field, x, const)
    for it in range(max_iter):
        err = np.max(np.abs(g))
        if err < tol:
            return x, err, it
        jac = _coulomb_stiffness(x, const) - np.diag(const.e * d)
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            return x, err, it
        t = 1.0
        while t > 1e-6:
            xn = x + t * step
            if xn.size < 2 or np.all(np.diff(xn) > 0):
                lo, hi = opts.region
                if xn.min() > lo and xn.max() < hi:
                    gn, dn = _net_force(field, xn, const)
                    if np.max(np.abs(gn)) < err:
                        break
            t *= 0.5
        else:
            return x, err, it
        x, g, d = xn, gn, dn
    return x, np.max(np.abs(g)), max_iter


def equilibrium_positions(field: Field, n_ions: int | None = None, init=None,
                          opts: EquilibriumOptions | None = None,
                          const: PhysicalConstants = CONSTANTS) -> ChainSolution:
    """Relax an ion chain to force balance with damped velocity Verlet.

    ``init`` is the starting chain; when omitted, ``n_ions`` ions are spaced by
    12 um around the single-ion equilibrium found in ``opts.region``.
    """
    opts = opts or EquilibriumOptions()
    if init is None:
        if not n_ions:
            raise ValueError("need n_ions or an initial chain")
        x0 = single_ion_equilibrium(field, opts.region, const=const)
        init = x0 + 12 * UM * (np.arange(n_ions) - (n_ions - 1) / 2)
    x = np.sort(_as_chain(init)).copy()
    if n_ions is not None and x.size != n_ions:
        raise ValueError("init does not match n_ions")
    n = x.size

    g, d = _net_force(field, x, const)
    pair_k = 0.0
    if n > 1:
        pair_k = np.max(-np.diag(_coulomb_stiffness(x, const)))
    k_max = max(const.e * np.max(np.abs(d)), 1e-30) + 2 * pair_k
    w_max = np.sqrt(k_max / const.M_ion)
    dt = opts.dt or 0.02 / w_max
    gamma = opts.damping or 0.5 * w_max
    d_typ = max(np.median(np.abs(d)), 1e3)
    tol = opts.force_tol or 1e-4 * const.e * d_typ * 1 * UM
    # when a Newton polish follows, MD only needs to land in its basin
    md_tol = 1e3 * tol if opts.newton_polish else tol

    if opts.strategy == "auto":
        xn, err, n_newton = _newton(field, x, const, 1e-3 * tol, opts, max_iter=100)
        if err < tol:
            return ChainSolution(np.sort(xn), float(err), 0, n_newton)

    v = np.zeros(n)
    acc = g / const.M_ion
    steps = 0
    err = np.max(np.abs(g))
    check_every = 50
    while err >= md_tol and steps < opts.max_steps:
        v_half = v + 0.5 * dt * (acc - gamma * v)
        x = x + dt * v_half
        g, d = _net_force(field, x, const)
        acc = g / const.M_ion
        v = (v_half + 0.5 * dt * acc) / (1 + 0.5 * dt * gamma)
        steps += 1
        if steps % check_every == 0:
            _check_region(x, opts)
            err = np.max(np.abs(g))
    err = np.max(np.abs(g))
    _check_region(x, opts)
    if err >= md_tol:
        raise EquilibriumError(f"no force balance after {steps} steps (max force {err:.3e} N)")
    n_newton = 0
    if opts.newton_polish:
        x, err, n_newton = _newton(field, x, const, 1e-3 * tol, opts)
        if err >= tol:
            raise EquilibriumError(f"Newton polish stalled at max force {err:.3e} N")
    order = np.argsort(x)
    return ChainSolution(x[order], float(err), steps, n_newton)


def single_ion_equilibrium(field: Field, bracket: tuple[float, float], *, n_scan: int = 2001,
                           xtol: float = 1e-12, const: PhysicalConstants = CONSTANTS) -> float:
    """Root of ``E(x) = 0`` inside ``bracket`` by bisection, then Newton.

    If the bracket holds several sign changes, the one closest to the bracket
    midpoint is returned and a :class:`MultipleRootsWarning` is issued.
    """
    lo, hi = map(float, bracket)
    grid = np.linspace(lo, hi, n_scan)
    e = np.asarray(field(grid)[0])
    sgn = np.sign(e)
    exact = np.nonzero(sgn == 0)[0]
    crossing = np.nonzero(sgn[:-1] * sgn[1:] < 0)[0]
    # a zero on the grid shows up as a sign change across it
    nz = np.nonzero(sgn)[0]
    changes = nz[:-1][sgn[nz[:-1]] != sgn[nz[1:]]]
    n_roots = changes.size
    if n_roots == 0 and exact.size == 0:
        raise ValueError("field has no sign change across the bracket")
    n_roots = max(n_roots, 1 if exact.size else 0)
    mid = 0.5 * (lo + hi)
    cands = np.concatenate([grid[exact], 0.5 * (grid[crossing] + grid[crossing + 1])])
    best = cands[np.argmin(np.abs(cands - mid))]
    if n_roots > 1:
        warnings.warn(f"{n_roots} roots in bracket; returning the one nearest the midpoint", MultipleRootsWarning,
                      stacklevel=2)
    if best in grid[exact]:
        return float(best)
    i = crossing[np.argmin(np.abs(0.5 * (grid[crossing] + grid[crossing + 1]) - mid))]
    a, b = grid[i], grid[i + 1]
    ea = e[i]
    for _ in range(200):
        if b - a < 1e-3 * UM:
            break
        m = 0.5 * (a + b)
        em = field(np.array([m]))[0][0]
        if np.sign(em) == np.sign(ea):
            a, ea = m, em
        else:
            b = m
    x = 0.5 * (a + b)
    for _ in range(20):
        ex, dx = (np.asarray(v)[0] for v in field(np.array([x])))
        if dx == 0:
            break
        step = ex / dx  # dE/dx = -D
        x_new = x + step
        if not (a - 1e-9 <= x_new <= b + 1e-9):
            break
        x = x_new
        if abs(step) < xtol:
            break
    return float(x)


def stable_equilibrium(field: Field, near: float, halfwidth: float = 300 * UM, step: float = 0.5 * UM,
                       const: PhysicalConstants = CONSTANTS) -> float:
    """Confining root of ``E(x) = 0`` (E falling through zero) closest to ``near``."""
    grid = np.arange(near - halfwidth, near + halfwidth + step / 2, step)
    e = np.asarray(field(grid)[0])
    cross = np.nonzero((e[:-1] > 0) & (e[1:] <= 0))[0]
    if cross.size == 0:
        raise EquilibriumError(f"no confining point within {halfwidth / UM:.0f} um of {near / UM:.1f} um")
    i = cross[np.argmin(np.abs(grid[cross] - near))]
    if e[i + 1] == 0:
        return float(grid[i + 1])
    return single_ion_equilibrium(field, (grid[i], grid[i + 1]), n_scan=3, const=const)


def secular_frequency(D, const: PhysicalConstants = CONSTANTS):
    """Axial angular frequency ``sqrt(e D / M)`` (rad/s)."""
    D = np.asarray(D, dtype=float)
    if np.any(D <= 0):
        raise UnstableAxisError("axial curvature must be positive for a real secular frequency")
    w = np.sqrt(const.e * D / const.M_ion)
    return float(w) if w.ndim == 0 else w


def curvature_for_frequency(omega, const: PhysicalConstants = CONSTANTS):
    return const.M_ion * np.asarray(omega) ** 2 / const.e


def model_secular_frequency(field: Field, x_eq: float, const: PhysicalConstants = CONSTANTS) -> float:
    return secular_frequency(np.asarray(field(np.array([x_eq]))[1])[0], const)
