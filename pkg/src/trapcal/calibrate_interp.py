"""Calibration by interpolating unit potentials from voltage sweeps.

Each sweep changes one pair's voltage in constant steps while the others stay
fixed. Integrating the Coulomb-inferred field along two consecutive ion
strings gives their potentials up to a constant; the difference divided by
the step is that pair's unit potential over the strings' overlap. The curves
of a sweep are aligned, averaged, differentiated and smoothed with a Lorentz
field fit. The stray field is what the calibrated electrodes leave unexplained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import least_squares

from .core import CONSTANTS, UM, PhysicalConstants, TrapLayout
from .ion_physics import coulomb_probe
from .parametric import CalibratedTrapModel, FitError, LorentzParams, StrayCoeffs, lorentz_terms
from .synthetic import Dataset, IonStringObservation

GRID_STEP = 1 * UM
MIN_OVERLAP = 3
FIT_WINDOW = (-110 * UM, 110 * UM)


@dataclass(frozen=True)
class UnitPotentialCurve:
    k: int
    x: np.ndarray  # on the common 1 um lattice
    phi: np.ndarray  # V per V, arbitrary offset
    n_overlap: int  # ions of the shorter string inside the overlap


@dataclass(frozen=True)
class Sweep:
    k: int
    delta: float
    strings: tuple[IonStringObservation, ...]


def integrate_probe_potential(positions, const: PhysicalConstants = CONSTANTS):
    """Potential at each ion from the trapezoidal integral of ``-E``, zero at the leftmost ion."""
    x = np.sort(np.asarray(positions, dtype=float))
    if x.size < 2:
        raise ValueError("need at least two ions to integrate a potential")
    e = coulomb_probe(x, const)
    steps = -0.5 * (e[1:] + e[:-1]) * np.diff(x)
    return x, np.r_[0.0, np.cumsum(steps)]


def unit_potential_pair(obs_lo: IonStringObservation, obs_hi: IonStringObservation, k: int, delta: float,
                        const: PhysicalConstants = CONSTANTS) -> UnitPotentialCurve | None:
    """Unit potential of pair ``k`` from two strings whose voltages differ by ``delta`` on that pair.

    Returns None when the strings share fewer than three ions' worth of axis.
    """
    if delta == 0:
        raise ValueError("voltage step must be non-zero")
    xa, pa = integrate_probe_potential(obs_lo.positions, const)
    xb, pb = integrate_probe_potential(obs_hi.positions, const)
    lo, hi = max(xa[0], xb[0]), min(xa[-1], xb[-1])
    n_overlap = min(np.count_nonzero((xa >= lo) & (xa <= hi)), np.count_nonzero((xb >= lo) & (xb <= hi)))
    if hi <= lo or n_overlap < MIN_OVERLAP:
        return None
    grid = np.arange(np.ceil(lo / GRID_STEP - 1e-9), np.floor(hi / GRID_STEP + 1e-9) + 1) * GRID_STEP
    if grid.size < 2:
        return None
    phi = (PchipInterpolator(xb, pb)(grid) - PchipInterpolator(xa, pa)(grid)) / delta
    return UnitPotentialCurve(k, grid, phi, int(n_overlap))


def find_sweeps(strings: list[IonStringObservation], rtol: float = 1e-6, min_steps: int = 2) -> list[Sweep]:
    """Group consecutive observations that step a single pair by a constant voltage.

    Runs with fewer than ``min_steps`` steps are dropped.
    """
    sweeps = []
    cur: list[IonStringObservation] = []
    cur_key = None
    for prev, nxt in zip(strings[:-1], strings[1:]):
        keys = set(prev.setting.V) | set(nxt.setting.V)
        diff = {k: nxt.setting[k] - prev.setting[k] for k in keys}
        changed = [k for k, d in diff.items() if abs(d) > 1e-12]
        key = None
        if len(changed) == 1:
            key = (changed[0], diff[changed[0]])
        same = (cur_key is not None and key is not None and key[0] == cur_key[0]
                and np.isclose(key[1], cur_key[1], rtol=rtol, atol=1e-12))
        if same:
            cur.append(nxt)
            continue
        if cur_key is not None and len(cur) > min_steps:
            sweeps.append(Sweep(cur_key[0], cur_key[1], tuple(cur)))
        cur, cur_key = ([prev, nxt], key) if key is not None else ([], None)
    if cur_key is not None and len(cur) > min_steps:
        sweeps.append(Sweep(cur_key[0], cur_key[1], tuple(cur)))
    return sweeps


def align_and_average(curves: list[UnitPotentialCurve]):
    """Remove the per-curve offsets by least squares over shared lattice points, then average.

    Offsets are solved jointly with the mean curve under a zero-sum gauge, so
    the result does not depend on the order of ``curves``. Returns
    ``(x, phi_avg, count, phi_naive)`` where ``phi_naive`` averages the
    unaligned curves.
    """
    if not curves:
        raise ValueError("no unit-potential curves to average")
    idx = [np.rint(c.x / GRID_STEP).astype(np.int64) for c in curves]
    lo = min(int(i[0]) for i in idx)
    hi = max(int(i[-1]) for i in idx)
    G = hi - lo + 1
    J = len(curves)
    count = np.zeros(G)
    naive = np.zeros(G)
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    for j, (c, i) in enumerate(zip(curves, idx)):
        g = i - lo
        count[g] += 1
        naive[g] += c.phi
        for gi, p in zip(g, c.phi):
            # p + c_j - m_g = 0
            rows += [r, r]
            cols += [j, J + gi]
            vals += [1.0, -1.0]
            rhs.append(-p)
            r += 1
    M = np.zeros((r + 1, J + G))
    M[rows, cols] = vals
    M[r, :J] = 1.0  # gauge
    b = np.r_[rhs, 0.0]
    keep = np.r_[np.ones(J, bool), count > 0]
    sol = np.zeros(J + G)
    sol[keep], *_ = np.linalg.lstsq(M[:, keep], b, rcond=None)
    x = (lo + np.arange(G)) * GRID_STEP
    covered = count > 0
    naive = np.where(covered, naive / np.maximum(count, 1), np.nan)
    return x[covered], sol[J:][covered], count[covered].astype(int), naive[covered]


def central_difference_field(x, phi):
    """``Ex = -dphi/dx`` on a uniform lattice, second-order inside, one-sided at the ends."""
    return -np.gradient(phi, x, edge_order=2)


def fit_lorentz_field(x, ex, x_c: float, gamma_grid=None) -> LorentzParams:
    """Fit ``Ex`` samples with the Lorentz field shape, centre fixed at ``x_c``.

    A coarse scan over ``gamma`` (amplitude by linear least squares) picks the
    start for a local refinement, so no prior is needed.
    """
    x = np.asarray(x, dtype=float)
    ex = np.asarray(ex, dtype=float)
    if x.size < 8:
        raise ValueError("Lorentz field fit needs at least 8 samples")
    u = x - x_c
    grid = np.geomspace(20 * UM, 3000 * UM, 200) if gamma_grid is None else gamma_grid
    best = None
    for g in grid:
        basis = 2 * g * u / (u * u + g * g) ** 2
        A = float(basis @ ex / (basis @ basis))
        if A <= 0:
            continue
        cost = float(np.sum((A * basis - ex) ** 2))
        if best is None or cost < best[0]:
            best = (cost, A, g)
    if best is None:
        raise FitError("no positive-amplitude Lorentz field matches the samples")
    _, A0, g0 = best

    def resid(p):
        return (lorentz_terms(p[0] * A0, p[1] * g0, x_c, x)[1] - ex)

    res = least_squares(resid, [1.0, 1.0], bounds=([1e-9, 1e-3], [np.inf, np.inf]), x_scale="jac",
                        xtol=1e-14, ftol=1e-14)
    return LorentzParams(float(res.x[0] * A0), float(res.x[1] * g0), float(x_c))


def fit_stray(model: CalibratedTrapModel, strings: list[IonStringObservation],
              const: PhysicalConstants = CONSTANTS) -> StrayCoeffs:
    """Quadratic least-squares fit of the field the electrodes leave unexplained."""
    xs, res = [], []
    for s in strings:
        if s.positions.size < 2:
            continue
        E, _ = model.field(s.setting)(s.positions)
        xs.append(s.positions)
        res.append(coulomb_probe(s.positions, const) - E)
    if not xs:
        raise ValueError("no ion strings to fit the stray field")
    x = np.concatenate(xs)
    a, b, c = np.polyfit(x, np.concatenate(res), 2)
    return StrayCoeffs(float(a), float(b), float(c))


def calibrate_interpolation(dataset: Dataset, layout: TrapLayout, const: PhysicalConstants = CONSTANTS,
                            fit_window: tuple[float, float] = FIT_WINDOW):
    """Baseline calibration from sweep data only.

    Returns ``(model, diagnostics)``; diagnostics hold, per pair, the lattice
    ``x_um``, the unaligned and aligned averaged unit potentials, the raw and
    fitted fields and the overlap count.
    """
    sweeps = find_sweeps(list(dataset.strings))
    by_pair: dict[int, list[UnitPotentialCurve]] = {}
    for sw in sweeps:
        for a, b in zip(sw.strings[:-1], sw.strings[1:]):
            c = unit_potential_pair(a, b, sw.k, sw.delta, const)
            if c is not None:
                by_pair.setdefault(sw.k, []).append(c)
    missing = [k for k in layout.active if k not in by_pair]
    if missing:
        raise ValueError(f"no usable sweep for active pairs {missing}")

    pairs = {}
    diag = {"method": "interp", "pairs": {}, "flags": []}
    for k in layout.active:
        x, phi, count, naive = align_and_average(by_pair[k])
        ex = central_difference_field(x, phi)
        sel = (count >= MIN_OVERLAP) & (x >= fit_window[0]) & (x <= fit_window[1])
        xc = layout.pair(k).x_center
        pairs[k] = fit_lorentz_field(x[sel], ex[sel], xc)
        _, ex_fit, _ = lorentz_terms(pairs[k].A, pairs[k].gamma, xc, x)
        diag["pairs"][str(k)] = {
            "x_um": (x / UM).tolist(),
            "phi_raw": naive.tolist(),
            "phi_avg": phi.tolist(),
            "Ex_raw": ex.tolist(),
            "Ex_fit": ex_fit.tolist(),
            "n_overlap": count.tolist(),
            "n_curves": len(by_pair[k]),
            "n_fit_samples": int(sel.sum()),
            "A": pairs[k].A,
            "gamma_um": pairs[k].gamma / UM,
        }
    model = CalibratedTrapModel(layout, pairs, StrayCoeffs(), {"method": "interp"})
    model.stray = fit_stray(model, list(dataset.strings), const)
    diag["stray"] = {"a": model.stray.a, "b": model.stray.b, "c": model.stray.c}
    return model, diag
