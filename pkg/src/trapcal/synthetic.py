"""Synthetic trap and ion-probe datasets.

The analytic rectangle potential plays the real trap. Datasets follow the
usual measurement protocol: one pair swept at a time in constant voltage
steps while an ion string is imaged, plus single-ion positions and secular
frequencies at separate settings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, PPoly

from . import analytic_field as af
from .core import CONSTANTS, UM, PhysicalConstants, TrapLayout, VoltageSetting
from .ion_physics import (EquilibriumError, EquilibriumOptions, curvature_for_frequency, equilibrium_positions,
                          secular_frequency, stable_equilibrium)
from .parametric import StrayCoeffs, eval_stray

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi
ROI = (-140 * UM, 140 * UM)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_pos: float = 0.4 * UM
    sigma_freq: float = TWO_PI * 0.5e3
    magnification_bias: float = 0.0
    rng_seed: int = 0
    image_center: float = 0.0

    def __post_init__(self):
        if self.sigma_pos < 0 or self.sigma_freq < 0:
            raise ValueError("noise levels must be non-negative")


NOISELESS = NoiseSpec(0.0, 0.0)


@dataclass(frozen=True)
class IonStringObservation:
    setting: VoltageSetting
    positions: np.ndarray
    sigma_pos: float

    def __post_init__(self):
        object.__setattr__(self, "positions", np.sort(np.asarray(self.positions, dtype=float)))


@dataclass(frozen=True)
class FrequencyObservation:
    setting: VoltageSetting
    x_eq: float
    omega_x: float
    sigma_omega: float = 0.0

    def __post_init__(self):
        if not self.omega_x > 0:
            raise ValueError("observed secular frequency must be positive")


@dataclass(frozen=True)
class SingleIonObservation:
    setting: VoltageSetting
    x: float
    sigma_pos: float


@dataclass
class Dataset:
    strings: list[IonStringObservation] = field(default_factory=list)
    freqs: list[FrequencyObservation] = field(default_factory=list)
    singles: list[SingleIonObservation] = field(default_factory=list)
    n_fit_freqs: int = 20
    report: dict = field(default_factory=dict)

    @property
    def n_position_points(self) -> int:
        return sum(len(s.positions) for s in self.strings)

    @property
    def fit_freqs(self) -> list[FrequencyObservation]:
        return self.freqs[: self.n_fit_freqs]


class TruthModel:
    """Ground-truth axial field of a layout plus a stray field.

    In ``fixed`` mode the probe height is ``layout.y0`` and unit fields come
    from cubic-spline tables (0.5 um spacing). In ``voltage_dependent`` mode the
    height follows ``y(U) = y0 + sum_k beta_k V_k`` with ``beta_k`` the height
    shift per volt caused by the vertical field of pair ``k`` against the
    radial confinement, and fields are evaluated in closed form at that height.
    """

    def __init__(self, layout: TrapLayout, stray: StrayCoeffs = StrayCoeffs(), height_mode: str = "fixed",
                 span: float = 1000 * UM, spacing: float = 0.5 * UM, radial_freq: float | None = None,
                 const: PhysicalConstants = CONSTANTS):
        if height_mode not in ("fixed", "voltage_dependent"):
            raise ValueError(f"unknown height mode {height_mode!r}")
        self.layout = layout
        self.stray = stray
        self.height_mode = height_mode
        self.const = const
        self.keys = layout.active
        n = int(round(2 * span / spacing))
        self.grid = np.linspace(-span, span, n + 1)
        phi, ex, d = zip(*(af.pair_fields(layout, k, self.grid, layout.y0) for k in self.keys))
        self._phi = np.array(phi)
        self._ex = np.array(ex)
        self._d = np.array(d)
        # spline coefficients are linear in the data, so per-setting splines are V-weighted sums
        self._ex_c = np.stack([CubicSpline(self.grid, e).c for e in self._ex])
        self._d_c = np.stack([CubicSpline(self.grid, v).c for v in self._d])
        if radial_freq is None:
            radial_freq = TWO_PI * float(layout.metadata.get("radial_freq_MHz", 2.6)) * 1e6
        self.radial_freq = radial_freq
        ey = np.array([af.pair_height_field(layout, k, 0.0, layout.y0) for k in self.keys]).ravel()
        self.beta = const.e * ey / (const.M_ion * radial_freq**2)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])

    def height(self, u: VoltageSetting) -> float:
        if self.height_mode == "fixed":
            return self.layout.y0
        return float(self.layout.y0 + self.beta @ u.vector(self.keys))

    def unit_fields(self, x, y: float | None = None):
        """Per-active-pair ``(phi, Ex, D)`` along the axis, shape ``(n_pairs, *x.shape)``."""
        x = np.asarray(x, dtype=float)
        y = self.layout.y0 if y is None else y
        out = [af.pair_fields(self.layout, k, x, y) for k in self.keys]
        return tuple(np.array(v) for v in zip(*out))

    def field(self, u: VoltageSetting):
        """Callable ``x -> (E, D)`` of the true total field for setting ``u``."""
        V = u.vector(self.keys)
        stray = self.stray
        if self.height_mode == "voltage_dependent":
            y = self.height(u)

            def f(x):
                _, ex, d = self.unit_fields(x, y)
                es, ds = eval_stray(stray, x)
                return V @ ex.reshape(len(V), -1) + es.ravel(), V @ d.reshape(len(V), -1) + ds.ravel()

            return f

        pe = PPoly(np.tensordot(V, self._ex_c, axes=1), self.grid, extrapolate=False)
        pd = PPoly(np.tensordot(V, self._d_c, axes=1), self.grid, extrapolate=False)
        lo, hi = self.span

        def f(x):
            x = np.asarray(x, dtype=float)
            es, ds = eval_stray(stray, x)
            e = pe(x)
            d = pd(x)
            out = (x < lo) | (x > hi)
            if np.any(out):
                _, ex_o, d_o = self.unit_fields(x[out])
                e[out] = V @ ex_o
                d[out] = V @ d_o
            return e + es, d + ds

        return f

    def curvature_slope(self, u: VoltageSetting):
        """Callable ``x -> dD/dx`` (fixed-height tables)."""
        V = u.vector(self.keys)
        pd = PPoly(np.tensordot(V, self._d_c, axes=1), self.grid).derivative()
        s = self.stray
        return lambda x: pd(np.asarray(x, dtype=float)) - 2 * s.a


def build_truth(layout: TrapLayout, stray_truth: StrayCoeffs = StrayCoeffs(), height_mode: str = "fixed",
                **kw) -> TruthModel:
    return TruthModel(layout, stray_truth, height_mode, **kw)


DEFAULT_STRAY = StrayCoeffs(a=3e8, b=4e4, c=6.0)


def sweep_protocol(k: int, base: VoltageSetting, delta: float = 0.02, n_steps: int = 31,
                   prefix: str | None = None) -> list[VoltageSetting]:
    """Settings that differ from ``base`` only in pair ``k``, stepped by ``delta``."""
    if n_steps < 2:
        raise ValueError("a sweep needs at least two steps")
    prefix = prefix if prefix is not None else f"p{k}"
    v0 = base[k]
    return [base.with_voltage(k, v0 + j * delta, id=f"{prefix}_s{j:02d}") for j in range(n_steps)]


def design_well(truth: TruthModel, x0: float, omega: float, v_max: float = 10.0, id: str = "",
                halfwidth: float = 100 * UM, ridge: float = 1e-4) -> VoltageSetting:
    """Voltages for a harmonic well of frequency ``omega`` centred on ``x0``.

    Least-squares match to ``E = -D0 (x - x0)`` over ``x0 +/- halfwidth`` with a
    small ridge on the voltages, subject to exact ``E(x0) = 0`` and
    ``D(x0) = D0``; the stray field is included.
    """
    d0 = float(curvature_for_frequency(omega, truth.const))
    xs = x0 + np.linspace(-halfwidth, halfwidth, 41)
    _, ex, _ = truth.unit_fields(xs)
    es, _ = eval_stray(truth.stray, xs)
    A = ex.T
    t = -d0 * (xs - x0) - es
    _, ex0, dd0 = truth.unit_fields(np.array([x0]))
    es0, ds0 = eval_stray(truth.stray, x0)
    C = np.vstack([ex0[:, 0], dd0[:, 0]])
    b = np.array([-float(es0), d0 - float(ds0)])
    n = A.shape[1]
    H = A.T @ A
    H = H + ridge * np.trace(H) / n * np.eye(n)
    kkt = np.block([[2 * H, C.T], [C, np.zeros((2, 2))]])
    V = np.linalg.solve(kkt, np.r_[2 * A.T @ t, b])[:n]
    if np.max(np.abs(V)) > v_max:
        raise ValueError(f"well at {x0 / UM:.1f} um, {omega / TWO_PI / 1e3:.0f} kHz needs {np.max(np.abs(V)):.2f} V")
    return VoltageSetting.from_vector(truth.keys, V, id)


def chain_halflength(omega: float, n_ions: int = 19, const: PhysicalConstants = CONSTANTS) -> float:
    """Half-length of an ``n_ions`` chain in a harmonic well (large-N scaling, slightly generous)."""
    ell = (const.coulomb_k * const.e**2 / (const.M_ion * omega**2)) ** (1 / 3)
    return 1.1 * ell * 1.3 * n_ions**0.5


@dataclass(frozen=True)
class SweepPlan:
    k: int
    base: VoltageSetting
    delta: float
    n_steps: int
    travel: float
    omega0: float

    def settings(self) -> list[VoltageSetting]:
        return sweep_protocol(self.k, self.base, self.delta, self.n_steps)


@dataclass(frozen=True)
class ExperimentPlan:
    sweeps: list[SweepPlan]
    freq_settings: list[VoltageSetting]
    single_settings: list[VoltageSetting]
    n_fit_freqs: int = 20
    freq_targets: tuple[float, ...] = ()
    single_targets: tuple[float, ...] = ()


def _sweep_path(truth, base, k, delta, n_steps, cached):
    i = truth.keys.index(k)
    ex, d, es, ds = cached
    V = base.vector(truth.keys)
    e0 = V @ ex + es
    d0 = V @ d + ds
    steps = np.arange(n_steps)[:, None] * delta
    E = e0[None, :] + steps * ex[i][None, :]
    Dm = d0[None, :] + steps * d[i][None, :]
    return E, Dm


def plan_sweep(truth: TruthModel, k: int, delta: float = 0.02, n_steps: int = 31, roi=ROI,
               target_travel: float = 150 * UM, freqs_khz=tuple(range(60, 170, 10)),
               starts_um=tuple(range(-130, 131, 10)), min_freq_khz: float = 40.0,
               n_ions_max: int = 19) -> SweepPlan:
    """Search base wells so that stepping pair ``k`` drags a single ion across ``roi``.

    Among candidates whose path stays confined inside ``roi``, prefer the
    stiffest well reaching ``target_travel``; otherwise the longest path.
    """
    lo, hi = roi
    grid = np.arange(lo - 250 * UM, hi + 250 * UM, 0.5 * UM)
    _, ex, d = truth.unit_fields(grid)
    cached = (ex, d) + eval_stray(truth.stray, grid)
    d_min = curvature_for_frequency(TWO_PI * min_freq_khz * 1e3, truth.const)
    best, best_key = None, None
    for f in freqs_khz:
        w = TWO_PI * f * 1e3
        half = chain_halflength(w, n_ions_max, truth.const)
        for xs in starts_um:
            try:
                base = design_well(truth, xs * UM, w, id=f"p{k}_base")
            except ValueError:
                continue
            for sgn in (1.0, -1.0):
                E, Dm = _sweep_path(truth, base, k, sgn * delta, n_steps, cached)
                path = []
                prev = xs * UM
                ok = True
                for j in range(n_steps):
                    s = np.sign(E[j])
                    cross = np.nonzero((s[:-1] > 0) & (s[1:] <= 0))[0]  # stable roots only
                    if cross.size == 0:
                        ok = False
                        break
                    roots = grid[cross]
                    r = roots[np.argmin(np.abs(roots - prev))]
                    if abs(r - prev) > 30 * UM or not (lo <= r <= hi):
                        ok = False
                        break
                    if np.interp(r, grid, Dm[j]) < d_min:
                        ok = False
                        break
                    # the whole chain must sit in a region that still confines
                    span = (grid > r - half) & (grid < r + half)
                    if np.any(Dm[j][span] <= 0.2 * d_min):
                        ok = False
                        break
                    path.append(r)
                    prev = r
                if not ok:
                    continue
                travel = abs(path[-1] - path[0])
                key = (min(travel, target_travel), f, -abs(xs))
                if best_key is None or key > best_key:
                    best_key = key
                    best = SweepPlan(k, base, sgn * delta, n_steps, travel, w)
    if best is None:
        raise ValueError(f"no confining sweep found for pair {k}")
    return best


def reference_protocol(truth: TruthModel, delta: float = 0.02, n_steps: int = 31, n_fit_freqs: int = 20,
                   n_val_freqs: int = 11, fit_khz=(190.0, 380.0), val_khz=(220.0, 600.0),
                   single_wells=((-60 * UM, 300e3), (70 * UM, 300e3))) -> ExperimentPlan:
    """Per-pair sweeps plus frequency and single-ion settings spread over the ROI."""
    sweeps = [plan_sweep(truth, k, delta, n_steps) for k in truth.keys]
    pos_fit = np.linspace(-100, 100, n_fit_freqs) * UM
    pos_fit = pos_fit[np.argsort(np.arange(n_fit_freqs) * 7 % n_fit_freqs)]
    f_fit = np.linspace(*fit_khz, n_fit_freqs) * 1e3
    pos_val = np.linspace(-90, 90, n_val_freqs) * UM
    pos_val = pos_val[np.argsort(np.arange(n_val_freqs) * 4 % n_val_freqs)]
    f_val = np.linspace(*val_khz, n_val_freqs) * 1e3
    pos = np.r_[pos_fit, pos_val]
    freq_settings = [design_well(truth, x, TWO_PI * f, id=f"freq_{i:02d}")
                     for i, (x, f) in enumerate(zip(pos, np.r_[f_fit, f_val]))]
    single_settings = [design_well(truth, x, TWO_PI * f, id=f"single_{i}") for i, (x, f) in enumerate(single_wells)]
    return ExperimentPlan(sweeps, freq_settings, single_settings, n_fit_freqs, tuple(pos),
                          tuple(x for x, _ in single_wells))


def _observe(x, noise: NoiseSpec, rng):
    x = noise.image_center + (1 + noise.magnification_bias) * (np.asarray(x, dtype=float) - noise.image_center)
    if noise.sigma_pos > 0:
        x = x + rng.normal(0.0, noise.sigma_pos, np.shape(x))
    return x


def _rng(seed: int, stream: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def true_single_ion(truth: TruthModel, u: VoltageSetting, near: float = 0.0) -> tuple[float, float]:
    """True single-ion equilibrium (confining root nearest ``near``) and its secular frequency."""
    f = truth.field(u)
    x = stable_equilibrium(f, near, const=truth.const)
    return x, secular_frequency(f(np.array([x]))[1][0], truth.const)


def ion_count_schedule(n_images: int, n_range=(6, 19), rng=None, p_loss: float = 0.2) -> list[int]:
    """Ions slowly lost to background collisions, reloaded when below the minimum."""
    lo, hi = n_range
    rng = rng or np.random.default_rng(0)
    reload_lo = max(lo, hi - 5)
    n = int(rng.integers(reload_lo, hi + 1))
    out = []
    for _ in range(n_images):
        out.append(n)
        if rng.random() < p_loss:
            n -= 1
        if n < lo:
            n = int(rng.integers(reload_lo, hi + 1))
    return out


def generate_dataset(truth: TruthModel, plan: ExperimentPlan, n_ions_range=(6, 19), noise: NoiseSpec = NoiseSpec(),
                     on_unconfined: str = "skip", eq_opts: EquilibriumOptions | None = None) -> Dataset:
    """Solve every planned setting on the truth model and add measurement noise.

    Deterministic for a fixed ``noise.rng_seed``; each setting draws from its own
    random stream.
    """
    if on_unconfined not in ("skip", "fail"):
        raise ValueError("on_unconfined must be 'skip' or 'fail'")
    eq_opts = eq_opts or EquilibriumOptions(region=(-800 * UM, 800 * UM), strategy="auto")
    seed = noise.rng_seed
    ds = Dataset(n_fit_freqs=plan.n_fit_freqs)
    skipped = []
    coverage = {}
    idx = 0
    for si, sweep in enumerate(plan.sweeps):
        counts = ion_count_schedule(sweep.n_steps, n_ions_range, _rng(seed, 0, si))
        prev = None
        xs_all = []
        for j, u in enumerate(sweep.settings()):
            n = counts[j]
            f = truth.field(u)
            try:
                if prev is not None and prev.size == n:
                    init = prev
                else:
                    x0 = stable_equilibrium(f, 0.0, const=truth.const)
                    init = x0 + 12 * UM * (np.arange(n) - (n - 1) / 2)
                sol = equilibrium_positions(f, n, init, eq_opts, truth.const)
            except (EquilibriumError, ValueError) as exc:
                if on_unconfined == "fail":
                    raise
                skipped.append((u.id, str(exc)))
                prev = None
                idx += 1
                continue
            prev = sol.positions
            obs = _observe(sol.positions, noise, _rng(seed, 1, idx))
            ds.strings.append(IonStringObservation(u, obs, noise.sigma_pos))
            xs_all.append(sol.positions)
            idx += 1
        if xs_all:
            allx = np.concatenate(xs_all)
            coverage[sweep.k] = float(allx.max() - allx.min())
    for i, u in enumerate(plan.freq_settings):
        x, w = true_single_ion(truth, u, plan.freq_targets[i] if plan.freq_targets else 0.0)
        rng = _rng(seed, 2, i)
        x_obs = float(_observe(x, noise, rng))
        w_obs = w + (rng.normal(0.0, noise.sigma_freq) if noise.sigma_freq > 0 else 0.0)
        ds.freqs.append(FrequencyObservation(u, x_obs, w_obs, noise.sigma_freq))
    for i, u in enumerate(plan.single_settings):
        x, _ = true_single_ion(truth, u, plan.single_targets[i] if plan.single_targets else 0.0)
        ds.singles.append(SingleIonObservation(u, float(_observe(x, noise, _rng(seed, 3, i))), noise.sigma_pos))
    ds.report = {
        "skipped": skipped,
        "coverage_um": {k: v / UM for k, v in coverage.items()},
        "short_coverage": [k for k, v in coverage.items() if v < 280 * UM],
        "n_position_points": ds.n_position_points,
        "height_mode": truth.height_mode,
        "beta_um_per_V": (truth.beta / UM).tolist(),
    }
    if ds.report["short_coverage"]:
        log.warning("sweeps of pairs %s cover less than 280 um", ds.report["short_coverage"])
    return ds


def recheck_dataset(truth: TruthModel, plan: ExperimentPlan, noise: NoiseSpec = NoiseSpec(), n_ions: int = 8,
                    eq_opts: EquilibriumOptions | None = None) -> Dataset:
    """Short follow-up session: one ion string per designed well plus the single-ion settings.

    Intended for refitting the stray field after the trap has aged; wells that
    no longer confine a string are left out.
    """
    eq_opts = eq_opts or EquilibriumOptions(region=(-800 * UM, 800 * UM), strategy="auto")
    ds = Dataset(n_fit_freqs=0)
    skipped = []
    for i, u in enumerate(plan.freq_settings):
        f = truth.field(u)
        near = plan.freq_targets[i] if plan.freq_targets else 0.0
        try:
            x0 = stable_equilibrium(f, near, const=truth.const)
            init = x0 + 5 * UM * (np.arange(n_ions) - (n_ions - 1) / 2)
            sol = equilibrium_positions(f, n_ions, init, eq_opts, truth.const)
        except (EquilibriumError, ValueError) as exc:
            skipped.append((u.id, str(exc)))
            continue
        obs = _observe(sol.positions, noise, _rng(noise.rng_seed, 4, i))
        ds.strings.append(IonStringObservation(u, obs, noise.sigma_pos))
    for i, u in enumerate(plan.single_settings):
        x, _ = true_single_ion(truth, u, plan.single_targets[i] if plan.single_targets else 0.0)
        ds.singles.append(SingleIonObservation(u, float(_observe(x, noise, _rng(noise.rng_seed, 5, i))), noise.sigma_pos))
    ds.report = {"skipped": skipped, "n_position_points": ds.n_position_points}
    return ds


def reference_dataset(seed: int = 0, noise: NoiseSpec | None = None, truth: TruthModel | None = None,
                  layout: TrapLayout | None = None, stray: StrayCoeffs = DEFAULT_STRAY, **plan_kw):
    """Truth, plan and dataset at full experimental scale (9 pairs, 31 steps, 6-19 ions)."""
    from .core import default_layout

    if truth is None:
        truth = build_truth(layout or default_layout(), stray)
    plan = reference_protocol(truth, **plan_kw)
    noise = noise or NoiseSpec(rng_seed=seed)
    return truth, plan, generate_dataset(truth, plan, noise=noise)
