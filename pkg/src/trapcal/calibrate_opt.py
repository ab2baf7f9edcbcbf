"""Calibration by constrained multi-objective optimisation.

All active pairs get a Lorentz unit potential (two free parameters each, the
centre stays at the electrode centre) and the stray field is quadratic, giving
2N + 3 unknowns. Two objectives are combined into one scalar:

* ``t1`` - squared mismatch between Coulomb-inferred fields of imaged ion
  strings and the model field at those ions;
* ``t2`` - squared mismatch between measured secular frequencies and the
  model frequency at the measured single-ion position;

and every single-ion position must be a model equilibrium up to the field
uncertainty its position error implies (quadratic exterior penalty).

The scalarised problem is searched with Differential Evolution and then
polished with a bounded Gauss-Newton (trust-region) least-squares solve.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from . import analytic_field as af
from .core import CONSTANTS, UM, PhysicalConstants, TrapLayout
from .ion_physics import _coulomb_stiffness, coulomb_probe
from .parametric import CalibratedTrapModel, LorentzParams, StrayCoeffs, fit_profile
from .synthetic import Dataset, FrequencyObservation, IonStringObservation, SingleIonObservation

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi
STRAY_SCALE = 100 * UM  # length unit of the internal stray polynomial
NOMINAL_SIGMA_POS = 0.4 * UM
NOMINAL_SIGMA_FREQ = TWO_PI * 0.5e3


@dataclass(frozen=True)
class DEParams:
    population: int | None = None  # default 10 x parameter count
    F: float = 0.7
    CR: float = 0.9
    max_generations: int = 300
    seed: int = 0
    tol: float = 1e-6
    init_spread: float = 0.2  # relative spread of the initial population about the prior


@dataclass(frozen=True)
class ObjectiveConfig:
    weight_t2: float | None = None  # (V/m)^2 per (rad/s)^2; default variance ratio
    constraint_margin_factor: float = 1.0
    penalty_coefficient: float | None = None  # (V/m)^-2 scale; default auto
    A_bounds: tuple[float, float] = (0.2, 5.0)  # relative to the analytic prior
    gamma_bounds: tuple[float, float] = (0.5, 2.0)
    stray_max: float = 200.0  # V/m over the probed region
    de: DEParams = field(default_factory=DEParams)
    polish: bool = True
    feasibility_tol: float = 0.02  # violation allowed, as a fraction of the smallest margin
    min_position_uncertainty: float = 0.05 * UM
    prior_fit_range: float = 1400 * UM
    n_fit_freqs: int | None = None  # default: dataset.n_fit_freqs
    groups: tuple[tuple[int, ...], ...] = ()  # electrode grouping metadata; one group is solved

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveConfig":
        d = dict(d)
        de = DEParams(**d.pop("de", {}))
        for key in ("A_bounds", "gamma_bounds"):
            if key in d:
                d[key] = tuple(d[key])
        if "groups" in d:
            d["groups"] = tuple(tuple(g) for g in d["groups"])
        if "min_position_uncertainty_um" in d:
            d["min_position_uncertainty"] = d.pop("min_position_uncertainty_um") * UM
        if "prior_fit_range_um" in d:
            d["prior_fit_range"] = d.pop("prior_fit_range_um") * UM
        return cls(de=de, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["min_position_uncertainty_um"] = d.pop("min_position_uncertainty") / UM
        d["prior_fit_range_um"] = d.pop("prior_fit_range") / UM
        return d

    @classmethod
    def load(cls, path) -> "ObjectiveConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class CalibrationFlagged(RuntimeError):
    """Calibration finished but is infeasible or did not converge; ``model`` holds the best result."""

    def __init__(self, msg, model, diagnostics):
        super().__init__(msg)
        self.model = model
        self.diagnostics = diagnostics


def analytic_prior(layout: TrapLayout, fit_range: float = 1400 * UM) -> dict[int, LorentzParams]:
    """Lorentz fit of each active pair's closed-form potential, used for bounds and the start population."""
    prior = {}
    for k in layout.active:
        xc = layout.pair(k).x_center
        xs = xc + np.arange(-fit_range / 2, fit_range / 2 + 0.5 * UM, 1 * UM)
        phi, _, _ = af.pair_fields(layout, k, xs, layout.y0)
        prior[k], _ = fit_profile(xs, phi, "lorentz", xc)
    return prior


def field_uncertainty(obs: IonStringObservation, sigma_pos: float, const: PhysicalConstants = CONSTANTS) -> np.ndarray:
    """Per-ion standard deviation of the Coulomb-inferred field under i.i.d. position noise."""
    x = obs.positions
    if x.size < 2:
        return np.zeros(x.size)
    k = _coulomb_stiffness(x, const)
    return sigma_pos * np.sqrt(np.sum(k * k, axis=1)) / const.e


@dataclass
class Problem:
    """Flattened observations plus parameter scaling; evaluates objectives for a population."""

    keys: tuple[int, ...]
    xc: np.ndarray
    A0: np.ndarray
    g0: np.ndarray
    # strings
    xs: np.ndarray
    Vs: np.ndarray
    Eion: np.ndarray
    # frequencies
    xf: np.ndarray
    Vf: np.ndarray
    wf: np.ndarray
    # singles
    x1: np.ndarray
    V1: np.ndarray
    margin: np.ndarray
    weight_t2: float
    penalty: float
    lo: np.ndarray
    hi: np.ndarray
    d_penalty: float
    const: PhysicalConstants = CONSTANTS

    @property
    def n_pairs(self) -> int:
        return len(self.keys)

    @property
    def n_params(self) -> int:
        return 2 * self.n_pairs + 3

    def unpack(self, theta):
        theta = np.atleast_2d(theta)
        n = self.n_pairs
        return theta[:, :n] * self.A0, theta[:, n:2 * n] * self.g0, theta[:, 2 * n:]

    def _fields(self, A, G, S, x, V, want_d=False):
        """Model E (and D) at points ``x`` with voltages ``V`` for each candidate."""
        u = x[:, None] - self.xc[None, :]  # (n, N)
        u2 = u * u
        q = u2[None] + (G * G)[:, None, :]  # (P, n, N)
        AG = (A * G)[:, None, :]
        ex = 2 * AG * u[None] / (q * q)
        t = x / STRAY_SCALE
        E = np.einsum("nk,pnk->pn", V, ex) + S[:, :1] + S[:, 1:2] * t + S[:, 2:3] * t * t
        if not want_d:
            return E, None
        d = 2 * AG * (3 * u2[None] - (G * G)[:, None, :]) / (q * q * q)
        D = np.einsum("nk,pnk->pn", V, d) - (S[:, 1:2] + 2 * S[:, 2:3] * t) / STRAY_SCALE
        return E, D

    def omega_model(self, D):
        ok = D > 0
        w = np.sqrt(np.where(ok, self.const.e * D / self.const.M_ion, 0.0))
        return w, ok

    def terms(self, theta, chunk: int = 24):
        """``(t1, t2, violation)`` for each row of ``theta``."""
        theta = np.atleast_2d(theta)
        out = np.empty((theta.shape[0], 3))
        for s in range(0, theta.shape[0], chunk):
            A, G, S = self.unpack(theta[s:s + chunk])
            t1 = np.zeros(A.shape[0])
            if self.xs.size:
                E, _ = self._fields(A, G, S, self.xs, self.Vs)
                t1 = np.sum((self.Eion[None] - E) ** 2, axis=1)
            t2 = np.zeros(A.shape[0])
            if self.xf.size:
                _, D = self._fields(A, G, S, self.xf, self.Vf, want_d=True)
                w, ok = self.omega_model(D)
                t2 = np.sum(np.where(ok, (self.wf[None] - w) ** 2, self.d_penalty), axis=1)
            viol = np.zeros(A.shape[0])
            if self.x1.size:
                E1, _ = self._fields(A, G, S, self.x1, self.V1)
                viol = np.max(np.maximum(0.0, np.abs(E1) - self.margin[None]), axis=1)
            out[s:s + chunk] = np.column_stack([t1, t2, viol])
        return out

    def scalar(self, theta, penalty=None):
        t = self.terms(theta)
        pen = self.penalty if penalty is None else penalty
        return t[:, 0] + self.weight_t2 * t[:, 1] + pen * t[:, 2] ** 2

    def residuals(self, theta, penalty=None):
        """Residual vector whose squared norm is the scalarised objective (single-ion terms per ion)."""
        pen = self.penalty if penalty is None else penalty
        A, G, S = self.unpack(theta)
        parts = []
        if self.xs.size:
            E, _ = self._fields(A, G, S, self.xs, self.Vs)
            parts.append(self.Eion - E[0])
        if self.xf.size:
            _, D = self._fields(A, G, S, self.xf, self.Vf, want_d=True)
            w = np.sqrt(np.maximum(self.const.e * D[0] / self.const.M_ion, 0.0))
            parts.append(np.sqrt(self.weight_t2) * (self.wf - w))
        if self.x1.size:
            E1, _ = self._fields(A, G, S, self.x1, self.V1)
            parts.append(np.sqrt(pen) * np.maximum(0.0, np.abs(E1[0]) - self.margin))
        return np.concatenate(parts)

    def jacobian(self, theta, penalty=None):
        pen = self.penalty if penalty is None else penalty
        theta = np.asarray(theta, dtype=float)
        A, G, S = (v[0] for v in self.unpack(theta))
        n = self.n_pairs
        rows = []

        def unit_parts(x):
            u = x[:, None] - self.xc[None, :]
            u2 = u * u
            q = u2 + G * G
            ex = 2 * A * G * u / q**2
            dex_dA = ex / A
            dex_dG = 2 * A * u * (q - 4 * G * G) / q**3
            d = 2 * A * G * (3 * u2 - G * G) / q**3
            dd_dA = d / A
            dd_dG = 2 * A * (3 * u2 - 3 * G * G) / q**3 - 12 * A * G * G * (3 * u2 - G * G) / q**4
            return ex, dex_dA, dex_dG, d, dd_dA, dd_dG

        def e_jac(x, V):
            ex, dA, dG, *_ = unit_parts(x)
            t = x / STRAY_SCALE
            J = np.empty((x.size, self.n_params))
            J[:, :n] = V * dA * self.A0
            J[:, n:2 * n] = V * dG * self.g0
            J[:, 2 * n:] = np.column_stack([np.ones_like(t), t, t * t])
            E = np.sum(V * ex, axis=1) + S[0] + S[1] * t + S[2] * t * t
            return E, J

        if self.xs.size:
            _, J = e_jac(self.xs, self.Vs)
            rows.append(-J)
        if self.xf.size:
            _, _, _, d, dA, dG = unit_parts(self.xf)
            t = self.xf / STRAY_SCALE
            D = np.sum(self.Vf * d, axis=1) - (S[1] + 2 * S[2] * t) / STRAY_SCALE
            JD = np.empty((self.xf.size, self.n_params))
            JD[:, :n] = self.Vf * dA * self.A0
            JD[:, n:2 * n] = self.Vf * dG * self.g0
            JD[:, 2 * n:] = np.column_stack([np.zeros_like(t), -np.ones_like(t) / STRAY_SCALE, -2 * t / STRAY_SCALE])
            c = self.const.e / self.const.M_ion
            w = np.sqrt(np.maximum(c * D, 1e-30))
            rows.append(-np.sqrt(self.weight_t2) * (c / (2 * w))[:, None] * JD * (D > 0)[:, None])
        if self.x1.size:
            E1, J1 = e_jac(self.x1, self.V1)
            active = (np.abs(E1) > self.margin).astype(float)
            rows.append(np.sqrt(pen) * (active * np.sign(E1))[:, None] * J1)
        return np.vstack(rows)

    def to_model(self, theta, layout: TrapLayout, metadata=None) -> CalibratedTrapModel:
        A, G, S = (v[0] for v in self.unpack(theta))
        pairs = {k: LorentzParams(float(a), float(g), float(xc)) for k, a, g, xc in zip(self.keys, A, G, self.xc)}
        stray = StrayCoeffs(a=float(S[2] / STRAY_SCALE**2), b=float(S[1] / STRAY_SCALE), c=float(S[0]))
        return CalibratedTrapModel(layout, pairs, stray, dict(metadata or {}))

    def theta_from_model(self, model: CalibratedTrapModel) -> np.ndarray:
        A = np.array([model.pairs[k].A for k in self.keys]) / self.A0
        G = np.array([model.pairs[k].gamma for k in self.keys]) / self.g0
        s = model.stray
        return np.r_[A, G, s.c, s.b * STRAY_SCALE, s.a * STRAY_SCALE**2]


def _voltage_rows(settings, keys):
    return np.array([u.vector(keys) for u in settings]).reshape(len(settings), len(keys))


def _single_margins(dataset: Dataset, prior_model: CalibratedTrapModel, cfg: ObjectiveConfig, const):
    """Field margins ``M w^2 dx / e`` for each single-ion observation.

    ``w`` is the measured frequency at the same voltages when one exists,
    otherwise the prior model's curvature at the observed position.
    """
    margins = []
    by_setting = {tuple(sorted(f.setting.V.items())): f.omega_x for f in dataset.freqs}
    for s in dataset.singles:
        key = tuple(sorted(s.setting.V.items()))
        if key in by_setting:
            w2 = by_setting[key] ** 2
        else:
            _, D = prior_model.field(s.setting)(np.array([s.x]))
            w2 = const.e * max(float(D[0]), 1.0) / const.M_ion
        dx = max(s.sigma_pos, cfg.min_position_uncertainty)
        margins.append(cfg.constraint_margin_factor * const.M_ion * w2 * dx / const.e)
    return np.array(margins)


def build_problem(dataset: Dataset, layout: TrapLayout, cfg: ObjectiveConfig = ObjectiveConfig(),
                  const: PhysicalConstants = CONSTANTS, prior: dict[int, LorentzParams] | None = None) -> Problem:
    keys = layout.active
    prior = prior or analytic_prior(layout, cfg.prior_fit_range)
    A0 = np.array([prior[k].A for k in keys])
    g0 = np.array([prior[k].gamma for k in keys])
    xc = np.array([prior[k].x_c for k in keys])

    strings = [s for s in dataset.strings if s.positions.size >= 2]
    if strings:
        xs = np.concatenate([s.positions for s in strings])
        Eion = np.concatenate([coulomb_probe(s.positions, const) for s in strings])
        Vs = np.concatenate([np.repeat(_voltage_rows([s.setting], keys), s.positions.size, axis=0) for s in strings])
    else:
        xs, Eion, Vs = np.zeros(0), np.zeros(0), np.zeros((0, len(keys)))
    n_fit = dataset.n_fit_freqs if cfg.n_fit_freqs is None else cfg.n_fit_freqs
    freqs = dataset.freqs[:n_fit]
    xf = np.array([f.x_eq for f in freqs])
    wf = np.array([f.omega_x for f in freqs])
    Vf = _voltage_rows([f.setting for f in freqs], keys)

    prior_model = CalibratedTrapModel(layout, dict(prior))
    x1 = np.array([s.x for s in dataset.singles])
    V1 = _voltage_rows([s.setting for s in dataset.singles], keys)
    margin = _single_margins(dataset, prior_model, cfg, const)

    # measurement-variance scalarisation
    sig_pos = [s.sigma_pos for s in strings if s.sigma_pos > 0]
    sig_pos = float(np.median(sig_pos)) if sig_pos else NOMINAL_SIGMA_POS
    if strings:
        sig_e = float(np.median(np.concatenate([field_uncertainty(s, sig_pos, const) for s in strings])))
    else:
        sig_e = 1.0
    sig_w = [f.sigma_omega for f in freqs if f.sigma_omega > 0]
    sig_w = float(np.median(sig_w)) if sig_w else NOMINAL_SIGMA_FREQ
    weight_t2 = cfg.weight_t2 if cfg.weight_t2 is not None else (sig_e / sig_w) ** 2

    if cfg.penalty_coefficient is not None:
        penalty = cfg.penalty_coefficient
    elif margin.size:
        # a violation of one margin costs as much as a typical t1 term
        penalty = sig_e**2 / float(np.median(margin)) ** 2
    else:
        penalty = 0.0

    xall = np.r_[xs, xf, x1]
    reach = max(float(np.max(np.abs(xall))) if xall.size else STRAY_SCALE, STRAY_SCALE)
    r = reach / STRAY_SCALE
    lo = np.r_[np.full(len(keys), cfg.A_bounds[0]), np.full(len(keys), cfg.gamma_bounds[0]),
               -cfg.stray_max, -cfg.stray_max / r, -cfg.stray_max / r**2]
    hi = np.r_[np.full(len(keys), cfg.A_bounds[1]), np.full(len(keys), cfg.gamma_bounds[1]),
               cfg.stray_max, cfg.stray_max / r, cfg.stray_max / r**2]
    d_penalty = 1e6 * sig_w**2
    return Problem(tuple(keys), xc, A0, g0, xs, Vs, Eion, xf, Vf, wf, x1, V1, margin, float(weight_t2),
                   float(penalty), lo, hi, d_penalty, const)


def objective_t1(model: CalibratedTrapModel, strings: list[IonStringObservation],
                 const: PhysicalConstants = CONSTANTS) -> float:
    total = 0.0
    for s in strings:
        if s.positions.size < 2:
            continue
        E, _ = model.field(s.setting)(s.positions)
        total += float(np.sum((coulomb_probe(s.positions, const) - E) ** 2))
    return total


def objective_t2(model: CalibratedTrapModel, freqs: list[FrequencyObservation], const: PhysicalConstants = CONSTANTS,
                 d_penalty: float = 1e6 * NOMINAL_SIGMA_FREQ**2) -> float:
    total = 0.0
    for f in freqs:
        _, D = model.field(f.setting)(np.array([f.x_eq]))
        D = float(D[0])
        if D <= 0:
            total += d_penalty
        else:
            total += (f.omega_x - np.sqrt(const.e * D / const.M_ion)) ** 2
    return total


def constraint_violation(model: CalibratedTrapModel, singles: list[SingleIonObservation], margins) -> float:
    """Largest excess of ``|E_model(x_j)|`` over the allowed field margin (0 when feasible)."""
    worst = 0.0
    for s, m in zip(singles, np.broadcast_to(np.asarray(margins, dtype=float), (len(singles),))):
        E, _ = model.field(s.setting)(np.array([s.x]))
        worst = max(worst, abs(float(E[0])) - float(m))
    return max(worst, 0.0)


def single_ion_margin(omega: float, dx: float, const: PhysicalConstants = CONSTANTS) -> float:
    return const.M_ion * omega**2 * dx / const.e


@dataclass
class DEResult:
    x: np.ndarray
    fun: float
    generations: int
    converged: bool
    trace: list[float]
    spread: float
    population: np.ndarray
    energies: np.ndarray


def differential_evolution(func, lo, hi, x0, params: DEParams, n_params: int) -> DEResult:
    """DE/best/1/bin with a population seeded around ``x0``; ``func`` maps a population to energies."""
    rng = np.random.default_rng(params.seed)
    npop = params.population or 10 * n_params
    span = hi - lo
    # Latin hypercube around x0, clipped into the box
    width = np.minimum(params.init_spread * np.maximum(np.abs(x0), 1e-12), 0.5 * span)
    width = np.where(np.abs(x0) > 1e-12, width, 0.1 * span)
    cells = (np.argsort(rng.random((npop, n_params)), axis=0) + rng.random((npop, n_params))) / npop
    pop = np.clip(x0 - width + 2 * width * cells, lo, hi)
    pop[0] = np.clip(x0, lo, hi)
    energy = func(pop)
    trace = []
    converged = False
    gen = 0
    for gen in range(1, params.max_generations + 1):
        best = int(np.argmin(energy))
        r = np.array([rng.choice(npop - 1, 2, replace=False) for _ in range(npop)])
        r[r >= np.arange(npop)[:, None]] += 1
        mutant = pop[best] + params.F * (pop[r[:, 0]] - pop[r[:, 1]])
        cross = rng.random((npop, n_params)) < params.CR
        cross[np.arange(npop), rng.integers(0, n_params, npop)] = True
        trial = np.where(cross, mutant, pop)
        # out-of-box components are resampled between the parent and the violated bound
        low = trial < lo
        high = trial > hi
        u = rng.random((npop, n_params))
        trial = np.where(low, lo + u * (pop - lo), trial)
        trial = np.where(high, hi - u * (hi - pop), trial)
        e_trial = func(trial)
        better = e_trial <= energy
        pop[better] = trial[better]
        energy[better] = e_trial[better]
        trace.append(float(energy.min()))
        if np.std(energy) <= params.tol * abs(np.mean(energy)):
            converged = True
            break
    best = int(np.argmin(energy))
    spread = float(np.mean(np.std(pop, axis=0) / span))
    return DEResult(pop[best].copy(), float(energy[best]), gen, converged, trace, spread, pop, energy)


def _polish(problem: Problem, theta, penalty):
    res = least_squares(problem.residuals, theta, jac=problem.jacobian, bounds=(problem.lo, problem.hi),
                        method="trf", x_scale="jac", kwargs={"penalty": penalty}, xtol=1e-12, ftol=1e-12,
                        gtol=1e-10, max_nfev=500)
    return res


def calibrate_optimization(dataset: Dataset, layout: TrapLayout, config: ObjectiveConfig = ObjectiveConfig(),
                           const: PhysicalConstants = CONSTANTS, raise_on_flag: bool = False):
    """Fit the 2N+3 Lorentz/stray parameters to all observation types.

    Returns ``(model, diagnostics)``. ``diagnostics["flags"]`` lists
    ``"infeasible"`` and/or ``"not_converged"``; with ``raise_on_flag`` a
    :class:`CalibrationFlagged` carrying the best model is raised instead.
    """
    if len(dataset.singles) < 2:
        raise ValueError("at least two single-ion observations are required")
    if not any(s.positions.size >= 2 for s in dataset.strings):
        raise ValueError("at least one ion-string observation is required")
    prob = build_problem(dataset, layout, config, const)
    n = prob.n_params
    x0 = np.r_[np.ones(2 * prob.n_pairs), 0.0, 0.0, 0.0]

    de = differential_evolution(prob.scalar, prob.lo, prob.hi, x0, config.de, n)
    theta = de.x
    penalty = prob.penalty
    polish_info = {}
    polished_ok = False
    if config.polish:
        res = _polish(prob, theta, penalty)
        if prob.scalar(res.x, penalty)[0] <= prob.scalar(theta, penalty)[0]:
            theta = res.x
        polished_ok = res.status > 0
        polish_info = {"status": int(res.status), "nfev": int(res.nfev)}

    tol = config.feasibility_tol * float(np.min(prob.margin)) if prob.margin.size else 0.0
    viol = float(prob.terms(theta)[0, 2])
    rounds = 0
    while config.polish and viol > tol and penalty > 0 and rounds < 8:
        penalty *= 10.0
        res = _polish(prob, theta, penalty)
        theta = res.x
        viol = float(prob.terms(theta)[0, 2])
        rounds += 1

    t1, t2, viol = prob.terms(theta)[0]
    flags = []
    if viol > tol:
        flags.append("infeasible")
    if not (de.converged or polished_ok):
        flags.append("not_converged")
    A, G, S = (v[0] for v in prob.unpack(theta))
    diagnostics = {
        "method": "opt",
        "n_params": n,
        "objective": {"t1": float(t1), "t2": float(t2), "weighted_t2": float(prob.weight_t2 * t2),
                      "violation": float(viol), "penalty_term": float(penalty * viol**2),
                      "total": float(t1 + prob.weight_t2 * t2 + penalty * viol**2)},
        "weight_t2": prob.weight_t2,
        "penalty_coefficient": prob.penalty,
        "penalty_final": penalty,
        "penalty_rounds": rounds,
        "feasibility_tol_V_per_m": tol,
        "margins_V_per_m": prob.margin.tolist(),
        "generations": de.generations,
        "de_converged": de.converged,
        "de_best": de.fun,
        "population_spread": de.spread,
        "trace": de.trace,
        "polish": polish_info,
        "params": {str(k): {"A": float(a), "gamma_um": float(g / UM)} for k, a, g in zip(prob.keys, A, G)},
        "stray_poly_V_per_m": S.tolist(),
        "flags": flags,
    }
    meta = {"method": "opt", "objective": diagnostics["objective"], "flags": flags, "seed": config.de.seed}
    model = prob.to_model(theta, layout, meta)
    if flags and raise_on_flag:
        raise CalibrationFlagged(", ".join(flags), model, diagnostics)
    return model, diagnostics


def recalibrate_stray(model: CalibratedTrapModel, fresh: Dataset, const: PhysicalConstants = CONSTANTS,
                      refine_positions: bool = True) -> StrayCoeffs:
    """Refit only the stray polynomial against fresh observations, electrode terms frozen.

    A linear least-squares fit of the field residuals at the imaged ions gives
    the starting point; the result is then refined on predicted-vs-observed
    ion positions (strings and single ions).
    """
    from .ion_physics import EquilibriumOptions, equilibrium_positions, stable_equilibrium

    strings = [s for s in fresh.strings if s.positions.size >= 2]
    n_info = sum(s.positions.size for s in strings) + len(fresh.singles)
    if n_info < 3:
        raise ValueError("need at least three informative observations to refit the stray field")
    base = replace(model, stray=StrayCoeffs())
    rows, rhs = [], []
    for s in strings:
        E, _ = base.field(s.setting)(s.positions)
        t = s.positions / STRAY_SCALE
        rows.append(np.column_stack([np.ones_like(t), t, t * t]))
        rhs.append(coulomb_probe(s.positions, const) - E)
    for s in fresh.singles:
        E, _ = base.field(s.setting)(np.array([s.x]))
        t = s.x / STRAY_SCALE
        rows.append(np.array([[1.0, t, t * t]]))
        rhs.append(-E)
    coef, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)

    def to_stray(c):
        return StrayCoeffs(a=float(c[2] / STRAY_SCALE**2), b=float(c[1] / STRAY_SCALE), c=float(c[0]))

    if not refine_positions:
        return to_stray(coef)

    opts = EquilibriumOptions(region=(-2e-3, 2e-3), strategy="auto")
    big = 50 * UM

    def resid(c):
        m = replace(model, stray=to_stray(c))
        out = []
        for s in strings:
            f = m.field(s.setting)
            try:
                sol = equilibrium_positions(f, s.positions.size, s.positions, opts, const)
                out.append((sol.positions - s.positions) / UM)
            except Exception:
                out.append(np.full(s.positions.size, big / UM))
        for s in fresh.singles:
            try:
                x = stable_equilibrium(m.field(s.setting), s.x, 100 * UM, const=const)
                out.append(np.array([(x - s.x) / UM]))
            except Exception:
                out.append(np.array([big / UM]))
        return np.concatenate(out)

    res = least_squares(resid, coef, diff_step=1e-6, xtol=1e-10, ftol=1e-10, max_nfev=200)
    if np.sum(res.fun**2) <= np.sum(resid(coef) ** 2):
        coef = res.x
    return to_stray(coef)
