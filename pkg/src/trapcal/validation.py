"""Model validation, measurement-error budgets and fit-quality studies."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import analytic_field as af
from .calibrate_interp import find_sweeps
from .core import CONSTANTS, UM, PhysicalConstants, TrapLayout, default_layout
from .ion_physics import (EquilibriumError, EquilibriumOptions, UnstableAxisError, coulomb_probe,
                          equilibrium_positions, secular_frequency, stable_equilibrium)
from .parametric import CalibratedTrapModel, eval_stray, fit_profile
from .synthetic import ROI, Dataset, IonStringObservation, TruthModel

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi


@dataclass(frozen=True)
class PairPositionError:
    k: int
    mean_um: float
    std_um: float
    n_ions: int
    n_settings: int
    n_failed: int


@dataclass(frozen=True)
class FrequencyError:
    setting_id: str
    role: str  # "fit" or "validation"
    freq_obs_kHz: float
    freq_model_kHz: float
    relative_error: float  # model / observed - 1; nan when the model does not confine


@dataclass
class ValidationReport:
    positions: list[PairPositionError]
    frequencies: list[FrequencyError]
    stray_x_um: np.ndarray
    stray_E: np.ndarray

    @property
    def mean_position_error_um(self) -> float:
        w = np.array([p.n_ions for p in self.positions], dtype=float)
        m = np.array([p.mean_um for p in self.positions])
        ok = w > 0
        return float(np.sum(w[ok] * m[ok]) / np.sum(w[ok])) if ok.any() else float("nan")

    def to_dict(self) -> dict:
        return {
            "mean_position_error_um": self.mean_position_error_um,
            "positions": [p.__dict__ for p in self.positions],
            "frequencies": [f.__dict__ for f in self.frequencies],
            "stray": {"x_um": (self.stray_x_um).tolist(), "E_V_per_m": self.stray_E.tolist()},
        }


def select_settings(strings: list[IonStringObservation], n_per_pair: int = 5) -> dict[int, list[IonStringObservation]]:
    """Per swept pair, ``n_per_pair`` strings spanning its voltage range evenly."""
    out: dict[int, list[IonStringObservation]] = {}
    for sw in find_sweeps(strings):
        pool = out.setdefault(sw.k, [])
        pool.extend(sw.strings)
    for k, pool in out.items():
        v = np.array([s.setting[k] for s in pool])
        order = np.argsort(v, kind="stable")
        picks = np.unique(np.rint(np.linspace(0, len(pool) - 1, min(n_per_pair, len(pool)))).astype(int))
        out[k] = [pool[order[i]] for i in picks]
    return out


def _model_chain(model: CalibratedTrapModel, obs: IonStringObservation, const: PhysicalConstants):
    f = model.field(obs.setting)
    opts = EquilibriumOptions(region=(-2e-3, 2e-3), strategy="auto")
    return equilibrium_positions(f, obs.positions.size, obs.positions, opts, const).positions


def validate_model(model: CalibratedTrapModel, dataset: Dataset, n_per_pair: int = 5, n_fit: int | None = None,
                   const: PhysicalConstants = CONSTANTS, stray_grid=None) -> ValidationReport:
    """Predicted vs observed ion positions per pair and secular frequencies for every frequency observation."""
    chosen = select_settings(list(dataset.strings), n_per_pair)
    positions = []
    for k in sorted(chosen):
        errs, failed = [], 0
        for obs in chosen[k]:
            try:
                x = _model_chain(model, obs, const)
            except (EquilibriumError, ValueError) as exc:
                log.warning("pair %d setting %s: no model equilibrium (%s)", k, obs.setting.id, exc)
                failed += 1
                continue
            errs.append(np.abs(x - obs.positions))
        e = np.concatenate(errs) / UM if errs else np.zeros(0)
        positions.append(PairPositionError(k, float(e.mean()) if e.size else float("nan"),
                                           float(e.std()) if e.size else float("nan"), int(e.size),
                                           len(chosen[k]), failed))

    n_fit = dataset.n_fit_freqs if n_fit is None else n_fit
    freqs = []
    for i, fo in enumerate(dataset.freqs):
        role = "fit" if i < n_fit else "validation"
        f_obs = fo.omega_x / TWO_PI / 1e3
        try:
            field = model.field(fo.setting)
            x_eq = stable_equilibrium(field, fo.x_eq, 100 * UM, const=const)
            w = secular_frequency(field(np.array([x_eq]))[1][0], const)
            f_mod = w / TWO_PI / 1e3
            rel = f_mod / f_obs - 1
        except (EquilibriumError, UnstableAxisError, ValueError):
            f_mod, rel = float("nan"), float("nan")
        freqs.append(FrequencyError(fo.setting.id, role, float(f_obs), float(f_mod), float(rel)))

    xs = np.linspace(ROI[0], ROI[1], 57) if stray_grid is None else np.asarray(stray_grid)
    es, _ = eval_stray(model.stray, xs)
    return ValidationReport(positions, freqs, xs / UM, es)


@dataclass(frozen=True)
class ErrorMapEntry:
    setting_id: str
    pair: int | None
    x_um: np.ndarray
    random: np.ndarray  # V/m, RMS over noise draws
    systematic: np.ndarray  # V/m, field change from the height shift


def measurement_error_map(dataset: Dataset, truth: TruthModel, n_draws: int = 100, seed: int = 0,
                          sigma_pos: float | None = None, const: PhysicalConstants = CONSTANTS) -> list[ErrorMapEntry]:
    """Random and systematic field-error budget at every imaged ion.

    The random part re-draws position noise (``sigma_pos``, default the
    observation's own) and takes the RMS change of the Coulomb-inferred field.
    The systematic part is the change of the electrode field between the
    nominal probe height and the height the truth model assigns the setting.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    rng = np.random.default_rng(seed)
    pair_of = {}
    for sw in find_sweeps(list(dataset.strings)):
        for s in sw.strings:
            pair_of.setdefault(id(s), sw.k)
    out = []
    y0 = truth.layout.y0
    for obs in dataset.strings:
        x = obs.positions
        if x.size < 2:
            continue
        sig = obs.sigma_pos if sigma_pos is None else sigma_pos
        e0 = coulomb_probe(x, const)
        acc = np.zeros(x.size)
        for _ in range(n_draws):
            xd = np.sort(x + rng.normal(0.0, sig, x.size)) if sig > 0 else x
            acc += (coulomb_probe(xd, const) - e0) ** 2
        rand = np.sqrt(acc / n_draws)
        y = truth.height(obs.setting)
        V = obs.setting.vector(truth.layout.active)
        _, ex_y, _ = truth.unit_fields(x, y)
        _, ex_0, _ = truth.unit_fields(x, y0)
        sysm = np.abs(V @ (ex_y - ex_0))
        out.append(ErrorMapEntry(obs.setting.id, pair_of.get(id(obs)), x / UM, rand, sysm))
    return out


def error_map_summary(entries: list[ErrorMapEntry]) -> dict[int, dict[str, float]]:
    """Mean random and systematic error per swept pair."""
    by: dict[int, list[ErrorMapEntry]] = {}
    for e in entries:
        if e.pair is not None:
            by.setdefault(e.pair, []).append(e)
    out = {}
    for k, es in sorted(by.items()):
        r = np.concatenate([e.random for e in es])
        s = np.concatenate([e.systematic for e in es])
        out[k] = {"random_mean": float(r.mean()), "random_max": float(r.max()),
                  "systematic_mean": float(s.mean()), "systematic_max": float(s.max()), "n_ions": int(r.size)}
    return out


ROI_RANGES_UM = tuple(range(400, 2201, 100))
WIDTHS_UM = (10, 25, 50, 75, 100, 125, 150, 175, 200, 250, 300, 350, 400, 450, 500)


def fit_quality_study(kind: str, layout: TrapLayout | None = None, *, k: int = 8, ranges_um=ROI_RANGES_UM,
                      widths_um=WIDTHS_UM, step_um: float = 1.0) -> list[dict]:
    """Quality of unit-potential fits against the closed-form potential.

    ``kind="roi"`` varies the fitted range (centred on pair ``k``) for the
    Lorentz model on ``layout``. ``kind="width"`` varies the electrode width on
    a 200 um pitch, 3 mm long trap and compares the Lorentz and Lorentz+Gauss
    models over the central 2000 um.
    """
    rows = []
    if kind == "roi":
        layout = layout or default_layout()
        xc = layout.pair(k).x_center
        for r in ranges_um:
            xs = xc + np.arange(-r / 2, r / 2 + step_um / 2, step_um) * UM
            phi, _, _ = af.pair_fields(layout, k, xs, layout.y0)
            _, st = fit_profile(xs, phi, "lorentz", xc)
            rows.append({"range_um": float(r), "model": "lorentz", **_stats_row(st)})
    elif kind == "width":
        for w in widths_um:
            lay = default_layout(width=w * UM, gap=(200 - w) * UM if w < 200 else 0.0, length=3000 * UM,
                                 separation=200 * UM)
            xs = np.arange(-1000, 1000 + step_um / 2, step_um) * UM
            phi, _, _ = af.pair_fields(lay, 8, xs, lay.y0)
            for model in ("lorentz", "lorentz_gauss"):
                _, st = fit_profile(xs, phi, model, 0.0)
                rows.append({"width_um": float(w), "model": model, **_stats_row(st)})
    else:
        raise ValueError(f"unknown study kind {kind!r}")
    return rows


def _stats_row(st) -> dict:
    return {"normalized_error": st.normalized_error, "normalized_error_std": st.normalized_error_std,
            "relative_error": st.relative_error, "relative_error_std": st.relative_error_std,
            "abs_normalized_error": st.abs_normalized_error, "abs_relative_error": st.abs_relative_error}


def stray_comparison(model_a: CalibratedTrapModel, model_b: CalibratedTrapModel, xs=None) -> dict:
    """Stray fields of two calibrations on a common grid (metres in, table in um and V/m)."""
    xs = np.linspace(ROI[0], ROI[1], 57) if xs is None else np.asarray(xs, dtype=float)
    ea, _ = eval_stray(model_a.stray, xs)
    eb, _ = eval_stray(model_b.stray, xs)
    return {"x_um": xs / UM, "E_a": ea, "E_b": eb, "diff": eb - ea}
