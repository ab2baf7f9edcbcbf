"""Calibratable model family: Lorentz (and Lorentz + Gauss) unit potentials per
electrode pair plus a quadratic stray field.

Sign convention throughout: ``Ex = -dphi/dx`` and ``D = d2phi/dx2 = -dEx/dx``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

from .core import UM, TrapLayout, VoltageSetting


@dataclass(frozen=True)
class LorentzParams:
    A: float  # V m
    gamma: float  # m
    x_c: float  # m

    def __post_init__(self):
        if not (self.A > 0 and self.gamma > 0):
            raise ValueError(f"Lorentz parameters need A > 0 and gamma > 0, got {self}")


@dataclass(frozen=True)
class LorentzGaussParams:
    a: float  # V m
    gamma: float  # m
    b: float  # V
    w: float  # m^2, Gaussian denominator exp(-(x - x_c)^2 / w)
    x_c: float

    def __post_init__(self):
        if not (self.a > 0 and self.gamma > 0 and self.w > 0):
            raise ValueError(f"invalid Lorentz+Gauss parameters {self}")


@dataclass(frozen=True)
class StrayCoeffs:
    """E_s(x) = a x^2 + b x + c in SI (V/m^3, V/m^2, V/m)."""

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


def lorentz_terms(A, gamma, x_c, x):
    """Vectorised ``(phi, Ex, D)`` of the Lorentz ansatz; all inputs broadcast."""
    u = x - x_c
    q = u * u + gamma * gamma
    phi = A * gamma / q
    ex = 2 * A * gamma * u / (q * q)
    d = 2 * A * gamma * (3 * u * u - gamma * gamma) / (q * q * q)
    return phi, ex, d


def eval_lorentz(p: LorentzParams, x):
    return lorentz_terms(p.A, p.gamma, p.x_c, np.asarray(x, dtype=float))


def eval_lorentz_gauss(p: LorentzGaussParams, x):
    x = np.asarray(x, dtype=float)
    phi, ex, d = lorentz_terms(p.a, p.gamma, p.x_c, x)
    u = x - p.x_c
    g = p.b * np.exp(-u * u / p.w)
    phi = phi + g
    ex = ex + g * 2 * u / p.w
    d = d + g * (4 * u * u / p.w - 2) / p.w
    return phi, ex, d


def eval_stray(s: StrayCoeffs, x):
    """Return ``(Es, Ds)``; ``Ds = -dEs/dx``."""
    x = np.asarray(x, dtype=float)
    es = s.a * x * x + s.b * x + s.c
    ds = -(2 * s.a * x + s.b) + 0 * x
    return es, ds


def eval_pair(p, x):
    if isinstance(p, LorentzGaussParams):
        return eval_lorentz_gauss(p, x)
    return eval_lorentz(p, x)


@dataclass
class CalibratedTrapModel:
    layout: TrapLayout
    pairs: dict[int, LorentzParams | LorentzGaussParams]
    stray: StrayCoeffs = field(default_factory=StrayCoeffs)
    metadata: dict = field(default_factory=dict)

    @property
    def keys(self) -> tuple[int, ...]:
        return tuple(sorted(self.pairs))

    @property
    def n_params(self) -> int:
        per = {LorentzParams: 2, LorentzGaussParams: 4}
        return sum(per[type(p)] for p in self.pairs.values()) + 3

    def unit_fields(self, x):
        """Per-pair unit fields, shape ``(n_pairs, *x.shape)`` for Ex and D."""
        x = np.asarray(x, dtype=float)
        ex = np.empty((len(self.pairs),) + x.shape)
        d = np.empty_like(ex)
        for i, k in enumerate(self.keys):
            _, ex[i], d[i] = eval_pair(self.pairs[k], x)
        return ex, d

    def field(self, u: VoltageSetting):
        """Callable ``x -> (E, D)`` for a fixed voltage setting."""
        missing = [k for k in self.keys if k not in u.V]
        if missing:
            raise KeyError(f"setting {u.id!r} has no voltage for active pairs {missing}")
        V = u.vector(self.keys)

        def f(x):
            ex, d = self.unit_fields(x)
            es, ds = eval_stray(self.stray, x)
            return np.tensordot(V, ex, axes=1) + es, np.tensordot(V, d, axes=1) + ds

        return f

    def to_dict(self) -> dict:
        pairs = []
        for k in self.keys:
            p = self.pairs[k]
            if isinstance(p, LorentzParams):
                pairs.append({"k": k, "kind": "lorentz", "A": p.A, "gamma_um": p.gamma / UM, "x_c_um": p.x_c / UM})
            else:
                pairs.append(
                    {"k": k, "kind": "lorentz_gauss", "a": p.a, "gamma_um": p.gamma / UM, "b": p.b,
                     "w_um2": p.w / UM**2, "x_c_um": p.x_c / UM}
                )
        return {
            "layout": self.layout.to_dict(),
            "pairs": pairs,
            "stray": asdict(self.stray),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedTrapModel":
        layout = TrapLayout.from_dict(d["layout"])
        pairs = {}
        for p in d["pairs"]:
            if p.get("kind", "lorentz") == "lorentz":
                pairs[int(p["k"])] = LorentzParams(p["A"], p["gamma_um"] * UM, p["x_c_um"] * UM)
            else:
                pairs[int(p["k"])] = LorentzGaussParams(p["a"], p["gamma_um"] * UM, p["b"], p["w_um2"] * UM**2,
                                                        p["x_c_um"] * UM)
        return cls(layout, pairs, StrayCoeffs(**d["stray"]), d.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibratedTrapModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def eval_total(m: CalibratedTrapModel, u: VoltageSetting, x):
    return m.field(u)(x)


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitStats:
    """Fit-minus-data statistics on the fitted samples.

    ``normalized_error`` is the mean difference divided by the peak potential
    and ``relative_error`` the mean of difference / potential; both are signed,
    with their spreads in the ``*_std`` fields. The ``abs_*`` variants average
    the magnitude instead.
    """

    normalized_error: float
    normalized_error_std: float
    relative_error: float
    relative_error_std: float
    abs_normalized_error: float
    abs_relative_error: float
    nfev: int


def _hwhm(xs, phis, x_c):
    peak = np.interp(x_c, xs, phis)
    half = 0.5 * peak
    above = xs[phis >= half]
    if above.size < 2:
        return 0.25 * (xs[-1] - xs[0])
    return 0.5 * (above[-1] - above[0])


def fit_profile(xs: Sequence[float], phis: Sequence[float], kind: str = "lorentz", x_c: float = 0.0,
                free_center: bool = False, max_nfev: int = 2000):
    """Least-squares fit of a single-peaked unit potential with the centre fixed.

    Returns ``(params, FitStats)``.
    """
    xs = np.asarray(xs, dtype=float)
    phis = np.asarray(phis, dtype=float)
    need = {"lorentz": 8, "lorentz_gauss": 12}.get(kind)
    if need is None:
        raise ValueError(f"unknown model kind {kind!r}")
    if xs.size < need:
        raise ValueError(f"{kind} fit needs at least {need} samples")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("xs must be strictly increasing")

    # work in scaled units so every parameter is O(1)
    scale_x = _hwhm(xs, phis, x_c)
    scale_phi = float(np.max(np.abs(phis)))
    u = (xs - x_c) / scale_x
    f = phis / scale_phi

    if kind == "lorentz":
        p0 = [1.0, 1.0] + ([0.0] if free_center else [])

        def model(p):
            c = p[2] if free_center else 0.0
            return lorentz_terms(p[0], p[1], c, u)[0]

        def jac(p):
            c = p[2] if free_center else 0.0
            du = u - c
            q = du * du + p[1] ** 2
            cols = [p[1] / q, p[0] * (du * du - p[1] ** 2) / (q * q)]
            if free_center:
                cols.append(2 * p[0] * p[1] * du / (q * q))
            return np.column_stack(cols)

        lo = [1e-12, 1e-6] + ([-np.inf] if free_center else [])
    elif kind == "lorentz_gauss":
        p0 = [0.8, 1.0, 0.2, 1.0] + ([0.0] if free_center else [])

        def model(p):
            c = p[4] if free_center else 0.0
            du = u - c
            return p[0] * p[1] / (du * du + p[1] ** 2) + p[2] * np.exp(-du * du / p[3])

        def jac(p):
            c = p[4] if free_center else 0.0
            du = u - c
            q = du * du + p[1] ** 2
            g = np.exp(-du * du / p[3])
            cols = [p[1] / q, p[0] * (du * du - p[1] ** 2) / (q * q), g, p[2] * g * du * du / p[3] ** 2]
            if free_center:
                cols.append(2 * p[0] * p[1] * du / (q * q) + p[2] * g * 2 * du / p[3])
            return np.column_stack(cols)

        lo = [1e-12, 1e-6, -np.inf, 1e-6] + ([-np.inf] if free_center else [])
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    res = least_squares(lambda p: model(p) - f, p0, jac=jac, bounds=(lo, np.inf), method="trf",
                        x_scale="jac", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
    if res.status <= 0:
        raise FitError(f"{kind} fit did not converge: residual norm {np.linalg.norm(res.fun):.3e}")
    p = res.x
    resid = res.fun * scale_phi
    xc_fit = x_c + (p[-1] * scale_x if free_center else 0.0)
    if kind == "lorentz":
        params = LorentzParams(p[0] * scale_phi * scale_x, p[1] * scale_x, xc_fit)
    else:
        params = LorentzGaussParams(p[0] * scale_phi * scale_x, p[1] * scale_x, p[2] * scale_phi,
                                    p[3] * scale_x**2, xc_fit)
    norm = resid / np.max(phis)
    rel = resid / phis
    stats = FitStats(float(norm.mean()), float(norm.std()), float(rel.mean()), float(rel.std()),
                     float(np.abs(norm).mean()), float(np.abs(rel).mean()), int(res.nfev))
    return params, stats
