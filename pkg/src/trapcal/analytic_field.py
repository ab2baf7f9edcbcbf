"""Closed-form potential of rectangular surface electrodes.

The unit-voltage potential of a rectangle in an infinite grounded plane is a
signed sum of four corner terms ``arctan(u v / (y R))`` with ``u = x_c - x``,
``v = z_c - z`` and ``R = sqrt(y^2 + u^2 + v^2)``. All axial derivatives below
are exact differentiations of that expression.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import UM, ElectrodeRect, TrapLayout

_TWO_PI = 2 * np.pi


def _check_height(y):
    if np.any(np.asarray(y) <= 0):
        raise ValueError("points must lie strictly above the electrode plane (y > 0)")


def _corners(rect: ElectrodeRect):
    # (x corner, z corner, sign)
    return (
        (rect.x2, rect.z2, 1.0),
        (rect.x1, rect.z2, -1.0),
        (rect.x2, rect.z1, -1.0),
        (rect.x1, rect.z1, 1.0),
    )


def rect_potential(rect: ElectrodeRect, x, y, z=0.0):
    """Potential (V per electrode volt) of ``rect`` at (x, y, z). Broadcasts."""
    x, y, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, z)))
    _check_height(y)
    total = np.zeros(x.shape)
    for xc, zc, s in _corners(rect):
        u = xc - x
        v = zc - z
        r = np.sqrt(y * y + u * u + v * v)
        total += s * np.arctan(u * v / (y * r))
    return total / _TWO_PI


def rect_axial_derivatives(rect: ElectrodeRect, x, y, z=0.0):
    """Return ``(Ex, D)`` with Ex = -dphi/dx and D = d2phi/dx2."""
    x, y, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, z)))
    _check_height(y)
    ex = np.zeros(x.shape)
    d = np.zeros(x.shape)
    y2 = y * y
    for xc, zc, s in _corners(rect):
        u = xc - x
        v = zc - z
        r2 = y2 + u * u + v * v
        r = np.sqrt(r2)
        q = y2 + u * u
        ex += s * v * y / (r * q)
        d -= s * v * y * u * (q + 2 * r2) / (r2 * r * q * q)
    return ex / _TWO_PI, d / _TWO_PI


def rect_height_field(rect: ElectrodeRect, x, y, z=0.0):
    """Vertical field Ey = -dphi/dy per electrode volt."""
    x, y, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, z)))
    _check_height(y)
    dphi = np.zeros(x.shape)
    y2 = y * y
    for xc, zc, s in _corners(rect):
        u = xc - x
        v = zc - z
        r2 = y2 + u * u + v * v
        r = np.sqrt(r2)
        dphi -= s * u * v * (r2 + y2) / (r * (y2 + u * u) * (y2 + v * v))
    return -dphi / _TWO_PI


@dataclass(frozen=True)
class FieldSample:
    x: float
    phi: float
    Ex: float
    D: float


def pair_fields(layout: TrapLayout, k: int, xs, y):
    """Arrays ``(phi, Ex, D)`` of pair ``k`` along the axis (z = 0) at height ``y``."""
    pair = layout.pair(k)
    xs = np.asarray(xs, dtype=float)
    phi = np.zeros(np.broadcast(xs, y).shape)
    ex = np.zeros_like(phi)
    d = np.zeros_like(phi)
    for rect in pair.rects:
        phi += rect_potential(rect, xs, y)
        e_r, d_r = rect_axial_derivatives(rect, xs, y)
        ex += e_r
        d += d_r
    return phi, ex, d


def pair_profile(layout: TrapLayout, k: int, y: float, xs) -> list[FieldSample]:
    phi, ex, d = pair_fields(layout, k, xs, y)
    return [FieldSample(float(a), float(b), float(c), float(e)) for a, b, c, e in zip(np.asarray(xs, float), phi, ex, d)]


def pair_height_field(layout: TrapLayout, k: int, xs, y):
    pair = layout.pair(k)
    return sum(rect_height_field(r, xs, y) for r in pair.rects)


def height_sensitivity(layout: TrapLayout, k: int, y: float, dy: float, xs) -> np.ndarray:
    """Change of the axial unit field of pair ``k`` when the probe rises by ``dy``."""
    if y + dy <= 0:
        raise ValueError("y + dy must stay above the electrode plane")
    _, e0, _ = pair_fields(layout, k, xs, y)
    if dy == 0:
        return np.zeros_like(e0)
    _, e1, _ = pair_fields(layout, k, xs, y + dy)
    return e1 - e0


def write_profile_csv(path, samples: list[FieldSample]) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_um", "phi_V", "Ex_V_per_m", "D_V_per_m2"])
        for s in samples:
            w.writerow([f"{s.x / UM:.6f}", f"{s.phi:.12e}", f"{s.Ex:.12e}", f"{s.D:.12e}"])
