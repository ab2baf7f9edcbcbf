"""Constants, trap geometry and voltage settings shared by the whole package.

Coordinates: x is the trap axis, y the height above the chip, z transverse.
Electrodes are rectangles in the y = 0 plane and the probe axis is z = 0.
Everything is SI internally; files use micrometres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import constants as _sc

UM = 1e-6


@dataclass(frozen=True)
class PhysicalConstants:
    e: float = _sc.e
    eps0: float = _sc.epsilon_0
    M_ion: float = 40 * _sc.atomic_mass

    def __post_init__(self):
        if min(self.e, self.eps0, self.M_ion) <= 0:
            raise ValueError("physical constants must be strictly positive")

    @property
    def coulomb_k(self) -> float:
        return 1.0 / (4 * np.pi * self.eps0)


CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class ElectrodeRect:
    x1: float
    z1: float
    x2: float
    z2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.z1 < self.z2):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1


@dataclass(frozen=True)
class ElectrodePair:
    k: int
    rect_a: ElectrodeRect
    rect_b: ElectrodeRect

    def __post_init__(self):
        a, b = self.rect_a, self.rect_b
        if not (np.isclose(a.x1, b.x1, rtol=0, atol=1e-12) and np.isclose(a.x2, b.x2, rtol=0, atol=1e-12)):
            raise ValueError(f"pair {self.k}: rectangles must share their x extent")

    @property
    def x_center(self) -> float:
        return 0.5 * (self.rect_a.x1 + self.rect_a.x2)

    @property
    def rects(self) -> tuple[ElectrodeRect, ElectrodeRect]:
        return (self.rect_a, self.rect_b)


def mirrored_pair(k: int, x_center: float, width: float, length: float, separation: float) -> ElectrodePair:
    """Pair of rectangles placed symmetrically about z = 0 with an inner gap ``separation``."""
    x1, x2 = x_center - width / 2, x_center + width / 2
    z_in = separation / 2
    return ElectrodePair(
        k,
        ElectrodeRect(x1, z_in, x2, z_in + length),
        ElectrodeRect(x1, -z_in - length, x2, -z_in),
    )


@dataclass(frozen=True)
class TrapLayout:
    pairs: tuple[ElectrodePair, ...]
    active: tuple[int, ...]
    y0: float = 150 * UM
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        indices = [p.k for p in self.pairs]
        if len(set(indices)) != len(indices):
            raise ValueError("duplicate pair indices")
        missing = set(self.active) - set(indices)
        if missing:
            raise ValueError(f"active pairs {sorted(missing)} not in layout")
        if self.y0 <= 0:
            raise ValueError("probe height must be positive")
        object.__setattr__(self, "active", tuple(sorted(self.active)))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def pair(self, k: int) -> ElectrodePair:
        for p in self.pairs:
            if p.k == k:
                return p
        raise KeyError(f"unknown pair index {k}")

    @property
    def n_active(self) -> int:
        return len(self.active)

    def centers(self, ks=None) -> np.ndarray:
        ks = self.active if ks is None else ks
        return np.array([self.pair(k).x_center for k in ks])

    def to_dict(self) -> dict:
        def rect(r):
            return [r.x1 / UM, r.z1 / UM, r.x2 / UM, r.z2 / UM]

        return {
            "units": "um",
            "y0_um": self.y0 / UM,
            "active": list(self.active),
            "pairs": [{"k": p.k, "rect_a": rect(p.rect_a), "rect_b": rect(p.rect_b)} for p in self.pairs],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrapLayout":
        def rect(v):
            return ElectrodeRect(*(float(c) * UM for c in v))

        pairs = tuple(ElectrodePair(int(p["k"]), rect(p["rect_a"]), rect(p["rect_b"])) for p in d["pairs"])
        return cls(pairs, tuple(int(k) for k in d["active"]), float(d.get("y0_um", 150.0)) * UM, d.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrapLayout":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_layout(
    n_pairs: int = 15,
    active: tuple[int, ...] = tuple(range(4, 13)),
    width: float = 147 * UM,
    gap: float = 10 * UM,
    length: float = 940 * UM,
    separation: float = 514 * UM,
    y0: float = 150 * UM,
) -> TrapLayout:
    """Fifteen DC pairs along x, the middle one (pair 8) centred on x = 0."""
    pitch = width + gap
    mid = (n_pairs + 1) / 2
    pairs = tuple(mirrored_pair(k, (k - mid) * pitch, width, length, separation) for k in range(1, n_pairs + 1))
    meta = {
        "rf_drive_MHz": 22.7,
        "radial_freq_MHz": 2.6,
        "gap_um": gap / UM,
    }
    return TrapLayout(pairs, active, y0, meta)


@dataclass(frozen=True)
class VoltageSetting:
    """Pair voltages (a and b electrodes share one value); missing pairs are grounded."""

    V: Mapping[int, float]
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "V", {int(k): float(v) for k, v in self.V.items()})

    def __getitem__(self, k: int) -> float:
        return self.V.get(k, 0.0)

    def vector(self, ks) -> np.ndarray:
        return np.array([self[k] for k in ks])

    def covers(self, ks) -> bool:
        return all(k in self.V for k in ks)

    def with_voltage(self, k: int, value: float, id: str | None = None) -> "VoltageSetting":
        V = dict(self.V)
        V[k] = value
        return VoltageSetting(V, self.id if id is None else id)

    @classmethod
    def from_vector(cls, ks, values, id: str = "") -> "VoltageSetting":
        return cls(dict(zip(ks, (float(v) for v in values))), id)
