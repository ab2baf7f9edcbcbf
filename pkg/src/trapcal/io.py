"""CSV/JSON persistence for datasets, truth models and tables.

Datasets live in a directory with ``strings.csv``, ``freqs.csv``,
``singles.csv`` and ``dataset.json``. Lengths are in micrometres and
frequencies in kHz (ordinary, not angular). Files are UTF-8 with LF endings
and floats are written in shortest round-trip form, so equal data gives equal
bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import UM, TrapLayout, VoltageSetting
from .parametric import StrayCoeffs
from .synthetic import Dataset, FrequencyObservation, IonStringObservation, SingleIonObservation, TruthModel

TWO_PI = 2 * np.pi


class InputFormatError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path, required=()) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise InputFormatError(f"missing file {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in required if c not in cols]
        if missing:
            raise InputFormatError(f"{path.name}: missing columns {missing}")
        return list(reader)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputFormatError(f"missing file {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{path.name}: {exc}") from exc


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _num(row, col, path):
    try:
        return float(row[col])
    except (TypeError, ValueError):
        raise InputFormatError(f"{path}: non-numeric {col}={row.get(col)!r}") from None


def _pair_cols(keys):
    return [f"pair_{k}" for k in keys]


def _setting_cols(u: VoltageSetting, keys):
    return [u.id] + [u[k] for k in keys]


def write_dataset(ds: Dataset, out_dir, layout: TrapLayout, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = layout.active
    pc = _pair_cols(keys)
    rows = []
    for s in ds.strings:
        for i, x in enumerate(s.positions):
            rows.append(_setting_cols(s.setting, keys) + [i, x / UM, s.sigma_pos / UM])
    write_csv(out / "strings.csv", ["setting_id", *pc, "ion_index", "x_um", "sigma_um"], rows)
    write_csv(out / "freqs.csv", ["setting_id", *pc, "x_eq_um", "freq_kHz", "sigma_kHz"],
              [_setting_cols(f.setting, keys) + [f.x_eq / UM, f.omega_x / TWO_PI / 1e3, f.sigma_omega / TWO_PI / 1e3]
               for f in ds.freqs])
    write_csv(out / "singles.csv", ["setting_id", *pc, "x_um", "sigma_um"],
              [_setting_cols(s.setting, keys) + [s.x / UM, s.sigma_pos / UM] for s in ds.singles])
    meta = {"layout": layout.to_dict(), "n_fit_freqs": ds.n_fit_freqs, "report": ds.report}
    meta.update(extra or {})
    write_json(out / "dataset.json", meta)


def _setting(row, keys, path):
    return VoltageSetting({k: _num(row, f"pair_{k}", path) for k in keys}, row["setting_id"])


def read_dataset(in_dir) -> tuple[Dataset, TrapLayout]:
    d = Path(in_dir)
    meta = read_json(d / "dataset.json")
    try:
        layout = TrapLayout.from_dict(meta["layout"])
        n_fit = int(meta.get("n_fit_freqs", 20))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(f"dataset.json: {exc}") from exc
    keys = layout.active
    pc = _pair_cols(keys)
    ds = Dataset(n_fit_freqs=n_fit, report=meta.get("report", {}))

    rows = read_csv(d / "strings.csv", ["setting_id", *pc, "ion_index", "x_um", "sigma_um"])
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["setting_id"], []).append(r)
    for sid, rs in groups.items():
        x = np.array([_num(r, "x_um", "strings.csv") for r in rs]) * UM
        try:
            ds.strings.append(IonStringObservation(_setting(rs[0], keys, "strings.csv"), x,
                                                   _num(rs[0], "sigma_um", "strings.csv") * UM))
        except ValueError as exc:
            raise InputFormatError(f"strings.csv setting {sid}: {exc}") from exc

    for r in read_csv(d / "freqs.csv", ["setting_id", *pc, "x_eq_um", "freq_kHz", "sigma_kHz"]):
        try:
            ds.freqs.append(FrequencyObservation(_setting(r, keys, "freqs.csv"), _num(r, "x_eq_um", "freqs.csv") * UM,
                                                 _num(r, "freq_kHz", "freqs.csv") * 1e3 * TWO_PI,
                                                 _num(r, "sigma_kHz", "freqs.csv") * 1e3 * TWO_PI))
        except ValueError as exc:
            raise InputFormatError(f"freqs.csv: {exc}") from exc

    for r in read_csv(d / "singles.csv", ["setting_id", *pc, "x_um", "sigma_um"]):
        ds.singles.append(SingleIonObservation(_setting(r, keys, "singles.csv"), _num(r, "x_um", "singles.csv") * UM,
                                               _num(r, "sigma_um", "singles.csv") * UM))
    return ds, layout


def truth_to_dict(truth: TruthModel) -> dict:
    s = truth.stray
    return {"layout": truth.layout.to_dict(), "stray": {"a": s.a, "b": s.b, "c": s.c},
            "height_mode": truth.height_mode}


def truth_from_dict(d: dict) -> TruthModel:
    from .synthetic import build_truth

    try:
        layout = TrapLayout.from_dict(d["layout"])
        stray = StrayCoeffs(**d.get("stray", {}))
        return build_truth(layout, stray, d.get("height_mode", "fixed"))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(f"truth file: {exc}") from exc
