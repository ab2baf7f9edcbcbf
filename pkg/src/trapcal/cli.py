"""Command-line entry point: ``trapcal <subcommand> ...``.

Every subcommand reads and writes files only. Exit codes: 0 success,
2 calibration finished but flagged (infeasible or not converged),
3 malformed or missing input.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .core import UM, default_layout
from .parametric import CalibratedTrapModel, StrayCoeffs

log = logging.getLogger("trapcal")

EXIT_OK = 0
EXIT_FLAGGED = 2
EXIT_INPUT = 3


def _config(args) -> dict:
    if not args.config:
        return {}
    cfg = io.read_json(args.config)
    if not isinstance(cfg, dict):
        raise io.InputFormatError("config must be a JSON object")
    return cfg


def _out(args) -> Path:
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_model(path) -> CalibratedTrapModel:
    try:
        return CalibratedTrapModel.from_dict(io.read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, io.InputFormatError):
            raise
        raise io.InputFormatError(f"{path}: {exc}") from exc


def cmd_gen_truth(args) -> int:
    from .synthetic import DEFAULT_STRAY, build_truth

    cfg = _config(args)
    lay_kw = {k[:-3]: v * UM for k, v in cfg.get("layout", {}).items() if k.endswith("_um")}
    if "active" in cfg.get("layout", {}):
        lay_kw["active"] = tuple(cfg["layout"]["active"])
    layout = default_layout(**lay_kw)
    stray = StrayCoeffs(**cfg["stray"]) if "stray" in cfg else DEFAULT_STRAY
    truth = build_truth(layout, stray, cfg.get("height_mode", "fixed"))
    io.write_json(_out(args) / "truth.json", io.truth_to_dict(truth))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .synthetic import NoiseSpec, generate_dataset, reference_protocol, recheck_dataset

    cfg = _config(args)
    truth = io.truth_from_dict(io.read_json(args.truth))
    if "stray_shift" in cfg:
        shift = cfg["stray_shift"]
        s = truth.stray
        truth = io.truth_from_dict({**io.truth_to_dict(truth),
                                    "stray": {"a": s.a + shift.get("a", 0.0), "b": s.b + shift.get("b", 0.0),
                                              "c": s.c + shift.get("c", 0.0)}})
    n = cfg.get("noise", {})
    noise = NoiseSpec(sigma_pos=n.get("sigma_pos_um", 0.4) * UM,
                      sigma_freq=2 * np.pi * 1e3 * n.get("sigma_freq_kHz", 0.5),
                      magnification_bias=n.get("magnification_bias", 0.0), rng_seed=args.seed)
    plan = reference_protocol(truth, **cfg.get("plan", {}))
    if cfg.get("session", "full") == "recheck":
        ds = recheck_dataset(truth, plan, noise)
    else:
        ds = generate_dataset(truth, plan, tuple(cfg.get("n_ions_range", (6, 19))), noise)
    io.write_dataset(ds, _out(args), truth.layout, {"seed": args.seed})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    ds, layout = io.read_dataset(args.data)
    out = _out(args)
    cfg = _config(args)
    if args.method == "interp":
        from .calibrate_interp import calibrate_interpolation

        model, diag = calibrate_interpolation(ds, layout)
    else:
        from .calibrate_opt import ObjectiveConfig, calibrate_optimization

        try:
            ocfg = ObjectiveConfig.from_dict(cfg)
        except TypeError as exc:
            raise io.InputFormatError(f"config: {exc}") from exc
        ocfg = replace(ocfg, de=replace(ocfg.de, seed=args.seed))
        model, diag = calibrate_optimization(ds, layout, ocfg)
    model.save(out / "model.json")
    io.write_json(out / "diagnostics.json", diag)
    flags = diag.get("flags", [])
    if flags:
        log.warning("calibration flagged: %s", ", ".join(flags))
        return EXIT_FLAGGED
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validation import error_map_summary, measurement_error_map, validate_model

    model = _load_model(args.model)
    ds, _ = io.read_dataset(args.data)
    rep = validate_model(model, ds)
    out = _out(args)
    result = rep.to_dict()
    if args.truth:
        truth = io.truth_from_dict(io.read_json(args.truth))
        entries = measurement_error_map(ds, truth, seed=args.seed)
        result["error_map"] = {str(k): v for k, v in error_map_summary(entries).items()}
    io.write_json(out / "validation.json", result)
    io.write_csv(out / "positions.csv", ["pair", "mean_um", "std_um", "n_ions", "n_settings", "n_failed"],
                 [[p.k, p.mean_um, p.std_um, p.n_ions, p.n_settings, p.n_failed] for p in rep.positions])
    io.write_csv(out / "frequencies.csv", ["setting_id", "role", "freq_obs_kHz", "freq_model_kHz", "relative_error"],
                 [[f.setting_id, f.role, f.freq_obs_kHz, f.freq_model_kHz, f.relative_error] for f in rep.frequencies])
    return EXIT_OK


def cmd_fit_study(args) -> int:
    from .validation import fit_quality_study

    rows = fit_quality_study(args.kind)
    key = "range_um" if args.kind == "roi" else "width_um"
    cols = [key, "model", "normalized_error", "normalized_error_std", "relative_error", "relative_error_std",
            "abs_normalized_error", "abs_relative_error"]
    io.write_csv(_out(args) / f"fit_study_{args.kind}.csv", cols, [[r[c] for c in cols] for r in rows])
    return EXIT_OK


def cmd_recalibrate_stray(args) -> int:
    from .calibrate_opt import recalibrate_stray

    model = _load_model(args.model)
    ds, _ = io.read_dataset(args.data)
    stray = recalibrate_stray(model, ds)
    meta = dict(model.metadata, stray_recalibrated=True)
    replace(model, stray=stray, metadata=meta).save(_out(args) / "model.json")
    return EXIT_OK


def cmd_stray_compare(args) -> int:
    from .validation import stray_comparison

    t = stray_comparison(_load_model(args.model_a), _load_model(args.model_b))
    io.write_csv(_out(args) / "stray_compare.csv", ["x_um", "E_a_V_per_m", "E_b_V_per_m", "diff_V_per_m"],
                 zip(t["x_um"], t["E_a"], t["E_b"], t["diff"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trapcal", description="Ion-probe calibration of surface-trap DC potentials.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON file with subcommand options")
        sp.add_argument("--out-dir", default=".")
        sp.set_defaults(func=func)
        return sp

    add("gen-truth", cmd_gen_truth, "write a synthetic truth model (layout + stray field)")
    sp = add("simulate", cmd_simulate, "generate a noisy observation dataset from a truth model")
    sp.add_argument("--truth", required=True)
    sp = add("calibrate", cmd_calibrate, "fit a calibrated model to a dataset")
    sp.add_argument("--method", choices=("interp", "opt"), default="opt")
    sp.add_argument("--data", required=True)
    sp = add("validate", cmd_validate, "compare model predictions with observations")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--truth", help="truth file; adds the measurement-error budget")
    sp = add("fit-study", cmd_fit_study, "Lorentz fit quality versus fit range or electrode width")
    sp.add_argument("--kind", choices=("roi", "width"), required=True)
    sp = add("recalibrate-stray", cmd_recalibrate_stray, "refit only the stray field of a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp = add("stray-compare", cmd_stray_compare, "tabulate the stray fields of two models")
    sp.add_argument("--model-a", required=True)
    sp.add_argument("--model-b", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except io.InputFormatError as exc:
        print(f"trapcal: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
