import json

import numpy as np
import pytest

from trapcal import io
from trapcal.cli import EXIT_FLAGGED, EXIT_INPUT, EXIT_OK, main


def test_dataset_roundtrip(tmp_path, noiseless, layout):
    io.write_dataset(noiseless, tmp_path, layout)
    ds, lay = io.read_dataset(tmp_path)
    assert lay.active == layout.active
    assert len(ds.strings) == len(noiseless.strings)
    for a, b in zip(ds.strings, noiseless.strings):
        assert a.setting.id == b.setting.id
        np.testing.assert_allclose(a.positions, b.positions, rtol=1e-14, atol=0)
        assert a.setting.V == b.setting.V
    for a, b in zip(ds.freqs, noiseless.freqs):
        assert a.omega_x == pytest.approx(b.omega_x, rel=1e-15)
        assert a.x_eq == pytest.approx(b.x_eq, rel=1e-14)
    np.testing.assert_allclose([s.x for s in ds.singles], [s.x for s in noiseless.singles], rtol=1e-14)
    raw = (tmp_path / "strings.csv").read_bytes()
    assert b"\r" not in raw
    assert raw.split(b"\n")[0].startswith(b"setting_id,pair_4,pair_5")


def test_malformed_inputs(tmp_path, noiseless, layout):
    io.write_dataset(noiseless, tmp_path, layout)
    text = (tmp_path / "freqs.csv").read_text().replace("freq_kHz", "frequency")
    (tmp_path / "freqs.csv").write_text(text)
    with pytest.raises(io.InputFormatError):
        io.read_dataset(tmp_path)
    assert main(["calibrate", "--data", str(tmp_path), "--out-dir", str(tmp_path / "o")]) == EXIT_INPUT
    (tmp_path / "dataset.json").write_text("{not json")
    assert main(["calibrate", "--data", str(tmp_path), "--out-dir", str(tmp_path / "o")]) == EXIT_INPUT
    assert main(["validate", "--model", str(tmp_path / "missing.json"), "--data", str(tmp_path),
                 "--out-dir", str(tmp_path / "o")]) == EXIT_INPUT


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-truth", "--out-dir", str(d)]) == EXIT_OK
    cfg = d / "sim.json"
    cfg.write_text(json.dumps({"plan": {"n_steps": 8}, "n_ions_range": [6, 10]}))
    assert main(["simulate", "--truth", str(d / "truth.json"), "--config", str(cfg), "--seed", "3",
                 "--out-dir", str(d / "data")]) == EXIT_OK
    return d


def test_cli_pipeline(small_run):
    d = small_run
    fast = d / "fast.json"
    fast.write_text(json.dumps({"de": {"max_generations": 40, "population": 60}}))
    code = main(["calibrate", "--method", "opt", "--data", str(d / "data"), "--config", str(fast),
                 "--out-dir", str(d / "opt")])
    assert code in (EXIT_OK, EXIT_FLAGGED)
    assert (d / "opt" / "model.json").exists() and (d / "opt" / "diagnostics.json").exists()
    assert main(["calibrate", "--method", "interp", "--data", str(d / "data"), "--out-dir", str(d / "interp")]) == 0
    assert main(["validate", "--model", str(d / "opt" / "model.json"), "--data", str(d / "data"),
                 "--truth", str(d / "truth.json"), "--out-dir", str(d / "val")]) == EXIT_OK
    rep = json.loads((d / "val" / "validation.json").read_text())
    assert len(rep["frequencies"]) == 31 and "error_map" in rep
    assert main(["stray-compare", "--model-a", str(d / "opt" / "model.json"),
                 "--model-b", str(d / "interp" / "model.json"), "--out-dir", str(d / "cmp")]) == EXIT_OK
    assert (d / "cmp" / "stray_compare.csv").read_text().startswith("x_um,")


def test_cli_flags_unfinished_calibration(small_run):
    d = small_run
    cfg = d / "bad.json"
    cfg.write_text(json.dumps({"de": {"max_generations": 2, "population": 30}, "polish": False}))
    code = main(["calibrate", "--data", str(d / "data"), "--config", str(cfg), "--out-dir", str(d / "bad")])
    assert code == EXIT_FLAGGED
    assert json.loads((d / "bad" / "diagnostics.json").read_text())["flags"]


def test_cli_recalibrate_stray(small_run):
    d = small_run
    for name, shift in (("base", 0.0), ("shifted", 5.0)):
        cfg = d / f"{name}.json"
        cfg.write_text(json.dumps({"session": "recheck", "stray_shift": {"c": shift}}))
        assert main(["simulate", "--truth", str(d / "truth.json"), "--config", str(cfg), "--seed", "1",
                     "--out-dir", str(d / name)]) == EXIT_OK
        assert main(["recalibrate-stray", "--model", str(d / "interp" / "model.json"), "--data", str(d / name),
                     "--out-dir", str(d / f"recal_{name}")]) == EXIT_OK
    old = json.loads((d / "interp" / "model.json").read_text())
    base = json.loads((d / "recal_base" / "model.json").read_text())
    shifted = json.loads((d / "recal_shifted" / "model.json").read_text())
    assert shifted["pairs"] == base["pairs"] == old["pairs"]
    assert shifted["stray"]["c"] - base["stray"]["c"] == pytest.approx(5.0, abs=0.5)


@pytest.mark.parametrize("kind", ["roi", "width"])
def test_cli_fit_study(tmp_path, kind):
    assert main(["fit-study", "--kind", kind, "--out-dir", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / f"fit_study_{kind}.csv").read_text().splitlines()
    assert len(lines) > 10


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
