import csv
import json

import numpy as np
import pytest

from mdcsi import cli
from mdcsi.container import read_container, read_dataset, read_image
from mdcsi.model import ConfigurationError
from mdcsi.analysis import pearson

SMALL = {"seed": 5, "phantom": {"width": 12, "height": 12}, "grid": {"n_t1": 12, "n_t2": 12},
         "solver": {"lambda": 0.01, "mu": 1.0, "penalty_units": "unit_weight", "max_iters": 60}}


def write_cfg(tmp_path, doc, name="cfg.json"):
    doc = {"run_dir": str(tmp_path / "run"), **doc}
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def simulated(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert cli.main(["simulate", "--config", cfg]) == cli.EXIT_OK
    return tmp_path, cfg


def test_config_errors_report_json_paths():
    with pytest.raises(ConfigurationError) as err:
        cli.load_config(doc={"solver": {"mu": -1, "bogus": 1}, "grid": {"n_t1": "x"}})
    msg = str(err.value)
    assert "$.solver.mu" in msg and "$.solver" in msg and "$.grid.n_t1" in msg
    with pytest.raises(ConfigurationError):
        cli.load_config(doc={"unknown": 1})


def test_defaults_validate():
    cfg = cli.load_config()
    assert cfg["solver"]["lambda"] == 0.01 and cfg["solver"]["mu"] == 1.0
    assert cfg["grid"]["n_t1"] == 100


def test_exit_code_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"noise": {"model": "POISSON"}})
    assert cli.main(["simulate", "--config", cfg]) == cli.EXIT_CONFIG
    assert "$.noise.model" in capsys.readouterr().err
    assert cli.main(["simulate", "--run-dir", str(tmp_path / "r"), "--mu", "0"]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["crlb", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_exit_code_threads(tmp_path, monkeypatch):
    monkeypatch.setenv("MDSPEC_THREADS", "zero")
    assert cli.main(["crlb", "--run-dir", str(tmp_path / "r")]) == cli.EXIT_CONFIG
    monkeypatch.delenv("MDSPEC_THREADS")
    assert cli.main(["crlb", "--run-dir", str(tmp_path / "r"), "--threads", "1"]) == cli.EXIT_OK


def test_exit_code_exists_and_force(simulated):
    tmp_path, cfg = simulated
    assert cli.main(["simulate", "--config", cfg]) == cli.EXIT_EXISTS
    assert cli.main(["simulate", "--config", cfg, "--force"]) == cli.EXIT_OK
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert [e["command"] for e in manifest["entries"]] == ["simulate", "simulate"]


def test_exit_code_data(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert cli.main(["fit", str(tmp_path / "missing.mdc"), "--config", cfg]) == cli.EXIT_DATA
    junk = tmp_path / "junk.mdc"
    junk.write_bytes(b"\x00" * 3)
    assert cli.main(["analyze", str(junk), "--config", cfg]) == cli.EXIT_DATA


def test_schedule_mismatch_is_data_error(simulated, capsys):
    tmp_path, _ = simulated
    cfg = write_cfg(tmp_path, {**SMALL, "schedule": {"preset": "t1_baseline"}}, "other.json")
    code = cli.main(["fit", str(tmp_path / "run" / "dataset.mdc"), "--config", cfg, "--force"])
    assert code == cli.EXIT_DATA
    assert "schedule mismatch" in capsys.readouterr().err


def test_simulate_outputs_and_determinism(tmp_path):
    a = write_cfg(tmp_path, {**SMALL, "run_dir": str(tmp_path / "a")}, "a.json")
    b = write_cfg(tmp_path, {**SMALL, "run_dir": str(tmp_path / "b")}, "b.json")
    assert cli.main(["simulate", "--config", a]) == 0
    assert cli.main(["simulate", "--config", b]) == 0
    for name in ("dataset.mdc", "dataset_noiseless.mdc", "ground_truth.mdc"):
        assert read_container(tmp_path / "a" / name)[0].tobytes() == read_container(tmp_path / "b" / name)[0].tobytes()
    snr = rows(tmp_path / "a" / "snr.csv")
    assert len(snr) == 105 and max(float(r["snr"]) for r in snr) == pytest.approx(200.0)
    assert cli.main(["simulate", "--config", a, "--force", "--seed", "6"]) == 0
    assert read_container(tmp_path / "a" / "dataset.mdc")[0].tobytes() != \
        read_container(tmp_path / "b" / "dataset.mdc")[0].tobytes()


def test_simulate_sigma_zero_is_magnitude_of_clean(tmp_path):
    cfg = write_cfg(tmp_path, {**SMALL, "noise": {"sigma": 0.0}})
    assert cli.main(["simulate", "--config", cfg]) == 0
    clean = read_dataset(tmp_path / "run" / "dataset_noiseless.mdc").data
    noisy = read_dataset(tmp_path / "run" / "dataset.mdc").data
    np.testing.assert_array_equal(noisy, np.abs(clean))


def test_fit_rerun_is_bit_identical(simulated):
    tmp_path, cfg = simulated
    ds = str(tmp_path / "run" / "dataset.mdc")
    assert cli.main(["fit", ds, "--config", cfg]) == 0
    first = read_image(tmp_path / "run" / "image.mdc").values.copy()
    assert cli.main(["fit", ds, "--config", cfg, "--force"]) == 0
    assert read_image(tmp_path / "run" / "image.mdc").values.tobytes() == first.tobytes()
    conv = rows(tmp_path / "run" / "convergence.csv")
    assert len(conv) == 60 and conv[0]["iteration"] == "1"


def test_fit_oracle_check_on_tiny_dataset(tmp_path, capsys):
    doc = {"seed": 1, "phantom": {"width": 4, "height": 4}, "grid": {"n_t1": 5, "n_t2": 5},
           "solver": {"lambda": 0.0, "mu": 1.0, "max_iters": 20000, "tolerance": 1e-12}}
    cfg = write_cfg(tmp_path, doc)
    assert cli.main(["simulate", "--config", cfg]) == 0
    code = cli.main(["fit", str(tmp_path / "run" / "dataset.mdc"), "--config", cfg, "--oracle-check"])
    assert code == 0
    out = capsys.readouterr().out
    gap = float(out.split("residual gap ")[1].split()[0])
    assert gap < 1e-4


def test_oracle_check_needs_lambda_zero(simulated):
    tmp_path, cfg = simulated
    assert cli.main(["fit", str(tmp_path / "run" / "dataset.mdc"), "--config", cfg,
                     "--oracle-check"]) == cli.EXIT_CONFIG


def test_analyze_ground_truth(simulated):
    tmp_path, cfg = simulated
    assert cli.main(["analyze", str(tmp_path / "run" / "ground_truth.mdc"), "--config", cfg]) == 0
    peaks = rows(tmp_path / "run" / "peaks.csv")
    assert len(peaks) >= 1
    maps, hdr = read_container(tmp_path / "run" / "maps.mdc")
    assert maps.shape[0] == len(peaks) and hdr["planes"] == [p["label"] for p in peaks]
    assert len(rows(tmp_path / "run" / "mean_spectrum.csv")) == 144


def test_analyze_user_regions_take_precedence(tmp_path):
    regions = [{"label": "fast", "t1_range": [500, 880], "t2_range": [50, 85]},
               {"label": "slow", "t1_range": [880, 1300], "t2_range": [90, 150]}]
    doc = {**SMALL, "grid": {"n_t1": 40, "n_t2": 40}, "analysis": {"regions": regions}}
    cfg = write_cfg(tmp_path, doc)
    assert cli.main(["simulate", "--config", cfg]) == 0
    assert cli.main(["analyze", str(tmp_path / "run" / "ground_truth.mdc"), "--config", cfg]) == 0
    peaks = rows(tmp_path / "run" / "peaks.csv")
    assert [p["label"] for p in peaks] == ["fast", "slow"] and {p["source"] for p in peaks} == {"user"}
    maps, _ = read_container(tmp_path / "run" / "maps.mdc")
    truth = cli.make_phantom(cli.load_config(doc=doc)).maps
    assert pearson(maps[0], truth[0]) > 0.99


def test_crlb_command(tmp_path):
    assert cli.main(["crlb", "--run-dir", str(tmp_path / "r")]) == 0
    table = rows(tmp_path / "r" / "crlb_table.csv")
    assert {r["protocol"] for r in table} == {"2D", "1D-T1", "1D-T2"}
    ratios = rows(tmp_path / "r" / "crlb_ratios.csv")
    t2 = {r["parameter"]: float(r["std_ratio"]) for r in ratios if r["protocol"] == "1D-T2"}
    assert t2["T2_2"] == pytest.approx(1098, rel=0.01)
    assert (tmp_path / "r" / "crlb_summary.txt").read_text().startswith("CRLB")
    assert len(rows(tmp_path / "r" / "crlb_spatial.csv")) == 27 + 15


def test_crlb_unidentifiable_exit_code(tmp_path):
    proto = {"name": "tiny", "schedule": {"ti_ms": [0], "te_ms": [10, 20]}}
    cfg = write_cfg(tmp_path, {"crlb": {"protocols": [proto]}})
    assert cli.main(["crlb", "--config", cfg]) == cli.EXIT_UNIDENTIFIABLE
    table = rows(tmp_path / "run" / "crlb_table.csv")
    assert table[0]["status"] == "unidentifiable"


def test_scale_correct_command(tmp_path):
    # phase-sensitive data: the TI > 0 rows keep their sign, polarity is auto-detected
    cfg = write_cfg(tmp_path, {**SMALL, "noise": {"sigma": 0.0, "model": "SIGNED_MAGNITUDE"}})
    assert cli.main(["simulate", "--config", cfg]) == 0
    assert cli.main(["scale-correct", str(tmp_path / "run" / "dataset.mdc"), "--config", cfg]) == 0
    rep = json.loads((tmp_path / "run" / "scale_report.json").read_text())
    # noiseless multi-compartment voxels: no injected scale, only the monoexponential model error
    assert rep["scale"] == pytest.approx(1.0, abs=0.05)
    assert read_dataset(tmp_path / "run" / "dataset_scaled.mdc").meta["ti0_scale"] == rep["scale"]


def test_match_peaks_node_distance():
    from mdcsi.analysis import Peak, PeakSet, SpectralRegion
    grid = cli.make_grid(cli.load_config(doc={"grid": {"n_t1": 11, "n_t2": 11}}))
    reg = SpectralRegion("r", (1, 2), (1, 2))
    peaks = PeakSet([Peak(float(grid.t1_values[5]), float(grid.t2_values[5]), 1.0, reg)])
    m = cli.match_peaks(peaks, grid, [(grid.t1_values[7], grid.t2_values[4]), (500, 50)])
    assert m[0]["peak"] == 0 and m[0]["node_distance"] == pytest.approx(2.0)
    assert m[1]["peak"] is None


def test_ti0_polarity_detection(tmp_path):
    from mdcsi.analysis import signed_ti0
    cfg = write_cfg(tmp_path, {**SMALL, "noise": {"sigma": 0.0, "model": "SIGNED_MAGNITUDE"}})
    assert cli.main(["simulate", "--config", cfg]) == 0
    ds = read_dataset(tmp_path / "run" / "dataset.mdc")
    assert cli.ti0_is_signed(ds)
    assert not cli.ti0_is_signed(signed_ti0(ds))


def test_fit_with_nnls_init(simulated):
    tmp_path, _ = simulated
    doc = {**SMALL, "solver": {**SMALL["solver"], "init": "nnls", "max_iters": 20}}
    cfg = write_cfg(tmp_path, doc, "nnls.json")
    assert cli.main(["fit", str(tmp_path / "run" / "dataset.mdc"), "--config", cfg, "--force"]) == 0
    img = read_image(tmp_path / "run" / "image.mdc")
    assert np.all(img.values >= 0) and img.values.any()


def test_shipped_reproduce_config_matches_acceptance_run():
    from pathlib import Path
    from test_acceptance import PHANTOM_RUN
    path = Path(__file__).resolve().parents[1] / "configs" / "reproduce.json"
    doc = json.loads(path.read_text())
    cli.load_config(path)
    doc.pop("run_dir")
    assert doc == PHANTOM_RUN


def test_reproduce_command_smoke(tmp_path):
    doc = {**SMALL, "noise": {"model": "SIGNED_MAGNITUDE"},
           "solver": {**SMALL["solver"], "max_iters": 10, "init": "nnls"}, "analysis": {"exclude_edges": True}}
    cfg = write_cfg(tmp_path, doc)
    assert cli.main(["reproduce-paper-sim", "--config", cfg]) == 0
    rec = rows(tmp_path / "run" / "recovery.csv")
    assert len(rec) == 3 and {"map_pearson", "map_pearson_full_image"} <= set(rec[0])
    assert [r["method"] for r in rows(tmp_path / "run" / "comparison.csv")] == ["2D", "1D-T1", "1D-T2"]
    assert (tmp_path / "run" / "image_2d.mdc").exists()
