import csv
import json
import subprocess
import sys

import pytest

from mobiscape.cli import main, read_config

SMALL = ["--n-users", "120", "--n-zones", "16", "--survey-size", "300"]


def run(*argv):
    return main([str(a) for a in argv])


def _exit_code(*argv):
    with pytest.raises(SystemExit) as exc:
        run(*argv)
    return exc.value.code


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    city = d / "city"
    assert run("gen", "--seed", 7, "--out", city, *SMALL) == 0
    ck = ["--checkins", city / "checkins.csv"]
    assert run("ground-truth", *ck, "--out", d / "truth.csv") == 0
    assert run("calibrate", "--seed", 1, *ck, "--truth", d / "truth.csv", "--radii", "100,300",
               "--crs-points", 30, "--crs-iterations", 300, "--report", d / "report.csv",
               "--params", d / "params.json") == 0
    assert run("identify", *ck, "--params", d / "params.json", "--zones", city / "zones.csv",
               "--places", d / "places.csv", "--noncommute", d / "nonc.csv") == 0
    survey = ["--zones", city / "zones.csv", "--survey-persons", city / "survey_persons.csv",
              "--survey-trips", city / "survey_trips.csv"]
    assert run("synthesize", "--seed", 3, *survey, "--profiles", city / "profiles.csv",
               "--places", d / "places.csv", "--out", d / "syn", "--max-steps", 5000) == 0
    assert run("validate", *survey, "--places", d / "places.csv", "--noncommute", d / "nonc.csv",
               "--metrics", d / "metrics.csv", "--histogram", d / "hist.csv") == 0
    assert run("validate", *survey, "--places", d / "places.csv", "--noncommute", d / "nonc.csv",
               "--population", d / "syn" / "population.csv", "--metrics", d / "metrics_syn.csv") == 0
    return d


def test_gen_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen", "--seed", 7, "--out", tmp_path / name, *SMALL) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_identify_without_params_is_usage_error(pipeline, capsys):
    city = pipeline / "city"
    code = _exit_code("identify", "--checkins", city / "checkins.csv", "--zones", city / "zones.csv",
                      "--places", pipeline / "x.csv", "--noncommute", pipeline / "y.csv")
    assert code == 2
    assert "--params" in capsys.readouterr().err


def test_seed_is_required(tmp_path):
    assert _exit_code("gen", "--out", tmp_path) == 2
    assert not any(tmp_path.iterdir())


def test_pipeline_outputs(pipeline):
    rows = list(csv.DictReader(open(pipeline / "metrics.csv", encoding="utf-8")))
    assert rows, "metrics CSV is empty"
    keys = {(r["metric"], r["activity"]) for r in rows}
    assert {("CS", "home"), ("CS", "work"), ("DC_km", "home"), ("CR", "commute")} <= keys
    for r in rows:
        v = float(r["value"])
        if r["metric"] in ("CS", "CR"):
            assert 0.0 <= v <= 1.0
    hist = list(csv.DictReader(open(pipeline / "hist.csv", encoding="utf-8")))
    assert len(hist) == 500
    assert sum(float(h["fraction_c"]) for h in hist) == pytest.approx(1.0)
    assert list(csv.reader(open(pipeline / "metrics_syn.csv")))[0] == ["metric", "activity", "value"]
    params = json.loads((pipeline / "params.json").read_text())
    assert set(params) == {"r", "a", "b", "k1", "k2"}
    for name in ("screening.csv", "constraints_commuter.csv", "constraints_noncommuter.csv",
                 "population.csv", "fit_report.csv"):
        assert (pipeline / "syn" / name).stat().st_size > 0
    assert not list(pipeline.rglob(".*.csv.*")), "temporary files left behind"


def test_runtime_error_is_one_json_line(tmp_path, capsys):
    bad = tmp_path / "c.csv"
    bad.write_text("nope\n")
    (tmp_path / "p.json").write_text('{"r": 300, "a": 0, "b": 0, "k1": 0, "k2": 0}')
    (tmp_path / "z.csv").write_text("zone_id,district,centroid_lat,centroid_lon\nA,d,40,116\n")
    code = run("identify", "--checkins", bad, "--params", tmp_path / "p.json", "--zones", tmp_path / "z.csv",
               "--places", tmp_path / "o.csv", "--noncommute", tmp_path / "n.csv")
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    payload = json.loads(err[0])
    assert payload["error"] == "HeaderMismatch" and payload["stage"] == "identify"
    assert not (tmp_path / "o.csv").exists()


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# shared settings\nseed = 7\nn-users = 30\nn_zones=9\nsurvey_size = 20\nout = %s\n"
                   % (tmp_path / "from_file"))
    assert run("gen", "--config", cfg, "--n-users", 35) == 0
    profiles = (tmp_path / "from_file" / "profiles.csv").read_text().splitlines()
    assert len(profiles) == 1 + 35
    zones = (tmp_path / "from_file" / "zones.csv").read_text().splitlines()
    assert len(zones) == 1 + 9


def test_config_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    assert _exit_code("gen", "--config", cfg, "--seed", 1, "--out", tmp_path / "o") == 2
    cfg.write_text("no equals sign\n")
    with pytest.raises(Exception):
        read_config(cfg)
    assert _exit_code("gen", "--config", tmp_path / "missing.cfg", "--seed", 1, "--out", tmp_path) == 2


def test_thread_env_validation(tmp_path, monkeypatch):
    monkeypatch.setenv("MOBISCAPE_THREADS", "zero")
    assert _exit_code("gen", "--seed", 1, "--out", tmp_path) == 2
    monkeypatch.setenv("MOBISCAPE_THREADS", "0")
    assert _exit_code("gen", "--seed", 1, "--out", tmp_path) == 2


@pytest.mark.parametrize("stage", ["gen", "ground-truth", "calibrate", "identify", "synthesize", "validate"])
def test_help_per_stage(stage):
    out = subprocess.run([sys.executable, "-m", "mobiscape.cli", stage, "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "usage: mobiscape" in out.stdout
