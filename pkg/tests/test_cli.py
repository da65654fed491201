import json
import shutil

import numpy as np
import pandas as pd
import pytest
import yaml

from racesim.cli import DEFAULTS, load_config, main, read_table


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--output-dir", d, "--seed", 3, "--races", 4, "--horses", 8, "--jockeys", 4, "--anomaly") == 0
    cfg = d / "config.yaml"
    assert run("prepare", "--config", cfg) == 0
    assert run("fit", "--config", cfg) == 0
    return d


def results(d):
    return d / "results"


def load_json(path):
    return json.loads(path.read_text())


def variant(d, name, **sections):
    raw = yaml.safe_load((d / "config.yaml").read_text())
    for k, v in sections.items():
        if isinstance(v, dict):
            raw.setdefault(k, {}).update(v)
        else:
            raw[k] = v
    path = d / name
    path.write_text(yaml.safe_dump(raw))
    return path


def test_prepare_report_lists_span(fixture_dir):
    rep = load_json(results(fixture_dir) / "preparation_report.json")
    assert rep["provenance"]["command"] == "prepare"
    r = rep["report"]
    assert r["n_spans"] == 1 and r["n_imputed_competitors"] == 1
    span = r["spans"][0]
    assert (span["start_frame"], span["end_frame"], span["method"]) == (9, 17, "peer-proportional")
    prepared = read_table(results(fixture_dir) / "prepared.csv")
    assert prepared["imputed"].sum() == 7


def test_clean_input_reports_no_imputation(tmp_path):
    assert run("synth", "--output-dir", tmp_path, "--races", 2, "--horses", 6, "--jockeys", 3) == 0
    assert run("prepare", "--config", tmp_path / "config.yaml") == 0
    r = load_json(tmp_path / "results" / "preparation_report.json")["report"]
    assert r["n_spans"] == 0 and r["imputed_fraction"] == 0.0


def test_missing_outline_fails_before_processing(fixture_dir, tmp_path, capsys):
    raw = yaml.safe_load((fixture_dir / "config.yaml").read_text())
    shutil.copy(fixture_dir / "tracking.csv", tmp_path / "tracking.csv")
    raw["data"]["tracks"]["SYN"]["outline"] = "missing.csv"
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(raw))
    assert run("prepare", "--config", tmp_path / "c.yaml") == 2
    assert "outline file not found" in capsys.readouterr().err
    assert not (tmp_path / "results").exists()


def test_fit_converged(fixture_dir):
    diag = load_json(results(fixture_dir) / "fit_diagnostics.json")
    for kind in ("forward", "lateral"):
        assert diag[kind]["converged"]
        assert diag[kind]["iterations"] < 2000
        assert diag[kind]["grad_max_norm"] < 1e-5


def test_fit_rerun_byte_identical(fixture_dir):
    path = results(fixture_dir) / "params.json"
    before = path.read_bytes()
    assert run("fit", "--config", fixture_dir / "config.yaml") == 0
    assert path.read_bytes() == before


def test_params_version_error(fixture_dir, tmp_path, capsys):
    p = load_json(results(fixture_dir) / "params.json")
    p["version"] = 0
    bad = tmp_path / "params.json"
    bad.write_text(json.dumps(p))
    cfg = variant(fixture_dir, "badver.yaml", data={"params": str(bad)}, output_dir=str(tmp_path / "o"))
    assert run("ratings", "--config", cfg) == 2
    assert "version" in capsys.readouterr().err


def test_simulate_final_frame_is_realized_order(fixture_dir):
    prepared = read_table(results(fixture_dir) / "prepared.csv")
    race = prepared[prepared["race_id"] == "R001"]
    last = int(race["frame"].max())
    cfg = fixture_dir / "config.yaml"
    assert run("simulate", "--config", cfg, "--start-frame", last, "--draws", 20) == 0
    table = read_table(results(fixture_dir) / "placement.csv")
    probs = table[[c for c in table.columns if c.startswith("p_rank_")]].to_numpy()
    assert set(np.unique(probs)) == {0.0, 1.0}
    # realised order: first crossing, interpolated between the last two frames
    D = 1609.34
    cross = {}
    for h, g in race.groupby("horse_id"):
        g = g.sort_values("frame")
        k = int(np.flatnonzero(g["forward"].to_numpy() >= D)[0])
        f0, f1 = g["forward"].iloc[k - 1], g["forward"].iloc[k]
        cross[h] = g["frame"].iloc[k - 1] + (D - f0) / (f1 - f0)
    order = sorted(cross, key=cross.get)
    got = table.sort_values("expected_rank")["competitor"].tolist()
    assert got == order


def test_simulate_series_and_outputs(fixture_dir):
    cfg = fixture_dir / "config.yaml"
    assert run("simulate", "--config", cfg, "--start-frame", "0,150,300", "--draws", 50) == 0
    out = results(fixture_dir)
    first = (out / "placement.csv").read_text().splitlines()[0]
    assert first.startswith("# racesim simulate config_digest=") and "seed=3" in first
    table = read_table(out / "placement.csv")
    assert sorted(table["start_frame"].unique()) == [0, 150, 300]
    js = load_json(out / "placement.json")
    assert js["provenance"]["seed"] == 3 and len(js["provenance"]["config_digest"]) == 16
    for pm in js["series"]:
        m = np.array(pm["matrix"])
        assert np.allclose(m.sum(0), 1, atol=1e-9) and np.allclose(m.sum(1), 1, atol=1e-9)
    for fig in ("placement_heatmap.png", "finish_times.png", "win_probability.png"):
        assert (out / "figures" / fig).stat().st_size > 0


@pytest.mark.parametrize("args,msg", [
    (("--race-id", "R999"), "unknown race id"),
    (("--start-frame", "100000"), "outside race"),
])
def test_simulate_bad_inputs(fixture_dir, args, msg, capsys):
    assert run("simulate", "--config", fixture_dir / "config.yaml", *args, "--draws", 5) == 2
    assert msg in capsys.readouterr().err


def test_missing_params_file(fixture_dir, tmp_path, capsys):
    cfg = variant(fixture_dir, "noparams.yaml", data={"params": str(tmp_path / "nope.json")})
    assert run("simulate", "--config", cfg) == 2
    assert "parameter file not found" in capsys.readouterr().err


def test_counterfactual_720(fixture_dir, tmp_path):
    cfg = variant(fixture_dir, "cf.yaml", output_dir=str(tmp_path / "cf"),
                  data={"params": str(results(fixture_dir) / "params.json")},
                  counterfactual={"sims_per_assignment": 2, "race_distance": 40.0})
    assert run("counterfactual", "--config", cfg) == 0
    js = load_json(tmp_path / "cf" / "lanes.json")["placement"]
    assert js["n_assignments"] == 720 and js["n_sims"] == 1440
    lanes = read_table(tmp_path / "cf" / "lanes.csv")
    assert lanes["lane"].tolist() == [f"lane_{k}" for k in range(1, 7)]


def test_ratings_and_profiles(fixture_dir, capsys):
    cfg = fixture_dir / "config.yaml"
    assert run("ratings", "--config", cfg) == 0
    r = read_table(results(fixture_dir) / "ratings.csv")
    assert r["rank"].tolist() == list(range(1, len(r) + 1))
    assert np.all(np.diff(r["rating"]) <= 0)
    # 4 races cannot give any horse the 5 races needed for clustering
    assert run("profiles", "--config", cfg) == 2
    assert "races" in capsys.readouterr().err


def test_config_resolution(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 5\nworkers: 4\ndata:\n  tracking: t.csv\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.data_path("tracking") == tmp_path / "t.csv"
    assert cfg.output_dir == tmp_path / DEFAULTS["output_dir"]
    other = load_config(tmp_path / "c.yaml", {"workers": 1})
    assert cfg.digest == other.digest  # worker count does not change results
    assert cfg.digest != load_config(tmp_path / "c.yaml", {"seed": 6}).digest
