import json

import pytest

from seqdpm import persistence
from seqdpm.cli import main


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("SDPM_OUTPUT_DIR", raising=False)
    return tmp_path


def test_simulate_toy_writes_three_batches(workdir):
    assert main(["simulate", "--case", "toy", "--n", "300", "--seed", "7", "--out", "b"]) == 0
    assert sorted(p.name for p in (workdir / "b").glob("*.csv")) == ["toy_1.csv", "toy_2.csv", "toy_3.csv"]
    cfg = json.loads((workdir / "b" / "simulate_config.json").read_text())
    assert cfg["scenario"]["seed"] == 7 and cfg["scenario"]["n_per_mode"] == 300


def test_simulate_case1_default_scale(workdir):
    assert main(["simulate", "--case", "case1", "--eta", "0.2", "--draws", "5", "--out", "c"]) == 0
    files = list((workdir / "c").glob("*.csv"))
    assert len(files) == 100
    labels = {line.split("=", 1)[1] for p in (workdir / "c").glob("*.meta")
              for line in p.read_text().splitlines() if line.startswith("label=")}
    assert len(labels) == 10


def test_simulate_is_byte_reproducible(workdir):
    main(["simulate", "--case", "toy", "--n", "40", "--seed", "3", "--out", "x"])
    main(["simulate", "--case", "toy", "--n", "40", "--seed", "3", "--out", "y"])
    for p in (workdir / "x").glob("*.csv"):
        assert p.read_bytes() == (workdir / "y" / p.name).read_bytes()


def test_ingest_query_density_flow(workdir, capsys):
    main(["simulate", "--case", "toy", "--n", "50", "--seed", "1", "--out", "b"])
    assert main(["ingest", "--model", "m.sdpm", "--n-particles", "10", "b/toy_1.csv"]) == 0
    assert len(persistence.load(workdir / "m.sdpm").registry) == 1
    assert main(["ingest", "--model", "m.sdpm", "b/toy_2.csv", "b/toy_3.csv"]) == 0
    out = capsys.readouterr().out
    assert "toy_2" in out and "k_mean" in out
    model = persistence.load(workdir / "m.sdpm")
    assert [r.id for r in model.registry] == ["toy_1", "toy_2", "toy_3"]
    assert model.n_particles == 10
    assert not (workdir / "m.sdpm.lock").exists()

    assert main(["query", "--model", "m.sdpm", "--batch", "b/toy_1.csv", "--top-k", "2",
                 "--output", "r.csv"]) == 0
    lines = (workdir / "r.csv").read_text().splitlines()
    assert lines[0] == "rank,experiment_id,log_rho" and len(lines) == 3

    assert main(["density", "--model", "m.sdpm", "--grid", "-5:5:0.01", "--output", "d.csv"]) == 0
    rows = (workdir / "d.csv").read_text().splitlines()
    assert rows[0] == "dim_1,density" and len(rows) == 1002
    assert json.loads((workdir / "density_config.json").read_text())["grid"] == "-5:5:0.01"


def test_duplicate_ingest_fails_without_touching_model(workdir, capsys):
    main(["simulate", "--case", "toy", "--n", "20", "--out", "b"])
    main(["ingest", "--model", "m.sdpm", "--n-particles", "5", "b/toy_1.csv"])
    before = (workdir / "m.sdpm").read_bytes()
    assert main(["ingest", "--model", "m.sdpm", "b/toy_2.csv", "b/toy_1.csv"]) == 1
    assert "toy_1" in capsys.readouterr().err
    assert (workdir / "m.sdpm").read_bytes() == before


def test_exit_code_two_for_io_and_format_errors(workdir):
    assert main(["query", "--model", "missing.sdpm", "--batch", "nothing.csv"]) == 2
    (workdir / "junk.sdpm").write_bytes(b"not a model at all")
    (workdir / "q.csv").write_text("dim_1\n0.5\n")
    assert main(["query", "--model", "junk.sdpm", "--batch", "q.csv"]) == 2
    (workdir / "bad.csv").write_text("oops\n")
    assert main(["ingest", "--model", "m.sdpm", "bad.csv"]) == 2


def test_validation_errors_exit_one(workdir):
    main(["simulate", "--case", "toy", "--n", "20", "--out", "b"])
    main(["ingest", "--model", "m.sdpm", "--n-particles", "3", "b"])
    assert main(["density", "--model", "m.sdpm", "--grid", "5:1:0.1"]) == 1
    assert main(["eval", "--out", "rep"]) == 1
    assert main(["ingest", "--model", "z.sdpm", "--n-particles", "0", "b/toy_1.csv"]) == 1


def test_locked_model_is_refused(workdir):
    main(["simulate", "--case", "toy", "--n", "20", "--out", "b"])
    (workdir / "m.sdpm.lock").write_text("123")
    assert main(["ingest", "--model", "m.sdpm", "b"]) == 2
    assert not (workdir / "m.sdpm").exists()


def test_output_dir_from_environment(workdir, monkeypatch):
    monkeypatch.setenv("SDPM_OUTPUT_DIR", str(workdir / "cfgs"))
    main(["simulate", "--case", "toy", "--n", "10", "--out", "b"])
    assert (workdir / "cfgs" / "simulate_config.json").exists()


def test_eval_with_baseline_and_sweep(workdir):
    common = ["--p", "4", "--experiments", "8", "--classes", "2", "--draws", "30", "--n-particles", "10"]
    main(["simulate", "--case", "case1", "--eta", "1", "--out", "c", "--p", "4", "--experiments", "8",
          "--classes", "2", "--draws", "30"])
    assert main(["eval", "--batch-dir", "c", "--baseline", "nsbl", "--out", "rep", "--n-particles", "10"]) == 0
    header = (workdir / "rep" / "ap.csv").read_text().splitlines()[0]
    assert header == "query_id,ap,ap_nsbl"
    summary = json.loads((workdir / "rep" / "summary.json").read_text())
    assert {"map", "nsbl_map", "auprc"} <= summary.keys()
    cfg = json.loads((workdir / "rep" / "eval_config.json").read_text())
    assert cfg["config"]["n_particles"] == 10 and cfg["config"]["alpha"] == 2.0

    assert main(["eval", "--case", "case1", "--etas", "0,0.5,1", "--out", "sweep", *common]) == 0
    names = sorted(p.name for p in (workdir / "sweep").glob("pr_eta*.csv"))
    assert names == ["pr_eta0.5.csv", "pr_eta0.csv", "pr_eta1.csv"]
    assert set(json.loads((workdir / "sweep" / "summary.json").read_text())["by_eta"]) == {"0", "0.5", "1"}


def test_eval_against_existing_model(workdir):
    main(["simulate", "--case", "case1", "--out", "c", "--p", "3", "--experiments", "6",
          "--classes", "2", "--draws", "20"])
    main(["ingest", "--model", "m.sdpm", "--n-particles", "5", "c"])
    assert main(["eval", "--batch-dir", "c", "--model", "m.sdpm", "--out", "rep"]) == 0
    assert (workdir / "rep" / "rankings.csv").exists()
