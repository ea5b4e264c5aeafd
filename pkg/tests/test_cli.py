import csv
import json
import math

import numpy as np
import pytest
import yaml

from fcbma.cli import main
from fcbma.config import ConfigError, load_config, parse_config
from fcbma.data import ColumnRoles, DataError, ingest
from fcbma.partition import Partition
from fcbma.pipeline import PipelineError, derive_seed, run
from fcbma.synth import SynthError, SynthSpec, simulate

SPEC = {
    "n_rows": 40000,
    "signal": 0.5,
    "factors": {
        "Km": {"levels": 5, "partition": "(1)(23)(45)", "frequency_effects": [0, 0.5, 1.0]},
        "Zone": {"levels": ["a", "b", "c"], "partition": "(a)(b,c)", "frequency_effects": [0, -0.5]},
    },
}


def write_yaml(path, obj):
    path.write_text(yaml.safe_dump(obj, sort_keys=False))
    return path


@pytest.fixture()
def synth_csv(tmp_path):
    spec = write_yaml(tmp_path / "spec.yaml", SPEC)
    assert main(["synth", str(spec), "--seed", "3", "--output-dir", str(tmp_path), "--name", "book"]) == 0
    return tmp_path / "book.csv"


def base_config(csv_path, **extra):
    cfg = {
        "input": str(csv_path),
        "family": "poisson",
        "response": "Claims",
        "exposure": "Exposure",
        "factors": {"Km": {"levels": [str(i) for i in range(1, 6)]}, "Zone": {"levels": ["a", "b", "c"]}},
        "seed": 1,
    }
    cfg.update(extra)
    return cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- configuration -----------------------------------------------------------


def test_config_defaults(tmp_path):
    cfg = parse_config(base_config("x.csv"), tmp_path)
    assert cfg.search.method == "auto"
    assert cfg.collapsed == ("Km", "Zone")
    assert cfg.ensemble.mass == 0.999
    assert cfg.resolve("x.csv") == tmp_path / "x.csv"


@pytest.mark.parametrize("mutate, message", [
    (lambda c: c.pop("family"), "family"),
    (lambda c: c.update(family="tweedie"), "family"),
    (lambda c: c.update(colour="red"), "colour"),
    (lambda c: c.update(search={"method": "bogus"}), "search.method"),
    (lambda c: c.update(search={"sa": {"rng_seed": 5}}), "rng_seed"),
    (lambda c: c.update(search={"ga": {"population_size": 2}}), "search.ga"),
    (lambda c: c.update(stages=[{"factors": ["Nope"]}]), "unknown factors"),
    (lambda c: c.update(factors={}), "factors"),
    (lambda c: c["factors"]["Km"].update(shape="x"), "shape"),
])
def test_config_errors(mutate, message):
    raw = base_config("x.csv")
    mutate(raw)
    with pytest.raises(ConfigError, match=message):
        parse_config(raw)


def test_constraint_level_names_checked(tmp_path):
    raw = base_config("x.csv")
    raw["factors"]["Km"]["must_link"] = [["1", "9"]]
    cfg = parse_config(raw)
    with pytest.raises(ConfigError, match="'9'"):
        cfg.template({"Km": tuple("12345"), "Zone": ("a", "b", "c")})


def test_config_digest_stable_and_overrides(tmp_path):
    p = write_yaml(tmp_path / "c.yaml", base_config("x.csv"))
    a, b = load_config(p), load_config(p)
    assert a.digest() == b.digest()
    c = load_config(p, seed=99, threads=4)
    assert (c.seed, c.threads) == (99, 4) and c.digest() != a.digest()


def test_derive_seed():
    assert derive_seed(1, "search/sa") == derive_seed(1, "search/sa")
    assert derive_seed(1, "search/sa") != derive_seed(2, "search/sa")
    assert derive_seed(1, "search/sa") != derive_seed(1, "search/ga")


# -- ingestion ---------------------------------------------------------------


def test_ingest_errors_name_column_and_row(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("A,y,e\nx,1,1\nz,oops,1\n")
    with pytest.raises(DataError, match=r"'y'.*row 2"):
        ingest(p, ColumnRoles(("A",), ("y",), "e"))
    p.write_text("A,y,e\nx,1,1\nq,2,1\n")
    with pytest.raises(DataError, match=r"'q'.*'A'.*row 2"):
        ingest(p, ColumnRoles(("A",), ("y",), "e", vocabularies={"A": ["x", "z"]}))
    with pytest.raises(DataError, match="missing column"):
        ingest(p, ColumnRoles(("B",), ("y",)))
    p.write_text("A,y,e\nx,1,-1\n")
    with pytest.raises(DataError, match="negative exposure"):
        ingest(p, ColumnRoles(("A",), ("y",), "e"))


def test_per_policy_exposure_toy(tmp_path):
    # three policies: totals give the closed-form rate sum(y) / sum(e)
    p = tmp_path / "pol.csv"
    p.write_text("A,Claims,Exposure\nu,0,0.5\nu,1,1.0\nu,2,0.25\n")
    cfg = parse_config({"input": str(p), "family": "poisson", "response": "Claims", "exposure": "Exposure",
                        "factors": {"A": None}})
    manifest = run(cfg, tmp_path / "out", progress=None)
    assert manifest["status"] == "ok"
    coef = read_csv(tmp_path / "out" / "coefficients.csv")
    assert float(coef[0]["estimate"]) == pytest.approx(math.log(3 / 1.75), abs=1e-10)


def test_severity_from_drops_zero_count_rows(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("A,Claims,Payments\nx,0,0\nx,2,300\ny,1,50\n")
    d = ingest(p, ColumnRoles(("A",), ("Claims",), severity_from=("Payments", "Claims")))
    assert d.n_rows == 2
    np.testing.assert_allclose(d.column("Severity"), [150.0, 50.0])


# -- synth -------------------------------------------------------------------


def test_synth_deterministic(tmp_path):
    spec = SynthSpec.from_dict(SPEC)
    a, ta = simulate(spec, 5)
    b, tb = simulate(spec, 5)
    assert ta == tb
    for k in a.numeric:
        np.testing.assert_array_equal(a.numeric[k], b.numeric[k])
    c, _ = simulate(spec, 6)
    assert not np.array_equal(a.column("Claims"), c.column("Claims"))
    assert ta["factors"]["Km"]["partition"] == "(1)(2,3)(4,5)"


def test_synth_cli_files_identical(tmp_path):
    spec = write_yaml(tmp_path / "spec.yaml", SPEC)
    for d in ("a", "b"):
        assert main(["synth", str(spec), "--seed", "4", "--output-dir", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "synth.csv").read_bytes() == (tmp_path / "b" / "synth.csv").read_bytes()
    truth = json.loads((tmp_path / "a" / "synth_truth.json").read_text())
    assert truth["factors"]["Zone"]["graycode"] == "122"


def test_synth_zero_signal_and_grouped():
    spec = SynthSpec.from_dict({"n_rows": 2000, "signal": 0.0, "layout": "grouped",
                                "factors": {"A": {"levels": 4}, "B": {"levels": 3}}})
    d, truth = simulate(spec, 0)
    assert d.n_rows <= 12
    assert all(e == 0 for f in truth["factors"].values() for e in f["frequency_effects"])
    assert d.column("Exposure").sum() == pytest.approx(2000, rel=0.05)


def test_synth_errors():
    with pytest.raises(SynthError):
        SynthSpec.from_dict({"factors": {}})
    with pytest.raises(SynthError):
        SynthSpec.from_dict({"factors": {"A": {"levels": 3, "partition": "(1)(2)(3)",
                                               "frequency_effects": [0, 1]}}})
    with pytest.raises(SynthError):
        SynthSpec.from_dict({"factors": {"A": {"levels": 3}}, "layout": "wide"})


# -- run ---------------------------------------------------------------------


def test_run_outputs_and_manifest(tmp_path, synth_csv):
    cfg = parse_config(base_config(synth_csv))
    events = []
    m = run(cfg, tmp_path / "out", progress=events.append)
    out = tmp_path / "out"
    for name in ("ranked_models.csv", "coefficients.csv", "coclustering_Km.csv", "coclustering_Zone.csv",
                 "coclustering_long.csv", "manifest.json"):
        assert (out / name).is_file()
    disk = json.loads((out / "manifest.json").read_text())
    assert disk["status"] == "ok" and disk["config_sha256"] == cfg.digest()
    assert set(disk["outputs"]) >= {"ranked_models.csv", "coefficients.csv"}
    assert m["visited"] == 52 * 5
    ranked = read_csv(out / "ranked_models.csv")
    assert abs(sum(float(r["weight"]) for r in ranked) - 1) < 1e-9
    assert ranked[0]["Km"] == "(1)(2,3)(4,5)" and ranked[0]["Zone"] == "(a)(b,c)"
    for r in ranked:  # strings round-trip through the parser
        assert Partition.parse(r["Km"], [str(i) for i in range(1, 6)]).set_notation(
            [str(i) for i in range(1, 6)]) == r["Km"]
    bics = [float(r["bic"]) for r in ranked]
    assert bics == sorted(bics)
    kinds = {e["event"] for e in events}
    assert {"ingested", "search_start", "exhaustive"} <= kinds


def test_run_is_reproducible(tmp_path, synth_csv):
    cfg = parse_config(base_config(synth_csv, search={"method": "sa", "sa": {"restarts": 2}}))
    a = run(cfg, tmp_path / "a", progress=None)
    b = run(cfg, tmp_path / "b", progress=None)
    assert a["outputs"] == b["outputs"]
    assert a["seeds"] == b["seeds"] and "search/sa" in a["seeds"]


def test_run_single_level_factor(tmp_path):
    p = tmp_path / "one.csv"
    p.write_text("A,Claims,Exposure\nu,1,1\nu,3,2\n")
    cfg = parse_config({"input": str(p), "family": "poisson", "response": "Claims", "exposure": "Exposure",
                        "factors": {"A": None}})
    run(cfg, tmp_path / "out", progress=None)
    ranked = read_csv(tmp_path / "out" / "ranked_models.csv")
    assert len(ranked) == 1 and float(ranked[0]["weight"]) == 1.0


def test_run_staged_and_scored(tmp_path, synth_csv):
    raw = base_config(synth_csv, stages=[{"factors": ["Km"], "keep": 3}, {"factors": ["Zone"], "keep": 2}],
                      scoring=str(synth_csv))
    m = run(parse_config(raw), tmp_path / "out", progress=None)
    assert m["visited"] == 3 * 2
    preds = read_csv(tmp_path / "out" / "predictions.csv")
    assert len(preds) == 40000 and {"best_model", "ensemble"} <= set(preds[0])


def test_run_with_evaluation(tmp_path, synth_csv):
    raw = base_config(synth_csv, evaluation={"reps": 2, "methods": ["no-FC", "FC-only", "FC-BMA(3)"]})
    m = run(parse_config(raw), tmp_path / "out", progress=None)
    rows = read_csv(tmp_path / "out" / "eval_report.csv")
    assert [r["method"] for r in rows] == ["no-FC", "FC-only", "FC-BMA(3)"]
    assert m["evaluation_reps"] == 2


def test_run_failure_writes_manifest(tmp_path):
    cfg = parse_config(base_config(tmp_path / "missing.csv"))
    with pytest.raises(PipelineError) as info:
        run(cfg, tmp_path / "out", progress=None)
    assert info.value.stage == "ingest"
    disk = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert disk["status"] == "failed" and disk["failed_stage"] == "ingest"


# -- command line ------------------------------------------------------------


def test_cli_run_and_validate(tmp_path, synth_csv, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", base_config(synth_csv))
    assert main(["validate-config", str(cfg)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["valid"] and report["space_sizes"] == {"Km": 52, "Zone": 5}
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "o"), "--threads", "2", "--seed", "8"]) == 0
    captured = capsys.readouterr()
    assert json.loads(captured.out)["status"] == "ok"
    lines = [json.loads(x) for x in captured.err.splitlines() if x.strip()]
    assert lines and all("event" in x for x in lines)
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seeds"]["run"] == 8


def test_cli_enumerate(tmp_path, capsys):
    assert main(["enumerate", "--levels", "8", "--must-link", "2,3", "--cannot-link", "4,7"]) == 0
    assert json.loads(capsys.readouterr().out)["admissible"] == 674
    assert main(["enumerate", "--levels", "4", "--consecutive", "--list"]) == 0
    out = capsys.readouterr().out
    assert json.loads(out[:out.index("}") + 1])["admissible"] == 8
    assert main(["enumerate", "--levels", "5", "--output-dir", str(tmp_path), "--limit", "10"]) == 0
    assert len(read_csv(tmp_path / "partitions.csv")) == 10


def test_cli_errors(tmp_path, capsys):
    bad = write_yaml(tmp_path / "bad.yaml", {"input": "x.csv", "family": "poisson"})
    assert main(["validate-config", str(bad)]) == 2
    assert "missing required key" in capsys.readouterr().err
    assert main(["enumerate", "--levels", "3", "--must-link", "1,2", "--cannot-link", "1,2"]) == 2
    cfg = write_yaml(tmp_path / "c.yaml", base_config(tmp_path / "nothing.csv"))
    assert main(["run", str(cfg), "--quiet", "--output-dir", str(tmp_path / "o")]) == 1
    err = [json.loads(x) for x in capsys.readouterr().err.splitlines()]
    assert err[-1]["stage"] == "ingest"
