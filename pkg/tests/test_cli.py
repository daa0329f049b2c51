import json
import subprocess
import sys

import pytest

from adherence.allocation import certify
from adherence.cli import COMMANDS, main, sha256_file
from adherence.cohort import load_cohort
from adherence.simulation import SimulationContext, validate_baseline


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cohort_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    assert run("generate", "--n", 120, "--seed", 3, "--output-dir", d) == 0
    return d / "cohort.json"


def test_generate_twice_same_digest(tmp_path):
    for sub in ("a", "b"):
        assert run("generate", "--n", 50, "--seed", 1, "--output-dir", tmp_path / sub, "-o", "c.json") == 0
    assert sha256_file(tmp_path / "a" / "c.json") == sha256_file(tmp_path / "b" / "c.json")
    manifest = json.loads((tmp_path / "a" / "generate.manifest.json").read_text())
    assert manifest["outputs"]["c.json"] == sha256_file(tmp_path / "a" / "c.json")
    assert manifest["seed"] == 1 and "numpy" in manifest["versions"]
    assert "threads" not in manifest["options"] and "output_dir" not in manifest["options"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 30, "seed": 4}))
    assert run("generate", "--config", cfg, "--seed", 5, "--output-dir", tmp_path) == 0
    opts = json.loads((tmp_path / "generate.manifest.json").read_text())["options"]
    assert opts["n"] == 30 and opts["seed"] == 5


def test_unknown_config_key_is_field_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 30, "colour": "red"}))
    assert run("generate", "--config", cfg, "--output-dir", tmp_path) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "usage" and "colour" in err["message"]


def test_wrong_config_type_is_field_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": "many"}))
    assert run("generate", "--config", cfg, "--output-dir", tmp_path) == 2
    assert "'n'" in json.loads(capsys.readouterr().err)["message"]


def test_unknown_subcommand_and_flag(capsys):
    assert run("plot") == 2
    assert json.loads(capsys.readouterr().err)["error"] == "usage"
    assert run("fit", "--colour") == 2
    assert "--colour" in json.loads(capsys.readouterr().err)["message"]


def test_missing_input_rejected_before_running(tmp_path, capsys):
    assert run("fit", "--cohort", tmp_path / "nope.json", "--output-dir", tmp_path) == 2
    assert "not found" in json.loads(capsys.readouterr().err)["message"]
    assert not (tmp_path / "fit.manifest.json").exists()


def test_bad_input_content_gives_error_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert run("fit", "--cohort", bad, "--output-dir", tmp_path) == 1
    assert "schema" in json.loads(capsys.readouterr().err)["message"]


def test_simulate_zero_capacity_reports_baseline(tmp_path, cohort_file, capsys):
    assert run("simulate", "--cohort", cohort_file, "--rule", "standard", "--capacity", 0, "--replications", 2, "--output-dir", tmp_path) == 0
    summary = json.loads(capsys.readouterr().out)["summary"]
    ref = validate_baseline(SimulationContext(load_cohort(cohort_file)))
    assert summary["baseline"]["simulated_mean_risk"] == ref.simulated_mean_risk
    assert summary["baseline"]["ok"] == ref.ok
    assert summary["events_per_100k"] == pytest.approx(ref.simulated_mean_risk * 100_000, rel=1e-12)


def test_certify_report_matches_library(tmp_path, capsys):
    assert run("certify", "--instances", 40, "--seed", 3, "--output-dir", tmp_path) == 0
    report = json.loads((tmp_path / "certification.json").read_text())
    assert report == certify(40, seed=3).to_dict()
    strict = run("certify", "--instances", 40, "--seed", 3, "--strict", "--output-dir", tmp_path)
    assert strict == (3 if report["counterexamples"] else 0)


def test_allocate_from_instance(tmp_path):
    inst = tmp_path / "inst.json"
    inst.write_text(json.dumps({"rewards": [[0.10, 0.09], [0.08, 0.02]], "capacity": 1, "ids": ["p", "q"]}))
    assert run("allocate", "--instance", inst, "--solver", "exact", "--output-dir", tmp_path) == 0
    assert (tmp_path / "plan.csv").read_text() == "patient_id,epoch\np,2\nq,1\n"
    assert run("allocate", "--output-dir", tmp_path) == 2


def test_every_command_has_common_options():
    from adherence.cli import build_parser

    parser = build_parser()
    for cmd in COMMANDS:
        ns = parser.parse_args([cmd, "--seed", "1", "--threads", "2", "--output-dir", "x"])
        assert ns.seed == 1 and ns.threads == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "adherence.cli", "certify", "--instances", "3", "--output-dir", str(tmp_path)],
        capture_output=True,
        text=True,
        check=True,
    )
    assert json.loads(out.stdout)["command"] == "certify"
