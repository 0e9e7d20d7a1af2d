import json

import pytest

from pairspill.cli import EXIT_FAILED, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main, make_config
from pairspill.errors import ConfigConflictWarning
from pairspill.ingest import load


@pytest.fixture
def simulated(tmp_path):
    out = tmp_path / "osn.csv"
    rc = main(["simulate", "--spec", "osn_example", "--seed", "3", "--groups", "3000", "--output", str(out)])
    assert rc == EXIT_OK
    return out


def test_verify_bundled_spec(capsys):
    assert main(["verify", "--spec", "uniform_types"]) == EXIT_OK
    assert "0 failed" in capsys.readouterr().out


def test_verify_random_specs(tmp_path):
    out = tmp_path / "verify.json"
    assert main(["verify", "--random-specs", "20", "--seed", "2", "--output", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["random"]["n_failed"] == 0


def test_simulate_writes_data_and_truth(simulated):
    manifest = simulated.with_name("osn.truth.json")
    truth = json.loads(manifest.read_text())
    assert truth["seed"] == 3 and truth["groups"] == 3000
    assert "late_direct" in truth["values"]
    assert load(simulated).n_groups == 3000


def test_estimate_recovers_truth(simulated, tmp_path, capsys):
    out = tmp_path / "est.json"
    assert main(["estimate", "--input", str(simulated), "--output", str(out)]) == EXIT_OK
    assert "late_direct" in capsys.readouterr().out
    report = json.loads(out.read_text())
    truth = json.loads(simulated.with_name("osn.truth.json").read_text())["values"]
    rows = {r["name"]: r for r in report["estimates"]}
    for name in ("late_direct", "late_indirect"):
        assert abs(rows[name]["value"] - truth[name]) <= 4 * rows[name]["se"]
    assert report["metadata"]["osn"]["verdict"] == "consistent"
    assert report["metadata"]["first_stage_F"] > 0


def test_estimate_routes_osn_violations(tmp_path, capsys):
    text = tmp_path / "x.csv"
    lines = ["household,unit,z,d,y"]
    rows = [((0, 0), (1, 0)), ((0, 0), (0, 0)), ((1, 0), (1, 0)), ((1, 0), (0, 0)),
            ((0, 1), (0, 1)), ((0, 1), (0, 0)), ((1, 1), (1, 1)), ((1, 1), (0, 1))]
    for k, (z, d) in enumerate(rows * 3):
        for u in (0, 1):
            lines.append(f"h{k:02d},{u + 1},{z[u]},{d[u]},{(k * 7 + u) % 5}")
    text.write_text("\n".join(lines) + "\n")
    assert main(["estimate", "--input", str(text)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    omitted = {o["name"]: o["condition"] for o in report["omitted"]}
    assert omitted["late_direct"] == "OSNViolated"
    assert any(r["name"] == "itt_direct_z0" for r in report["estimates"])
    assert any(r["name"] == "p_at" for r in report["estimates"])


def test_describe(simulated, capsys):
    assert main(["describe", "--input", str(simulated)]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["n_groups"] == 3000
    assert sum(info["unit_cell_counts"].values()) == 6000
    assert info["osn"]["verdict"] == "consistent"


def test_mc_study(tmp_path):
    out = tmp_path / "mc.json"
    rc = main(["mc-study", "--spec", "osn_example", "--groups", "300", "--reps", "5",
               "--seed", "1", "--estimands", "mean_y_00,late_direct", "--output", str(out)])
    assert rc == EXIT_OK
    doc = json.loads(out.read_text())
    assert set(doc["estimands"]) == {"mean_y_00", "late_direct"}


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("household,unit,z,d,y\nh1,1,0,3,1\nh1,2,0,0,1\n")
    assert main(["estimate", "--input", str(bad)]) == EXIT_VALIDATION
    assert "NonBinaryValue" in capsys.readouterr().err
    assert main(["estimate", "--input", str(tmp_path / "missing.csv")]) == EXIT_IO
    assert main(["simulate", "--spec", "osn_example"]) == EXIT_VALIDATION
    assert main(["verify", "--spec", str(tmp_path / "nope.yaml")]) == EXIT_IO
    assert main(["verify"]) == EXIT_VALIDATION
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == EXIT_VALIDATION


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    import pairspill.cli as cli
    from pairspill.oracle import IdentityReport

    def failing(spec):
        rep = IdentityReport()
        rep.add("forced", 0.0, 1.0)
        return rep

    monkeypatch.setattr(cli, "verify_identities", failing)
    assert main(["verify", "--spec", "uniform_types"]) == EXIT_FAILED


def test_config_file_wins_with_warning(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("seed: 9\nreps: 4\n")
    with pytest.warns(ConfigConflictWarning):
        conf, _ = make_config(["mc-study", "--spec", "osn_example", "--seed", "2", "--config", str(cfg)])
    assert conf.seed == 9 and conf.reps == 4
    cfg.write_text("bogus: 1\n")
    assert main(["mc-study", "--spec", "osn_example", "--config", str(cfg)]) == EXIT_VALIDATION


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("PAIRSPILL_WORKERS", "3")
    conf, _ = make_config(["simulate", "--spec", "osn_example", "--output", "x.csv"])
    assert conf.workers == 3
    conf, _ = make_config(["simulate", "--spec", "osn_example", "--output", "x.csv", "--workers", "2"])
    assert conf.workers == 2
