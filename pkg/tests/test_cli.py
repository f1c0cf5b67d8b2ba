import json
import subprocess
import sys

import pytest

from fracergo import cli


def _cfg(tmp_path, name="c.json", **body):
    body.setdefault("output", str(tmp_path / "out"))
    p = tmp_path / name
    p.write_text(json.dumps(body))
    return p


def test_list_is_stable(capsys):
    assert cli.main(["list"]) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 9
    assert [ln.split()[0] for ln in lines] == list(cli.EXPERIMENTS)
    assert lines[0].startswith("verify-kernel")


def test_schema_error_has_path(tmp_path, capsys):
    p = _cfg(tmp_path, experiment="decay", n=0)
    assert cli.main(["run", str(p)]) == cli.EXIT_SCHEMA
    err = json.loads(capsys.readouterr().err)
    assert err["path"] == "$.n"


def test_unknown_key_rejected(tmp_path, capsys):
    p = _cfg(tmp_path, experiment="decay", replicas=10)
    assert cli.main(["run", str(p)]) == cli.EXIT_SCHEMA
    assert json.loads(capsys.readouterr().err)["status"] == "config_error"


def test_unknown_experiment(tmp_path):
    assert cli.main(["run", str(_cfg(tmp_path, experiment="nope"))]) == cli.EXIT_SCHEMA


def test_missing_file(tmp_path):
    assert cli.main(["run", str(tmp_path / "absent.json")]) == cli.EXIT_SCHEMA


def test_dry_run_layout(tmp_path, capsys):
    p = _cfg(tmp_path, experiment="decay", n=1000, seed=7)
    assert cli.main(["run", str(p), "--dry-run", "--threads", "2"]) == cli.EXIT_OK
    plan = json.loads(capsys.readouterr().out)
    assert plan["replicas"] == 1000 and plan["threads"] == 2
    covered = sum(b - a + 1 for a, b in plan["batches"])
    assert covered == 1000
    assert not (tmp_path / "out").exists()


def test_threads_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("FRACERGO_THREADS", "3")
    p = _cfg(tmp_path, experiment="decay", n=10)
    cli.main(["run", str(p), "--dry-run"])
    assert json.loads(capsys.readouterr().out)["threads"] == 3
    cli.main(["run", str(p), "--dry-run", "--threads", "1"])
    assert json.loads(capsys.readouterr().out)["threads"] == 1


def test_verify_kernel_passes(tmp_path):
    p = _cfg(tmp_path, experiment="verify-kernel", kernel={"family": "fractional", "H": 0.3})
    assert cli.main(["run", str(p)]) == cli.EXIT_OK
    cert = json.loads((tmp_path / "out" / "kernel_certificate.json").read_text())
    assert cert["certificate"]["passed"] is True
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert "kernel_certificate.json" in manifest["artifacts"]


def test_verify_drift_double_well_fails(tmp_path, capsys):
    p = _cfg(tmp_path, experiment="verify-drift", drift={"family": "doublewell"})
    assert cli.main(["run", str(p)]) == cli.EXIT_FAILED_CHECK
    cert = json.loads((tmp_path / "out" / "drift_certificate.json").read_text())
    assert cert["certificate"]["witness"][2] > 0


def test_decay_csv_byte_identical(tmp_path):
    base = dict(experiment="decay", n=300, T=3.0, T_burn=5.0, seed=11)
    a = _cfg(tmp_path, "a.json", output=str(tmp_path / "a"), **base)
    b = _cfg(tmp_path, "b.json", output=str(tmp_path / "b"), **base)
    assert cli.main(["run", str(a), "--threads", "1"]) == cli.EXIT_OK
    assert cli.main(["run", str(b), "--threads", "4"]) == cli.EXIT_OK
    assert (tmp_path / "a" / "decay.csv").read_bytes() == (tmp_path / "b" / "decay.csv").read_bytes()


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fracergo.cli", "list"], capture_output=True, text=True)
    assert res.returncode == 0 and "coalesce" in res.stdout


@pytest.mark.parametrize("name", ["laplace-check", "schedule"])
def test_light_experiments_run(tmp_path, name):
    p = _cfg(tmp_path, experiment=name, n=50)
    assert cli.main(["run", str(p)]) in (cli.EXIT_OK, cli.EXIT_FAILED_CHECK)
    assert (tmp_path / "out" / "manifest.json").exists()
