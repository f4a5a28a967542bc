import csv
import io
import json

import pytest

from peripatric.cli import main, parse_eps_rule, read_config
from peripatric.errors import ParameterError


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def table(text):
    return list(csv.reader(line for line in io.StringIO(text) if not line.startswith("#")))


def test_rates_infinite_p(capsys):
    code, out, _ = run(capsys, "rates", "--n", "4", "--p", "inf")
    assert code == 0
    assert "# peripatric 0.1.0 rates" in out
    kingman = out.split("# table: censored_generator")[0]
    rows = table(kingman)
    assert rows[0] == ["lineages", "rate"]
    assert [float(r[1]) for r in rows[1:]] == [2.0, 6.0, 12.0]


def test_coalescent_single_lineage(capsys):
    code, out, _ = run(capsys, "coalescent", "--n", "1", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["absorbed"] is True and doc["tmrca_mean"] == 0.0
    assert doc["provenance"]["seed"] == 42


def test_unknown_subcommand_and_bad_values(capsys):
    assert run(capsys, "bogus")[0] == 1
    code, _, err = run(capsys, "rates", "--n", "x")
    assert code == 1 and "n:" in err
    code, _, err = run(capsys, "stationary", "--N", "1000", "--eps", "0.0123")
    assert code == 1 and "eps=0.012" in err
    code, _, err = run(capsys, "stationary", "--eps", "0.1", "--colony-size", "100")
    assert code == 1 and "only one of" in err


def test_eps_rule_message(capsys):
    code, out, err = run(capsys, "stationary", "--N", "10000", "--eps-rule", "N^-1/3")
    assert code == 0
    assert "colony size rounded to 464" in err
    assert "# colony_size=464" in out


def test_event_cap_exit_code(capsys):
    code, _, err = run(capsys, "colony", "--N", "1000", "--horizon", "50", "--max-events", "10")
    assert code == 2 and "exceeded" in err


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nn = 3\np=inf\nalpha=2\n", encoding="utf-8")
    code, out, _ = run(capsys, "rates", "--config", str(cfg), "--n", "2")
    assert code == 0 and "# n=2" in out and "# alpha=2.0" in out
    cfg.write_text("bogus=1\n", encoding="utf-8")
    code, _, err = run(capsys, "rates", "--config", str(cfg))
    assert code == 1 and "bogus" in err


def test_study_reports_identical(tmp_path, capsys):
    cfg = tmp_path / "default.cfg"
    cfg.write_text("N_grid=1000,2000\ntimes=0.5\nreplicates=200\neps_rule=N^-1/3\n", encoding="utf-8")
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        code, _, _ = run(capsys, "study-thm1", "--config", str(cfg), "--seed", "42", "--format", "json", "--out", str(p), "--jobs", "1")
        assert code == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    doc = json.loads(paths[0].read_text())
    assert doc["provenance"]["seed"] == 42 and doc["replicates"] == 200


def test_simulators_run(capsys):
    for argv in (
        ["fluid", "--horizon", "1", "--every", "500"],
        ["colony", "--N", "1000", "--horizon", "0.5", "--seed", "3"],
        ["ancestry", "--N", "1000", "--n", "3", "--horizon", "0.5"],
        ["coalescent", "--n", "2", "--simulate"],
        ["kingman", "--n", "3", "--replicates", "200"],
    ):
        code, out, _ = run(capsys, *argv)
        assert code == 0, argv
        assert out.startswith("# peripatric 0.1.0")


def test_parse_helpers(tmp_path):
    assert parse_eps_rule("N^-1/3") == pytest.approx(-1 / 3)
    assert parse_eps_rule("N^-0.25") == -0.25
    with pytest.raises(ParameterError):
        parse_eps_rule("N^2")
    path = tmp_path / "x.cfg"
    path.write_text("a=1\nnot a pair\n", encoding="utf-8")
    with pytest.raises(ParameterError, match=":2:"):
        read_config(str(path))
