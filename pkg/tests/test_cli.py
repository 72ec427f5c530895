import json

from brinkman_ocp import cli


def test_run_and_exit_code(tmp_path, capsys):
    out = tmp_path / "a.csv"
    assert cli.main(["run", "--levels", "1", "--n0", "2", "--out", str(out)]) == 0
    assert out.exists()


def test_run_with_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    out = tmp_path / "b.csv"
    cfg.write_text(json.dumps({"levels": 1, "n0": 2, "scheme": "semi", "element": "th"}))
    assert cli.main(["run", "--config", str(cfg), "--out", str(out), "--lower", "0.1",
                     "--upper", "0.2"]) == 0
    assert "# scheme=semi" in out.read_text()


def test_run_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["run", "--config", str(cfg)]) == 1


def test_verify_single(capsys):
    code = cli.main(["verify", "--only", "10"])
    text = capsys.readouterr().out
    assert "criterion 10" in text
    assert code in (0, 2)
    assert ("[PASS]" in text) == (code == 0)
