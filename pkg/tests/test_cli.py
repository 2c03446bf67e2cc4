import json
import shutil

import pytest

from fpkflow.cli import main
from fpkflow.config import ConfigError, bundled_config, parse_config, schema_text


@pytest.fixture(scope="module")
def sqrt_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("sqrt")
    code = main(["run", "sqrt_branch", "--out", str(out)])
    return code, out


def test_print_schema(capsys):
    assert main(["--print-schema"]) == 0
    text = capsys.readouterr().out
    assert "[problem]" in text and "admission_tolerance" in text
    parse_config(text)  # the schema itself is a valid config


def test_schema_round_trips_defaults():
    cfg = parse_config(schema_text())
    assert cfg["candidates"]["admission_tolerance"] == 1e-4
    assert cfg["time"]["checkpoints"] == (0.0, 0.25, 0.5, 0.75, 1.0)


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[problem]\npreset = heat\nbogus = 1\n")
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "line 3" in err and "bogus" in err


def test_bad_value_reports_key():
    with pytest.raises(ConfigError) as exc:
        parse_config("[solver]\ndt = fast\n")
    assert exc.value.line == 2 and exc.value.key == "dt"


def test_bad_custom_expression_rejected():
    with pytest.raises(ConfigError, match="unsupported call"):
        parse_config("[problem]\npreset = custom\nb = exp(x)\n")


def test_bundled_configs_parse():
    for name in ("heat", "zero", "sqrt_branch", "ou_tanh"):
        parse_config(bundled_config(name).read_text())


def test_zero_run_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "zero", "--out", str(a), "--seed", "3"]) == 0
    assert main(["run", "zero", "--out", str(b), "--seed", "3"]) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    report = json.loads((a / "report.json").read_text())
    assert report["all_pass"] and report["flow"]["report"]["passed"]
    for name in ("moments.csv", "atoms.csv", "w1_gaps.csv"):
        assert (a / "plots" / name).exists()


def test_heat_bundled_run(tmp_path):
    out = tmp_path / "heat"
    assert main(["run", "heat", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["flow"]["report"]["passed"]
    assert report["probe"]["status"] == "WellPosedAtScale"


def test_sqrt_run_reports_non_uniqueness(sqrt_run):
    code, out = sqrt_run
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["probe"]["status"] == "NotWellPosed"
    assert report["probe"]["w1_gap"] >= 0.1


def test_expect_wellposed_flag_fails_sqrt(tmp_path):
    out = tmp_path / "sqrt"
    assert main(["run", "sqrt_branch", "--out", str(out), "--expect-wellposed"]) == 1


def test_replay_identical(sqrt_run):
    _, out = sqrt_run
    assert main(["replay", str(out / "selection" / "trace.json")]) == 0


def test_replay_detects_tampering(sqrt_run, tmp_path, capsys):
    _, out = sqrt_run
    copy = tmp_path / "run"
    shutil.copytree(out, copy)
    path = copy / "selection" / "trace.json"
    doc = json.loads(path.read_text())
    doc["trace"]["steps"][1]["u"] += 1e-3
    path.write_text(json.dumps(doc))
    assert main(["replay", str(path)]) == 1
    diff = json.loads(capsys.readouterr().out)
    assert not diff["identical"] and diff["diff"][0]["k"] == 1


def test_replay_missing_candidates(sqrt_run, tmp_path):
    _, out = sqrt_run
    copy = tmp_path / "run"
    shutil.copytree(out, copy)
    shutil.rmtree(copy / "candidates")
    assert main(["replay", str(copy / "selection" / "trace.json")]) == 2


def test_stage_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "tight.cfg"
    cfg.write_text("[problem]\npreset = heat\n[solver]\ndx = 0.02\n"
                   "[candidates]\nadmission_tolerance = 1e-12\n")
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "generate" in capsys.readouterr().err
