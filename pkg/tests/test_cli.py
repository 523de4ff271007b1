import json

import pytest

from ctfusion.harness.cli import main
from ctfusion.harness.io import load_trajectory_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "short.cfg"
    cfg.write_text("duration=6.0\nseed=1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_golden_path(workspace, capsys):
    root, cfg = workspace
    out = root / "run"
    assert main(["run", "--dataset", str(root / "data"), "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("trajectory.csv", "windows.jsonl", "eval.json", "anchors_used.csv"):
        assert (out / name).is_file()
    windows = [json.loads(line) for line in (out / "windows.jsonl").read_text().splitlines()]
    assert len(windows) >= 2
    est = load_trajectory_csv(out / "trajectory.csv")
    assert est.t[0] == 0.0 and len(est.t) > 100
    capsys.readouterr()
    assert main(["eval", "--est", str(out / "trajectory.csv"), "--gt", str(root / "data" / "groundtruth.csv"),
                 "--out", str(root / "eval.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0 <= rep["ate_rmse"] < 0.1
    assert json.loads((root / "eval.json").read_text()) == rep


def test_anchor_count_tag(workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "a3.cfg"
    cfg.write_text("anchor_count=3\nva_enabled=false\n")
    assert main(["run", "--dataset", str(root / "data"), "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert rep["tags"]["A"] == 3 and rep["tags"]["virtual_anchors"] is False


def test_sweep_emits_one_report_per_value(workspace, tmp_path, capsys):
    root, cfg = workspace
    code = main(["sweep", "--param", "anchor_count", "--values", "3,4", "--config", str(cfg),
                 "--dataset", str(root / "data"), "--out", str(tmp_path)])
    assert code == 0
    lines = [json.loads(x) for x in (tmp_path / "sweep.jsonl").read_text().splitlines()]
    assert [x["value"] for x in lines] == ["3", "4"]
    assert [x["report"]["tags"]["A"] for x in lines] == [3, 4]
    assert (tmp_path / "anchor_count=3" / "eval.json").is_file()


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--bogus"],
        ["simulate"],
        ["run", "--dataset", "/nonexistent/data", "--out", "/tmp/x"],
        ["eval", "--est", "/nonexistent.csv", "--gt", "/nonexistent.csv"],
        ["simulate", "--config", "/nonexistent.cfg", "--out", "/tmp/x"],
        ["sweep", "--param", "anchor_count", "--values", ","],
        ["sweep", "--param", "no_such_key", "--values", "1"],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert _err(capsys)["error"] == "usage"


def test_bad_config_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gama=3\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
    err = _err(capsys)
    assert err["error"] == "ParseError" and "gama" in err["message"]
