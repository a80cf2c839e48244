import sys

import pytest

import main
from app.buffers import ReplayBuffer


def invoke(monkeypatch, *args):
    monkeypatch.setattr(sys, "argv", ["lisp", *args])
    try:
        main.main()
    except SystemExit as e:
        return e.code or 0
    return 0


def test_collect_with_zero_budget(monkeypatch, tmp_path):
    out = tmp_path / "empty.lrbf"
    assert invoke(monkeypatch, "collect", "--budget", "0", "--out", str(out)) == 0
    assert len(ReplayBuffer.load(out)) == 0


def test_config_error_exits_with_status_2(monkeypatch, tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[planner]\nhorizon = 10\nrepeat = 3\n")
    assert invoke(monkeypatch, "run", "--config", str(config), "--out", str(tmp_path / "runs")) == 2


def test_missing_config_exits_with_status_2(monkeypatch, tmp_path):
    assert invoke(monkeypatch, "run", "--config", str(tmp_path / "missing.ini")) == 2


def test_corrupt_dataset_exits_with_status_4(monkeypatch, tmp_path):
    dataset = tmp_path / "bad.lrbf"
    dataset.write_bytes(b"LRBF")
    args = ["pretrain", "--dataset", str(dataset), "--out", str(tmp_path / "ckpt.lisp")]
    assert invoke(monkeypatch, *args) == 4


def test_usage_error_is_not_a_crash(monkeypatch):
    assert invoke(monkeypatch, "collect") == 2


@pytest.mark.parametrize(
    "command", ["collect", "pretrain", "run", "eval-offline", "model-error", "skill-quality", "plot"]
)
def test_help(monkeypatch, command):
    assert invoke(monkeypatch, command, "--help") == 0


def test_skill_quality_outside_locomotion_exits_with_status_6(monkeypatch, tmp_path):
    config = tmp_path / "volcano.ini"
    config.write_text("[run]\nenvironment = volcano\n")
    args = ["skill-quality", "--config", str(config), "--checkpoint", str(tmp_path / "none.lisp")]
    assert invoke(monkeypatch, *args) == 6
