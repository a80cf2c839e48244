import logging

import numpy as np
import pandas as pd
import pytest
import torch

from app.environments import PointMass
from app.errors import MissingColumnError, PreconditionError
from app.plots import cmd_plot, plot_performance, read_csv, segment_boundaries, skill_traces, truncate
from app.schedule import MdpSchedule


def write_metrics(path, length, segments=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "t": range(length),
        "reward": np.linspace(-1.0, 0.0, length),
        "performance": np.linspace(0.0, 1.0, length),
        "segment": segments if segments is not None else [0] * length,
    })
    frame.to_csv(path, index=False)
    return path


def test_single_run_plot(tmp_path):
    csv = write_metrics(tmp_path / "metrics.csv", 20)
    out = plot_performance([csv], tmp_path / "perf.png", title="one seed")
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_missing_column_is_reported(tmp_path):
    csv = tmp_path / "metrics.csv"
    pd.DataFrame({"t": [0, 1], "reward": [0.0, 1.0]}).to_csv(csv, index=False)
    with pytest.raises(MissingColumnError) as e:
        read_csv(csv, ["t", "performance"])
    assert e.value.column == "performance"
    assert e.value.status_code == 5


def test_nothing_to_plot(tmp_path):
    with pytest.raises(PreconditionError):
        plot_performance([], tmp_path / "perf.png")


def test_truncation_warns(caplog):
    frames = [pd.DataFrame({"t": range(5)}), pd.DataFrame({"t": range(3)})]
    with caplog.at_level(logging.WARNING, logger="app.plots"):
        truncated = truncate(frames)
    assert [len(f) for f in truncated] == [3, 3]
    assert "truncating to 3" in caplog.text


def test_segment_boundaries():
    frame = pd.DataFrame({"t": range(6), "segment": [0, 0, 1, 1, 1, 2]})
    assert segment_boundaries(frame) == [2, 5]
    assert segment_boundaries(pd.DataFrame({"t": range(3)})) == []


def test_plots_are_reproducible(tmp_path):
    csv = write_metrics(tmp_path / "metrics.csv", 30, segments=[0] * 10 + [1] * 20)
    a = plot_performance([csv], tmp_path / "a.png")
    b = plot_performance([csv], tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()


def test_cmd_plot_walks_experiment_dirs(tmp_path):
    run_dir = tmp_path / "lisp-point"
    write_metrics(run_dir / "seed_0" / "metrics.csv", 10)
    write_metrics(run_dir / "seed_1" / "metrics.csv", 8)
    pd.DataFrame({"source": ["skill", "uniform"], "error": [0.1, 0.4]}).to_csv(run_dir / "model_errors.csv", index=False)

    written = cmd_plot([run_dir], tmp_path / "plots")
    assert [p.name for p in written] == ["lisp-point_performance.png", "lisp-point_model_errors.png"]
    assert all(p.exists() for p in written)


def test_skill_traces_follow_the_true_transition():
    env = PointMass(MdpSchedule.constant(10), seed=0)
    skills = torch.tensor([[1.0, 0.0], [0.0, -1.0]])
    traces = skill_traces(env, lambda s, z, g=None: z, skills, length=5)
    assert list(traces) == ["+1.00, +0.00", "+0.00, -1.00"]
    assert np.allclose(traces["+1.00, +0.00"][-1], [0.5, 0.0])
    assert np.allclose(traces["+0.00, -1.00"][-1], [0.0, -0.5])
    assert env.t == 0
