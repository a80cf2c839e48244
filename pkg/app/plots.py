# app/plots.py - performance curves, model-error histograms and skill traces
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch

from app.errors import MissingColumnError, PreconditionError
from app.schedule import LifelongEnv

logger = logging.getLogger(__name__)

# no timestamps or version strings in the files
SAVE_OPTIONS = {"metadata": {"Software": None}, "dpi": 100}


def read_csv(path: Union[str, Path], columns: Sequence[str]) -> pd.DataFrame:
    frame = pd.read_csv(path)
    for column in columns:
        if column not in frame.columns:
            raise MissingColumnError(column, str(path))
    return frame


def truncate(frames: List[pd.DataFrame]) -> List[pd.DataFrame]:
    length = min(len(f) for f in frames)
    if any(len(f) != length for f in frames):
        logger.warning(f"Runs have different lengths {[len(f) for f in frames]}; truncating to {length}")
    return [f.iloc[:length] for f in frames]


def segment_boundaries(frame: pd.DataFrame) -> List[int]:
    if "segment" not in frame.columns:
        return []
    segments = frame["segment"].to_numpy()
    return [int(frame["t"].iloc[i]) for i in np.flatnonzero(np.diff(segments)) + 1]


def plot_performance(
    csv_paths: Sequence[Union[str, Path]],
    out: Union[str, Path],
    column: str = "performance",
    title: Optional[str] = None,
) -> Path:
    """One line per run set: the mean across seeds with a std band; task changes as vertical lines."""
    if not csv_paths:
        raise PreconditionError("Nothing to plot")
    frames = truncate([read_csv(p, ["t", column]) for p in csv_paths])
    t = frames[0]["t"].to_numpy()
    values = np.stack([f[column].to_numpy(dtype=np.float64) for f in frames])

    fig, ax = plt.subplots(figsize=(8, 4))
    mean = values.mean(0)
    ax.plot(t, mean, color="tab:blue", linewidth=1.0)
    if len(frames) > 1:
        std = values.std(0)
        ax.fill_between(t, mean - std, mean + std, color="tab:blue", alpha=0.25, linewidth=0)
    for boundary in segment_boundaries(frames[0]):
        ax.axvline(boundary, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("timestep")
    ax.set_ylabel(column)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, **SAVE_OPTIONS)
    plt.close(fig)
    return out


def plot_model_errors(errors_csv: Union[str, Path], out: Union[str, Path], bins: int = 50) -> Path:
    """Overlaid one-step error distributions, one per action source."""
    frame = read_csv(errors_csv, ["source", "error"])
    fig, ax = plt.subplots(figsize=(6, 4))
    edges = np.histogram_bin_edges(frame["error"].to_numpy(), bins=bins)
    for source, group in frame.groupby("source", sort=True):
        ax.hist(group["error"].to_numpy(), bins=edges, alpha=0.5, label=f"{source} actions")
    ax.set_yscale("log")
    ax.set_xlabel("one-step model error")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, **SAVE_OPTIONS)
    plt.close(fig)
    return out


def skill_traces(
    env: LifelongEnv, act_fn, skills: torch.Tensor, length: int, generator: Optional[torch.Generator] = None
) -> Dict[str, np.ndarray]:
    """x-y positions reached by holding each skill fixed, stepping the true transition from the current state."""
    traces = {}
    for skill in skills:
        state = env.state.copy()
        points = [state[:2].copy()]
        for _ in range(length):
            s = torch.as_tensor(state, dtype=torch.float32).unsqueeze(0)
            action = act_fn(s, skill.unsqueeze(0), generator)[0].numpy().astype(np.float64)
            state = env.transition(state, action)
            points.append(state[:2].copy())
        label = ", ".join(f"{v:+.2f}" for v in skill.tolist())
        traces[label] = np.stack(points)
    return traces


def plot_skill_traces(traces: Dict[str, np.ndarray], out: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, points in traces.items():
        ax.plot(points[:, 0], points[:, 1], linewidth=1.0, label=label)
        ax.scatter(points[-1:, 0], points[-1:, 1], s=10)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(fontsize="x-small")
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, **SAVE_OPTIONS)
    plt.close(fig)
    return out


def cmd_plot(run_dirs: Sequence[Union[str, Path]], out: Optional[Union[str, Path]] = None) -> List[Path]:
    """Performance plot for every experiment directory, plus a histogram wherever model errors were written."""
    written = []
    for run_dir in map(Path, run_dirs):
        target = Path(out) if out else run_dir
        target.mkdir(parents=True, exist_ok=True)
        metrics = sorted(run_dir.glob("seed_*/metrics.csv")) or sorted(run_dir.glob("metrics.csv"))
        if metrics:
            written.append(plot_performance(metrics, target / f"{run_dir.name}_performance.png", title=run_dir.name))
        errors = run_dir / "model_errors.csv"
        if errors.exists():
            written.append(plot_model_errors(errors, target / f"{run_dir.name}_model_errors.png"))
    for path in written:
        logger.info(f"Plot written: {path}")
    return written
