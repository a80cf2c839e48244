# main.py - command line entry point
import logging
import sys
from pathlib import Path
from typing import List, Optional

import click
import typer
from rich.logging import RichHandler

from app.config import AgentConfig, load_config
from app.errors import LispException
from app.experiments import (
    cmd_collect,
    cmd_eval_offline,
    cmd_model_error,
    cmd_pretrain,
    cmd_run,
    cmd_skill_quality,
    cmd_skill_traces,
)
from app.plots import cmd_plot
from app.settings import get_settings

logger = logging.getLogger("lisp")

app = typer.Typer(
    name="lisp",
    help="Lifelong skill planning: offline pretraining and reset-free online runs.",
    no_args_is_help=True,
    add_completion=False,
)

ConfigOption = typer.Option(None, "--config", help="Experiment config file (key = value sections)")
SeedOption = typer.Option(None, "--seed", help="Seed; replaces the configured seed list")
AlgorithmOption = typer.Option(None, "--algorithm", help="Algorithm tag")


@app.callback()
def setup() -> None:
    settings = get_settings()
    logging.basicConfig(
        level=settings.log_level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True)],
    )


def _config(path: Optional[Path], seed: Optional[int] = None, algorithm: Optional[str] = None) -> AgentConfig:
    config = load_config(path)
    overrides = {}
    if seed is not None:
        overrides["seeds"] = [seed]
    if algorithm is not None:
        overrides["algorithm"] = algorithm
    return config.update("run", **overrides) if overrides else config


@app.command()
def collect(
    config: Optional[Path] = ConfigOption,
    seed: int = typer.Option(0, "--seed"),
    budget: int = typer.Option(..., "--budget", min=0, help="Number of transitions to write"),
    out: Path = typer.Option(..., "--out", help="Replay buffer file"),
):
    """Collect an offline dataset."""
    path = cmd_collect(_config(config), budget, seed, out)
    logger.info(f"Dataset written to {path}")


@app.command()
def pretrain(
    config: Optional[Path] = ConfigOption,
    dataset: Path = typer.Option(..., "--dataset", help="Replay buffer file"),
    seed: int = typer.Option(0, "--seed"),
    algorithm: Optional[str] = AlgorithmOption,
    out: Path = typer.Option(..., "--out", help="Checkpoint file"),
):
    """Offline pretraining into a checkpoint."""
    path = cmd_pretrain(_config(config, algorithm=algorithm), dataset, seed, out)
    logger.info(f"Checkpoint written to {path}")


@app.command()
def run(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    algorithm: Optional[str] = AlgorithmOption,
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory; defaults to [run] out"),
):
    """Pretrain (if a dataset is configured) and run the online loop for every seed."""
    resolved = _config(config, seed, algorithm)
    path = cmd_run(resolved, out or resolved.run.out)
    logger.info(f"Run outputs in {path}")


@app.command("eval-offline")
def eval_offline(
    config: Optional[Path] = ConfigOption,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    seed: Optional[int] = SeedOption,
    algorithm: Optional[str] = AlgorithmOption,
    out: Path = typer.Option(Path("eval_offline.csv"), "--out", help="Result table"),
):
    """Evaluate a checkpoint on every configured task without gradient updates."""
    table = cmd_eval_offline(_config(config, seed, algorithm), checkpoint, out)
    logger.info(f"Evaluated {len(table)} tasks, table in {out}")


@app.command("model-error")
def model_error(
    config: Optional[Path] = ConfigOption,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    dataset: Path = typer.Option(..., "--dataset"),
    seed: int = typer.Option(0, "--seed"),
    probes: Optional[int] = typer.Option(None, "--probes", min=1),
    out: Path = typer.Option(Path("model_errors.csv"), "--out"),
):
    """One-step model error under skill-policy and uniform actions."""
    path = cmd_model_error(_config(config), checkpoint, dataset, seed, out, probes)
    logger.info(f"Model errors written to {path}")


@app.command("skill-quality")
def skill_quality(
    config: Optional[Path] = ConfigOption,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    seed: int = typer.Option(0, "--seed"),
    episodes: int = typer.Option(5, "--episodes", min=1),
    length: int = typer.Option(200, "--length", min=1, help="Steps per episode"),
):
    """Average body height under random skills of a locomotion checkpoint."""
    score = cmd_skill_quality(_config(config), checkpoint, seed, episodes, length)
    logger.info(f"Skill quality of {checkpoint}: {score:.4f}")


@app.command()
def plot(
    run_dirs: List[Path] = typer.Argument(None, help="Experiment directories"),
    out: Optional[Path] = typer.Option(None, "--out", help="Image directory; defaults to each run directory"),
    config: Optional[Path] = ConfigOption,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Also plot skill traces of this checkpoint"),
    seed: int = typer.Option(0, "--seed"),
):
    """Plots for finished runs."""
    written = cmd_plot(run_dirs or [], out)
    if checkpoint is not None:
        target = (out or checkpoint.parent) / "skill_traces.png"
        target.parent.mkdir(parents=True, exist_ok=True)
        written.append(cmd_skill_traces(_config(config), checkpoint, seed, target))
    logger.info(f"{len(written)} plots written")


def main() -> None:
    try:
        app(standalone_mode=False)
    except LispException as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        sys.exit(e.status_code)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)


if __name__ == "__main__":
    main()
