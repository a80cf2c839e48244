# app/experiments.py - experiment orchestration, run manifests and the run registry
import csv
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field

from app.agent import LispAgent, StepOutput, eval_offline_multitask, lifelong_run, make_agent, offline_pretrain
from app.buffers import ReplayBuffer
from app.collect import collect_dataset
from app.config import AgentConfig, Algorithm
from app.database import get_db, init_db
from app.environments import make_env
from app.errors import PreconditionError
from app.models import Artifact, Run
from app.plots import plot_model_errors, plot_skill_traces, skill_traces
from app.schedule import RunLogWriter
from app.settings import get_settings
from app.skills import skill_height_score, uniform_skills

logger = logging.getLogger(__name__)

CODE_ROOT = Path(__file__).resolve().parent.parent

# Module configuration implied by each algorithm tag, applied on top of the config file
ALGORITHM_OVERRIDES: Dict[str, Dict[str, Dict[str, object]]] = {
    "lisp": {},
    "lisp-no-practice": {"skills": {"use_practice": False}},
    "lisp-frozen": {"loop": {"updates_enabled": False}},
    "mpc-action-long": {"planner": {"horizon": 180, "repeat": 1}},
    "mpc-action-short": {"planner": {"horizon": 25, "repeat": 1}},
    "sac": {},
}


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    algorithm: Algorithm
    environment: str
    schedule: List[float]
    seeds: List[int]
    online_steps: int
    pretrain_iterations: int
    dataset: Optional[str] = None

    @classmethod
    def from_config(cls, config: AgentConfig) -> "ExperimentSpec":
        r = config.run
        return cls(
            algorithm=r.algorithm,
            environment=r.environment,
            schedule=config.env.schedule,
            seeds=r.seeds,
            online_steps=r.online_steps,
            pretrain_iterations=r.pretrain_iterations,
            dataset=r.dataset,
        )


def resolve_config(config: AgentConfig) -> AgentConfig:
    """Apply the algorithm tag's module configuration."""
    for section, values in ALGORITHM_OVERRIDES[config.run.algorithm].items():
        config = config.update(section, **values)
    return config


def code_hash(root: Path = CODE_ROOT) -> str:
    """Git-style content hash over the package sources: blob ids combined into a tree id."""
    lines = []
    for path in sorted([root / "main.py", *(root / "app").glob("*.py")]):
        if not path.exists():
            continue
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        lines.append(f"{blob} {path.relative_to(root).as_posix()}")
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()


ManifestKind = Literal["seed", "experiment", "dataset", "pretrain", "eval-offline", "model-error"]


class RunManifest(BaseModel):
    """Provenance of one seed run or of the files one command wrote."""

    run_id: str
    kind: ManifestKind = "seed"
    algorithm: str
    environment: str
    seed: Optional[int] = None
    config: Dict
    code_hash: str
    paths: Dict[str, str] = Field(default_factory=dict)
    runs: List[str] = Field(default_factory=list)
    status: Literal["running", "completed", "failed"] = "running"
    detail: Optional[str] = None

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(orjson.dumps(self.model_dump(), option=orjson.OPT_INDENT_2))

    @classmethod
    def read(cls, path: Union[str, Path]) -> "RunManifest":
        return cls.model_validate(orjson.loads(Path(path).read_bytes()))


def register_run(manifest: RunManifest, manifest_path: Union[str, Path]) -> None:
    """Upsert the run row and claim its artifact paths."""
    init_db()
    for db in get_db():
        run = db.get(Run, manifest.run_id) or Run(id=manifest.run_id)
        run.algorithm = manifest.algorithm
        run.environment = manifest.environment
        run.kind = manifest.kind
        run.seed = manifest.seed
        run.status = manifest.status
        run.detail = manifest.detail
        run.code_hash = manifest.code_hash
        run.config = orjson.dumps(manifest.config).decode()
        run.manifest_path = str(manifest_path)
        db.add(run)
        db.flush()
        for kind, path in manifest.paths.items():
            artifact = db.query(Artifact).filter(Artifact.path == path).first()
            if artifact is None:
                db.add(Artifact(run_id=manifest.run_id, kind=kind, path=path))
            else:
                artifact.run_id, artifact.kind = manifest.run_id, kind
        db.commit()


def manifest_path_for(output: Union[str, Path]) -> Path:
    """`eval.csv` -> `eval.manifest.json`, next to the output."""
    return Path(output).with_suffix(".manifest.json")


def record_outputs(
    kind: ManifestKind,
    config: AgentConfig,
    paths: Dict[str, Union[str, Path]],
    manifest_path: Union[str, Path],
    seed: Optional[int] = None,
    runs: Sequence[str] = (),
) -> RunManifest:
    """Write the manifest for files a command produced and register them."""
    digest = hashlib.sha256(config.to_json() + str(manifest_path).encode()).hexdigest()[:10]
    manifest = RunManifest(
        run_id=f"{kind}-{config.run.environment}-{digest}",
        kind=kind,
        algorithm=config.run.algorithm,
        environment=config.run.environment,
        seed=seed,
        config=config.model_dump(),
        code_hash=code_hash(),
        paths={k: str(v) for k, v in paths.items()},
        runs=list(runs),
        status="completed",
    )
    manifest.write(manifest_path)
    register_run(manifest, manifest_path)
    logger.debug(f"Recorded {kind} outputs {sorted(manifest.paths)} as {manifest.run_id}")
    return manifest


def experiment_dir(config: AgentConfig, out: Union[str, Path]) -> Path:
    return Path(out) / f"{config.run.algorithm}-{config.run.environment}"


def run_id_for(config: AgentConfig, seed: int) -> str:
    digest = hashlib.sha256(config.to_json()).hexdigest()[:10]
    return f"{config.run.algorithm}-{config.run.environment}-s{seed}-{digest}"


def run_seed(config: AgentConfig, seed: int, out: Union[str, Path]) -> RunManifest:
    """Pretrain (when a dataset is configured) and run the online loop for one seed."""
    run_dir = experiment_dir(config, out) / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "config": run_dir / "config.json",
        "metrics": run_dir / "metrics.csv",
        "timings": run_dir / "timings.csv",
        "run_log": run_dir / "run_log.csv",
        "checkpoint": run_dir / "checkpoint.lisp",
    }
    manifest = RunManifest(
        run_id=run_id_for(config, seed),
        algorithm=config.run.algorithm,
        environment=config.run.environment,
        seed=seed,
        config=config.model_dump(),
        code_hash=code_hash(),
        paths={k: str(v) for k, v in paths.items()},
    )
    manifest_path = run_dir / "manifest.json"
    manifest.write(manifest_path)
    paths["config"].write_bytes(config.to_json())

    try:
        env = make_env(config, seed)
        agent = make_agent(config, env.state_dim, env.action_dim, seed)
        if config.run.dataset:
            offline_pretrain(agent, ReplayBuffer.load(config.run.dataset))

        columns = ["t", "reward", "performance", "stuck", "segment", *env.metrics(env.state), *agent.metric_columns()]
        with open(paths["metrics"], "w", newline="") as metrics_file, \
                open(paths["timings"], "w", newline="") as timings_file, \
                open(paths["run_log"], "w", newline="") as log_file:
            metrics = csv.DictWriter(metrics_file, fieldnames=columns, extrasaction="ignore")
            metrics.writeheader()
            timings = csv.DictWriter(timings_file, fieldnames=["t", "plan_seconds"], extrasaction="ignore")
            timings.writeheader()
            run_log = RunLogWriter(log_file, env.state_dim, env.action_dim)
            output: Optional[StepOutput] = None
            for output in lifelong_run(env, agent, config.run.online_steps):
                metrics.writerow(output.metrics)
                timings.writerow(output.timing)
                run_log.write(output.record)
            if output is not None:
                logger.info(f"Seed {seed} finished: final performance {output.metrics['performance']:.3f}")
        agent.save(paths["checkpoint"])
        manifest.status = "completed"
    except Exception as e:
        manifest.status = "failed"
        manifest.detail = str(e)
        logger.error(f"Run {manifest.run_id} aborted: {e}", exc_info=True)
        raise
    finally:
        manifest.write(manifest_path)
    return manifest


def _run_seed_worker(config_json: bytes, seed: int, out: str) -> RunManifest:
    torch.set_num_threads(1)
    return run_seed(AgentConfig.model_validate_json(config_json), seed, out)


def aggregate(csv_paths: Sequence[Union[str, Path]], columns: Sequence[str] = ("reward", "performance")) -> pd.DataFrame:
    """Per-timestep mean and std across seeds, truncated to the shortest run."""
    frames = [pd.read_csv(p) for p in csv_paths]
    length = min(len(f) for f in frames)
    if any(len(f) != length for f in frames):
        logger.warning(f"Seeds have different lengths; truncating to {length} steps")
    result = pd.DataFrame({"t": frames[0]["t"].iloc[:length].to_numpy()})
    for column in columns:
        stacked = np.stack([f[column].iloc[:length].to_numpy(dtype=np.float64) for f in frames])
        result[f"{column}_mean"] = stacked.mean(0)
        result[f"{column}_std"] = stacked.std(0)
    return result


def cmd_run(config: AgentConfig, out: Union[str, Path]) -> Path:
    """Every configured seed, then the aggregate CSV. Seeds run in up to LISP_THREADS processes."""
    config = resolve_config(config)
    spec = ExperimentSpec.from_config(config)
    base = experiment_dir(config, out)
    base.mkdir(parents=True, exist_ok=True)
    workers = min(get_settings().threads, len(spec.seeds))
    logger.info(f"Running {spec.algorithm} on {spec.environment} for seeds {spec.seeds} with {workers} workers")

    manifests: List[RunManifest] = []
    failure: Optional[BaseException] = None
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_seed_worker, config.model_dump_json().encode(), s, str(out)) for s in spec.seeds]
            for seed, future in zip(spec.seeds, futures):
                try:
                    manifests.append(future.result())
                except Exception as e:
                    failure = failure or e
                    manifests.append(RunManifest.read(base / f"seed_{seed}" / "manifest.json"))
    else:
        for seed in spec.seeds:
            try:
                manifests.append(run_seed(config, seed, out))
            except Exception as e:
                failure = e
                manifests.append(RunManifest.read(base / f"seed_{seed}" / "manifest.json"))
                break

    for manifest in manifests:
        register_run(manifest, base / f"seed_{manifest.seed}" / "manifest.json")
    if failure is not None:
        raise failure

    metrics = [m.paths["metrics"] for m in manifests]
    if len(metrics) > 1:
        aggregate(metrics).to_csv(base / "aggregate.csv", index=False)
        record_outputs(
            "experiment", config, {"aggregate": base / "aggregate.csv"}, base / "manifest.json",
            runs=[m.run_id for m in manifests],
        )
    return base


def cmd_collect(config: AgentConfig, budget: int, seed: int, out: Union[str, Path]) -> Path:
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    collect_dataset(config, budget, seed).save(path)
    record_outputs("dataset", config, {"dataset": path}, manifest_path_for(path), seed)
    return path


def cmd_pretrain(config: AgentConfig, dataset: Union[str, Path], seed: int, out: Union[str, Path]) -> Path:
    """Offline pretraining from a dataset file into a checkpoint."""
    config = resolve_config(config)
    env = make_env(config, seed, lifetime=1)
    agent = make_agent(config, env.state_dim, env.action_dim, seed)
    offline_pretrain(agent, ReplayBuffer.load(dataset))
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    agent.save(path)
    record_outputs("pretrain", config, {"checkpoint": path}, manifest_path_for(path), seed)
    return path


def cmd_eval_offline(config: AgentConfig, checkpoint: Union[str, Path], out: Union[str, Path]) -> pd.DataFrame:
    config = resolve_config(config)
    results = eval_offline_multitask(checkpoint, config, config.run.tasks, config.run.seeds)
    table = pd.DataFrame(
        [r.model_dump() for r in results],
        columns=["target_velocity", "performance_mean", "performance_std", "disagreement_exceedance", "seeds"],
    )
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    record_outputs("eval-offline", config, {"table": path}, manifest_path_for(path))
    return table


def cmd_model_error_study(
    config: AgentConfig,
    checkpoint: Union[str, Path],
    dataset: Union[str, Path],
    seed: int,
    probes: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-step model error on dataset states under skill-policy actions and under uniform
    actions, measured against the environment's ground-truth transition.
    """
    config = config.update("run", algorithm="lisp")
    probes = probes or config.run.model_error_probes
    env = make_env(config, seed, lifetime=1)
    agent = make_agent(config, env.state_dim, env.action_dim, seed)
    if not isinstance(agent, LispAgent):
        raise PreconditionError("The model error study needs a skill policy")
    agent.load(checkpoint)

    data = ReplayBuffer.load(dataset)
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    states = data.sample_states(probes, rng)

    with torch.no_grad():
        skill_actions = agent.bundle.act_fn()(states, uniform_skills(probes, config.skill_dim, generator), generator)
    uniform_actions = torch.as_tensor(rng.uniform(-1.0, 1.0, (probes, env.action_dim)), dtype=torch.float32)

    def errors(actions: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            predicted = agent.model.mean_prediction(states, actions).numpy().astype(np.float64)
        true = np.stack([
            env.transition(s, a) for s, a in zip(states.numpy().astype(np.float64), actions.numpy().astype(np.float64))
        ])
        return np.linalg.norm(predicted - true, axis=-1)

    skill_errors, uniform_errors = errors(skill_actions), errors(uniform_actions)
    logger.info(
        f"Model error p99: skill actions {np.quantile(skill_errors, 0.99):.4f}, "
        f"uniform actions {np.quantile(uniform_errors, 0.99):.4f}"
    )
    return skill_errors, uniform_errors


def write_model_errors(path: Union[str, Path], skill_errors: np.ndarray, uniform_errors: np.ndarray) -> Path:
    table = pd.concat([
        pd.DataFrame({"source": "skill", "error": skill_errors}),
        pd.DataFrame({"source": "uniform", "error": uniform_errors}),
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    return path


def cmd_model_error(
    config: AgentConfig,
    checkpoint: Union[str, Path],
    dataset: Union[str, Path],
    seed: int,
    out: Union[str, Path],
    probes: Optional[int] = None,
) -> Path:
    """The model error study as a CSV table plus its histogram next to it."""
    skill_errors, uniform_errors = cmd_model_error_study(config, checkpoint, dataset, seed, probes)
    path = write_model_errors(out, skill_errors, uniform_errors)
    figure = plot_model_errors(path, path.with_suffix(".png"))
    record_outputs("model-error", config, {"errors": path, "histogram": figure}, manifest_path_for(path), seed)
    return path


def cmd_skill_traces(
    config: AgentConfig, checkpoint: Union[str, Path], seed: int, out: Union[str, Path], count: int = 8, length: int = 100
) -> Path:
    """x-y traces of `count` skills spread around the unit circle of the first two latent dims."""
    config = config.update("run", algorithm="lisp")
    env = make_env(config, seed, lifetime=1)
    agent = make_agent(config, env.state_dim, env.action_dim, seed)
    if not isinstance(agent, LispAgent):
        raise PreconditionError("Skill traces need a skill policy")
    agent.load(checkpoint)
    angles = torch.arange(count, dtype=torch.float32) * (2 * np.pi / count)
    skills = torch.zeros(count, config.skill_dim)
    skills[:, 0] = torch.cos(angles)
    if config.skill_dim > 1:
        skills[:, 1] = torch.sin(angles)
    generator = torch.Generator().manual_seed(seed)
    traces = skill_traces(env, agent.bundle.act_fn(), skills, length, generator)
    return plot_skill_traces(traces, out)


def cmd_skill_quality(
    config: AgentConfig, checkpoint: Union[str, Path], seed: int, episodes: int = 5, length: int = 200
) -> float:
    """Average body height under uniformly drawn skills of a locomotion checkpoint."""
    if config.run.environment != "locomotion":
        raise PreconditionError(f"Skill quality is defined for locomotion, not {config.run.environment}")
    config = config.update("run", algorithm="lisp")
    env = make_env(config, seed, lifetime=1)
    agent = make_agent(config, env.state_dim, env.action_dim, seed)
    if not isinstance(agent, LispAgent):
        raise PreconditionError("Skill quality needs a skill policy")
    agent.load(checkpoint)
    return skill_height_score(agent.bundle, config, seed, episodes, length)
