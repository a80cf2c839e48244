import numpy as np
import pandas as pd
import pytest

from app.agent import make_agent
from app.buffers import ReplayBuffer
from app.collect import collect_dataset
from app.database import get_db
from app.errors import DatasetError, PreconditionError
from app.experiments import (
    RunManifest,
    aggregate,
    cmd_collect,
    cmd_eval_offline,
    cmd_model_error,
    cmd_model_error_study,
    cmd_pretrain,
    cmd_run,
    cmd_skill_quality,
    cmd_skill_traces,
    code_hash,
    manifest_path_for,
    resolve_config,
    write_model_errors,
)
from app.minecraft import ITEMS, best_tier
from app.models import Artifact, Run
from app.plots import plot_model_errors


def registry_rows(kind="seed"):
    for db in get_db():
        return db.query(Run).filter(Run.kind == kind).order_by(Run.seed).all(), db.query(Artifact).all()


def artifacts_of(manifest):
    for db in get_db():
        return {a.kind: a.path for a in db.query(Artifact).filter(Artifact.run_id == manifest.run_id)}


def test_resolve_config_applies_algorithm_modules(make_config):
    assert resolve_config(make_config(run={"algorithm": "mpc-action-short"})).planner.horizon == 25
    assert resolve_config(make_config(run={"algorithm": "mpc-action-long"})).planner.repeat == 1
    assert not resolve_config(make_config(run={"algorithm": "lisp-frozen"})).loop.updates_enabled
    assert not resolve_config(make_config(run={"algorithm": "lisp-no-practice"})).skills.use_practice
    assert resolve_config(make_config()) == make_config()


def test_code_hash_is_stable():
    assert len(code_hash()) == 40
    assert code_hash() == code_hash()


def test_cmd_run_writes_every_seed_and_registers_it(make_config, tmp_path):
    config = make_config(run={"seeds": [0, 1]})
    base = cmd_run(config, tmp_path / "runs")

    assert base.name == "lisp-point"
    aggregated = pd.read_csv(base / "aggregate.csv")
    assert len(aggregated) == 12
    assert {"t", "performance_mean", "performance_std", "reward_mean"} <= set(aggregated.columns)

    for seed in (0, 1):
        run_dir = base / f"seed_{seed}"
        manifest = RunManifest.read(run_dir / "manifest.json")
        assert manifest.status == "completed"
        assert manifest.code_hash == code_hash()
        metrics = pd.read_csv(run_dir / "metrics.csv")
        assert metrics["t"].tolist() == list(range(12))
        assert "plan_seconds" not in metrics.columns
        assert (run_dir / "checkpoint.lisp").exists()
        assert len(pd.read_csv(run_dir / "run_log.csv")) == 12

    runs, artifacts = registry_rows()
    assert [(r.seed, r.status) for r in runs] == [(0, "completed"), (1, "completed")]
    assert len(artifacts) == 2 * 5 + 1

    experiment = RunManifest.read(base / "manifest.json")
    assert experiment.kind == "experiment" and experiment.seed is None
    assert experiment.paths == {"aggregate": str(base / "aggregate.csv")}
    assert experiment.runs == [r.id for r in runs]
    assert artifacts_of(experiment) == experiment.paths
    assert [a.path for a in artifacts].count(str(base / "aggregate.csv")) == 1


def test_reruns_are_bit_identical(make_config, tmp_path):
    config = make_config()
    first = cmd_run(config, tmp_path / "a") / "seed_0"
    second = cmd_run(config, tmp_path / "b") / "seed_0"
    for name in ("metrics.csv", "run_log.csv", "checkpoint.lisp"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_rerun_reuses_the_registry_row(make_config, tmp_path):
    config = make_config()
    cmd_run(config, tmp_path / "runs")
    cmd_run(config, tmp_path / "runs")
    runs, artifacts = registry_rows()
    assert len(runs) == 1
    assert len(artifacts) == 5


def test_failed_run_is_recorded(make_config, tmp_path):
    broken = tmp_path / "broken.lrbf"
    broken.write_bytes(b"junk")
    config = make_config(run={"dataset": str(broken)})
    with pytest.raises(DatasetError):
        cmd_run(config, tmp_path / "runs")

    manifest = RunManifest.read(tmp_path / "runs" / "lisp-point" / "seed_0" / "manifest.json")
    assert manifest.status == "failed"
    assert "header" in manifest.detail
    runs, _ = registry_rows()
    assert [r.status for r in runs] == ["failed"]


def test_frozen_run_completes(make_config, tmp_path):
    base = cmd_run(make_config(run={"algorithm": "lisp-frozen"}), tmp_path / "runs")
    manifest = RunManifest.read(base / "seed_0" / "manifest.json")
    assert manifest.status == "completed"
    assert manifest.config["loop"]["updates_enabled"] is False


def test_aggregate_truncates_to_shortest(tmp_path):
    long, short = tmp_path / "long.csv", tmp_path / "short.csv"
    pd.DataFrame({"t": range(4), "reward": [1.0, 2.0, 3.0, 4.0], "performance": [0.0] * 4}).to_csv(long, index=False)
    pd.DataFrame({"t": range(3), "reward": [3.0, 2.0, 1.0], "performance": [1.0] * 3}).to_csv(short, index=False)
    table = aggregate([long, short])
    assert table["reward_mean"].tolist() == [2.0, 2.0, 2.0]
    assert table["performance_std"].tolist() == [0.5, 0.5, 0.5]


def test_collect_zero_budget_writes_a_valid_file(make_config, tmp_path):
    path = cmd_collect(make_config(), 0, 0, tmp_path / "data" / "empty.lrbf")
    loaded = ReplayBuffer.load(path)
    assert len(loaded) == 0 and loaded.state_dim == 2


def test_collection_is_reproducible(make_config, tmp_path):
    config = make_config(run={"environment": "locomotion"})
    a = cmd_collect(config, 40, 3, tmp_path / "a.lrbf")
    b = cmd_collect(config, 40, 3, tmp_path / "b.lrbf")
    assert a.read_bytes() == b.read_bytes()
    assert len(ReplayBuffer.load(a)) == 40


def test_minecraft_demonstrations_craft_tools(make_config):
    config = make_config(run={"environment": "minecraft"}, loop={"collect_episode_length": 400})
    dataset = collect_dataset(config, 300, seed=0)
    assert len(dataset) == 300
    rewards = dataset.all()["rewards"].numpy()
    assert (rewards > 0).any()
    inventories = dataset.all()["next_states"].numpy()[:, -len(ITEMS):]
    assert best_tier(inventories) >= 1


def test_pretrain_then_evaluate_offline(make_config, tmp_path):
    config = make_config(
        run={"environment": "locomotion", "pretrain_iterations": 2, "tasks": [1.0, -0.5], "eval_steps": 4}
    )
    dataset = cmd_collect(config, 60, 0, tmp_path / "loco.lrbf")
    checkpoint = cmd_pretrain(config, dataset, 0, tmp_path / "ckpt" / "lisp.lisp")
    assert checkpoint.exists()

    table = cmd_eval_offline(config, checkpoint, tmp_path / "eval.csv")
    assert table["target_velocity"].tolist() == [1.0, -0.5]
    assert pd.read_csv(tmp_path / "eval.csv").columns.tolist() == [
        "target_velocity", "performance_mean", "performance_std", "disagreement_exceedance", "seeds",
    ]

    for output, kind, key in [
        (dataset, "dataset", "dataset"),
        (checkpoint, "pretrain", "checkpoint"),
        (tmp_path / "eval.csv", "eval-offline", "table"),
    ]:
        manifest = RunManifest.read(manifest_path_for(output))
        assert manifest.kind == kind and manifest.status == "completed"
        assert manifest.paths == {key: str(output)}
        assert artifacts_of(manifest) == manifest.paths
    assert RunManifest.read(tmp_path / "ckpt" / "lisp.manifest.json").seed == 0


def test_model_error_study(make_config, tmp_path):
    config = make_config(run={"pretrain_iterations": 1})
    dataset = cmd_collect(config, 80, 0, tmp_path / "point.lrbf")
    checkpoint = cmd_pretrain(config, dataset, 0, tmp_path / "lisp.lisp")

    skill_errors, uniform_errors = cmd_model_error_study(config, checkpoint, dataset, seed=0)
    assert skill_errors.shape == (32,) and uniform_errors.shape == (32,)
    assert np.all(skill_errors >= 0) and np.all(np.isfinite(uniform_errors))

    path = write_model_errors(tmp_path / "out" / "model_errors.csv", skill_errors, uniform_errors)
    table = pd.read_csv(path)
    assert table["source"].value_counts().to_dict() == {"skill": 32, "uniform": 32}
    assert plot_model_errors(path, tmp_path / "out" / "errors.png").stat().st_size > 0


def test_model_error_command_records_its_outputs(make_config, tmp_path):
    config = make_config(run={"pretrain_iterations": 1})
    dataset = cmd_collect(config, 80, 0, tmp_path / "point.lrbf")
    checkpoint = cmd_pretrain(config, dataset, 0, tmp_path / "lisp.lisp")

    path = cmd_model_error(config, checkpoint, dataset, 0, tmp_path / "study" / "errors.csv")
    manifest = RunManifest.read(tmp_path / "study" / "errors.manifest.json")
    assert manifest.kind == "model-error"
    assert manifest.paths == {"errors": str(path), "histogram": str(path.with_suffix(".png"))}
    assert artifacts_of(manifest) == manifest.paths
    assert path.with_suffix(".png").exists()

    # a rerun reclaims the same files instead of adding rows
    cmd_model_error(config, checkpoint, dataset, 0, path)
    runs, artifacts = registry_rows("model-error")
    assert len(runs) == 1
    assert sum(a.run_id == manifest.run_id for a in artifacts) == 2


def test_skill_quality_of_a_locomotion_checkpoint(make_config, tmp_path):
    config = make_config(run={"environment": "locomotion"})
    checkpoint = tmp_path / "loco.lisp"
    make_agent(config, 4, 2).save(checkpoint)
    score = cmd_skill_quality(config, checkpoint, seed=0, episodes=2, length=5)
    assert np.isfinite(score) and score >= 0.0

    with pytest.raises(PreconditionError):
        cmd_skill_quality(make_config(), checkpoint, seed=0)


def test_skill_traces_plot(make_config, tmp_path):
    config = make_config()
    checkpoint = tmp_path / "lisp.lisp"
    make_agent(config, 2, 2).save(checkpoint)
    out = cmd_skill_traces(config, checkpoint, seed=0, out=tmp_path / "traces.png", count=4, length=10)
    assert out.exists()
