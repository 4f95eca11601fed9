from pathlib import Path

import pandas as pd
import pytest
import yaml

import sys
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from main import (
    DEFAULTS_PATH, EXIT_OK, EXIT_USER_ERROR, SWEEP_GRID, _sweep_job, build_parser, heatmap_frame,
    load_experiment, main, sweep_configs,
)
from modules.experiment import ExperimentConfig
from utils import ConfigError

ROOT = Path(__file__).resolve().parent.parent
LAYOUTS = ROOT / "data" / "layouts"

TWO_STEP = """\
#####
#.A.#
#.G.#
#1.2#
#####
[dropzones]
A = (1.0,1.0)
"""


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("LMARL_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("LMARL_LOG_LEVEL", raising=False)


def write_tiny_config(tmp_path: Path, **env) -> Path:
    data = {
        "env": {"layout": str(LAYOUTS / "small.txt"), "step_limit": 50, **env},
        "agent": {"algorithm": "ldqn", "exploration": "tbar", "batch_size": 4, "replay_capacity": 500,
                  "replay_warmup": 10, "sync_period": 10},
        "network": {"kind": "tiny", "tiny_hidden": 8},
        "run": {"episodes": 2, "eval_trials": 1, "log_every": 0, "output_dir": str(tmp_path / "runs")},
        "logging": {"console_enabled": False, "log_dir": str(tmp_path / "logs")},
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


class TestExperimentConfig:
    """YAML layering, validation and run digests."""

    def test_empty_dict_takes_defaults(self):
        config = ExperimentConfig.from_dict({})
        assert config == ExperimentConfig()
        assert config.agent.gamma == 0.95
        assert config.env.step_limit == 10000

    def test_root_defaults_file(self):
        config = ExperimentConfig.load(str(DEFAULTS_PATH))
        assert config.to_dict() == ExperimentConfig().to_dict()

    def test_save_and_load(self, tmp_path):
        config = ExperimentConfig().with_overrides(agent__algorithm="hdqn", agent__hysteretic_beta=0.7,
                                                   run__seed=9)
        path = tmp_path / "config.yaml"
        config.save(str(path))
        assert ExperimentConfig.load(str(path)).to_dict() == config.to_dict()

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as excinfo:
            ExperimentConfig.from_dict({"agent": {"leniency": 2.0}})
        assert excinfo.value.field == "agent.leniency"

    def test_unknown_section(self):
        with pytest.raises(ConfigError) as excinfo:
            ExperimentConfig.from_dict({"exchange": {}})
        assert excinfo.value.field == "exchange"

    def test_temperature_exploration_needs_lenient_agents(self):
        with pytest.raises(ConfigError) as excinfo:
            ExperimentConfig.from_dict({"agent": {"algorithm": "hdqn", "exploration": "tbar"}})
        assert excinfo.value.field == "agent.exploration"

    @pytest.mark.parametrize("section", [{"env": {"step_limit": 0}}, {"network": {"kind": "lstm"}},
                                         {"hashing": {"scheme": "md5"}}, {"run": {"episodes": -1}}])
    def test_out_of_range(self, section):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(section)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.load(str(tmp_path / "absent.yaml"))

    def test_environment_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LMARL_OUTPUT_DIR", str(tmp_path / "elsewhere"))
        config = ExperimentConfig.load(str(DEFAULTS_PATH))
        assert config.run.output_dir == str(tmp_path / "elsewhere")

    @pytest.mark.parametrize("preset", sorted((ROOT / "configs").glob("*.yaml")), ids=lambda p: p.stem)
    def test_presets_load(self, preset):
        config = ExperimentConfig.load(str(preset), defaults_path=str(DEFAULTS_PATH))
        assert (ROOT / config.env.layout).exists()

    def test_overrides(self):
        config = ExperimentConfig().with_overrides(agent__xi=0.25, env__noisy=True, run__episodes=None)
        assert config.agent.xi == 0.25
        assert config.env.noisy is True
        assert config.run.episodes == 5000

    def test_digest_ignores_seed_and_output(self):
        base = ExperimentConfig()
        assert base.digest() == base.with_overrides(run__seed=3, run__output_dir="/tmp/x").digest()
        assert base.digest() != base.with_overrides(agent__leniency_k=3.0).digest()


class TestCommandLine:
    """Parser overrides and the train, eval, sweep and oracle commands."""

    def test_parser_overrides(self):
        args = build_parser().parse_args([
            "train", "--config", str(ROOT / "configs" / "desk_ldqn_tds.yaml"), "--algo", "ldqn",
            "--exploration", "tbar", "--xi", "0.5", "--k", "1", "--d", "0.99", "--seed", "4",
        ])
        config = load_experiment(args)
        assert config.agent.xi == 0.5
        assert config.agent.leniency_k == 1.0
        assert config.agent.tds_d == 0.99
        assert config.run.seed == 4
        assert config.network.kind == "tiny"
        assert config.agent.gamma == 0.95

    def test_train_creates_run(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        path = write_tiny_config(tmp_path)
        assert main(["train", "--config", str(path), "--seed", "2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "policy=" in out
        run_dirs = list((tmp_path / "runs").iterdir())
        assert len(run_dirs) == 1
        assert run_dirs[0].name.endswith("-s2")
        assert (run_dirs[0] / "episodes.csv").exists()

    def test_train_missing_layout(self, tmp_path, monkeypatch, caplog):
        monkeypatch.chdir(tmp_path)
        missing = tmp_path / "nowhere.txt"
        path = write_tiny_config(tmp_path, layout=str(missing))
        assert main(["train", "--config", str(path)]) == EXIT_USER_ERROR
        assert str(missing) in caplog.text

    def test_train_missing_config(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == EXIT_USER_ERROR

    def test_eval_dimension_mismatch(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        path = write_tiny_config(tmp_path)
        assert main(["train", "--config", str(path)]) == EXIT_OK
        run_dir = next((tmp_path / "runs").iterdir())
        checkpoints = str(run_dir / "checkpoints")
        assert main(["eval", "--checkpoints", checkpoints, "--trials", "1"]) == EXIT_OK
        assert main(["eval", "--checkpoints", checkpoints,
                     "--layout", str(LAYOUTS / "original.txt")]) == EXIT_USER_ERROR

    def test_oracle_plan_evaluates_optimal(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        layout = tmp_path / "two_step.txt"
        layout.write_text(TWO_STEP)
        plan_dir = tmp_path / "plans" / "checkpoints"
        assert main(["oracle", "bfs", "--layout", str(layout), "--save-checkpoint", str(plan_dir)]) == EXIT_OK
        assert capsys.readouterr().out.strip().splitlines()[-1] == "2"

        assert main(["eval", "--checkpoints", str(plan_dir), "--layout", str(layout), "--trials", "3"]) == EXIT_OK
        lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith(("trial=", "verdict="))]
        assert lines[:3] == [f"trial={i} steps=2 dropzone=A" for i in (1, 2, 3)]
        assert lines[-1].startswith("verdict=optimal")

    def test_oracle_unsolvable(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        layout = tmp_path / "two_step.txt"
        layout.write_text(TWO_STEP)
        assert main(["oracle", "bfs", "--layout", str(layout), "--zone", "B"]) == EXIT_OK
        assert capsys.readouterr().out.strip().splitlines()[-1] == "unsolvable"

    def test_oracle_missing_layout(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(["oracle", "bfs", "--layout", str(tmp_path / "absent.txt")]) == EXIT_USER_ERROR


class TestSweep:
    """The K x d x xi grid, its heatmap and resumption."""

    def test_grid_configs(self, tmp_path):
        base = ExperimentConfig().with_overrides(run__seed=10)
        configs = sweep_configs(base, runs=2, output_dir=str(tmp_path))
        assert len(configs) == 27 * 2
        cells = {(c.agent.leniency_k, c.agent.tds_d, c.agent.xi) for c in configs}
        assert len(cells) == 27
        assert (3.0, 0.9, 0.25) in cells
        assert {c.run.seed for c in configs} == {10, 11}
        assert all(c.run.output_dir == str(tmp_path) for c in configs)

    def test_heatmap(self):
        outcomes = []
        for k in SWEEP_GRID["leniency_k"]:
            for d in SWEEP_GRID["tds_d"]:
                for xi in SWEEP_GRID["xi"]:
                    outcomes.append({"K": k, "d": d, "xi": xi, "seed": 0, "policy": "optimal", "error": None})
                    outcomes.append({"K": k, "d": d, "xi": xi, "seed": 1, "policy": "none", "error": None})
        outcomes[0] = dict(outcomes[0], policy=None, error="NonFiniteError: layer 1")
        frame = heatmap_frame(outcomes)
        assert len(frame) == 27
        first = frame.iloc[0]
        assert (first["K"], first["d"], first["xi"]) == (1.0, 0.9, 0.25)
        assert first["runs"] == 1
        assert first["failures"] == 1
        assert first["optimal_rate"] == 0.0
        assert (frame["optimal_rate"].iloc[1:] == 0.5).all()

    def test_sweep_command(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        path = write_tiny_config(tmp_path, step_limit=10)
        sweep_dir = tmp_path / "sweep"
        argv = ["sweep", "--config", str(path), "--episodes", "1", "--runs", "1", "--sweep-dir", str(sweep_dir)]
        assert main(argv) == EXIT_OK
        heatmap = pd.read_csv(sweep_dir / "heatmap.csv")
        assert len(heatmap) == 27
        assert (heatmap["runs"] == 1).all()
        assert (heatmap["failures"] == 0).all()
        assert len(pd.read_csv(sweep_dir / "runs.csv")) == 27

        assert main(argv + ["--resume"]) == EXIT_OK
        runs = pd.read_csv(sweep_dir / "runs.csv")
        assert runs["resumed"].fillna(False).astype(bool).all()

    def test_resume_reads_existing_summary(self, tmp_path):
        config = ExperimentConfig().with_overrides(run__output_dir=str(tmp_path), run__seed=3)
        run_dir = tmp_path / f"{config.digest()}-s3"
        run_dir.mkdir()
        pd.DataFrame([{"converged_policy": "suboptimal", "spe": 41.5, "csp": None, "delivery_rate": 0.9}]).to_csv(
            run_dir / "summary.csv", index=False)
        outcome = _sweep_job(config.to_dict(), resume=True)
        assert outcome["policy"] == "suboptimal"
        assert outcome["spe"] == 41.5
        assert outcome["csp"] is None
        assert outcome["delivery_rate"] == 0.9
        assert outcome["resumed"] is True
        assert outcome["error"] is None
