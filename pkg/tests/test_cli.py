import json
import os

import numpy as np
import pytest

from gradrl.cli import (
    EXIT_CONFIG,
    EXIT_NONCONVERGED,
    EXIT_OK,
    ConfigError,
    main,
    parse_config,
)


class TestParseConfig:
    def test_defaults_materialized(self):
        cfg = parse_config(command="solve-matrix")
        assert cfg["oracle"]["clip_ratio"] == 0.2
        assert cfg["engine"]["epochs"] == 30
        assert cfg["budget"]["norm"] == "linf"
        assert cfg["eval"]["alpha_grid"] == [0.0, 0.05, 0.1, 0.15, 0.2]
        assert cfg["seeds"] == [0, 1, 2, 3, 4]

    def test_unknown_key_rejected_with_path(self):
        with pytest.raises(ConfigError, match="oracle.learning_rte"):
            parse_config(overrides=["oracle.learning_rte=0.1"],
                         command="solve-matrix")

    def test_negative_epsilon_rejected(self):
        with pytest.raises(ConfigError, match="budget.epsilon"):
            parse_config(overrides=["budget.epsilon=-0.5"], command="solve-matrix")

    def test_epsilon_bar_above_two_epsilon_accepted_with_warning(self, capsys):
        cfg = parse_config(overrides=["budget.epsilon_bar=0.5"],
                           command="solve-matrix")
        assert cfg["budget"]["epsilon_bar"] == 0.5
        assert "degenerates" in capsys.readouterr().err

    def test_flag_overrides_beat_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 3, "oracle": {"iterations": 7}}))
        cfg = parse_config(str(path), overrides=["oracle.iterations=9"],
                           command="solve-matrix", seed=11)
        assert cfg["seed"] == 11
        assert cfg["oracle"]["iterations"] == 9

    def test_command_mismatch_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"command": "eval"}))
        with pytest.raises(ConfigError, match="command"):
            parse_config(str(path), command="attack")

    def test_echoed_config_round_trips(self, tmp_path):
        out = str(tmp_path / "run")
        rc = main(["solve-matrix", "--out", out,
                   "--set", "engine.solver_tol=1e-9"])
        assert rc == EXIT_OK
        echoed = os.path.join(out, "config.json")
        cfg1 = json.load(open(echoed))
        cfg2 = parse_config(echoed)
        assert cfg1 == cfg2

    def test_bad_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            parse_config(str(path), command="eval")


class TestDispatch:
    def test_solve_matrix_rps(self, tmp_path, capsys):
        out = str(tmp_path / "run")
        rc = main(["solve-matrix", "--out", out])
        captured = capsys.readouterr().out
        assert rc == EXIT_OK
        assert "value: " in captured
        solution = json.load(open(os.path.join(out, "solution.json")))
        assert abs(solution["value"]) < 1e-9
        assert np.allclose(solution["sigma_row"], 1.0 / 3.0, atol=1e-8)

    def test_solve_matrix_inline_payoff(self, capsys):
        rc = main(["solve-matrix",
                   "--set", 'env.params={"payoff": [[0, -1], [1, 0]]}'])
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        assert "row strategy: [0.0, 1.0]" in out
        assert "col strategy: [0.0, 1.0]" in out

    def test_train_grad_epoch_limit_nonconverged(self, tmp_path):
        out = str(tmp_path / "run")
        rc = main(["train-grad", "--out", out, "--seed", "0",
                   "--set", 'env.name="balance"',
                   "--set", "engine.epochs=1",
                   "--set", "engine.threshold=-1.0",
                   "--set", "engine.payoff_episodes=2",
                   "--set", "oracle.steps_per_iteration=128",
                   "--set", "oracle.iterations=1",
                   "--set", "oracle.minibatch_size=64"])
        assert rc == EXIT_NONCONVERGED
        assert os.path.exists(os.path.join(out, "exploitability.csv"))

    def test_train_grad_exact_matrix_converges(self, tmp_path):
        out = str(tmp_path / "run")
        rc = main(["train-grad", "--out", out,
                   "--set", 'env.name="matrix"',
                   "--set", "engine.oracle_mode=\"exact\"",
                   "--set", "engine.epochs=8",
                   "--set", "engine.threshold=1e-8"])
        assert rc == EXIT_OK

    def test_eval_missing_checkpoint_is_config_error(self, tmp_path):
        rc = main(["eval", "--out", str(tmp_path / "x"),
                   "--set", 'checkpoint="/nonexistent/agent.ckpt"'])
        assert rc == EXIT_CONFIG

    def test_eval_runs_on_saved_checkpoint(self, tmp_path):
        from gradrl.envs import make_balance_env
        from gradrl.policy import ArchSpec, Policy, save_policy

        env = make_balance_env()
        agent = Policy(ArchSpec(2, 1, head="gaussian"),
                       action_bounds=env.spec.action_bounds,
                       rng=np.random.default_rng(0))
        ckpt = str(tmp_path / "agent.ckpt")
        save_policy(agent, ckpt)
        out = str(tmp_path / "run")
        rc = main(["eval", "--out", out,
                   "--set", 'env.name="balance"',
                   "--set", f'checkpoint="{ckpt}"',
                   "--set", "eval.episodes=3",
                   "--set", "seeds=[0, 1]"])
        assert rc == EXIT_OK
        rows = open(os.path.join(out, "eval.csv")).read().splitlines()
        # natural rows + alpha grid rows, per seed
        assert len(rows) == 1 + 2 + 2 * 5

    def test_unknown_override_is_config_exit(self, tmp_path):
        rc = main(["solve-matrix", "--set", "bogus.key=1"])
        assert rc == EXIT_CONFIG


class TestReproducibility:
    def test_identical_dispatches_byte_identical_csv(self, tmp_path):
        args = ["train-grad",
                "--set", 'env.name="matrix"',
                "--set", 'env.params={"payoff": {"size": 4, "seed": 5}}',
                "--set", "engine.oracle_mode=\"exact\"",
                "--set", "engine.epochs=10",
                "--set", "engine.threshold=1e-8",
                "--seed", "5"]
        outputs = []
        for name in ("run-a", "run-b"):
            out = str(tmp_path / name)
            rc = main(args + ["--out", out])
            assert rc == EXIT_OK
            outputs.append({
                f: open(os.path.join(out, f), "rb").read()
                for f in ("payoff.csv", "exploitability.csv", "config.json")
                if f != "config.json"
            })
        assert outputs[0] == outputs[1]


class TestAttackAndAblateCommands:
    def _checkpoint(self, tmp_path):
        from gradrl.envs import make_balance_env
        from gradrl.policy import ArchSpec, Policy, save_policy

        env = make_balance_env()
        agent = Policy(ArchSpec(2, 1, head="gaussian"),
                       action_bounds=env.spec.action_bounds,
                       rng=np.random.default_rng(0))
        ckpt = str(tmp_path / "agent.ckpt")
        save_policy(agent, ckpt)
        return ckpt

    def test_attack_writes_report_and_attacker_checkpoints(self, tmp_path):
        ckpt = self._checkpoint(tmp_path)
        out = str(tmp_path / "run")
        rc = main(["attack", "--out", out,
                   "--set", 'env.name="balance"',
                   "--set", f'checkpoint="{ckpt}"',
                   "--set", "eval.episodes=2",
                   "--set", "eval.restarts=1",
                   "--set", "seeds=[0]",
                   "--set", "oracle.steps_per_iteration=128",
                   "--set", "oracle.iterations=1",
                   "--set", "oracle.minibatch_size=64"])
        assert rc == EXIT_OK
        assert os.path.exists(os.path.join(out, "attack.csv"))
        attacker = json.load(open(os.path.join(out, "attacker-seed-0.ckpt")))
        assert attacker["kind"] == "paad"
        assert attacker["budget"]["epsilon"] == 0.1

    def test_ablate_runs_grid(self, tmp_path):
        ckpt = self._checkpoint(tmp_path)
        out = str(tmp_path / "run")
        rc = main(["ablate", "--out", out,
                   "--set", 'env.name="balance"',
                   "--set", f'checkpoint="{ckpt}"',
                   "--set", "eval.episodes=2",
                   "--set", "eval.restarts=1",
                   "--set", "seeds=[0]",
                   "--set", "eval.epsilon_bar_grid=[0.02, 0.2]",
                   "--set", "oracle.steps_per_iteration=128",
                   "--set", "oracle.iterations=1",
                   "--set", "oracle.minibatch_size=64"])
        assert rc == EXIT_OK
        rows = open(os.path.join(out, "ablate.csv")).read().splitlines()
        assert len(rows) == 3
