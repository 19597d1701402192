import csv

import pytest

from graspcritic.cli import main
from graspcritic.rl import load_checkpoint, save_checkpoint

TINY = """\
shape_names: [square, hexagon]
train:
  n_envs: 8
  rollout_len: 16
  grasp_angles: 4
  grasps_per_angle: 8
  actor_hidden: [16, 16]
  critic_hidden: [16, 16]
seeds: {train: 3, grasp: 4, eval: 5}
"""


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("GRASPCRITIC_OUT", str(tmp_path / "default_out"))


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


@pytest.fixture
def trained(tmp_path, tiny_config):
    out = tmp_path / "train"
    assert main(["train", "--config", str(tiny_config), "--total-steps", "256", "--out", str(out)]) == 0
    return out / "checkpoint.gcp"


def rows(path):
    with open(path) as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


def test_train_zero_steps_writes_initialization(tmp_path, tiny_config, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(tiny_config), "--total-steps", "0", "--out", str(a)]) == 0
    assert main(["train", "--config", str(tiny_config), "--total-steps", "0", "--out", str(b)]) == 0
    assert (a / "checkpoint.gcp").read_bytes() == (b / "checkpoint.gcp").read_bytes()
    assert len(rows(a / "train_log.csv")) == 1
    _, meta, _ = load_checkpoint(a / "checkpoint.gcp")
    assert meta["progress"]["env_steps"] == 0
    assert "checkpoint:" in capsys.readouterr().out


def test_train_is_deterministic_and_resumable(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["train", "--config", str(tiny_config), "--total-steps", "256", "--out", str(out)]) == 0
    assert (a / "checkpoint.gcp").read_bytes() == (b / "checkpoint.gcp").read_bytes()
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    assert len(rows(a / "train_log.csv")) == 3
    c = tmp_path / "c"
    assert main(["train", "--config", str(tiny_config), "--total-steps", "384", "--out", str(c),
                 "--resume", str(a / "trainer_state.pkl")]) == 0
    assert len(rows(c / "train_log.csv")) == 4


def test_output_root_from_environment(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("GRASPCRITIC_OUT", str(tmp_path / "root"))
    assert main(["train", "--config", str(tiny_config), "--total-steps", "0"]) == 0
    assert (tmp_path / "root" / "train" / "checkpoint.gcp").is_file()


def test_config_errors_exit_2(tmp_path, tiny_config, capsys):
    missing = tmp_path / "nowhere" / "shapes.yaml"
    assert main(["train", "--config", str(tiny_config), "--shapes", str(missing), "--total-steps", "0"]) == 2
    assert str(missing) in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("trials: 5\nbogus_field: 1\n")
    assert main(["train", "--config", str(bad), "--total-steps", "0"]) == 2
    assert "bogus_field" in capsys.readouterr().err
    bad.write_text("- trials\n")
    assert main(["train", "--config", str(bad), "--total-steps", "0"]) == 2
    assert "mapping" in capsys.readouterr().err
    bad.write_text("trials: many\n")
    assert main(["train", "--config", str(bad), "--total-steps", "0"]) == 2
    assert "trials" in capsys.readouterr().err
    bad.write_text("train:\n  n_env: 4\n")
    assert main(["train", "--config", str(bad), "--total-steps", "0"]) == 2
    assert "n_env" in capsys.readouterr().err
    bad.write_text("env:\n  horizon_tau: 10.01\n")
    assert main(["train", "--config", str(bad), "--total-steps", "0"]) == 2
    assert "horizon_tau" in capsys.readouterr().err
    assert not (tmp_path / "default_out").exists()


def test_score_writes_18000_rows(tmp_path, trained, capsys):
    out = tmp_path / "score"
    code = main(["score", "--checkpoint", str(trained), "--shape", "square", "--k", "200", "--base-grid", "90",
                 "--goal-angle", "1.0", "--out", str(out), "--trace", str(tmp_path / "trace.csv")])
    assert code == 0
    table = rows(out / "scored.csv")
    assert table[0] == ["grasp_id", "base_angle", "epsilon", "v_d", "v_s"]
    text = capsys.readouterr().out
    n_stable = int(text.split("(")[1].split()[0])
    assert 100 < n_stable <= 200
    assert len(table) - 1 == n_stable * 90
    for name in ("all", "most_robust", "highest_scoring", "highest_scoring_move_base", "lowest_scoring"):
        assert f"{name}:" in text
    assert (tmp_path / "trace.csv").read_text().startswith("step,")


def test_score_move_base_absorbs_zero_rotation(tmp_path, trained, capsys):
    code = main(["score", "--checkpoint", str(trained), "--shape", "hexagon", "--object-angle", "0.5",
                 "--goal-angle", "0.5", "--k", "20", "--out", str(tmp_path / "s")])
    assert code == 0
    table = rows(tmp_path / "s" / "scored.csv")[1:]
    best = max(table, key=lambda r: float(r[4]))
    # the chosen base leaves a goal rotation no larger than the smallest grid step
    assert abs(float(best[1])) <= 3.2
    assert "highest_scoring_move_base:" in capsys.readouterr().out


def test_score_errors(tmp_path, trained, capsys):
    assert main(["score", "--checkpoint", str(trained), "--shape", "wedge", "--out", str(tmp_path)]) == 2
    agent, meta, h = load_checkpoint(trained)
    meta["env"]["mu_nominal"] = 0.0  # three frictionless contacts never reach force closure
    frictionless = tmp_path / "frictionless.gcp"
    save_checkpoint(frictionless, agent, meta, h)
    assert main(["score", "--checkpoint", str(frictionless), "--shape", "square", "--k", "20",
                 "--out", str(tmp_path)]) == 3
    data = trained.read_bytes()
    broken = tmp_path / "broken.gcp"
    broken.write_bytes(data.replace(b"graspcritic-checkpoint 1", b"graspcritic-checkpoint 7", 1))
    capsys.readouterr()
    assert main(["score", "--checkpoint", str(broken), "--shape", "square", "--out", str(tmp_path)]) == 4
    assert "version" in capsys.readouterr().err
    assert main(["score", "--checkpoint", str(tmp_path / "none.gcp"), "--shape", "square"]) == 2


def eval_args(trained, out):
    return ["eval", "--checkpoint", str(trained), "--strategies", "all", "--trials", "8", "--k", "6",
            "--base-grid", "5", "--corr-pairs", "60", "--out", str(out)]


def test_eval_rows_rerun_and_verify(tmp_path, trained, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(eval_args(trained, a)) == 0
    assert main(eval_args(trained, b)) == 0
    table = rows(a / "eval_report.csv")
    assert len(table) - 1 == 5 * 3  # five strategies for square, hexagon and the aggregate
    for shape in ("square", "hexagon", "all"):
        assert sum(r[0] == shape for r in table[1:]) == 5
    for name in ("eval_report.csv", "correlation.csv"):
        if (a / name).exists():
            assert (a / name).read_bytes() == (b / name).read_bytes()
    capsys.readouterr()
    assert main(eval_args(trained, a) + ["--verify", str(a / "eval_report.csv")]) == 0
    other = eval_args(trained, a)
    other[other.index("--trials") + 1] = "9"
    assert main(other + ["--verify", str(a / "eval_report.csv")]) == 1
    assert "expected" in capsys.readouterr().err


def test_eval_bad_strategy_and_report(tmp_path, trained, capsys):
    args = eval_args(trained, tmp_path / "e")
    args[args.index("--strategies") + 1] = "best_guess"
    assert main(args) == 2
    assert main(eval_args(trained, tmp_path / "e")) == 0
    capsys.readouterr()
    assert main(["report", str(tmp_path / "e" / "eval_report.csv")]) == 0
    out = capsys.readouterr().out
    assert "config_hash=" in out and "highest_scoring_move_base" in out
    assert main(["report", str(tmp_path / "missing.csv")]) == 2
