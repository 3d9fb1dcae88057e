import json

import pytest

from varlab.cli import main
from varlab.config import ConfigError, defaults, dump_config, parse_config, train_config, validate_config


def test_empty_config_is_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    assert validate_config(p) == defaults()
    assert validate_config(None) == defaults()


def test_dump_round_trips():
    cfg = defaults()
    cfg["train"]["converge_kl"] = 1e-5
    cfg["experiment"]["batch_sizes"] = [1, 32]
    assert parse_config(dump_config(cfg)) == cfg


def test_default_temperature_echoed():
    text = dump_config(parse_config("[train]\nsteps = 10\n"))
    assert "temperature = 1.0" in text
    assert "batch_size = 8" in text
    assert "steps = 10" in text


def test_zero_batch_size_names_field():
    with pytest.raises(ConfigError) as info:
        parse_config("[train]\nbatch_size = 0\n")
    assert info.value.errors == ["train.batch_size: must be >= 1 (got '0')"]


def test_collects_every_error():
    with pytest.raises(ConfigError) as info:
        parse_config("[train]\nlr = -1\noptimizer = sgd\nbogus = 1\n[nope]\nx = 1\n")
    errs = info.value.errors
    assert len(errs) == 4
    assert any(e.startswith("train.lr:") for e in errs)
    assert any(e.startswith("train.optimizer:") for e in errs)
    assert "train.bogus: unknown field" in errs
    assert "nope: unknown section" in errs


def test_missing_file_reference(tmp_path):
    with pytest.raises(ConfigError, match="instance.dataset: file not found"):
        parse_config(f"[instance]\ndataset = {tmp_path / 'missing.csv'}\n")


def test_train_config_mapping():
    cfg = parse_config("[train]\nloss_kind = rlol\nclip_epsilon = 0.1\n")
    tc = train_config(cfg, seed=9)
    assert tc.loss_kind == "rlol" and tc.clip_epsilon == 0.1 and tc.seed == 9


def test_unknown_flag_exits_1(capsys):
    assert main(["oracle", "--frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_unknown_command_exits_1(capsys):
    assert main(["nonsense"]) == 1


def test_bad_config_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nbatch_size = 0\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "train.batch_size" in capsys.readouterr().err


def test_missing_config_exits_1(tmp_path):
    assert main(["oracle", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 1


def test_oracle_command(tmp_path):
    cfg = tmp_path / "inst.ini"
    cfg.write_text("[instance]\nn_prompts = 2\nn_responses = 3\n")
    assert main(["oracle", "-c", str(cfg), "--out", str(tmp_path), "-q"]) == 0
    doc = json.loads((tmp_path / "oracle" / "oracle.json").read_text())
    assert doc["shape"] == [2, 3]
    assert {"partition", "optimal_policy", "J_optimal"} <= set(doc)
    assert (tmp_path / "oracle" / "config.ini").read_text() == dump_config(validate_config(cfg))


def test_train_command(tmp_path, capsys):
    cfg = tmp_path / "t.ini"
    cfg.write_text("[train]\nloss_kind = var-exact\nsampling = enumerate\nsteps = 300\n")
    assert main(["train", "-c", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "train" / "policy.json").exists()
    assert (tmp_path / "train" / "run.records").exists()
    assert "var-exact" in capsys.readouterr().out


def test_train_dpo_writes_preferences(tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text("[train]\nloss_kind = dpo\nsteps = 20\n[instance]\nn_preferences = 30\n")
    assert main(["train", "-c", str(cfg), "--out", str(tmp_path), "-q"]) == 0
    assert len((tmp_path / "train" / "preferences.csv").read_text().splitlines()) == 31


def test_train_abort_exits_2(tmp_path):
    cfg = tmp_path / "t.ini"
    cfg.write_text("[train]\nloss_kind = wsft-custom\noptimizer = gd\nlr = 1e307\nsteps = 50\n"
                   "sampling = enumerate\n")
    assert main(["train", "-c", str(cfg), "--out", str(tmp_path), "-q"]) == 2
    assert (tmp_path / "train" / "run.records").exists()


def test_demo_clip_exit_codes(tmp_path):
    assert main(["demo-clip", "--out", str(tmp_path), "-q"]) == 0
    assert (tmp_path / "demo-clip" / "summary.csv").exists()
    cfg = tmp_path / "short.ini"
    cfg.write_text("[clip]\nsteps = 5\n")
    assert main(["demo-clip", "-c", str(cfg), "--out", str(tmp_path / "short"), "-q"]) == 2


def test_unwritable_out_exits_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["oracle", "--out", str(blocker), "-q"]) == 1


def test_seed_override(tmp_path):
    assert main(["oracle", "--seed", "5", "--out", str(tmp_path), "-q"]) == 0
    assert "seed = 5" in (tmp_path / "oracle" / "config.ini").read_text()
    assert main(["oracle", "--seed", "-1", "--out", str(tmp_path), "-q"]) == 1
