import math

import pytest
from hypothesis import given, settings, strategies as st

from hiertsc import cli
from hiertsc.cli import (ConfigError, ExperimentConfig, Scenario, cmd_ablate, cmd_baseline, cmd_evaluate, cmd_train,
                         cmd_generate_scenario, config_from_text, config_to_text, load_scenario, main,
                         make_scenario, read_csv, scenario_from_text, scenario_to_text)
from hiertsc.training import TrainConfig, Trainer


def short_scenario(tmp_path, horizon=150):
    text = scenario_to_text(Scenario(horizon=horizon))
    path = tmp_path / "short.ini"
    path.write_text(text)
    return path


def test_generate_grid4x4(tmp_path):
    path = cmd_generate_scenario("grid4x4", "multimodal_gaussian", 7, tmp_path / "g.ini")
    sc = load_scenario(path)
    assert (sc.min_rate, sc.max_rate) == (0.018, 0.038)
    assert (sc.rows, sc.cols, sc.region_rows, sc.region_cols) == (4, 4, 2, 2)


def test_generate_grid2x2_single_region(tmp_path):
    from hiertsc.cli import build_network
    sc = load_scenario(cmd_generate_scenario("grid2x2", "constant", 1, tmp_path / "g.ini"))
    assert build_network(sc).regions.count == 1


def test_generate_is_byte_identical(tmp_path):
    a = cmd_generate_scenario("grid5x5", "peak_transition", 3, tmp_path / "a.ini").read_bytes()
    b = cmd_generate_scenario("grid5x5", "peak_transition", 3, tmp_path / "b.ini").read_bytes()
    assert a == b


def test_generate_rejects_unknown():
    with pytest.raises(ConfigError):
        make_scenario("grid9x9", "constant", 0)
    with pytest.raises(ConfigError):
        make_scenario("grid4x4", "chaos", 0)


def test_scenario_rejects_unknown_keys_and_versions():
    text = scenario_to_text(Scenario())
    with pytest.raises(ConfigError):
        scenario_from_text(text.replace("[flow]", "[flow]\nsurprise = 1"))
    with pytest.raises(ConfigError):
        scenario_from_text(text.replace("version = 1", "version = 2"))
    with pytest.raises(ConfigError):
        scenario_from_text(text.replace("rows = 2", "rows = two"))


def test_config_round_trip_fixed_point():
    cfg = ExperimentConfig(scenario="s.ini", seeds=(0, 1, 2), out="runs/x", hyper={"lr": 1e-3, "episodes": 7,
                                                                                    "strict_paper_mode": True})
    text = config_to_text(cfg)
    parsed = config_from_text(text)
    assert config_to_text(parsed) == text
    assert config_from_text(config_to_text(parsed)) == parsed
    assert parsed.seeds == (0, 1, 2) and parsed.hyper["lr"] == 1e-3 and parsed.hyper["strict_paper_mode"] is True


def test_config_defaults_and_unknown_keys():
    cfg = config_from_text("")
    assert cfg.seeds == (0,)
    tc = cfg.train_config(Scenario(), 5)
    assert tc.seed == 5 and tc.lr == TrainConfig().lr
    with pytest.raises(ConfigError):
        config_from_text("[hyperparameters]\nwarp = 9\n")
    with pytest.raises(ConfigError):
        config_from_text("[extra]\na = 1\n")
    with pytest.raises(ConfigError):
        config_from_text("[hyperparameters]\nrows = 3\n")        # owned by the scenario file


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=5),
       st.floats(1e-6, 1.0, allow_nan=False), st.integers(0, 500), st.booleans(), st.sampled_from(
           ["full", "no_gac", "no_global_feature", "no_subgoal", "no_meta"]))
def test_property_config_round_trip(seeds, lr, episodes, strict, variant):
    cfg = ExperimentConfig(seeds=tuple(seeds), hyper={"lr": lr, "episodes": episodes,
                                                      "strict_paper_mode": strict, "variant": variant})
    parsed = config_from_text(config_to_text(cfg))
    assert config_to_text(parsed) == config_to_text(cfg)
    assert parsed.hyper["lr"] == lr


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(sorted(cli.SCENARIO_KINDS)), st.sampled_from(
    ["constant", "multimodal_gaussian", "peak_transition", "holiday_rush"]), st.integers(0, 2**31))
def test_property_scenario_round_trip(kind, pattern, seed):
    sc = make_scenario(kind, pattern, seed)
    assert scenario_from_text(scenario_to_text(sc)) == sc


def test_baseline_rows_summary_and_determinism(tmp_path):
    sc = load_scenario(short_scenario(tmp_path, horizon=600))
    rows = cmd_baseline(sc, ["ftc"], [0, 1, 2], tmp_path / "b1.csv")
    cmd_baseline(sc, ["ftc"], [0, 1, 2], tmp_path / "b2.csv")
    assert len(rows) == 3
    table = read_csv(tmp_path / "b1.csv")
    assert len(table) == 4 and table[-1]["seed"] == "mean±std"
    assert (tmp_path / "b1.csv").read_bytes() == (tmp_path / "b2.csv").read_bytes()


def test_evaluate_untrained_checkpoint(tmp_path):
    sc = load_scenario(short_scenario(tmp_path))
    cfg = ExperimentConfig().train_config(sc, 0)
    Trainer(cfg).save(tmp_path / "u.ckpt")
    rows = cmd_evaluate(tmp_path / "u.ckpt", sc, [1, 2], tmp_path / "eval.csv")
    assert len(rows) == 2 and all(math.isfinite(r["ATT"]) and math.isfinite(r["ADT"]) for r in rows)
    assert list(read_csv(tmp_path / "eval.csv")[0]) == list(cli.METRIC_COLUMNS)


def test_evaluate_rejects_mismatched_scenario(tmp_path):
    sc = load_scenario(short_scenario(tmp_path))
    Trainer(ExperimentConfig().train_config(sc, 0)).save(tmp_path / "u.ckpt")
    other = make_scenario("grid4x4", "constant", 0)
    assert main(["evaluate", "--checkpoint", str(tmp_path / "u.ckpt"), "--scenario",
                 str(cmd_generate_scenario("grid4x4", "constant", 0, tmp_path / "g4.ini")),
                 "--out", str(tmp_path / "e.csv")]) == cli.EXIT_CHECKPOINT
    assert other.rows == 4


def test_ablate_emits_variant_columns(tmp_path):
    sc = load_scenario(short_scenario(tmp_path))
    cfg = ExperimentConfig(seeds=(0,), eval_seeds=(5,), hyper={"episodes": 1})
    rows = cmd_ablate(cfg, sc, ["full", "no_meta"], tmp_path / "abl")
    header = list(read_csv(tmp_path / "abl" / "ablation.csv")[0])
    assert header == ["metric", "full", "no_meta"] and len(rows) == 3


def test_main_train_and_exit_codes(tmp_path, monkeypatch):
    scenario = short_scenario(tmp_path)
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["train", "--scenario", str(scenario), "--seed", "1", "--episodes", "1",
                 "--variant", "no_meta", "--out", "run"]) == cli.EXIT_OK
    assert (tmp_path / "root" / "run" / "no_meta_seed1" / "train_log.csv").exists()
    assert main(["train", "--scenario", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
    assert main(["bogus-command"]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(["evaluate", "--checkpoint", str(bad), "--scenario", str(scenario)]) == cli.EXIT_CHECKPOINT


def test_main_generate_and_baseline(tmp_path, capsys):
    out = tmp_path / "g.ini"
    assert main(["generate-scenario", "--kind", "grid2x2", "--flow", "constant", "--seed", "2",
                 "--out", str(out)]) == 0
    assert main(["baseline", "--scenario", str(short_scenario(tmp_path, 300)), "--controller", "maxpressure",
                 "--seed", "0,1", "--out", str(tmp_path / "b.csv")]) == 0
    assert "maxpressure ATT" in capsys.readouterr().out


@pytest.mark.slow
def test_train_then_evaluate_beats_untrained(tmp_path):
    sc = load_scenario(cmd_generate_scenario("grid2x2", "multimodal_gaussian", 0, tmp_path / "g2.ini"))
    cfg = ExperimentConfig(seeds=(0,), hyper={"lr": 3e-3, "episodes": 60, "variant": "no_meta"})
    cmd_train(cfg, sc, tmp_path / "run")
    Trainer(cfg.train_config(sc, 0)).save(tmp_path / "untrained.ckpt")
    seeds = [1000, 1001, 1002]
    trained = cmd_evaluate(tmp_path / "run" / "no_meta_seed0" / "final.ckpt", sc, seeds, tmp_path / "t.csv")
    untrained = cmd_evaluate(tmp_path / "untrained.ckpt", sc, seeds, tmp_path / "u.csv")
    mean = lambda rows: sum(r["ATT"] for r in rows) / len(rows)
    assert mean(trained) < mean(untrained)
