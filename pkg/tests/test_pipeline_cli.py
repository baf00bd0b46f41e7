import inspect

import numpy as np
import pytest

from sfeeg import cli
from sfeeg.errors import ParameterError, ParseError, StageError
from sfeeg.metrics import read_report_csv
from sfeeg.model import load_checkpoint
from sfeeg.pipeline import (ABLATIONS, SEED_OFFSETS, PipelineConfig, _adapt_from_checkpoint, load_config,
                            parse_config_text, run_ablations, run_pipeline)

from conftest import tiny_config


@pytest.fixture(scope="module")
def ablations(tmp_path_factory):
    return run_ablations(tiny_config(tmp_path_factory.mktemp("abl")))


# -- config -------------------------------------------------------------------

def test_config_defaults():
    cfg = PipelineConfig()
    assert (cfg.alpha, cfg.tau, cfg.batch_size, cfg.learning_rate, cfg.weight_decay) == (0.5, 0.9, 64, 1e-4, 5e-4)
    assert cfg.stage_seed("tta") == SEED_OFFSETS["tta"]


def test_config_text_round_trip():
    cfg = PipelineConfig(seed=7, tau=0.7, ablation="modelC", noise_sigmas=(0.05,), bn_recalibration=False)
    assert parse_config_text(cfg.to_text()) == cfg


def test_config_parse_errors(tmp_path):
    for text, line in (("seed = 1\nnonsense", 2), ("# c\n\nbogus_key = 3", 3), ("seed = x", 1),
                       ("bn_recalibration = maybe", 1)):
        with pytest.raises(ParseError) as exc:
            parse_config_text(text)
        assert exc.value.line == line
    with pytest.raises(ParameterError):
        parse_config_text("ablation = modelD")
    (tmp_path / "c.txt").write_text("knn-k = 7  # comment\n")
    assert load_config(tmp_path / "c.txt").knn_k == 7


def test_ablation_flags():
    flags = {m: (PipelineConfig(ablation=m).adapts, PipelineConfig(ablation=m).runs_dlar,
                 PipelineConfig(ablation=m).runs_lcl) for m in ABLATIONS}
    assert flags == {"full": (True, True, True), "modelA": (False, False, False),
                     "modelB": (True, True, False), "modelC": (True, False, True)}


# -- pipeline -----------------------------------------------------------------

def test_stage_counters_per_ablation(ablations):
    expected = {"full": (1, 1), "modelA": (0, 0), "modelB": (1, 0), "modelC": (0, 1)}
    for mode, res in ablations.items():
        c = res.counters
        assert (c["dlar"], c["lcl"]) == expected[mode], mode
        assert c["compute"] == c["infer"] == c["evaluate"] == 1
        # pretraining runs once and is shared by the other modes
        assert c["pretrain"] == (1 if mode == "full" else 0)


def test_model_a_checkpoint_identical(ablations):
    a = ablations["modelA"].artifacts
    assert a["adapted"].read_bytes() == a["pretrained"].read_bytes()
    assert ablations["full"].artifacts["adapted"].read_bytes() != a["pretrained"].read_bytes()


def test_artifacts_exist(ablations):
    arts = ablations["full"].artifacts
    for key in ("pretrained", "adapted", "state", "log", "inference", "csv", "text", "subjects"):
        assert arts[key].exists() and arts[key].stat().st_size > 0, key
    out = arts["pretrained"].parent
    assert (out / "config.effective").exists()
    assert read_report_csv(arts["csv"]).accuracy == ablations["full"].report.accuracy
    log = arts["log"].read_text().splitlines()
    assert len(log) == 1 + 2 + 2


def test_same_seed_same_report(tmp_path):
    a = run_pipeline(tiny_config(tmp_path / "a", ablation="modelB"))
    b = run_pipeline(tiny_config(tmp_path / "b", ablation="modelB"))
    assert a.artifacts["csv"].read_bytes() == b.artifacts["csv"].read_bytes()
    assert a.artifacts["adapted"].read_bytes() == b.artifacts["adapted"].read_bytes()


def test_stage_failures_are_tagged(tmp_path):
    cfg = tiny_config(tmp_path, source=str(tmp_path / "missing.sfeeg"), target=str(tmp_path / "missing.sfeeg"))
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg)
    assert exc.value.stage == "load" and str(exc.value).startswith("[load]")
    with pytest.raises(StageError):
        run_pipeline(tiny_config(tmp_path, source="only-source.sfeeg"))


def test_adaptation_interface_has_no_source_parameter():
    params = set(inspect.signature(_adapt_from_checkpoint).parameters)
    assert params == {"ckpt", "target", "config", "stages", "log_lines"}


def test_recalibration_switch(tmp_path):
    on = run_pipeline(tiny_config(tmp_path / "on", epochs_dlar=0, epochs_lcl=0))
    off = run_pipeline(tiny_config(tmp_path / "off", epochs_dlar=0, epochs_lcl=0, bn_recalibration=False))
    p = load_checkpoint(on.artifacts["pretrained"])
    off_net = load_checkpoint(off.artifacts["adapted"])
    assert off_net.flat_params.tobytes() == p.flat_params.tobytes()
    on_net = load_checkpoint(on.artifacts["adapted"])
    bn = on_net.extractor.layers[1]
    assert not np.allclose(bn.running_mean, p.extractor.layers[1].running_mean)


# -- command line -------------------------------------------------------------

def _flags(tmp_path, out="run"):
    return ["--out-dir", str(tmp_path / out), "--synth-subjects", "2", "--synth-trials-per-subject", "2",
            "--synth-seconds-per-trial", "20", "--epochs-pretrain", "2", "--epochs-dlar", "1", "--epochs-lcl", "1"]


def test_cli_end_to_end(tmp_path, capsys):
    assert cli.main(["synth", *_flags(tmp_path, "data")]) == 0
    data = tmp_path / "data"
    assert cli.main(["extract", str(data / "target.sfeeg"), str(tmp_path / "target.csv")]) == 0
    paths = ["--source", str(data / "source.sfeeg"), "--target", str(data / "target.sfeeg")]
    assert cli.main(["pretrain", *_flags(tmp_path), *paths]) == 0
    run = tmp_path / "run"
    assert cli.main(["adapt", "--checkpoint", str(run / "pretrained.ckpt"), *_flags(tmp_path), *paths]) == 0
    assert cli.main(["infer", "--checkpoint", str(run / "adapted.ckpt"), "--state",
                     str(run / "adaptation_state.json"), *_flags(tmp_path), *paths]) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", str(run / "inference.csv"), "--out-dir", str(run)]) == 0
    assert "accuracy:" in capsys.readouterr().out
    assert (run / "report.csv").exists()


def test_cli_pipeline_with_config_file(tmp_path, capsys):
    (tmp_path / "exp.cfg").write_text("tau = 0.5\nablation = modelA\nknn_k = 3\n")
    assert cli.main(["pipeline", "--config", str(tmp_path / "exp.cfg"), "--tau", "0.7", *_flags(tmp_path)]) == 0
    eff = load_config(tmp_path / "run" / "config.effective")
    assert eff.tau == 0.7 and eff.ablation == "modelA" and eff.knn_k == 3
    assert "accuracy:" in capsys.readouterr().out


def test_cli_errors_are_stage_tagged(tmp_path, capsys):
    assert cli.main(["pipeline", "--source", str(tmp_path / "nope.sfeeg"), "--target",
                     str(tmp_path / "nope.sfeeg"), "--out-dir", str(tmp_path / "x")]) == 1
    assert capsys.readouterr().err.startswith("error: [load]")
    assert cli.main(["pretrain", "--out-dir", str(tmp_path / "y")]) == 1
    assert "[pretrain]" in capsys.readouterr().err
    (tmp_path / "bad.cfg").write_text("tau\n")
    assert cli.main(["pipeline", "--config", str(tmp_path / "bad.cfg")]) == 1
    assert "line 1" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["pipeline", "--ablation", "modelZ"])
