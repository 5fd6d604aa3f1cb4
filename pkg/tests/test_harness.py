import numpy as np
import pytest

from psdistill.cli import main
from psdistill.harness.checkpoint import CheckpointError, checkpoint_from_bytes, load_checkpoint, params_checksum
from psdistill.harness.config import ConfigError, ExperimentConfig, parse_config
from psdistill.harness.experiments import (AblationTable, RunCache, Teachers, export_lut, import_lut,
                                           lambda_sweep, run_ablation_suite)
from psdistill.harness.train import train
from psdistill.kd import KdMode
from psdistill.oim import LutFormatError
from psdistill.psmodel import BackboneSize

TINY = {"train.steps": 6, "train.warmup_steps": 2, "data.n_train_scenes": 8, "data.n_gallery_scenes": 6,
        "data.gallery_size_per_query": 3, "data.n_queries": 3}


@pytest.fixture(scope="module")
def tiny():
    return ExperimentConfig().replace(**TINY)


@pytest.fixture(scope="module")
def joint(tiny):
    return train(tiny.replace(**{"oim.lambda_oim": 1.0}))


def test_config_text_round_trip():
    cfg = ExperimentConfig().replace(**{"seed": 4, "kd_mode": "kd_reid", "oim.lambda_oim": 0.3,
                                        "model.anchor_ratios": "2.0, 3.0", "teacher_lut": "t.olut"})
    back = parse_config(cfg.to_text())
    assert back == cfg and back.to_text() == cfg.to_text() and back.digest() == cfg.digest()


def test_config_comments_and_errors():
    cfg = parse_config("# comment\nseed = 3  # trailing\n\ntrain.steps = 10\n")
    assert cfg.seed == 3 and cfg.train.steps == 10
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("nonsense")
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("train.nope = 1")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("train.steps = many")
    with pytest.raises(ConfigError):
        parse_config("oim.temperature = 0")


def test_config_requires_teacher_files():
    with pytest.raises(ConfigError, match="teacher_lut"):
        ExperimentConfig(kd_mode=KdMode.KD_REID).validate()
    with pytest.raises(ConfigError, match="teacher_checkpoint"):
        ExperimentConfig(kd_mode=KdMode.KD_DET).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig().replace(**{"oim.num_labeled": 5}).validate()


def test_training_is_deterministic(tiny, joint):
    again = train(tiny.replace(**{"oim.lambda_oim": 1.0}))
    assert again.metrics.to_csv() == joint.metrics.to_csv()
    assert again.checkpoint.to_bytes() == joint.checkpoint.to_bytes()
    assert again.losses_csv() == joint.losses_csv()


def test_different_seed_differs(tiny, joint):
    other = train(tiny.replace(**{"oim.lambda_oim": 1.0, "seed": 1}), evaluate=False)
    assert other.checkpoint.to_bytes() != joint.checkpoint.to_bytes()


def test_checkpoint_round_trip(tmp_path, joint):
    raw = joint.checkpoint.to_bytes()
    assert checkpoint_from_bytes(raw).to_bytes() == raw
    joint.write(tmp_path)
    assert load_checkpoint(tmp_path / "checkpoint.psck").to_bytes() == raw
    model = joint.checkpoint.build_model()
    assert params_checksum(model) == params_checksum(checkpoint_from_bytes(raw).build_model())


def test_checkpoint_errors(joint):
    raw = joint.checkpoint.to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_from_bytes(raw[:4] + (7).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_from_bytes(raw[:-10])


def test_kd_reid_keeps_the_lut_and_counts_skips(tiny, joint):
    teacher_bytes = joint.checkpoint.to_bytes()
    res = train(tiny.replace(kd_mode=KdMode.KD_REID), teacher_lut=joint.checkpoint)
    assert res.lut_checksum_start == res.lut_checksum_end == joint.checkpoint.lut.checksum()
    assert res.checkpoint.lut.skipped_updates == res.labeled_seen > 0
    assert res.checkpoint.oim_cfg.lambda_oim == 0.1
    assert joint.checkpoint.to_bytes() == teacher_bytes


def test_kd_det_leaves_teacher_untouched(tiny, joint):
    teacher_model = joint.checkpoint.build_model()
    before = params_checksum(teacher_model)
    res = train(tiny.replace(kd_mode=KdMode.KD_DET, backbone=BackboneSize.SMALL), teacher=teacher_model,
                evaluate=False)
    assert params_checksum(teacher_model) == before
    assert any(k.startswith("adapter.") for k in res.checkpoint.params)


def test_missing_teacher_is_an_error(tiny):
    with pytest.raises(ValueError, match="teacher"):
        train(tiny.replace(kd_mode=KdMode.KD_REID))


def test_lut_export_import(tmp_path, joint):
    path = tmp_path / "t.olut"
    export_lut(joint.checkpoint, path)
    lut = import_lut(path, dim=32, num_labeled=16)
    assert lut.to_bytes() == joint.checkpoint.lut.to_bytes() == path.read_bytes()
    export_lut(joint.checkpoint, tmp_path / "again.olut")
    assert (tmp_path / "again.olut").read_bytes() == path.read_bytes()
    with pytest.raises(ValueError, match="D="):
        import_lut(path, dim=16)
    with pytest.raises(ValueError, match="P="):
        import_lut(path, num_labeled=12)
    with pytest.raises(LutFormatError):
        import_lut(b"OLUT" + (2).to_bytes(4, "little") + path.read_bytes()[8:])


def test_small_student_accepts_large_teacher_lut(tiny, joint):
    res = train(tiny.replace(kd_mode=KdMode.KD_REID, backbone=BackboneSize.SMALL), teacher_lut=joint.checkpoint,
                evaluate=False)
    assert res.checkpoint.backbone.size is BackboneSize.SMALL
    assert res.checkpoint.lut.to_bytes() == joint.checkpoint.lut.to_bytes()


def test_sweep_rows_and_outputs(tmp_path, tiny):
    cache = RunCache()
    res = lambda_sweep(tiny, lambdas=[0.1, 1.0], seeds=[0], cache=cache, out_dir=tmp_path)
    assert res.lambdas() == [0.0, 0.1, 1.0] and res.seeds() == [0] and len(cache) == 3
    assert (tmp_path / "sweep.csv").read_text().count("\n") == 4
    assert (tmp_path / "sweep_plot.csv").exists()
    lambda_sweep(tiny, lambdas=[0.1, 1.0], seeds=[0], cache=cache)
    assert len(cache) == 3  # reused
    with pytest.raises(ValueError):
        lambda_sweep(tiny, lambdas=[], seeds=[0])


def test_ablation_skips_rows_without_teachers(tmp_path, tiny, joint):
    table = run_ablation_suite(tiny, seeds=[0], teachers=Teachers(joint=joint.checkpoint),
                               rows=("baseline", "kd_reid", "kd_det", "kd_reid_weak"), out_dir=tmp_path)
    assert {r["row"] for r in table.rows} == {"baseline", "kd_reid"}
    assert len(table.skipped) == 2 and any("kd_det" in s for s in table.skipped)
    assert isinstance(table, AblationTable) and np.isfinite(table.median("kd_reid", "search_map"))
    assert (tmp_path / "ablation.csv").exists()


def test_cli_config_and_errors(capsys):
    assert main(["config", "--set", "seed=5"]) == 0
    assert "seed = 5" in capsys.readouterr().out
    assert main(["config", "--set", "train.bogus=1"]) == 2
    assert main(["config", "--set", "seed"]) == 2


def test_cli_train_export_eval(tmp_path, capsys):
    sets = sum((["--set", f"{k}={v}"] for k, v in TINY.items()), [])
    assert main(["train", *sets, "--set", "oim.lambda_oim=1.0", "--out", str(tmp_path / "t")]) == 0
    assert main(["export-lut", "--checkpoint", str(tmp_path / "t" / "checkpoint.psck"),
                 "--out", str(tmp_path / "t.olut")]) == 0
    assert main(["train", *sets, "--set", "kd_mode=kd_reid", "--teacher-lut", str(tmp_path / "t.olut"),
                 "--self-check"]) == 0
    assert main(["eval", *sets, "--checkpoint", str(tmp_path / "t" / "checkpoint.psck"),
                 "--out", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "metrics.csv").read_text().startswith("det_map,")
    assert main(["gen-data", *sets, "--out", str(tmp_path / "d.psds")]) == 0
    assert main(["train", *sets, "--set", "kd_mode=kd_reid"]) == 2


def test_cli_self_check():
    assert main(["self-check", "--steps", "4"]) == 0
