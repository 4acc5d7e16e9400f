from pathlib import Path

import numpy as np
import pytest

from gmmt.config import config_to_ini
from gmmt.fusion import Challenge, Mode, synth_scenario
from gmmt.main import CHECKPOINT_NAME, GOLDEN_SEED, main
from gmmt.seeding import make_rng
from gmmt.storage import decode_record, read_scenario


@pytest.fixture
def run_files(tmp_path, tiny_config):
    """Write a tiny run config and return (config path, config, run directory)."""

    def build(name: str = "run.ini", **kwargs):
        out_dir = tmp_path / "run"
        config = tiny_config(out_dir=str(out_dir), **kwargs)
        path = tmp_path / name
        path.write_text(config_to_ini(config), encoding="utf-8")
        return path, config, out_dir

    return build


def test_train_writes_identical_checkpoints(run_files) -> None:
    path, _, out_dir = run_files()

    assert main(["--quiet", "train", "--config", str(path)]) == 0
    first = (out_dir / CHECKPOINT_NAME).read_bytes()
    assert main(["--quiet", "train", "--config", str(path)]) == 0

    assert (out_dir / CHECKPOINT_NAME).read_bytes() == first
    log_lines = (out_dir / "loss_log.csv").read_text(encoding="utf-8").splitlines()
    assert len(log_lines) == 3
    assert (out_dir / "config.ini").read_text(encoding="utf-8") == path.read_text(encoding="utf-8")


def test_eval_and_infer_outputs(run_files) -> None:
    path, config, out_dir = run_files()
    assert main(["train", "--config", str(path)]) == 0

    assert main(["eval", "--config", str(path)]) == 0
    report = (out_dir / "report.csv").read_text(encoding="utf-8").splitlines()
    assert len(report) == 2
    assert report[1].startswith("dm,")
    assert len((out_dir / "curves.csv").read_text(encoding="utf-8").splitlines()) == 124

    assert main(["infer", "--config", str(path), "--steps", "2"]) == 0
    records = sorted((out_dir / "features").glob("*.gmmt"))
    assert [record.name for record in records] == [f"{index:05d}.gmmt" for index in range(config.scenario.eval_count)]
    f_rgb, _, fused, _, challenge = decode_record(records[0].read_bytes())
    assert f_rgb.shape == fused.shape == config.denoiser.feature_shape
    assert isinstance(challenge, Challenge)
    summary = (out_dir / "infer_summary.csv").read_text(encoding="utf-8").splitlines()
    assert summary[0] == "index,challenge,mse_vs_oracle,ssim_vs_oracle"
    assert len(summary) == 1 + config.scenario.eval_count


def test_eval_reports_data_errors(run_files, tmp_path) -> None:
    path, _, out_dir = run_files()
    assert main(["train", "--config", str(path)]) == 0
    empty_path, _, _ = run_files("empty.ini", eval_count=0)

    assert main(["eval", "--config", str(empty_path)]) == 3
    assert main(["eval", "--config", str(path), "--checkpoint", str(tmp_path / "absent.gmck")]) == 3
    assert main(["eval", "--config", str(path), "--mode", "raw"]) == 2

    (out_dir / CHECKPOINT_NAME).write_bytes(b"GMCK" + b"\x00" * 40)
    assert main(["eval", "--config", str(path)]) == 3


def test_bad_configuration_exits_with_two(tmp_path) -> None:
    bad = tmp_path / "bad.ini"
    bad.write_text("[trainer]\nbogus = 1\n", encoding="utf-8")

    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2
    assert main(["train", "--mode", "cgan", "--steps", "0", "--out", str(tmp_path / "x")]) == 2


def test_unknown_flag_is_a_usage_error() -> None:
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--bogus"])
    assert excinfo.value.code == 2


def test_goldens_need_force(run_files) -> None:
    path, config, out_dir = run_files()

    assert main(["goldens", "--config", str(path)]) == 2
    assert not (out_dir / "goldens").exists()

    assert main(["goldens", "--config", str(path), "--force"]) == 0
    for index, challenge in enumerate(Challenge):
        expected = synth_scenario(make_rng(GOLDEN_SEED, index), challenge, config.denoiser.feature_shape, config.scenario)
        stored = read_scenario(out_dir / "goldens" / f"{challenge.value}.gmmt")
        np.testing.assert_array_equal(stored.f_rgb, expected.f_rgb)
        np.testing.assert_array_equal(stored.f_tir, expected.f_tir)
        np.testing.assert_array_equal(stored.fused_oracle, expected.fused_oracle)
        assert stored.bbox == expected.bbox
        assert stored.challenge is challenge


def test_goldens_command_reproduces_the_committed_clean_file(tmp_path, golden) -> None:
    assert main(["--quiet", "goldens", "--force", "--out", str(tmp_path)]) == 0

    golden("clean.gmmt", (tmp_path / "goldens" / "clean.gmmt").read_bytes())


def test_ablate_writes_one_row_per_method(run_files) -> None:
    path, _, out_dir = run_files(size=16, eval_count=4)

    assert main(["ablate", "--config", str(path)]) == 0

    lines = (out_dir / "ablation.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 5
    assert [line.split(",")[0] for line in lines[1:]] == [mode.value for mode in Mode]


def test_sweeps(run_files) -> None:
    path, _, out_dir = run_files(eval_count=4)
    assert main(["train", "--config", str(path)]) == 0

    assert main(["sweep", "--config", str(path), "--axis", "s", "--values", "1,2,5"]) == 0
    steps = (out_dir / "sweep_s.csv").read_text(encoding="utf-8").splitlines()
    assert steps[0] == "axis_value,pr,npr,sr_auc,sr_ratio,re,f_score,ssim_mean"
    assert [line.split(",")[0] for line in steps[1:]] == ["1", "2", "5"]

    assert main(["sweep", "--config", str(path), "--axis", "lambda", "--values", "0,2.5"]) == 0
    lambdas = (out_dir / "sweep_lambda.csv").read_text(encoding="utf-8").splitlines()
    assert [line.split(",")[0] for line in lambdas[1:]] == ["0", "2.5"]

    assert main(["sweep", "--config", str(path), "--axis", "lambda", "--values", ","]) == 2


def test_flags_override_the_config_file(run_files) -> None:
    path, _, out_dir = run_files()
    other = Path(out_dir).parent / "other"

    assert main(["train", "--config", str(path), "--lambda", "3", "--seed", "4", "--out", str(other)]) == 0

    written = (other / "config.ini").read_text(encoding="utf-8")
    assert "lambda = 3.0" in written
    assert "seed = 4" in written
    assert not (out_dir / CHECKPOINT_NAME).exists()


def test_mode_flag_selects_the_trainer(run_files) -> None:
    path, _, out_dir = run_files(size=16)

    assert main(["train", "--config", str(path), "--mode", "cgan"]) == 0
    assert main(["eval", "--config", str(path), "--mode", "cgan"]) == 0
    assert (out_dir / "report.csv").read_text(encoding="utf-8").splitlines()[1].startswith("cgan,")
