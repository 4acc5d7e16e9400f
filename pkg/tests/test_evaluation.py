import dataclasses

import numpy as np
import pytest

from gmmt.config import RunConfig
from gmmt.errors import ConfigurationError, EmptyInputError
from gmmt.evaluation import (
    DEFAULT_LAMBDA_VALUES,
    REPORT_COLUMNS,
    SweepRow,
    ablation,
    curves_to_csv,
    eval_scenarios,
    evaluate_model,
    evaluate_run,
    infer_scenarios,
    report_to_csv,
    step_ssim_correlation,
    sweep_eval,
    train_run,
)
from gmmt.fusion import InferenceConfig, Mode, ScenarioConfig
from gmmt.metrics import EvalReport, MetricConfig
from gmmt.trainers import TrainConfig

REPORT_FIELDS = ("pr", "npr", "sr_auc", "sr_ratio", "re", "f_score", "ssim_mean")


def _report(**values) -> EvalReport:
    fields = dict(
        pr=0.5,
        npr=0.25,
        sr_auc=1 / 3,
        sr_ratio=1.0,
        re=0.0,
        f_score=0.123456,
        pr_threshold=5.0,
        npr_threshold=0.2,
        precision_curve=np.zeros(51),
        norm_precision_curve=np.zeros(51),
        success_curve=np.zeros(21),
    )
    fields.update(values)
    return EvalReport(**fields)


def _same_report(a: EvalReport, b: EvalReport) -> None:
    for name in REPORT_FIELDS:
        assert getattr(a, name) == getattr(b, name), name
    np.testing.assert_array_equal(a.success_curve, b.success_curve)


def test_eval_set_is_seeded_and_sized(tiny_config) -> None:
    config = tiny_config(eval_count=5)
    first = eval_scenarios(config)
    second = eval_scenarios(config)

    assert len(first) == 5
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.f_rgb, b.f_rgb)
        assert a.bbox == b.bbox
    assert first[0].f_rgb.shape == (2, 8, 8)


def test_inference_does_not_depend_on_thread_count(tiny_config) -> None:
    config = tiny_config(eval_count=40)
    pipeline = train_run(config).state.pipeline
    scenarios = eval_scenarios(config)

    serial = infer_scenarios(pipeline, scenarios, config.inference, config.seed, threads=1)
    pooled = infer_scenarios(pipeline, scenarios, config.inference, config.seed, threads=3)

    assert len(serial) == len(pooled) == 40
    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a.fused, b.fused)
        assert a.prediction.bbox == b.prediction.bbox
    _same_report(
        evaluate_model(pipeline, scenarios, config.metrics, config.inference, config.seed, threads=1),
        evaluate_model(pipeline, scenarios, config.metrics, config.inference, config.seed, threads=3),
    )


def test_report_values_lie_in_range(tiny_config) -> None:
    config = tiny_config(eval_count=12)
    report = evaluate_run(config, train_run(config).state.pipeline)

    for name in ("pr", "npr", "sr_auc", "sr_ratio", "re", "f_score"):
        assert 0.0 <= getattr(report, name) <= 1.0
    assert report.ssim_mean is not None
    assert -1.0 <= report.ssim_mean <= 1.0
    assert report.pr_threshold == 5.0


def test_absent_threshold_marks_weak_peaks_as_lost(tiny_config) -> None:
    config = tiny_config()
    pipeline = train_run(config).state.pipeline
    scenarios = eval_scenarios(config)

    report = evaluate_model(pipeline, scenarios, MetricConfig(absent_threshold=1e9), config.inference, config.seed)

    assert report.re == 0.0
    assert report.f_score == 0.0


def test_inference_needs_scenarios(tiny_config) -> None:
    config = tiny_config()
    pipeline = train_run(config).state.pipeline
    with pytest.raises(EmptyInputError):
        infer_scenarios(pipeline, [], config.inference, config.seed)


def test_step_sweep_reuses_one_pipeline(tiny_config) -> None:
    config = tiny_config()
    pipeline = train_run(config).state.pipeline

    rows = sweep_eval(config, "s", ["1", "3", "10"], pipeline=pipeline)

    assert [row.value for row in rows] == [1, 3, 10]
    assert all(row.axis == "s" for row in rows)
    single = evaluate_model(
        pipeline, eval_scenarios(config), config.metrics, dataclasses.replace(config.inference, steps=3), config.seed
    )
    _same_report(rows[1].report, single)


def test_lambda_sweep_defaults(tiny_config) -> None:
    rows = sweep_eval(tiny_config(eval_count=4), "lambda")
    assert [row.value for row in rows] == [0.0, 1.0, 2.0, 3.0, 5.0, 10.0, 100.0]
    assert tuple(row.value for row in rows) == DEFAULT_LAMBDA_VALUES


def test_single_value_sweep_matches_plain_evaluation(tiny_config) -> None:
    config = tiny_config()
    (row,) = sweep_eval(config, "lambda", [2])

    variant = dataclasses.replace(config, trainer=dataclasses.replace(config.trainer, lambda_gen=2.0))
    plain = evaluate_run(variant, train_run(variant).state.pipeline)

    assert row.value == 2.0
    _same_report(row.report, plain)


def test_block_sweep_retrains_each_depth(tiny_config) -> None:
    rows = sweep_eval(tiny_config(eval_count=4), "blocks", [1, 2])
    assert [(row.axis, row.value) for row in rows] == [("blocks", 1), ("blocks", 2)]


def test_sweep_errors(tiny_config) -> None:
    config = tiny_config()
    with pytest.raises(ConfigurationError):
        sweep_eval(config, "epochs", [1])
    with pytest.raises(ConfigurationError):
        sweep_eval(config, "lambda", [])
    with pytest.raises(ConfigurationError):
        sweep_eval(config, "s", ["many"])
    with pytest.raises(EmptyInputError):
        sweep_eval(tiny_config(eval_count=0), "lambda", [1])
    with pytest.raises(EmptyInputError):
        ablation(tiny_config(eval_count=0))


def test_ablation_covers_all_methods(tiny_config) -> None:
    config = tiny_config(Mode.DM, size=16, eval_count=4)

    rows = ablation(config)

    assert [(row.axis, row.value) for row in rows] == [("method", "base"), ("method", "raw"), ("method", "cgan"), ("method", "dm")]
    lines = report_to_csv(rows).splitlines()
    assert len(lines) == 5
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert [line.split(",")[0] for line in lines[1:]] == ["base", "raw", "cgan", "dm"]


def test_report_csv_formatting() -> None:
    rows = [
        SweepRow("lambda", 0.5, _report()),
        SweepRow("s", 3, _report(ssim_mean=0.5)),
        SweepRow("method", "dm", _report(pr=1.0)),
    ]

    lines = report_to_csv(rows).splitlines()

    assert lines[0] == "axis_value,pr,npr,sr_auc,sr_ratio,re,f_score,ssim_mean"
    assert lines[1] == "0.5,50.0,25.0,33.3,100.0,0.0,12.3,"
    assert lines[2] == "3,50.0,25.0,33.3,100.0,0.0,12.3,0.5000"
    assert lines[3].startswith("dm,100.0,")


def test_curves_csv_layout() -> None:
    lines = curves_to_csv(_report(success_curve=np.linspace(1.0, 0.0, 21))).splitlines()

    assert len(lines) == 1 + 51 + 51 + 21
    assert lines[0] == "curve,threshold,value"
    assert lines[1] == "precision,0,0.000000"
    assert lines[53] == "norm_precision,0.01,0.000000"
    assert lines[-1] == "success,1,0.000000"
    assert lines[-21] == "success,0,1.000000"


def test_step_ssim_correlation() -> None:
    rows = [SweepRow("s", steps, _report(ssim_mean=score)) for steps, score in [(1, 0.2), (5, 0.4), (20, 0.9)]]
    assert step_ssim_correlation(rows) == pytest.approx(1.0)

    flat = [SweepRow("s", steps, _report(ssim_mean=0.5)) for steps in (1, 2, 3)]
    assert step_ssim_correlation(flat) == 0.0

    with pytest.raises(EmptyInputError):
        step_ssim_correlation(rows[:1])
    with pytest.raises(EmptyInputError):
        step_ssim_correlation([SweepRow("s", 1, _report()), SweepRow("s", 2, _report())])


@pytest.mark.slow
def test_more_reverse_steps_raise_similarity_to_the_oracle() -> None:
    config = RunConfig(
        trainer=TrainConfig(mode=Mode.DM, epochs=50, steps_per_epoch=100, warmup_epochs=5),
        scenario=ScenarioConfig(eval_count=100),
        inference=InferenceConfig(sample_clip=4.0),
    )

    rows = sweep_eval(config, "s", [1, 2, 3, 5, 10, 20])

    assert [row.value for row in rows] == [1, 2, 3, 5, 10, 20]
    assert all(row.report.ssim_mean is not None for row in rows)
    assert step_ssim_correlation(rows) > 0.0
