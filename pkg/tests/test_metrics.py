import math

import numpy as np
import pytest

from gmmt.errors import ConfigurationError, DataError, EmptyInputError, ShapeError
from gmmt.metrics import (
    SUCCESS_THRESHOLDS,
    FramePair,
    MetricConfig,
    center_distance,
    evaluate_frames,
    f_score,
    iou,
    norm_precision_rate,
    precision_rate,
    recall_and_fscore,
    ssim,
    success_curve,
    success_rate,
)


def _random_frames(rng: np.random.Generator, count: int = 10) -> list[FramePair]:
    frames = []
    for _ in range(count):
        truth = (rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(2, 10), rng.uniform(2, 10))
        pred = (truth[0] + rng.normal(0, 4), truth[1] + rng.normal(0, 4), rng.uniform(1, 10), rng.uniform(1, 10))
        frames.append(FramePair(pred=pred, truth=truth))
    return frames


def _brute_iou(a, b) -> float:
    left = max(a[0] - a[2] / 2, b[0] - b[2] / 2)
    right = min(a[0] + a[2] / 2, b[0] + b[2] / 2)
    top = max(a[1] - a[3] / 2, b[1] - b[3] / 2)
    bottom = min(a[1] + a[3] / 2, b[1] + b[3] / 2)
    inter = max(right - left, 0) * max(bottom - top, 0)
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def test_iou_and_distance_basics() -> None:
    assert iou((5, 5, 4, 4), (5, 5, 4, 4)) == 1.0
    assert iou((0, 0, 2, 2), (10, 10, 2, 2)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 2, 2)) == pytest.approx(2 / 6)
    assert center_distance((0, 0, 1, 1), (3, 4, 1, 1)) == 5.0


@pytest.mark.parametrize("seed", range(100))
def test_rates_match_brute_force(seed: int) -> None:
    rng = np.random.default_rng(seed)
    frames = _random_frames(rng)

    threshold = 5.0
    hits = 0
    for frame in frames:
        dx = frame.pred[0] - frame.truth[0]
        dy = frame.pred[1] - frame.truth[1]
        hits += (dx * dx + dy * dy) ** 0.5 < threshold
    assert precision_rate(frames, threshold) == hits / len(frames)

    ious = [_brute_iou(frame.pred, frame.truth) for frame in frames]
    curve = []
    for tau in SUCCESS_THRESHOLDS:
        if tau == 0:
            curve.append(sum(value > 0 for value in ious) / len(ious))
        else:
            curve.append(sum(value >= tau for value in ious) / len(ious))
    sr_auc, sr_ratio = success_rate(frames)
    assert sr_ratio == curve[0]
    assert sr_auc == pytest.approx(sum(curve) / len(curve), abs=1e-12)


def test_success_curve_non_increasing_and_precision_non_decreasing() -> None:
    frames = _random_frames(np.random.default_rng(7), 40)
    curve = success_curve(frames)
    assert np.all(np.diff(curve) <= 0)

    precisions = [precision_rate(frames, threshold) for threshold in range(0, 51)]
    assert all(b >= a for a, b in zip(precisions, precisions[1:]))
    assert all(0.0 <= value <= 1.0 for value in precisions)


def test_norm_precision_rate() -> None:
    frames = [
        FramePair(pred=(1.0, 0.0, 4, 4), truth=(0.0, 0.0, 10, 10)),
        FramePair(pred=(5.0, 0.0, 4, 4), truth=(0.0, 0.0, 10, 10)),
    ]
    assert norm_precision_rate(frames) == 0.5
    assert norm_precision_rate(frames, 0.6) == 1.0

    with pytest.raises(DataError):
        norm_precision_rate([FramePair(pred=(0, 0, 1, 1), truth=(0, 0, 0, 4))])


def test_f_score_reproduces_published_pairs() -> None:
    assert 100 * f_score(0.559, 0.590) == pytest.approx(57.4, abs=0.1)
    assert 100 * f_score(0.547, 0.579) == pytest.approx(56.2, abs=0.1)
    assert f_score(0.0, 0.0) == 0.0


def test_absent_frames_and_long_term_recall() -> None:
    frames = [
        FramePair(pred=(0, 0, 2, 2), truth=(0, 0, 2, 2)),
        FramePair(pred=(0, 0, 2, 2), truth=(20, 20, 2, 2)),
        FramePair(pred=(0, 0, 2, 2), truth=(0, 0, 2, 2), pred_present=False),
        FramePair(pred=(0, 0, 2, 2), truth=(0, 0, 2, 2), truth_present=False),
    ]

    re, f = recall_and_fscore(frames)

    assert precision_rate(frames, 5.0) == pytest.approx(2 / 3)
    assert re == pytest.approx(1 / 3)
    # One tracked frame out of the three where a target is reported.
    assert f == pytest.approx(f_score(1 / 3, 1 / 3))


def test_metric_errors() -> None:
    with pytest.raises(EmptyInputError):
        precision_rate([], 5.0)
    with pytest.raises(EmptyInputError):
        success_rate([FramePair(pred=(0, 0, 1, 1), truth=(0, 0, 1, 1), truth_present=False)])
    with pytest.raises(DataError):
        FramePair(pred=(0, 0, -1, 1), truth=(0, 0, 1, 1))
    with pytest.raises(ConfigurationError):
        evaluate_frames(_random_frames(np.random.default_rng(0)), MetricConfig(profile="otb"))


def test_evaluate_frames_profiles() -> None:
    frames = _random_frames(np.random.default_rng(3), 30)

    gtot = evaluate_frames(frames, MetricConfig(profile="gtot"))
    lasher = evaluate_frames(frames, MetricConfig(profile="lasher"))
    override = evaluate_frames(frames, MetricConfig(profile="gtot", pr_threshold=20.0))
    long_term = evaluate_frames(frames, MetricConfig(profile="rgbd1k"))

    assert gtot.pr_threshold == 5.0
    assert gtot.pr == precision_rate(frames, 5.0)
    assert lasher.pr == override.pr == precision_rate(frames, 20.0)
    assert long_term.f_score == pytest.approx(f_score(long_term.pr, long_term.re))
    assert gtot.precision_curve.shape == (51,)
    assert gtot.norm_precision_curve.shape == (51,)
    assert gtot.success_curve.shape == (21,)
    assert gtot.precision_curve[5] == gtot.pr
    for report in (gtot, lasher, long_term):
        for value in (report.pr, report.npr, report.sr_auc, report.sr_ratio, report.re, report.f_score):
            assert 0.0 <= value <= 1.0


def test_ssim_identity_and_constants() -> None:
    x = np.random.default_rng(4).standard_normal((3, 9, 10))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(np.full((8, 8), 2.5), np.full((8, 8), 2.5)) == pytest.approx(1.0, abs=1e-12)
    assert -1.0 <= ssim(x, -x) <= 1.0


def test_ssim_matches_edge_clipped_window_formula() -> None:
    rng = np.random.default_rng(5)
    a = rng.standard_normal((8, 8))
    b = a + 0.3 * rng.standard_normal((8, 8))
    dynamic_range = max(a.max(), b.max()) - min(a.min(), b.min())
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    scores = []
    for i in range(8):
        for j in range(8):
            rows = slice(max(0, i - 3), min(8, i + 4))
            cols = slice(max(0, j - 3), min(8, j + 4))
            wa, wb = a[rows, cols], b[rows, cols]
            mu_a, mu_b = wa.mean(), wb.mean()
            var_a, var_b = wa.var(), wb.var()
            cov = ((wa - mu_a) * (wb - mu_b)).mean()
            scores.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )

    assert len(scores) == 64
    assert ssim(a, b) == pytest.approx(sum(scores) / 64, abs=1e-10)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_errors() -> None:
    with pytest.raises(ShapeError):
        ssim(np.zeros((6, 8)), np.zeros((6, 8)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    assert math.isfinite(ssim(np.zeros((7, 7)), np.ones((7, 7))))
