from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigurationError, DataError, EmptyInputError, ShapeError

logger = logging.getLogger(__name__)

Box = tuple[float, float, float, float]

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE_FLOOR = 1e-6

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_THRESHOLDS = np.arange(0.0, 51.0, 1.0)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
DEFAULT_NPR_THRESHOLD = 0.2

# Center-distance thresholds of the benchmarks the profiles mimic.
PROFILE_PR_THRESHOLDS: dict[str, float] = {
    "gtot": 5.0,
    "lasher": 20.0,
    "rgbd1k": 20.0,
}


@dataclass(frozen=True)
class MetricConfig:
    profile: str = "gtot"
    pr_threshold: float | None = None
    npr_threshold: float = DEFAULT_NPR_THRESHOLD
    absent_threshold: float | None = None

    def resolved_pr_threshold(self) -> float:
        if self.pr_threshold is not None:
            return float(self.pr_threshold)
        return PROFILE_PR_THRESHOLDS[self.profile]

    def validate(self) -> None:
        if self.profile not in PROFILE_PR_THRESHOLDS:
            raise ConfigurationError(
                f"Unknown metric profile {self.profile!r}; expected one of {', '.join(PROFILE_PR_THRESHOLDS)}."
            )
        if self.pr_threshold is not None and self.pr_threshold < 0:
            raise ConfigurationError(f"pr_threshold must be >= 0, got {self.pr_threshold}.")
        if self.npr_threshold < 0:
            raise ConfigurationError(f"npr_threshold must be >= 0, got {self.npr_threshold}.")


@dataclass(frozen=True)
class FramePair:
    pred: Box
    truth: Box
    truth_present: bool = True
    pred_present: bool = True

    def __post_init__(self) -> None:
        for label, box in (("pred", self.pred), ("truth", self.truth)):
            if box[2] < 0 or box[3] < 0:
                raise DataError(f"{label} box has a negative extent: {box}.")


@dataclass
class EvalReport:
    pr: float
    npr: float
    sr_auc: float
    sr_ratio: float
    re: float
    f_score: float
    pr_threshold: float
    npr_threshold: float
    precision_curve: np.ndarray = field(repr=False)
    norm_precision_curve: np.ndarray = field(repr=False)
    success_curve: np.ndarray = field(repr=False)
    ssim_mean: float | None = None


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    ax0, ax1 = a[0] - a[2] / 2.0, a[0] + a[2] / 2.0
    ay0, ay1 = a[1] - a[3] / 2.0, a[1] + a[3] / 2.0
    bx0, bx1 = b[0] - b[2] / 2.0, b[0] + b[2] / 2.0
    by0, by1 = b[1] - b[3] / 2.0, b[1] + b[3] / 2.0
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def center_distance(a: Box, b: Box) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _present(frames: Sequence[FramePair]) -> list[FramePair]:
    if not frames:
        raise EmptyInputError("No frames to evaluate.")
    present = [frame for frame in frames if frame.truth_present]
    if not present:
        raise EmptyInputError("No frame has a present ground-truth target.")
    return present


def precision_rate(frames: Sequence[FramePair], threshold: float) -> float:
    """Share of present-target frames whose center distance is strictly below ``threshold``."""
    present = _present(frames)
    hits = sum(1 for frame in present if center_distance(frame.pred, frame.truth) < threshold)
    return hits / len(present)


def normalized_distance(pred: Box, truth: Box) -> float:
    if truth[2] <= 0 or truth[3] <= 0:
        raise DataError(f"Truth box {truth} has zero extent; cannot normalize the center offset.")
    return math.hypot((pred[0] - truth[0]) / truth[2], (pred[1] - truth[1]) / truth[3])


def norm_precision_rate(frames: Sequence[FramePair], threshold: float = DEFAULT_NPR_THRESHOLD) -> float:
    present = _present(frames)
    hits = sum(1 for frame in present if normalized_distance(frame.pred, frame.truth) < threshold)
    return hits / len(present)


def _success_at(ious: np.ndarray, tau: float) -> float:
    hits = ious > 0 if tau == 0 else ious >= tau
    return float(np.count_nonzero(hits)) / ious.size


def success_curve(frames: Sequence[FramePair]) -> np.ndarray:
    ious = np.array([iou(frame.pred, frame.truth) for frame in _present(frames)])
    return np.array([_success_at(ious, float(tau)) for tau in SUCCESS_THRESHOLDS])


def success_rate(frames: Sequence[FramePair]) -> tuple[float, float]:
    """(sr_auc, sr_ratio): mean success over 21 overlap thresholds, and share with any overlap."""
    curve = success_curve(frames)
    return float(curve.mean()), float(curve[0])


def f_score(pr: float, re: float) -> float:
    return 2.0 * pr * re / (pr + re) if pr + re > 0 else 0.0


def _tracked(frame: FramePair) -> bool:
    return frame.truth_present and frame.pred_present and iou(frame.pred, frame.truth) > 0


def tracking_precision(frames: Sequence[FramePair]) -> float:
    """Long-term precision: tracked frames over frames where the tracker reports a target."""
    if not frames:
        raise EmptyInputError("No frames to evaluate.")
    reported = sum(1 for frame in frames if frame.pred_present)
    return sum(1 for frame in frames if _tracked(frame)) / reported if reported else 0.0


def recall_and_fscore(frames: Sequence[FramePair]) -> tuple[float, float]:
    """Recall over present-target frames and its F-score against the long-term precision.

    A frame counts as tracked when the tracker reports the target and IoU > 0.
    """
    if not frames:
        raise EmptyInputError("No frames to evaluate.")
    present = sum(1 for frame in frames if frame.truth_present)
    re = sum(1 for frame in frames if _tracked(frame)) / present if present else 0.0
    return re, f_score(tracking_precision(frames), re)


def _window_mean(x: np.ndarray, counts: np.ndarray) -> np.ndarray:
    return uniform_filter(x, size=SSIM_WINDOW, mode="constant") / counts


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over 7x7 windows centred on every pixel.

    Windows are clipped at the border, so edge pixels average fewer samples.
    3-D inputs are compared channel by channel and averaged; the dynamic range
    of each channel pair is max - min over both maps.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch: {a.shape} vs {b.shape}.")
    if a.ndim == 3:
        return float(np.mean([ssim(a[channel], b[channel]) for channel in range(a.shape[0])]))
    if a.ndim != 2:
        raise ShapeError(f"ssim expects [H, W] or [C, H, W], got {a.shape}.")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs extents >= {SSIM_WINDOW}, got {a.shape}.")

    dynamic_range = max(float(max(a.max(), b.max()) - min(a.min(), b.min())), SSIM_RANGE_FLOOR)
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    counts = uniform_filter(np.ones_like(a), size=SSIM_WINDOW, mode="constant")
    mu_a = _window_mean(a, counts)
    mu_b = _window_mean(b, counts)
    # Second moments on mean-centred copies; constant maps give exact zeros.
    da = a - a.mean()
    db = b - b.mean()
    var_a = np.maximum(_window_mean(da * da, counts) - _window_mean(da, counts) ** 2, 0.0)
    var_b = np.maximum(_window_mean(db * db, counts) - _window_mean(db, counts) ** 2, 0.0)
    cov = _window_mean(da * db, counts) - _window_mean(da, counts) * _window_mean(db, counts)
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    denominator = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((numerator / denominator).mean())


def evaluate_frames(frames: Sequence[FramePair], config: MetricConfig | None = None) -> EvalReport:
    config = config or MetricConfig()
    config.validate()
    pr_threshold = config.resolved_pr_threshold()
    present = _present(frames)
    distances = np.array([center_distance(frame.pred, frame.truth) for frame in present])
    normalized = np.array([normalized_distance(frame.pred, frame.truth) for frame in present])
    sr_auc, sr_ratio = success_rate(frames)
    re, _ = recall_and_fscore(frames)
    # The long-term profile reports precision over frames where a target is claimed.
    pr = tracking_precision(frames) if config.profile == "rgbd1k" else precision_rate(frames, pr_threshold)
    return EvalReport(
        pr=pr,
        npr=norm_precision_rate(frames, config.npr_threshold),
        sr_auc=sr_auc,
        sr_ratio=sr_ratio,
        re=re,
        f_score=f_score(pr, re),
        pr_threshold=pr_threshold,
        npr_threshold=config.npr_threshold,
        precision_curve=np.array([np.mean(distances < threshold) for threshold in PRECISION_THRESHOLDS]),
        norm_precision_curve=np.array([np.mean(normalized < threshold) for threshold in NORM_PRECISION_THRESHOLDS]),
        success_curve=success_curve(frames),
    )
