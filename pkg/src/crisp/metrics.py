"""Evaluation metrics for uncertainty maps.

Per sample: pooled-foreground Dice, mean uncertainty over predicted
foreground, mutual information between the uncertainty map and the pixel
error map, and a per-sample calibration error.  Aggregates: the absolute
Pearson correlation between Dice and sample uncertainty, an ECE pooled
over every pixel of the test set, and error-count-weighted mean MI.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Sample
from .errors import ConfigError, DegenerateError, DimensionError, InputError
from .numerics import pearson


@dataclass(frozen=True)
class EvalConfig:
    ece_bins: int = 10
    mi_bins: int = 32

    def __post_init__(self):
        if self.ece_bins < 1:
            raise ConfigError("ece_bins must be >= 1")
        if self.mi_bins < 2:
            raise ConfigError("mi_bins must be >= 2")


@dataclass
class SampleRecord:
    index: int
    dice: float
    sample_uncertainty: float  # NaN when the prediction has no foreground
    error_pixel_count: int
    mi: float
    ece: float
    foreground_empty: bool = False


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    correlation: float = math.nan
    correlation_degenerate: bool = False
    ece: float = math.nan
    weighted_mi: float = math.nan
    all_perfect: bool = False
    config: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "config": {
                "ece_bins": self.config.ece_bins,
                "mi_bins": self.config.mi_bins,
                "mi_units": "nats",
            },
            "per_sample": [
                {
                    "index": r.index,
                    "dice": r.dice,
                    "sample_uncertainty": (
                        None if r.foreground_empty else r.sample_uncertainty
                    ),
                    "error_pixel_count": r.error_pixel_count,
                    "mi": r.mi,
                    "ece": r.ece,
                    "foreground_empty": r.foreground_empty,
                }
                for r in self.records
            ],
            "aggregate": {
                "correlation": (
                    None if self.correlation_degenerate else self.correlation
                ),
                "correlation_degenerate": self.correlation_degenerate,
                "ece": self.ece,
                "weighted_mi": self.weighted_mi,
                "all_perfect": self.all_perfect,
            },
        }


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice over pooled foreground classes; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise DimensionError(
            f"prediction {pred.shape} and ground truth {gt.shape} must be "
            "matching (K, H, W) arrays"
        )
    inter = float((pred[1:] * gt[1:]).sum())
    size_p = float(pred[1:].sum())
    size_g = float(gt[1:].sum())
    if size_p + size_g == 0.0:
        return 1.0
    return 2.0 * inter / (size_p + size_g)


def sample_uncertainty(u: np.ndarray, pred: np.ndarray) -> float:
    """Total uncertainty divided by the number of predicted foreground pixels."""
    u = np.asarray(u, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3 or u.shape != pred.shape[1:]:
        raise DimensionError(
            f"map {u.shape} does not align with prediction {pred.shape}"
        )
    fg = float(pred[1:].sum())
    if fg == 0.0:
        raise DegenerateError(
            "prediction has no foreground pixels; sample uncertainty undefined"
        )
    return float(u.sum()) / fg


def correlation_metric(records: Sequence[SampleRecord]) -> float:
    """|Pearson| between the Dice and sample-uncertainty columns.

    Records flagged as foreground-empty are excluded.
    """
    valid = [r for r in records if not r.foreground_empty]
    if len(valid) < 2:
        raise DegenerateError(
            f"correlation needs >= 2 valid records, got {len(valid)}"
        )
    dice = np.array([r.dice for r in valid])
    unc = np.array([r.sample_uncertainty for r in valid])
    return abs(pearson(dice, unc))


def ece(
    confidences: np.ndarray, correct: np.ndarray, bins: int = 10
) -> float:
    """Expected calibration error over equal-width confidence bins.

    Bin edges are right-inclusive, so 1.0 falls in the last bin and 0.0
    in the first.  Empty bins contribute nothing.
    """
    c = np.asarray(confidences, dtype=np.float64).ravel()
    ok = np.asarray(correct, dtype=bool).ravel()
    if c.shape != ok.shape:
        raise DimensionError(
            f"{c.size} confidences vs {ok.size} correctness flags"
        )
    if c.size == 0:
        raise InputError("ece of an empty sample set is undefined")
    if np.any((c < 0.0) | (c > 1.0)):
        raise InputError("confidences must lie in [0, 1]")
    if bins < 1:
        raise ConfigError("bins must be >= 1")

    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.digitize(c, edges[1:-1], right=True)
    total = 0.0
    n = c.size
    for b in range(bins):
        members = idx == b
        count = int(members.sum())
        if count == 0:
            continue
        acc = float(ok[members].mean())
        conf = float(c[members].mean())
        total += (count / n) * abs(acc - conf)
    return total


def uncertainty_error_mi(
    u: np.ndarray, error_map: np.ndarray, u_bins: int = 32
) -> float:
    """Mutual information (nats) between binned uncertainty and errors.

    The map is quantized into ``u_bins`` equal-width bins over [0, 1] and
    histogrammed jointly against the binary error map.
    """
    u = np.asarray(u, dtype=np.float64)
    err = np.asarray(error_map, dtype=bool)
    if u.shape != err.shape:
        raise DimensionError(
            f"map {u.shape} does not match error map {err.shape}"
        )
    if u_bins < 2:
        raise ConfigError("u_bins must be >= 2")

    edges = np.linspace(0.0, 1.0, u_bins + 1)
    iu = np.digitize(u.ravel(), edges[1:-1], right=True)
    joint = np.zeros((u_bins, 2), dtype=np.float64)
    np.add.at(joint, (iu, err.ravel().astype(int)), 1.0)
    joint /= u.size
    pu = joint.sum(axis=1)
    pe = joint.sum(axis=0)
    nz = joint > 0.0
    outer = pu[:, None] * pe[None, :]
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return max(mi, 0.0)


def evaluate(
    samples: Sequence[Sample],
    predictions: Sequence[np.ndarray],
    maps: Sequence[np.ndarray],
    config: EvalConfig | None = None,
) -> EvalReport:
    """Score a test set of (ground truth, prediction, uncertainty map) triples.

    ECE pools every pixel of every sample; weighted MI weights each
    sample's MI by its erroneous-pixel count, so error-free samples are
    vacuous.  A degenerate correlation (constant column, too few valid
    records) is reported as NaN with a flag rather than raised.
    """
    if config is None:
        config = EvalConfig()
    if not (len(samples) == len(predictions) == len(maps)):
        raise InputError(
            f"got {len(samples)} samples, {len(predictions)} predictions, "
            f"{len(maps)} maps"
        )
    if not samples:
        raise InputError("nothing to evaluate")

    records = []
    all_conf = []
    all_ok = []
    for i, (sample, pred, u) in enumerate(zip(samples, predictions, maps)):
        gt = sample.mask
        u = np.asarray(u, dtype=np.float64)
        dice = dice_score(pred, gt)
        err = np.asarray(pred).argmax(axis=0) != gt.argmax(axis=0)
        conf = 1.0 - u.ravel()
        ok = ~err.ravel()
        try:
            su = sample_uncertainty(u, pred)
            empty = False
        except DegenerateError:
            su = math.nan
            empty = True
        records.append(SampleRecord(
            index=i,
            dice=dice,
            sample_uncertainty=su,
            error_pixel_count=int(err.sum()),
            mi=uncertainty_error_mi(u, err, config.mi_bins),
            ece=ece(conf, ok, config.ece_bins),
            foreground_empty=empty,
        ))
        all_conf.append(conf)
        all_ok.append(ok)

    report = EvalReport(records=records, config=config)
    try:
        report.correlation = correlation_metric(records)
    except DegenerateError:
        report.correlation = math.nan
        report.correlation_degenerate = True
    report.ece = ece(np.concatenate(all_conf), np.concatenate(all_ok),
                     config.ece_bins)
    weight = float(sum(r.error_pixel_count for r in records))
    if weight == 0.0:
        report.weighted_mi = 0.0
        report.all_perfect = True
    else:
        report.weighted_mi = (
            sum(r.mi * r.error_pixel_count for r in records) / weight
        )
    return report


def save_report_json(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def save_records_csv(report: EvalReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "index", "dice", "sample_uncertainty", "error_pixel_count",
            "mi", "ece", "foreground_empty",
        ])
        for r in report.records:
            writer.writerow([
                r.index,
                f"{r.dice:.10g}",
                "" if r.foreground_empty else f"{r.sample_uncertainty:.10g}",
                r.error_pixel_count,
                f"{r.mi:.10g}",
                f"{r.ece:.10g}",
                int(r.foreground_empty),
            ])
