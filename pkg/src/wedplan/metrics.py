"""Profile error statistics and the IEC 62985 relative WED error.

Predictions are linearly resampled onto the ground-truth grid before
comparison.  The 90th percentile uses the upper-rank convention: the
sorted residual at index ceil(0.9 * (n - 1)), so for residuals 0..9 it is 9.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AlignmentError, DomainError, FormatError, VersionError
from .phantom import WedProfile

IEC_BOUND = 0.1
REPORT_VERSION = "1"
CHANNELS = ("ap", "lateral")


def align(pred: WedProfile, gt: WedProfile) -> np.ndarray:
    """Prediction resampled onto gt.z_mm, as an (n, 2) [AP, lateral] array."""
    zp, zg = pred.z_mm, gt.z_mm
    if zp.size == 0 or zg.size == 0:
        raise AlignmentError("empty profile")
    tol = 1e-9 * max(1.0, abs(zg[0]), abs(zg[-1]))
    if zg[0] < zp[0] - tol or zg[-1] > zp[-1] + tol:
        raise AlignmentError(
            f"prediction covers [{zp[0]}, {zp[-1]}] but ground truth needs [{zg[0]}, {zg[-1]}]")
    if zp.size == zg.size and np.array_equal(zp, zg):
        return pred.channels()
    return np.column_stack([np.interp(zg, zp, pred.wed_ap_mm), np.interp(zg, zp, pred.wed_l_mm)])


def relative_error(pred_values, gt_values):
    gt_values = np.asarray(gt_values, dtype=float)
    if np.any(gt_values <= 0):
        raise DomainError("ground-truth WED must be positive")
    return np.abs((np.asarray(pred_values, dtype=float) - gt_values) / gt_values)


def delta_rel(pred: WedProfile, gt: WedProfile) -> dict[str, tuple[np.ndarray, float]]:
    """Per-z relative error and its median, separately for each channel."""
    p = align(pred, gt)
    g = gt.channels()
    out = {}
    for j, name in enumerate(CHANNELS):
        values = relative_error(p[:, j], g[:, j])
        out[name] = (values, float(np.median(values)))
    return out


def upper_rank_percentile(values, q) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise DomainError("percentile of empty sample")
    return float(v[int(math.ceil(q / 100.0 * (v.size - 1) - 1e-12))])


@dataclass
class ChannelStats:
    mean_abs_mm: float
    p90_abs_mm: float
    max_abs_mm: float
    delta_rel_median: float
    residuals: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_residuals(cls, residuals, rel):
        r = np.abs(np.asarray(residuals, dtype=float))
        return cls(float(r.mean()), upper_rank_percentile(r, 90), float(r.max()), float(np.median(rel)), r)


@dataclass
class ProfileErrorReport:
    ap: ChannelStats
    lateral: ChannelStats

    def channel(self, name) -> ChannelStats:
        return getattr(self, name)

    @property
    def delta_rel_median(self) -> float:
        return max(self.ap.delta_rel_median, self.lateral.delta_rel_median)

    def passes_iec(self, bound=IEC_BOUND) -> bool:
        return self.delta_rel_median < bound


def error_report(pred: WedProfile, gt: WedProfile) -> ProfileErrorReport:
    p = align(pred, gt)
    g = gt.channels()
    stats = []
    for j in range(2):
        stats.append(ChannelStats.from_residuals(p[:, j] - g[:, j], relative_error(p[:, j], g[:, j])))
    return ProfileErrorReport(*stats)


STAT_FIELDS = ("mean_abs_mm", "p90_abs_mm", "max_abs_mm", "delta_rel_median")


def population_summary(reports: Sequence[ProfileErrorReport], bound=IEC_BOUND) -> dict:
    """Mean of every statistic per channel, plus the IEC pass rates.

    A patient passes on a channel when that channel's median relative
    error is below `bound`; `iec_pass_rate` requires both channels.
    """
    if len(reports) == 0:
        raise DomainError("no reports to summarize")
    out = {"n": len(reports)}
    for name in CHANNELS:
        chans = [r.channel(name) for r in reports]
        out[name] = {f: float(np.mean([getattr(c, f) for c in chans])) for f in STAT_FIELDS}
        out[name]["iec_pass_rate"] = float(np.mean([c.delta_rel_median < bound for c in chans]))
    out["iec_pass_rate"] = float(np.mean([r.passes_iec(bound) for r in reports]))
    return out


# --- report files ----------------------------------------------------------

CSV_COLUMNS = ["format_version", "config_hash", "patient_id", "method"] + [
    f"{c}_{f}" for c in CHANNELS for f in STAT_FIELDS]


def report_rows(patient_id: str, method: str, report: ProfileErrorReport, config_hash: str) -> dict:
    row = {"format_version": REPORT_VERSION, "config_hash": config_hash, "patient_id": patient_id, "method": method}
    for c in CHANNELS:
        stats = report.channel(c)
        for f in STAT_FIELDS:
            row[f"{c}_{f}"] = repr(float(getattr(stats, f)))
    return row


def write_report_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_report_csv(path) -> list[tuple[str, str, ProfileErrorReport, str]]:
    """Rows as (patient_id, method, report, config_hash); residual arrays are not stored."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(CSV_COLUMNS) - set(reader.fieldnames):
            raise FormatError(f"{path} is not a report CSV")
        for row in reader:
            if row["format_version"] != REPORT_VERSION:
                raise VersionError(f"{path}: report version {row['format_version']!r}, expected {REPORT_VERSION!r}")
            chans = [ChannelStats(*(float(row[f"{c}_{f}"]) for f in STAT_FIELDS)) for c in CHANNELS]
            out.append((row["patient_id"], row["method"], ProfileErrorReport(*chans), row["config_hash"]))
    return out
