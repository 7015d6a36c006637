"""Isocenter and scan-start estimation from depth features.

Two small L1 regressors share the encoder's feature vector.  The
isocenter regressor predicts the body half-height above the estimated
table, which is added back to the table estimate.  The scan starts 20 mm
head-ward (smaller z) of the predicted lung top so that small errors
toward the feet still leave the whole lung in view.
"""

from __future__ import annotations

import dataclasses
import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import net
from .encoder import DepthFeatures, FeatureScaler, _stack
from .errors import ConfigError, DomainError, FormatError, NumericError
from .phantom import PositioningTruth

SCAN_START_OFFSET_MM = 20.0


@dataclass(frozen=True)
class PositioningConfig:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("positioning schedule values must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PositioningConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown positioning keys: {sorted(unknown)}")
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        return cls(**data)


@dataclass(frozen=True)
class PositioningEstimate:
    isocenter_height_mm: float
    lung_top_mm: float
    scan_start_mm: float


@dataclass
class PositioningModel:
    isocenter: net.Mlp
    lung_top: net.Mlp
    scaler: FeatureScaler
    # (mean, std) used to standardize each regression target
    isocenter_target: tuple[float, float]
    lung_top_target: tuple[float, float]


def _fit_regressor(xs, y, config: PositioningConfig, seed):
    rng = np.random.default_rng(seed)
    mlp = net.init_mlp([xs.shape[1], *config.hidden, 1], seed=int(rng.integers(2**31)), layernorm=False)
    opt = net.adam_init(mlp.params, lr=config.lr)
    y = y[:, None]
    n = xs.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            b = order[start:start + config.batch_size]
            out, cache = net.forward_cached(mlp, xs[b])
            loss, dout = net.l1_loss(out, y[b])
            if not np.isfinite(loss):
                raise NumericError("non-finite positioning loss", step=epoch)
            g = net.backward_cached(mlp, cache, dout, need_dx=False)
            net.adam_step(mlp.params, g.params, opt)
    return mlp


def train_positioning(features: Sequence[DepthFeatures], truths: Sequence[PositioningTruth],
                      config: PositioningConfig = PositioningConfig()) -> PositioningModel:
    config.validate()
    if len(features) == 0 or len(features) != len(truths):
        raise DomainError("need equally many features and positioning truths (at least one)")
    x = _stack(features)
    scaler = FeatureScaler.fit(x)
    xs = scaler(x)
    iso = np.array([t.isocenter_height_mm - f.table_height_mm for f, t in zip(features, truths)])
    top = np.array([t.lung_top_mm for t in truths])
    iso_stats = (float(iso.mean()), float(max(iso.std(), 1e-6)))
    top_stats = (float(top.mean()), float(max(top.std(), 1e-6)))
    iso_net = _fit_regressor(xs, (iso - iso_stats[0]) / iso_stats[1], config, config.seed)
    top_net = _fit_regressor(xs, (top - top_stats[0]) / top_stats[1], config, config.seed + 1)
    return PositioningModel(iso_net, top_net, scaler, iso_stats, top_stats)


def estimate(model: PositioningModel, features: DepthFeatures) -> PositioningEstimate:
    x = model.scaler(features.vector())
    m, s = model.isocenter_target
    iso = features.table_height_mm + m + s * float(net.forward(model.isocenter, x)[0])
    m, s = model.lung_top_target
    top = m + s * float(net.forward(model.lung_top, x)[0])
    return PositioningEstimate(iso, top, top - SCAN_START_OFFSET_MM)


def coverage_check(est: PositioningEstimate, truth: PositioningTruth) -> bool:
    """True when the offset scan start lies at or above (head-ward of) the true lung top."""
    return est.scan_start_mm <= truth.lung_top_mm


def save_positioning(model: PositioningModel, path, meta: dict | None = None) -> None:
    payload = {"scaler": model.scaler.to_dict(), "isocenter_target": list(model.isocenter_target),
               "lung_top_target": list(model.lung_top_target), "offset_mm": SCAN_START_OFFSET_MM, **(meta or {})}
    net.save_checkpoint(path, "positioning", {"isocenter": model.isocenter, "lung_top": model.lung_top}, payload)


def load_positioning(path) -> PositioningModel:
    nets, meta = net.load_checkpoint(path, kind="positioning")
    try:
        return PositioningModel(nets["isocenter"], nets["lung_top"], FeatureScaler.from_dict(meta["scaler"]),
                                tuple(meta["isocenter_target"]), tuple(meta["lung_top_target"]))
    except KeyError as exc:
        raise FormatError(f"positioning checkpoint {path} missing {exc}") from exc


def write_evaluation_csv(path, rows: Sequence[tuple[str, PositioningEstimate, PositioningTruth]]) -> None:
    """Per-patient positioning errors (estimate minus truth) and coverage."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "isocenter_error_mm", "lung_top_error_mm", "scan_start_mm", "lung_top_mm", "covered"])
        for pid, est, truth in rows:
            w.writerow([pid, repr(est.isocenter_height_mm - truth.isocenter_height_mm),
                        repr(est.lung_top_mm - truth.lung_top_mm), repr(est.scan_start_mm),
                        repr(truth.lung_top_mm), int(coverage_check(est, truth))])
