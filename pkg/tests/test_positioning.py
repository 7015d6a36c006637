import csv

import numpy as np
import pytest

from wedplan.encoder import extract_features
from wedplan.errors import DomainError, ShapeError
from wedplan.phantom import PositioningTruth, patient_seeds, sample_patient
from wedplan.positioning import (SCAN_START_OFFSET_MM, PositioningConfig, PositioningEstimate, coverage_check,
                                 estimate, load_positioning, save_positioning, train_positioning,
                                 write_evaluation_csv)

from conftest import NOISE_FREE

FAST = PositioningConfig(hidden=(16,), epochs=20)


def small_set(n, seed=0):
    pts = [sample_patient(s) for s in patient_seeds(seed, n)]
    return [extract_features(p.render_depth(NOISE_FREE)) for p in pts], [p.positioning_truth() for p in pts]


def truth(top):
    return PositioningTruth(1000.0, top, top + 250.0)


def test_offset_rule_exact():
    feats, truths = small_set(6)
    model = train_positioning(feats, truths, FAST)
    for f in feats:
        est = estimate(model, f)
        assert est.scan_start_mm == est.lung_top_mm - 20.0
    assert SCAN_START_OFFSET_MM == 20.0


def test_coverage_cases():
    t = truth(300.0)
    assert coverage_check(PositioningEstimate(0.0, 315.0, 295.0), t)
    assert not coverage_check(PositioningEstimate(0.0, 325.0, 305.0), t)
    assert coverage_check(PositioningEstimate(0.0, 320.0, 300.0), t)


def test_coverage_monotone():
    rng = np.random.default_rng(0)
    t = truth(300.0)
    for err in rng.uniform(-60, 60, 500):
        raw = 300.0 + err
        if coverage_check(PositioningEstimate(0.0, raw, raw - 20.0), t):
            for smaller in np.linspace(0, err, 7) if err > 0 else [err]:
                r = 300.0 + smaller
                assert coverage_check(PositioningEstimate(0.0, r, r - 20.0), t)


def test_training_deterministic():
    feats, truths = small_set(8)
    a, b = train_positioning(feats, truths, FAST), train_positioning(feats, truths, FAST)
    assert estimate(a, feats[0]) == estimate(b, feats[0])
    assert estimate(a, feats[3]) == estimate(a, feats[3])


def test_training_errors():
    feats, truths = small_set(3)
    with pytest.raises(DomainError):
        train_positioning(feats, truths[:2], FAST)
    model = train_positioning(feats, truths, FAST)
    bad = extract_features(sample_patient(1).render_depth(NOISE_FREE), n_z=32)
    with pytest.raises(ShapeError):
        estimate(model, bad)


def test_checkpoint_and_csv(tmp_path):
    feats, truths = small_set(5)
    model = train_positioning(feats, truths, FAST)
    save_positioning(model, tmp_path / "p.json")
    back = load_positioning(tmp_path / "p.json")
    assert estimate(back, feats[2]) == estimate(model, feats[2])
    rows = [(f"p{i}", estimate(model, f), t) for i, (f, t) in enumerate(zip(feats, truths))]
    write_evaluation_csv(tmp_path / "e.csv", rows)
    with open(tmp_path / "e.csv") as fh:
        got = list(csv.DictReader(fh))
    assert len(got) == 5
    for row, (_, est, t) in zip(got, rows):
        assert float(row["lung_top_error_mm"]) == est.lung_top_mm - t.lung_top_mm
        assert int(row["covered"]) == coverage_check(est, t)


def test_held_out_accuracy(positioning_model, held_out_patients):
    iso, top = [], []
    for p in held_out_patients:
        est = estimate(positioning_model, extract_features(p.render_depth(NOISE_FREE)))
        t = p.positioning_truth()
        iso.append(abs(est.isocenter_height_mm - t.isocenter_height_mm))
        top.append(est.lung_top_mm - t.lung_top_mm)
    assert np.mean(iso) < 3.0
    assert np.all(np.isfinite(top))
