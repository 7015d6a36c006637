"""Acceptance criteria.  Each test logs one pass/fail line via record_criterion."""

import json
import time

import numpy as np

from wedplan.autodecoder import decode, fit_latent
from wedplan.encoder import encode, extract_features, predict_baseline
from wedplan.metrics import delta_rel, error_report
from wedplan.phantom import WedProfile, patient_seeds, sample_patient
from wedplan.positioning import coverage_check, estimate
from wedplan.refine import RefineConfig, Status, run_simulated_scan

from conftest import ANOMALY_SEED, NOISE_FREE
from gradcheck import check_gradients, random_net
from oracles import sorted_median


def test_criterion_1_gradients(record_criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for _ in range(120):
        m = random_net(rng, max_layers=4, max_width=16)
        x = rng.normal(size=(3, m.in_dim))
        up = rng.normal(size=(3, m.out_dim))
        worst = max(worst, check_gradients(m, x, up, h=1e-5))
        n += 1
    secs = time.perf_counter() - t0
    record_criterion(1, "gradient correctness", n >= 100 and worst <= 1e-4 and secs < 60,
                     f"{n} nets, worst relative gap {worst:.2e}, {secs:.1f}s")


def test_criterion_2_reconstruction(record_criterion, trained_decoder, held_out_patients):
    result, train_secs = trained_decoder
    model = result.model
    t0 = time.perf_counter()
    medians = []
    for p in held_out_patients:
        gt = p.lung_profile()
        lat, _ = fit_latent(model, gt, np.zeros(model.latent_dim), steps=300)
        d = delta_rel(decode(model, lat, gt.z_mm), gt)
        medians.append(max(d["ap"][1], d["lateral"][1]))
    secs = train_secs + time.perf_counter() - t0
    frac = float(np.mean(np.array(medians) < 0.1))
    record_criterion(2, "auto-decoder reconstruction", len(medians) == 100 and frac >= 0.95 and secs < 600,
                     f"{frac:.2f} of 100 below 0.1, worst {max(medians):.3f}, {secs:.0f}s")


def method_errors(decoder, encoder, baseline, patients):
    """Mean absolute lateral and AP error per method over the patients."""
    errs = {k: [] for k in ("baseline", "initial", "refined_w50", "refined_w20")}
    for p in patients:
        gt = p.lung_profile()
        feats = extract_features(p.render_depth())
        lat = encode(encoder, feats)
        errs["baseline"].append(error_report(predict_baseline(baseline, feats, gt.z_mm), gt))
        errs["initial"].append(error_report(decode(decoder, lat, gt.z_mm), gt))
        for w in (50, 20):
            t = run_simulated_scan(decoder, gt, lat, RefineConfig(window_mm=float(w)))
            errs[f"refined_w{w}"].append(error_report(t.prospective_prediction(), gt))
    return {k: (float(np.mean([r.lateral.mean_abs_mm for r in v])), float(np.mean([r.ap.mean_abs_mm for r in v])))
            for k, v in errs.items()}


def test_criterion_3_method_ordering(record_criterion, trained_decoder, paired_models, held_out_patients):
    encoder, baseline = paired_models
    means = method_errors(trained_decoder[0].model, encoder, baseline, held_out_patients)
    order = ["baseline", "initial", "refined_w50", "refined_w20"]
    gaps = [(means[a][c] - means[b][c]) / means[a][c] for a, b in zip(order, order[1:]) for c in (0, 1)]
    detail = "; ".join(f"{k} lat {means[k][0]:.2f} ap {means[k][1]:.2f}" for k in order)
    record_criterion(3, "method ordering", min(gaps) >= 0.05, f"{detail}; smallest gap {min(gaps):.3f}")


def test_criterion_4_fixed_point(record_criterion, trained_decoder, held_out_patients):
    model = trained_decoder[0].model
    worst, aborted, changed = 0.0, 0, 0
    for p in held_out_patients[:10]:
        gt = p.lung_profile()
        lat, _ = fit_latent(model, gt, np.zeros(model.latent_dim), steps=100)
        truth = decode(model, lat, gt.z_mm)
        t = run_simulated_scan(model, truth, lat, RefineConfig())
        worst = max(worst, float(np.max(np.abs(t.final_latent - lat))))
        aborted += t.aborted
        changed += not np.array_equal(t.final_prediction.channels(), t.initial_prediction.channels())
    record_criterion(4, "refinement fixed point", worst <= 1e-9 and aborted == 0 and changed == 0,
                     f"max latent change {worst:.1e}, {aborted} aborts, {changed} changed predictions")


def with_anomaly(gt, start, length=100.0, factor=1.3):
    f = np.where((gt.z_mm >= start) & (gt.z_mm < start + length), factor, 1.0)
    return WedProfile(gt.z_mm, gt.wed_ap_mm * f, gt.wed_l_mm * f)


def test_criterion_5_abort_detection(record_criterion, trained_decoder, paired_models):
    decoder = trained_decoder[0].model
    encoder, _ = paired_models
    cfg = RefineConfig()
    rng = np.random.default_rng(ANOMALY_SEED)
    detected = false_aborts = 0
    for s in patient_seeds(ANOMALY_SEED, 50):
        p = sample_patient(s)
        gt = p.lung_profile()
        lat = encode(encoder, extract_features(p.render_depth()))
        start = rng.uniform(gt.z_mm[0], gt.z_mm[-1] - 100.0)
        detected += run_simulated_scan(decoder, with_anomaly(gt, start), lat, cfg).status is Status.ABORTED
        false_aborts += run_simulated_scan(decoder, gt, lat, cfg).status is Status.ABORTED
    rate, false_rate = detected / 50, false_aborts / 50
    record_criterion(5, "abort detection", rate >= 0.9 and false_rate <= 0.05,
                     f"detected {rate:.2f}, false aborts {false_rate:.2f} (tau {cfg.tau}, patience {cfg.patience})")


def test_criterion_6_iec_metric(record_criterion):
    z = np.arange(5.0)
    same = WedProfile(z, np.full(5, 100.0), np.full(5, 100.0))
    more = WedProfile(z, np.full(5, 110.0), np.full(5, 110.0))
    exact = delta_rel(same, same)["ap"][1] == 0.0 and delta_rel(more, same)["lateral"][1] == 0.1
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        zz = np.arange(float(n))
        gt = WedProfile(zz, rng.uniform(50, 400, n), rng.uniform(50, 400, n))
        pred = WedProfile(zz, rng.uniform(50, 400, n), rng.uniform(50, 400, n))
        d = delta_rel(pred, gt)
        for name, pv, gv in (("ap", pred.wed_ap_mm, gt.wed_ap_mm), ("lateral", pred.wed_l_mm, gt.wed_l_mm)):
            mismatches += d[name][1] != sorted_median([abs(a - b) / b for a, b in zip(pv, gv)])
    record_criterion(6, "IEC metric exactness", exact and mismatches == 0,
                     f"unit cases {'exact' if exact else 'WRONG'}, {mismatches} oracle mismatches over 1000 profiles")


def test_criterion_7_positioning(record_criterion, positioning_model, held_out_patients):
    offsets_exact, iso_err, covered = True, [], 0
    for p in held_out_patients:
        est = estimate(positioning_model, extract_features(p.render_depth(NOISE_FREE)))
        truth = p.positioning_truth()
        offsets_exact &= est.scan_start_mm == est.lung_top_mm - 20.0
        iso_err.append(abs(est.isocenter_height_mm - truth.isocenter_height_mm))
        covered += coverage_check(est, truth)
    mae, rate = float(np.mean(iso_err)), covered / len(held_out_patients)
    record_criterion(7, "positioning", offsets_exact and mae < 3.0 and rate == 1.0,
                     f"offset {'exact' if offsets_exact else 'WRONG'}, isocenter MAE {mae:.2f} mm, coverage {rate:.2f}")


def test_criterion_8_determinism(record_criterion, cli_runs):
    a, b = (r / "eval/aggregate.json" for r in cli_runs)
    same = a.read_bytes() == b.read_bytes()
    rate = json.loads(a.read_text())["methods"]["refined_w20"]["iec_pass_rate"]
    record_criterion(8, "pipeline determinism", same,
                     f"aggregate.json {'identical' if same else 'differs'} across two runs, refined_w20 IEC pass {rate:.2f}")
