import csv
import json

import numpy as np
import pytest

from wedplan.autodecoder import DecoderModel, fit_latent, load_decoder, save_decoder
from wedplan.cli import EXIT_ABORTED, EXIT_DATA, EXIT_OK, EXIT_USAGE, aggregate_reports, main
from wedplan.config import RunConfig
from wedplan.encoder import encode, extract_features, load_encoder
from wedplan.errors import FormatError, VersionError
from wedplan.metrics import error_report, read_report_csv, report_rows, write_report_csv
from wedplan.net import init_mlp
from wedplan.phantom import generate_dataset, load_dataset, sample_patient
from wedplan.refine import Transcript


def run(*argv):
    return main([str(a) for a in argv])


def test_missing_inputs_are_usage_errors(tmp_path, capsys):
    assert run("train-decoder", "--data", tmp_path / "nope", "--out", tmp_path / "o") == EXIT_USAGE
    assert "dataset not found" in capsys.readouterr().err
    assert run("phantom-gen", "--n", "0", "--out", tmp_path / "o") == EXIT_USAGE
    assert run("phantom-gen", "--n", "2", "--config", tmp_path / "c.yaml", "--out", tmp_path / "o") == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["simulate", "--out", str(tmp_path)])


def test_phantom_gen_writes_meta(tmp_path):
    assert run("phantom-gen", "--n", "3", "--seed", "4", "--out", tmp_path) == EXIT_OK
    meta = json.loads((tmp_path / "run-meta.json").read_text())
    assert meta["seed"] == 4 and meta["config_hash"] == RunConfig().config_hash()
    assert meta["command"] == "phantom-gen" and meta["format_version"] == "1"
    assert len(load_dataset(tmp_path)) == 3


def test_config_version_mismatch_is_data_error(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("format_version: '7'\n")
    assert run("phantom-gen", "--n", "1", "--config", cfg, "--out", tmp_path / "o") == EXIT_DATA


def test_checkpoint_version_mismatch(tmp_path):
    generate_dataset(2, 0, tmp_path / "d")
    ckpt = tmp_path / "dec.json"
    save_decoder(DecoderModel(init_mlp([5, 4, 2], seed=0), 4, 400.0, 150.0), ckpt)
    payload = json.loads(ckpt.read_text())
    payload["version"] = "999"
    ckpt.write_text(json.dumps(payload))
    code = run("train-encoder", "--data", tmp_path / "d", "--decoder", ckpt, "--out", tmp_path / "o")
    assert code == EXIT_DATA


def reports_file(path, config_hash, version="1"):
    gt = sample_patient(0).lung_profile(5.0)
    row = report_rows("p1", "initial", error_report(gt, gt), config_hash)
    row["format_version"] = version
    write_report_csv(path, [row])
    return path


def test_evaluate_rejects_mixed_inputs(tmp_path):
    a = reports_file(tmp_path / "a.csv", "h1")
    b = reports_file(tmp_path / "b.csv", "h2")
    with pytest.raises(FormatError):
        aggregate_reports([a, b])
    assert run("evaluate", "--reports", a, b, "--out", tmp_path / "e") == EXIT_DATA
    c = reports_file(tmp_path / "c.csv", "h1", version="2")
    with pytest.raises(VersionError):
        aggregate_reports([a, c])
    assert run("evaluate", "--reports", a, c, "--out", tmp_path / "e") == EXIT_DATA
    assert run("evaluate", "--reports", a, tmp_path / "a.csv", "--out", tmp_path / "e") == EXIT_OK


# --- checks on the shared two-run pipeline ---------------------------------

def test_pipeline_artifacts_carry_provenance(cli_runs):
    root = cli_runs[0]
    h = RunConfig().config_hash()
    for sub in ("train", "models", "sim", "eval"):
        assert json.loads((root / sub / "run-meta.json").read_text())["config_hash"] == h
    assert json.loads((root / "train/manifest.json").read_text())["config_hash"] == h
    assert all(r[3] == h for r in read_report_csv(root / "sim/reports.csv"))
    with open(root / "sim/sessions.csv") as fh:
        assert all(row["config_hash"] == h for row in csv.DictReader(fh))
    with open(root / "eval/table.csv") as fh:
        assert all(row["config_hash"] == h and row["format_version"] == "1" for row in csv.DictReader(fh))
    assert (root / "models/positioning_eval.csv").exists()


def test_pipeline_iec_pass_rate(cli_runs):
    agg = json.loads((cli_runs[0] / "eval/aggregate.json").read_text())
    assert set(agg["methods"]) >= {"baseline", "initial", "refined_w50", "refined_w20", "final_w20"}
    assert agg["methods"]["refined_w20"]["n"] == 50
    assert agg["methods"]["refined_w20"]["iec_pass_rate"] >= 0.95


def test_plot_data(cli_runs, tmp_path):
    log = sorted((cli_runs[0] / "sim/sessions").glob("*_w20.jsonl"))[0]
    assert run("plot-data", "--session-log", log, "--out", tmp_path) == EXIT_OK
    t = Transcript.read(log)
    (csv_path,) = tmp_path.glob("*_profile.csv")
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(t.truth)
    assert float(rows[0]["gt_ap_mm"]) == t.truth.wed_ap_mm[0]
    assert float(rows[-1]["initial_lateral_mm"]) == t.initial_prediction.wed_l_mm[-1]
    assert rows[0]["config_hash"] == RunConfig().config_hash()


def test_window_longer_than_scan_is_single_fit(cli_runs, tmp_path):
    root = cli_runs[0]
    code = run("simulate", "--data", root / "test", "--decoder", root / "models/decoder.wedmodel.json",
               "--encoder", root / "models/encoder.wedmodel.json", "--w", "5000", "--limit", "2", "--out", tmp_path)
    assert code == EXIT_OK
    decoder = load_decoder(root / "models/decoder.wedmodel.json")
    encoder = load_encoder(root / "models/encoder.wedmodel.json")
    rc = RunConfig().refine
    for rec in load_dataset(root / "test", limit=2):
        t = Transcript.read(tmp_path / "sessions" / f"{rec.id}_w5000.jsonl")
        assert len(t.windows) == 1
        want, _ = fit_latent(decoder, rec.profile, encode(encoder, extract_features(rec.depth)),
                             steps=rc.steps, lr=rc.lr, latent_l2=rc.latent_l2)
        assert np.array_equal(t.final_latent, want)


def test_single_patient_abort_exit_code(cli_runs, tmp_path):
    root = cli_runs[0]
    common = ["--decoder", root / "models/decoder.wedmodel.json", "--encoder", root / "models/encoder.wedmodel.json"]
    pid = load_dataset(root / "test", limit=1)[0].id
    assert run("simulate", "--data", root / "test", *common, "--patient", pid, "--tau", "1e-6",
               "--out", tmp_path / "a") == EXIT_ABORTED
    assert run("simulate", "--data", root / "test", *common, "--patient", "nobody", "--out", tmp_path / "b") == EXIT_USAGE
