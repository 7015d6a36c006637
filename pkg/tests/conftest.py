import time

import numpy as np
import pytest

from wedplan.cli import main as cli_main
from wedplan.autodecoder import TrainConfig, train_decoder
from wedplan.encoder import BaselineConfig, EncoderConfig, extract_features, train_baseline, train_encoder
from wedplan.phantom import CameraConfig, sample_patient, patient_seeds
from wedplan.positioning import train_positioning

# Seeds for the shared synthetic populations.  Training and held-out
# patients come from different master seeds so they never overlap.
TRAIN_SEED = 0
HELD_OUT_SEED = 1
ANOMALY_SEED = 2
PAIRED_N = 50
NOISE_FREE = CameraConfig(noise_sigma_mm=0.0)

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


SLOW_FIXTURES = {"train_patients", "held_out_patients", "trained_decoder", "paired_models", "positioning_model",
                 "cli_runs"}


def pytest_collection_modifyitems(config, items):
    for item in items:
        if SLOW_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion(request):
    """Log one pass/fail line per acceptance criterion, then assert it."""
    lines = request.config.stash[ACCEPTANCE]

    def record(number: int, title: str, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
        print(line)
        lines.append(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def train_patients():
    return [sample_patient(s) for s in patient_seeds(TRAIN_SEED, 400)]


@pytest.fixture(scope="session")
def held_out_patients():
    return [sample_patient(s) for s in patient_seeds(HELD_OUT_SEED, 100)]


@pytest.fixture(scope="session")
def trained_decoder(train_patients):
    """Default-config decoder on 400 patients; also returns wall time."""
    t0 = time.perf_counter()
    result = train_decoder([p.lung_profile() for p in train_patients], TrainConfig(),
                           ids=[f"p{i:05d}" for i in range(len(train_patients))])
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def paired_models(train_patients, trained_decoder):
    """Encoder and baseline trained on the first PAIRED_N patients' noisy depth."""
    decoder = trained_decoder[0].model
    paired = train_patients[:PAIRED_N]
    feats = [extract_features(p.render_depth()) for p in paired]
    profiles = [p.lung_profile() for p in paired]
    encoder = train_encoder(feats, profiles, decoder, EncoderConfig()).model
    baseline = train_baseline(feats, profiles, BaselineConfig())
    return encoder, baseline


@pytest.fixture(scope="session")
def positioning_model(train_patients):
    """Positioning regressors on 200 noise-free training patients."""
    pts = train_patients[:200]
    feats = [extract_features(p.render_depth(NOISE_FREE)) for p in pts]
    return train_positioning(feats, [p.positioning_truth() for p in pts])


def run_pipeline(root):
    """Full CLI workflow on 50 training and 50 held-out patients; returns the output root."""
    steps = [
        ["phantom-gen", "--n", "50", "--seed", "0", "--out", root / "train"],
        ["phantom-gen", "--n", "50", "--seed", "1", "--out", root / "test"],
        ["train-decoder", "--data", root / "train", "--out", root / "models"],
        ["train-encoder", "--data", root / "train", "--decoder", root / "models/decoder.wedmodel.json",
         "--out", root / "models"],
        ["train-baseline", "--data", root / "train", "--out", root / "models"],
        ["train-positioning", "--data", root / "train", "--eval-data", root / "test", "--out", root / "models"],
        ["simulate", "--data", root / "test", "--decoder", root / "models/decoder.wedmodel.json",
         "--encoder", root / "models/encoder.wedmodel.json", "--baseline", root / "models/baseline.wedmodel.json",
         "--w", "50", "--w", "20", "--out", root / "sim"],
        ["evaluate", "--reports", root / "sim/reports.csv", "--out", root / "eval"],
    ]
    for argv in steps:
        code = cli_main([str(a) for a in argv])
        assert code == 0, f"{argv[0]} exited with {code}"
    return root


@pytest.fixture(scope="session")
def cli_runs(tmp_path_factory):
    """Two independent runs of the CLI pipeline with the same seeds."""
    return [run_pipeline(tmp_path_factory.mktemp(f"run{i}")) for i in range(2)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
