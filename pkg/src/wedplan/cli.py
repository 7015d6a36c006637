"""wedplan command-line interface.

Every command writes its artifacts into the directory given by --out,
together with run-meta.json (command, config hash, seed, format version).

Exit codes: 0 success, 2 usage, 3 data/format, 4 numeric failure,
5 scan aborted (simulate with --patient).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodecoder import decode, load_decoder, save_decoder, save_latents, train_decoder
from .config import FORMAT_VERSION, RunConfig, load_config
from .encoder import (extract_features, encode, load_baseline, load_encoder, predict_baseline, save_baseline,
                      save_encoder, train_baseline, train_encoder)
from .errors import ConfigError, FormatError, NumericError, WedPlanError
from .metrics import (CHANNELS, IEC_BOUND, REPORT_VERSION, STAT_FIELDS, error_report, population_summary, read_report_csv,
                      report_rows, write_report_csv)
from .phantom import generate_dataset, load_dataset
from .positioning import estimate, save_positioning, train_positioning, write_evaluation_csv
from .refine import Transcript, run_simulated_scan

log = logging.getLogger("wedplan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_ABORTED = 0, 2, 3, 4, 5


class UsageError(WedPlanError):
    pass


def _need(path, what: str, kind: str = "any") -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    if kind == "dir" and not p.is_dir():
        raise UsageError(f"{what} must be a directory: {p}")
    if kind == "file" and not p.is_file():
        raise UsageError(f"{what} must be a file: {p}")
    return p


def _outdir(path) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"--out must be a directory: {p}")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_meta(out: Path, command: str, cfg: RunConfig, seed: int, args: argparse.Namespace) -> None:
    inputs = {k: str(v) for k, v in sorted(vars(args).items()) if k not in ("func", "command") and v is not None}
    _write_json(out / "run-meta.json", {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "format_version": FORMAT_VERSION,
        "wedplan_version": __version__,
        "arguments": inputs,
    })


def _provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "format_version": FORMAT_VERSION}


def _paired(records, cfg: RunConfig):
    paired = records[:cfg.paired_n]
    if len(paired) < cfg.paired_n:
        log.warning("dataset has %d records, fewer than paired_n=%d", len(paired), cfg.paired_n)
    feats = [extract_features(r.depth) for r in paired]
    return paired, feats


# --- commands ----------------------------------------------------------------

def cmd_phantom_gen(args, cfg: RunConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    out = _outdir(args.out)
    generate_dataset(args.n, seed, out, cfg.population, cfg.camera, extra=_provenance(cfg))
    _write_meta(out, "phantom-gen", cfg, seed, args)
    log.info("wrote %d records to %s", args.n, out)
    return EXIT_OK


def cmd_train_decoder(args, cfg: RunConfig) -> int:
    data = _need(args.data, "dataset", "dir")
    out = _outdir(args.out)
    tc = cfg.decoder if args.seed is None else dataclasses.replace(cfg.decoder, seed=args.seed)
    records = load_dataset(data)
    result = train_decoder([r.profile for r in records], tc, ids=[r.id for r in records])
    save_decoder(result.model, out / "decoder.wedmodel.json", tc, extra=_provenance(cfg))
    save_latents(result.latents, out / "latents.json", extra=_provenance(cfg))
    _write_json(out / "history.json", {"loss": [float(v) for v in result.history]})
    _write_meta(out, "train-decoder", cfg, tc.seed, args)
    log.info("decoder trained on %d profiles; final loss %.5f", len(records), result.history[-1])
    return EXIT_OK


def cmd_train_encoder(args, cfg: RunConfig) -> int:
    data = _need(args.data, "dataset", "dir")
    decoder = load_decoder(_need(args.decoder, "decoder checkpoint", "file"))
    out = _outdir(args.out)
    ec = cfg.encoder if args.seed is None else dataclasses.replace(cfg.encoder, seed=args.seed)
    paired, feats = _paired(load_dataset(data), cfg)
    result = train_encoder(feats, [r.profile for r in paired], decoder, ec)
    save_encoder(result.model, out / "encoder.wedmodel.json", _provenance(cfg))
    _write_meta(out, "train-encoder", cfg, ec.seed, args)
    return EXIT_OK


def cmd_train_baseline(args, cfg: RunConfig) -> int:
    data = _need(args.data, "dataset", "dir")
    out = _outdir(args.out)
    bc = cfg.baseline if args.seed is None else dataclasses.replace(cfg.baseline, seed=args.seed)
    paired, feats = _paired(load_dataset(data), cfg)
    model = train_baseline(feats, [r.profile for r in paired], bc)
    save_baseline(model, out / "baseline.wedmodel.json", _provenance(cfg))
    _write_meta(out, "train-baseline", cfg, bc.seed, args)
    return EXIT_OK


def cmd_train_positioning(args, cfg: RunConfig) -> int:
    data = _need(args.data, "dataset", "dir")
    out = _outdir(args.out)
    pc = cfg.positioning if args.seed is None else dataclasses.replace(cfg.positioning, seed=args.seed)
    paired, feats = _paired(load_dataset(data), cfg)
    model = train_positioning(feats, [r.truth for r in paired], pc)
    save_positioning(model, out / "positioning.wedmodel.json", _provenance(cfg))
    if args.eval_data is not None:
        held = load_dataset(_need(args.eval_data, "evaluation dataset", "dir"))
        rows = [(r.id, estimate(model, extract_features(r.depth)), r.truth) for r in held]
        write_evaluation_csv(out / "positioning_eval.csv", rows)
        err = np.abs([e.isocenter_height_mm - t.isocenter_height_mm for _, e, t in rows])
        log.info("isocenter MAE %.2f mm on %d patients", err.mean(), len(rows))
    _write_meta(out, "train-positioning", cfg, pc.seed, args)
    return EXIT_OK


def _method_name(prefix: str, w: float) -> str:
    return f"{prefix}_w{w:g}"


def cmd_simulate(args, cfg: RunConfig) -> int:
    data = _need(args.data, "dataset", "dir")
    decoder = load_decoder(_need(args.decoder, "decoder checkpoint", "file"))
    encoder = load_encoder(_need(args.encoder, "encoder checkpoint", "file"))
    baseline = load_baseline(_need(args.baseline, "baseline checkpoint", "file")) if args.baseline else None
    out = _outdir(args.out)
    sessions = out / "sessions"
    sessions.mkdir(exist_ok=True)

    records = load_dataset(data, limit=args.limit)
    if args.patient is not None:
        records = [r for r in records if r.id == args.patient]
        if not records:
            raise UsageError(f"patient {args.patient!r} not in {data}")
    windows = args.w or [cfg.refine.window_mm]
    if any(w <= 0 for w in windows):
        raise UsageError("--w values must be positive")
    refine_cfgs = {w: dataclasses.replace(cfg.refine, window_mm=w, **({} if args.tau is None else {"tau": args.tau}))
                   for w in windows}
    for rc in refine_cfgs.values():
        rc.validate()
    h = cfg.config_hash()

    rows, status_rows, aborted = [], [], False
    for rec in records:
        feats = extract_features(rec.depth)
        gt = rec.profile
        z0 = encode(encoder, feats)
        if baseline is not None:
            rows.append(report_rows(rec.id, "baseline", error_report(predict_baseline(baseline, feats, gt.z_mm), gt), h))
        rows.append(report_rows(rec.id, "initial", error_report(decode(decoder, z0, gt.z_mm), gt), h))
        for w, rc in refine_cfgs.items():
            t = run_simulated_scan(decoder, gt, z0, rc, patient_id=rec.id, meta=_provenance(cfg))
            t.write(sessions / f"{rec.id}_w{w:g}.jsonl")
            rows.append(report_rows(rec.id, _method_name("refined", w), error_report(t.prospective_prediction(), gt), h))
            rows.append(report_rows(rec.id, _method_name("final", w), error_report(t.final_prediction, gt), h))
            status_rows.append([rec.id, f"{w:g}", t.status.value, len(t.windows)])
            aborted |= t.aborted
            if t.aborted:
                log.warning("%s w=%g aborted: %s", rec.id, w, t.abort_reason)

    write_report_csv(out / "reports.csv", rows)
    with open(out / "sessions.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["format_version", "config_hash", "patient_id", "window_mm", "status", "windows"])
        wr.writerows([[REPORT_VERSION, h, *r] for r in status_rows])
    _write_meta(out, "simulate", cfg, cfg.seed, args)
    if args.patient is not None and aborted:
        return EXIT_ABORTED
    return EXIT_OK


def aggregate_reports(paths, bound: float = IEC_BOUND) -> dict:
    """Per-method population summary over one or more report CSVs."""
    by_method: dict[str, list] = {}
    hashes = set()
    for p in paths:
        for pid, method, report, config_hash in read_report_csv(p):
            by_method.setdefault(method, []).append(report)
            hashes.add(config_hash)
    if not by_method:
        raise UsageError("no report rows found")
    if len(hashes) > 1:
        raise FormatError(f"reports come from different configurations: {sorted(hashes)}")
    return {
        "format_version": REPORT_VERSION,
        "config_hash": hashes.pop(),
        "iec_bound": bound,
        "methods": {m: population_summary(r, bound) for m, r in by_method.items()},
    }


def cmd_evaluate(args, cfg: RunConfig) -> int:
    paths = [_need(p, "report CSV", "file") for p in args.reports]
    out = _outdir(args.out)
    agg = aggregate_reports(paths, cfg.metrics.iec_bound)
    _write_json(out / "aggregate.json", agg)
    with open(out / "table.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["format_version", "config_hash", "method", "n", "channel", *STAT_FIELDS, "iec_pass_rate",
                     "iec_pass_rate_both"])
        for method, s in agg["methods"].items():
            for c in CHANNELS:
                wr.writerow([agg["format_version"], agg["config_hash"], method, s["n"], c,
                             *(repr(s[c][f]) for f in STAT_FIELDS), repr(s[c]["iec_pass_rate"]),
                             repr(s["iec_pass_rate"])])
    _write_meta(out, "evaluate", cfg, cfg.seed, args)
    for method, s in agg["methods"].items():
        print(f"{method:>14}  lateral {s['lateral']['mean_abs_mm']:7.2f} mm  AP {s['ap']['mean_abs_mm']:7.2f} mm  "
              f"IEC pass {s['iec_pass_rate']:.3f}")
    return EXIT_OK


def plot_rows(t: Transcript) -> list[list]:
    gt = t.truth
    init = t.initial_prediction.channels()
    refined = t.prospective_prediction().channels()
    final = t.final_prediction.channels() if t.final_prediction is not None else np.full_like(init, np.nan)
    rows = []
    for i, z in enumerate(gt.z_mm):
        rows.append([repr(float(z)), repr(float(gt.wed_ap_mm[i])), repr(float(gt.wed_l_mm[i])),
                     repr(float(init[i, 0])), repr(float(init[i, 1])),
                     repr(float(refined[i, 0])), repr(float(refined[i, 1])),
                     repr(float(final[i, 0])), repr(float(final[i, 1]))])
    return rows


PLOT_COLUMNS = ["z_mm", "gt_ap_mm", "gt_lateral_mm", "initial_ap_mm", "initial_lateral_mm",
                "refined_ap_mm", "refined_lateral_mm", "final_ap_mm", "final_lateral_mm"]


def cmd_plot_data(args, cfg: RunConfig) -> int:
    t = Transcript.read(_need(args.session_log, "session log", "file"))
    out = _outdir(args.out)
    h = t.meta.get("config_hash", "")
    with open(out / f"{t.patient_id or 'session'}_profile.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["format_version", "config_hash", *PLOT_COLUMNS])
        wr.writerows([[REPORT_VERSION, h, *r] for r in plot_rows(t)])
    _write_meta(out, "plot-data", cfg, cfg.seed, args)
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wedplan", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("phantom-gen", cmd_phantom_gen, "generate a synthetic patient dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)

    p = add("train-decoder", cmd_train_decoder, "train the auto-decoder on CT profiles")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)

    p = add("train-encoder", cmd_train_encoder, "train the depth encoder against a frozen decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--seed", type=int)

    p = add("train-baseline", cmd_train_baseline, "train the direct-regression baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)

    p = add("train-positioning", cmd_train_positioning, "train isocenter and scan-start regressors")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="held-out dataset for a per-patient error CSV")
    p.add_argument("--seed", type=int)

    p = add("simulate", cmd_simulate, "run simulated scans with streaming refinement")
    p.add_argument("--data", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--baseline", help="optional baseline checkpoint to report alongside")
    p.add_argument("--w", type=float, action="append", help="window length in mm (repeatable)")
    p.add_argument("--tau", type=float, help="abort threshold (overrides config)")
    p.add_argument("--limit", type=int, help="use only the first N records")
    p.add_argument("--patient", help="single-patient mode; exit code 5 if the scan aborts")

    p = add("evaluate", cmd_evaluate, "aggregate report CSVs into summary JSON and a table")
    p.add_argument("--reports", nargs="+", required=True)

    p = add("plot-data", cmd_plot_data, "per-z CSV of ground truth vs initial vs refined prediction")
    p.add_argument("--session-log", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            _need(args.config, "config file", "file")
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"wedplan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"wedplan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WedPlanError, ValueError, OSError) as exc:
        print(f"wedplan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
