"""Streaming latent refinement during the scan.

A ScanSession starts from an encoder-predicted latent.  Each time the
table has advanced by one window, the ground-truth WED measured over that
window is ingested: the latent is re-fitted (decoder frozen) against every
sample observed so far, the not-yet-scanned remainder is re-predicted, and
the post-fit relative residual feeds the abort rule.

By default that residual is the median over the newest window only: the
L1 refit always follows the majority of the observations, so a median over
everything seen so far stays small until a defect covers more than half
the scan.  Optionally (confirm_steps > 0) a residual above the threshold
is confirmed first by restarting the fit from the initial latent and from
zero and keeping the best fit.  That suppresses aborts caused by a warm
start stuck in a poor basin, at the price of absorbing some real defects,
so it is off by default.

Windows are half-open [z_start, z_end) except the last, which includes
the scan end.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from .autodecoder import DecoderModel, decode, fit_latent
from .errors import ConfigError, DomainError, FormatError, ProtocolError, StateError, VersionError
from .metrics import relative_error
from .phantom import PhantomPatient, WedProfile

SESSION_LOG_VERSION = "1"


class Status(str, Enum):
    ACTIVE = "active"
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class RefineConfig:
    window_mm: float = 20.0
    steps: int = 50
    lr: float = 5e-2
    latent_l2: float = 1e-4
    tau: float = 0.1
    patience: int = 2
    # residual measured over the newest window ("window") or all observations so far ("observed")
    abort_scope: str = "window"
    # steps for the restarted fits run before a window may count toward an
    # abort (0 disables the confirmation)
    confirm_steps: int = 0
    spacing_mm: float = 1.0

    def validate(self) -> None:
        if not self.window_mm > 0 or not self.spacing_mm > 0:
            raise ConfigError("window_mm and spacing_mm must be positive")
        if self.steps < 0 or self.confirm_steps < 0 or self.lr <= 0 or self.latent_l2 < 0:
            raise ConfigError("invalid optimizer settings")
        if self.tau < 0 or self.patience < 1:
            raise ConfigError("tau must be >= 0 and patience >= 1")
        if self.abort_scope not in ("observed", "window"):
            raise ConfigError(f"unknown abort_scope {self.abort_scope!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "RefineConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown refine keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ScanWindow:
    z_start_mm: float
    z_end_mm: float
    profile: WedProfile


@dataclass(frozen=True)
class AbortDecision:
    triggered: bool
    residual: float
    threshold: float
    consecutive: int


def uniform_grid(start, end, spacing):
    n = int(math.floor((end - start) / spacing + 1e-9)) + 1
    return start + spacing * np.arange(n)


def _empty_profile():
    return WedProfile(np.empty(0), np.empty(0), np.empty(0))


def abort_residual(pred: np.ndarray, observed: WedProfile) -> float:
    """Larger of the per-channel median relative errors."""
    gt = observed.channels()
    return float(max(np.median(relative_error(pred[:, j], gt[:, j])) for j in range(2)))


class ScanSession:
    """Single-consumer state machine; calls must be serialized per session."""

    def __init__(self, decoder: DecoderModel, initial_latent, scan_start_mm: float, scan_end_mm: float,
                 config: RefineConfig = RefineConfig()):
        config.validate()
        if not scan_end_mm > scan_start_mm:
            raise DomainError("scan range has zero length")
        lo, hi = decoder.z_domain_mm()
        if scan_start_mm < lo or scan_end_mm > hi:
            raise DomainError(f"scan range [{scan_start_mm}, {scan_end_mm}] outside decoder domain [{lo}, {hi}]")
        self.decoder = decoder
        self.config = config
        self.scan_start_mm = float(scan_start_mm)
        self.scan_end_mm = float(scan_end_mm)
        self.initial_latent = np.array(initial_latent, dtype=float)
        self.latent = self.initial_latent.copy()
        self.z_grid = uniform_grid(self.scan_start_mm, self.scan_end_mm, config.spacing_mm)
        self.initial_prediction = decode(decoder, self.latent, self.z_grid)
        self.status = Status.ACTIVE
        self.abort_reason: str | None = None
        self.windows: list[ScanWindow] = []
        self._consecutive = 0
        self._next_start = self.scan_start_mm
        self._last_z = -np.inf

    def prediction(self) -> WedProfile:
        return decode(self.decoder, self.latent, self.z_grid)

    def observed(self) -> WedProfile:
        if not self.windows:
            return _empty_profile()
        return WedProfile(*(np.concatenate([getattr(w.profile, f) for w in self.windows])
                            for f in ("z_mm", "wed_ap_mm", "wed_l_mm")))

    def remaining_grid(self) -> np.ndarray:
        return self.z_grid[self.z_grid > self._last_z]

    def _check_window(self, window: ScanWindow):
        tol = 1e-6
        z = window.profile.z_mm
        if abs(window.z_start_mm - self._next_start) > tol:
            raise ProtocolError(f"window starts at {window.z_start_mm}, expected {self._next_start}")
        if window.z_end_mm <= window.z_start_mm:
            raise ProtocolError("window has non-positive length")
        if window.z_end_mm > self.scan_end_mm + tol:
            raise ProtocolError("window extends past the scan end")
        if window.z_end_mm < self.scan_end_mm - tol and abs(window.z_end_mm - window.z_start_mm - self.config.window_mm) > tol:
            raise ProtocolError(f"window length differs from configured {self.config.window_mm} mm")
        if z.size == 0:
            raise ProtocolError("window carries no samples")
        window.profile.validate()
        if z[0] <= self._last_z:
            raise ProtocolError("window overlaps previously observed samples")
        if z[0] < window.z_start_mm - tol or z[-1] > window.z_end_mm + tol:
            raise ProtocolError("window samples fall outside its z range")

    def ingest_window(self, window: ScanWindow) -> tuple[WedProfile, AbortDecision]:
        """Refit on everything observed so far; returns the remaining prediction and abort verdict."""
        if self.status is not Status.ACTIVE:
            raise StateError(f"session is {self.status.value}")
        self._check_window(window)
        self.windows.append(window)
        self._next_start = window.z_end_mm
        self._last_z = float(window.profile.z_mm[-1])
        cfg = self.config

        observed = self.observed()
        self.latent, self.last_fit_residual_mm = fit_latent(
            self.decoder, observed, self.latent, steps=cfg.steps, lr=cfg.lr, latent_l2=cfg.latent_l2)
        scope = observed if cfg.abort_scope == "observed" else window.profile
        residual = abort_residual(decode(self.decoder, self.latent, scope.z_mm).channels(), scope)
        if residual > cfg.tau and cfg.confirm_steps > 0:
            # the warm start may be stuck; look harder for a latent that
            # explains the data before treating the window as a deviation
            for start in (self.initial_latent, np.zeros_like(self.latent)):
                lat, r_mm = fit_latent(self.decoder, observed, start, steps=cfg.confirm_steps, lr=cfg.lr,
                                       latent_l2=cfg.latent_l2)
                if r_mm < self.last_fit_residual_mm:
                    self.latent, self.last_fit_residual_mm = lat, r_mm
            residual = abort_residual(decode(self.decoder, self.latent, scope.z_mm).channels(), scope)

        self._consecutive = self._consecutive + 1 if residual > cfg.tau else 0
        decision = AbortDecision(self._consecutive >= cfg.patience, residual, cfg.tau, self._consecutive)
        if decision.triggered:
            self.status = Status.ABORTED
            self.abort_reason = (f"median relative residual {residual:.4f} above {cfg.tau} "
                                 f"for {self._consecutive} consecutive windows")
        elif window.z_end_mm >= self.scan_end_mm - 1e-6:
            self.status = Status.COMPLETED

        rest = self.remaining_grid()
        remaining = decode(self.decoder, self.latent, rest) if rest.size else _empty_profile()
        return remaining, decision


def start_session(decoder: DecoderModel, initial_latent, scan_range, config: RefineConfig = RefineConfig()) -> ScanSession:
    start, end = scan_range
    return ScanSession(decoder, initial_latent, start, end, config)


def slice_windows(truth: WedProfile, window_mm: float, start=None, end=None) -> list[ScanWindow]:
    z = truth.z_mm
    start = float(z[0]) if start is None else start
    end = float(z[-1]) if end is None else end
    windows = []
    ws = start
    while ws < end - 1e-9:
        we = min(ws + window_mm, end)
        last = we >= end - 1e-9
        mask = (z >= ws - 1e-9) & ((z <= we + 1e-9) if last else (z < we - 1e-9))
        if mask.any():
            windows.append(ScanWindow(ws, we, truth.select(mask)))
        ws = we
    return windows


# --- transcripts -----------------------------------------------------------

def checksum(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass
class WindowRecord:
    window_index: int
    z_range: tuple[float, float]
    residual: float
    residual_mm: float
    aborted: bool
    latent_norm: float
    prediction_checksum: str
    prediction_z_mm: list
    prediction: list  # rows of [AP, lateral] for the not-yet-scanned z

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["z_range"] = list(self.z_range)
        return d


@dataclass
class Transcript:
    patient_id: str
    config: RefineConfig
    truth: WedProfile
    initial_latent: np.ndarray
    initial_prediction: WedProfile
    windows: list[WindowRecord] = field(default_factory=list)
    final_latent: np.ndarray | None = None
    final_prediction: WedProfile | None = None
    status: Status = Status.ACTIVE
    abort_reason: str | None = None
    meta: dict = field(default_factory=dict)  # free-form provenance, e.g. config hash

    @property
    def aborted(self) -> bool:
        return self.status is Status.ABORTED

    def prospective_prediction(self) -> WedProfile:
        """Prediction in force when each z was reached by the scanner.

        Window k is covered by the prediction issued after window k-1
        (the initial prediction for k = 0).  After an abort the last issued
        prediction covers everything left.
        """
        z = self.truth.z_mm
        out = self.initial_prediction.channels().copy()
        issued_z, issued = self.initial_prediction.z_mm, out.copy()
        covered = np.zeros(z.size, dtype=bool)

        def fill(sel):
            out[sel] = np.column_stack([np.interp(z[sel], issued_z, issued[:, j]) for j in range(2)])

        for rec in self.windows:
            lo, hi = rec.z_range
            last = hi >= z[-1] - 1e-9
            sel = (z >= lo - 1e-9) & ((z <= hi + 1e-9) if last else (z < hi - 1e-9))
            fill(sel)
            covered |= sel
            if rec.prediction_z_mm:
                issued_z = np.asarray(rec.prediction_z_mm, dtype=float)
                issued = np.asarray(rec.prediction, dtype=float)
        if self.windows and not covered.all():
            fill(~covered)
        return WedProfile(z.copy(), out[:, 0], out[:, 1])

    def to_lines(self) -> list[str]:
        header = {
            "type": "header",
            "version": SESSION_LOG_VERSION,
            "patient_id": self.patient_id,
            "meta": self.meta,
            "config": dataclasses.asdict(self.config),
            "truth": self.truth.to_dict(),
            "initial_latent": self.initial_latent.tolist(),
            "initial_prediction": self.initial_prediction.to_dict(),
        }
        lines = [json.dumps(header)]
        lines += [json.dumps({"type": "window", **rec.to_dict()}) for rec in self.windows]
        lines.append(json.dumps({
            "type": "summary",
            "status": self.status.value,
            "abort_reason": self.abort_reason,
            "final_latent": None if self.final_latent is None else self.final_latent.tolist(),
            "final_prediction": None if self.final_prediction is None else self.final_prediction.to_dict(),
        }))
        return lines

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Transcript":
        records = [json.loads(line) for line in lines if line.strip()]
        if not records or records[0].get("type") != "header":
            raise FormatError("session log must start with a header record")
        h = records[0]
        if h.get("version") != SESSION_LOG_VERSION:
            raise VersionError(f"session log version {h.get('version')!r}, expected {SESSION_LOG_VERSION!r}")
        t = cls(h["patient_id"], RefineConfig(**h["config"]), WedProfile.from_dict(h["truth"]),
                np.asarray(h["initial_latent"], dtype=float), WedProfile.from_dict(h["initial_prediction"]),
                meta=dict(h.get("meta") or {}))
        for r in records[1:]:
            if r["type"] == "window":
                r = dict(r)
                del r["type"]
                r["z_range"] = tuple(r["z_range"])
                t.windows.append(WindowRecord(**r))
            elif r["type"] == "summary":
                t.status = Status(r["status"])
                t.abort_reason = r["abort_reason"]
                if r["final_latent"] is not None:
                    t.final_latent = np.asarray(r["final_latent"], dtype=float)
                if r["final_prediction"] is not None:
                    t.final_prediction = WedProfile.from_dict(r["final_prediction"])
        return t

    @classmethod
    def read(cls, path) -> "Transcript":
        with open(path) as fh:
            return cls.from_lines(fh)


def replay_abort(residuals: Iterable[float], tau: float, patience: int) -> list[bool]:
    """Recompute the abort flag after each window from logged residuals."""
    flags, run = [], 0
    for r in residuals:
        run = run + 1 if r > tau else 0
        flags.append(run >= patience)
    return flags


def verify_transcript(t: Transcript) -> bool:
    """Abort flags and prediction checksums are consistent with the logged data."""
    flags = replay_abort([w.residual for w in t.windows], t.config.tau, t.config.patience)
    if flags != [w.aborted for w in t.windows]:
        return False
    if any(flags[:-1]):
        return False
    if (t.status is Status.ABORTED) != (bool(flags) and flags[-1]):
        return False
    for w in t.windows:
        values = np.asarray(w.prediction, dtype=float).reshape(-1, 2)
        if checksum(values) != w.prediction_checksum:
            return False
    return True


def run_simulated_scan(decoder: DecoderModel, truth, initial_latent, config: RefineConfig = RefineConfig(),
                       patient_id: str = "", meta: dict | None = None) -> Transcript:
    """Drive a session over a ground-truth profile until completion or abort."""
    if isinstance(truth, PhantomPatient):
        truth = truth.lung_profile(config.spacing_mm)
    truth.validate()
    start, end = float(truth.z_mm[0]), float(truth.z_mm[-1])
    session = ScanSession(decoder, initial_latent, start, end, config)
    transcript = Transcript(patient_id, config, truth, session.initial_latent.copy(),
                            decode(decoder, session.initial_latent, truth.z_mm), meta=dict(meta or {}))
    for k, window in enumerate(slice_windows(truth, config.window_mm, start, end)):
        remaining, decision = session.ingest_window(window)
        values = remaining.channels()
        transcript.windows.append(WindowRecord(
            window_index=k,
            z_range=(window.z_start_mm, window.z_end_mm),
            residual=decision.residual,
            residual_mm=session.last_fit_residual_mm,
            aborted=decision.triggered,
            latent_norm=float(np.linalg.norm(session.latent)),
            prediction_checksum=checksum(values),
            prediction_z_mm=remaining.z_mm.tolist(),
            prediction=values.tolist(),
        ))
        if session.status is not Status.ACTIVE:
            break
    transcript.status = session.status
    transcript.abort_reason = session.abort_reason
    transcript.final_latent = session.latent.copy()
    transcript.final_prediction = decode(decoder, session.latent, truth.z_mm)
    return transcript
