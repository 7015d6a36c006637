"""Synthetic patient population with analytic WED profiles.

Each patient is an elliptical cylinder whose half-width a(z) and
half-thickness b(z) vary smoothly along the craniocaudal axis, with a
lung region of reduced density.  Coordinates: z = 0 at the head end,
increasing toward the feet, all lengths in mm.

    a(z) = a0 (1 + s G(z; z_sh, sd_sh) - w G(z; z_wa, sd_wa)) + sum_k c_k G(z; z_k, sd_k)
    b(z) = b0 (...same shoulder/waist terms...) + sum_k d_k G(z; z'_k, sd'_k)
    rho(z) = 1 - S(z) + rho_lung S(z)

with G a unit-peak Gaussian bump and S a raised-cosine lung window.  The
per-axis water equivalent diameters are WED_AP = 2 b rho, WED_L = 2 a rho.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DomainError, FormatError, StorageError, VersionError

DATASET_FORMAT = "wedplan-dataset"
DATASET_VERSION = "1"


@dataclass(frozen=True)
class PopulationConfig:
    """Uniform sampling ranges, one (min, max) pair per parameter."""

    torso_half_width_mm: tuple[float, float] = (140.0, 220.0)
    torso_half_thickness_mm: tuple[float, float] = (90.0, 150.0)
    body_length_mm: tuple[float, float] = (1550.0, 1950.0)
    # lung top sits at a fixed fraction of stature so that it is
    # recoverable from the silhouette
    lung_top_frac: tuple[float, float] = (0.165, 0.175)
    # lung length = lung_length_frac x body length + lung_length_mm; the lung
    # base scales with stature too, otherwise its density step lands at a
    # place no depth image can anticipate
    lung_length_frac: tuple[float, float] = (0.135, 0.145)
    lung_length_mm: tuple[float, float] = (0.0, 0.0)
    lung_density: tuple[float, float] = (0.55, 0.8)
    shoulder_amp: tuple[float, float] = (0.05, 0.2)
    shoulder_offset_mm: tuple[float, float] = (0.0, 40.0)
    shoulder_sigma_mm: tuple[float, float] = (50.0, 80.0)
    waist_amp: tuple[float, float] = (0.0, 0.15)
    waist_offset_mm: tuple[float, float] = (80.0, 180.0)
    waist_sigma_mm: tuple[float, float] = (60.0, 100.0)
    bump_amp_mm: tuple[float, float] = (-10.0, 10.0)
    bump_sigma_mm: tuple[float, float] = (20.0, 60.0)
    # bump centres: fraction of the way across [lung_top - margin, lung_bottom + margin]
    bump_position_frac: tuple[float, float] = (0.0, 1.0)
    bump_margin_mm: float = 50.0
    n_bumps: int = 4
    lung_edge_mm: float = 30.0
    table_height_mm: tuple[float, float] = (800.0, 1000.0)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                lo, hi = value
                if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                    raise ConfigError(f"degenerate range for {f.name}: {value}")
        if self.n_bumps < 0:
            raise ConfigError("n_bumps must be >= 0")
        if self.lung_edge_mm <= 0:
            raise ConfigError("lung_edge_mm must be positive")
        shortest = self.lung_length_frac[0] * self.body_length_mm[0] + self.lung_length_mm[0]
        if 2 * self.lung_edge_mm >= shortest:
            raise ConfigError("shortest possible lung must exceed twice lung_edge_mm")
        if self.torso_half_width_mm[0] <= 0 or self.torso_half_thickness_mm[0] <= 0:
            raise ConfigError("torso dimensions must be positive")
        lo, hi = self.lung_density
        if lo < 0.4 or hi > 0.9:
            raise ConfigError("lung_density must lie within [0.4, 0.9]")
        if self.bump_sigma_mm[0] <= 0 or self.shoulder_sigma_mm[0] <= 0 or self.waist_sigma_mm[0] <= 0:
            raise ConfigError("bump widths must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "PopulationConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown population keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class CameraConfig:
    camera_height_mm: float = 2600.0
    pixel_pitch_mm: float = 10.0
    half_width_mm: float = 400.0
    margin_mm: float = 100.0
    noise_sigma_mm: float = 2.0

    @classmethod
    def from_dict(cls, data: dict) -> "CameraConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(data) - known:
            raise ConfigError(f"unknown camera keys: {sorted(set(data) - known)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PhantomParams:
    torso_half_width_mm: float
    torso_half_thickness_mm: float
    body_length_mm: float
    lung_top_mm: float
    lung_bottom_mm: float
    lung_density: float
    shoulder_amp: float
    waist_amp: float
    shoulder_center_mm: float
    shoulder_sigma_mm: float
    waist_center_mm: float
    waist_sigma_mm: float
    # smooth perturbations of the half-width (c_k) and half-thickness (d_k)
    perturbation_coeffs: tuple[float, ...]
    perturbation_centers_mm: tuple[float, ...]
    perturbation_sigmas_mm: tuple[float, ...]
    thickness_coeffs: tuple[float, ...]
    thickness_centers_mm: tuple[float, ...]
    thickness_sigmas_mm: tuple[float, ...]
    lung_edge_mm: float
    table_height_mm: float
    rng_seed: int

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class WedProfile:
    z_mm: np.ndarray
    wed_ap_mm: np.ndarray
    wed_l_mm: np.ndarray

    def __post_init__(self):
        for name in ("z_mm", "wed_ap_mm", "wed_l_mm"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    def validate(self) -> None:
        z = self.z_mm
        if z.ndim != 1 or z.size == 0:
            raise DomainError("profile must be a non-empty 1-D sample")
        if self.wed_ap_mm.shape != z.shape or self.wed_l_mm.shape != z.shape:
            raise DomainError("profile arrays must have equal lengths")
        if np.any(np.diff(z) <= 0):
            raise DomainError("z_mm must be strictly increasing")
        if not (np.all(self.wed_ap_mm > 0) and np.all(self.wed_l_mm > 0)):
            raise DomainError("WED values must be positive")

    def __len__(self) -> int:
        return self.z_mm.size

    def channels(self) -> np.ndarray:
        """(n, 2) array of [AP, lateral] values."""
        return np.stack([self.wed_ap_mm, self.wed_l_mm], axis=1)

    def select(self, mask) -> "WedProfile":
        return WedProfile(self.z_mm[mask], self.wed_ap_mm[mask], self.wed_l_mm[mask])

    def to_dict(self) -> dict:
        return {"z_mm": self.z_mm.tolist(), "wed_ap_mm": self.wed_ap_mm.tolist(), "wed_l_mm": self.wed_l_mm.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "WedProfile":
        return cls(data["z_mm"], data["wed_ap_mm"], data["wed_l_mm"])


@dataclass(frozen=True)
class DepthObservation:
    grid: np.ndarray  # rows along z, columns along x
    pixel_pitch_mm: float
    camera_height_mm: float
    z_origin_mm: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def row_z(self) -> np.ndarray:
        return self.z_origin_mm + self.pixel_pitch_mm * np.arange(self.grid.shape[0])

    def col_x(self) -> np.ndarray:
        w = self.grid.shape[1]
        return self.pixel_pitch_mm * (np.arange(w) - (w - 1) / 2)

    def validate(self, body_length_mm: float | None = None) -> None:
        g = self.grid
        if g.ndim != 2 or not np.all(np.isfinite(g)):
            raise DomainError("depth grid must be a finite 2-D array")
        if np.any(g <= 0) or np.any(g > self.camera_height_mm):
            raise DomainError("depth distances must lie in (0, camera_height]")
        if body_length_mm is not None:
            z = self.row_z()
            if z[0] > 0 or z[-1] < body_length_mm:
                raise DomainError("depth grid does not cover the body")

    def to_dict(self) -> dict:
        h, w = self.grid.shape
        return {
            "H": h,
            "W": w,
            "pixel_pitch_mm": self.pixel_pitch_mm,
            "camera_height_mm": self.camera_height_mm,
            "z_origin_mm": self.z_origin_mm,
            "grid": self.grid.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DepthObservation":
        grid = np.asarray(data["grid"], dtype=float)
        if grid.size != data["H"] * data["W"]:
            raise FormatError("depth grid size does not match H x W")
        return cls(grid.reshape(data["H"], data["W"]), float(data["pixel_pitch_mm"]),
                   float(data["camera_height_mm"]), float(data.get("z_origin_mm", 0.0)))


@dataclass(frozen=True)
class PositioningTruth:
    isocenter_height_mm: float
    lung_top_mm: float
    lung_bottom_mm: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PositioningTruth":
        return cls(**data)


def gaussian_bump(z, center, sigma):
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * ((z - center) / sigma) ** 2)


def raised_cosine_window(z, top, bottom, edge):
    """1 on [top+edge, bottom-edge], 0 outside [top, bottom], cosine ramps between."""
    z = np.asarray(z, dtype=float)
    s = np.zeros_like(z)
    up = (z > top) & (z < top + edge)
    down = (z > bottom - edge) & (z < bottom)
    s[up] = 0.5 * (1 - np.cos(np.pi * (z[up] - top) / edge))
    s[down] = 0.5 * (1 - np.cos(np.pi * (bottom - z[down]) / edge))
    s[(z >= top + edge) & (z <= bottom - edge)] = 1.0
    return s


@dataclass(frozen=True)
class PhantomPatient:
    params: PhantomParams

    def _shape_factor(self, z):
        p = self.params
        return (1 + p.shoulder_amp * gaussian_bump(z, p.shoulder_center_mm, p.shoulder_sigma_mm)
                - p.waist_amp * gaussian_bump(z, p.waist_center_mm, p.waist_sigma_mm))

    def half_width(self, z):
        p = self.params
        out = p.torso_half_width_mm * self._shape_factor(z)
        for c, mu, sd in zip(p.perturbation_coeffs, p.perturbation_centers_mm, p.perturbation_sigmas_mm):
            out = out + c * gaussian_bump(z, mu, sd)
        return out

    def half_thickness(self, z):
        p = self.params
        out = p.torso_half_thickness_mm * self._shape_factor(z)
        for c, mu, sd in zip(p.thickness_coeffs, p.thickness_centers_mm, p.thickness_sigmas_mm):
            out = out + c * gaussian_bump(z, mu, sd)
        return out

    def density(self, z):
        p = self.params
        s = raised_cosine_window(z, p.lung_top_mm, p.lung_bottom_mm, p.lung_edge_mm)
        # written so the plateau evaluates to lung_density exactly
        return 1.0 - s + p.lung_density * s

    def _check_domain(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z < 0) or np.any(z > self.params.body_length_mm) or not np.all(np.isfinite(z)):
            raise DomainError(f"z outside body [0, {self.params.body_length_mm}]")
        return z

    def wed_at(self, z):
        """(wed_ap, wed_l) at craniocaudal position(s) z."""
        z = self._check_domain(z)
        rho = self.density(z)
        return 2 * self.half_thickness(z) * rho, 2 * self.half_width(z) * rho

    def sample_profile(self, z_start, z_end, spacing=1.0) -> WedProfile:
        if not spacing > 0:
            raise DomainError("spacing must be positive")
        if not z_start < z_end:
            raise DomainError("empty profile range")
        n = int(math.floor((z_end - z_start) / spacing + 1e-9)) + 1
        z = z_start + spacing * np.arange(n)
        ap, lat = self.wed_at(z)
        return WedProfile(z, ap, lat)

    def lung_profile(self, spacing=1.0) -> WedProfile:
        return self.sample_profile(self.params.lung_top_mm, self.params.lung_bottom_mm, spacing)

    def render_depth(self, camera: CameraConfig = CameraConfig(), rng=None) -> DepthObservation:
        """Simulated overhead depth camera looking down on the table.

        Noise is drawn from `rng` if given, otherwise from a generator
        seeded by the patient seed so that renders are reproducible.
        """
        p = self.params
        pitch = camera.pixel_pitch_mm
        z0 = -pitch * math.ceil(camera.margin_mm / pitch)
        n_rows = int(math.ceil((p.body_length_mm + camera.margin_mm - z0) / pitch)) + 1
        half_cols = int(math.ceil(camera.half_width_mm / pitch))
        z = z0 + pitch * np.arange(n_rows)
        x = pitch * np.arange(-half_cols, half_cols + 1)

        inside = (z >= 0) & (z <= p.body_length_mm)
        zc = np.clip(z, 0, p.body_length_mm)
        a = np.where(inside, self.half_width(zc), 0.0)
        b = np.where(inside, self.half_thickness(zc), 0.0)
        if camera.camera_height_mm <= p.table_height_mm + 2 * b.max():
            raise ConfigError("camera is below the body apex")
        safe_a = np.where(a > 0, a, 1.0)
        ratio = x[None, :] / safe_a[:, None]
        height = 2 * b[:, None] * np.sqrt(np.maximum(0.0, 1 - ratio ** 2))
        height[~inside] = 0.0
        grid = camera.camera_height_mm - p.table_height_mm - height
        if camera.noise_sigma_mm > 0:
            if rng is None:
                rng = np.random.default_rng([p.rng_seed, 1])
            grid = grid + rng.normal(0.0, camera.noise_sigma_mm, size=grid.shape)
            grid = np.clip(grid, 1e-3, camera.camera_height_mm)
        return DepthObservation(grid, pitch, camera.camera_height_mm, z0)

    def positioning_truth(self) -> PositioningTruth:
        p = self.params
        z = np.linspace(p.lung_top_mm, p.lung_bottom_mm, 1 + int(round(p.lung_bottom_mm - p.lung_top_mm)))
        iso = p.table_height_mm + float(np.mean(self.half_thickness(z)))
        return PositioningTruth(iso, p.lung_top_mm, p.lung_bottom_mm)


def _uniform(rng, bounds, size=None):
    lo, hi = bounds
    if lo == hi:
        return np.full(size, float(lo)) if size is not None else float(lo)
    return rng.uniform(lo, hi, size)


def sample_patient(seed: int, config: PopulationConfig = PopulationConfig()) -> PhantomPatient:
    config.validate()
    rng = np.random.default_rng(seed)
    body = _uniform(rng, config.body_length_mm)
    top = body * _uniform(rng, config.lung_top_frac)
    bottom = top + body * _uniform(rng, config.lung_length_frac) + _uniform(rng, config.lung_length_mm)
    lo, hi = top - config.bump_margin_mm, bottom + config.bump_margin_mm
    k = config.n_bumps
    params = PhantomParams(
        torso_half_width_mm=float(_uniform(rng, config.torso_half_width_mm)),
        torso_half_thickness_mm=float(_uniform(rng, config.torso_half_thickness_mm)),
        body_length_mm=float(body),
        lung_top_mm=float(top),
        lung_bottom_mm=float(bottom),
        lung_density=float(_uniform(rng, config.lung_density)),
        shoulder_amp=float(_uniform(rng, config.shoulder_amp)),
        waist_amp=float(_uniform(rng, config.waist_amp)),
        shoulder_center_mm=float(top + _uniform(rng, config.shoulder_offset_mm)),
        shoulder_sigma_mm=float(_uniform(rng, config.shoulder_sigma_mm)),
        waist_center_mm=float(bottom + _uniform(rng, config.waist_offset_mm)),
        waist_sigma_mm=float(_uniform(rng, config.waist_sigma_mm)),
        perturbation_coeffs=tuple(float(v) for v in _uniform(rng, config.bump_amp_mm, k)),
        perturbation_centers_mm=tuple(float(lo + (hi - lo) * v) for v in _uniform(rng, config.bump_position_frac, k)),
        perturbation_sigmas_mm=tuple(float(v) for v in _uniform(rng, config.bump_sigma_mm, k)),
        thickness_coeffs=tuple(float(v) for v in _uniform(rng, config.bump_amp_mm, k)),
        thickness_centers_mm=tuple(float(lo + (hi - lo) * v) for v in _uniform(rng, config.bump_position_frac, k)),
        thickness_sigmas_mm=tuple(float(v) for v in _uniform(rng, config.bump_sigma_mm, k)),
        lung_edge_mm=float(config.lung_edge_mm),
        table_height_mm=float(_uniform(rng, config.table_height_mm)),
        rng_seed=int(seed),
    )
    patient = PhantomPatient(params)
    validate_params(params)
    return patient


def validate_params(p: PhantomParams) -> None:
    if not (0 < p.lung_top_mm < p.lung_bottom_mm < p.body_length_mm):
        raise DomainError("lung bounds must satisfy 0 < top < bottom < body length")
    if p.torso_half_width_mm <= 0 or p.torso_half_thickness_mm <= 0:
        raise DomainError("torso dimensions must be positive")
    if not 0.4 <= p.lung_density <= 0.9:
        raise DomainError("lung density outside [0.4, 0.9]")
    z = np.linspace(0.0, p.body_length_mm, 2001)
    patient = PhantomPatient(p)
    if np.any(patient.half_width(z) <= 0) or np.any(patient.half_thickness(z) <= 0):
        raise DomainError("body cross-section collapses somewhere along z")


def patient_seeds(seed: int, n: int) -> list[int]:
    """Independent per-patient seeds derived from one population seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


@dataclass
class PatientRecord:
    id: str
    params: PhantomParams
    profile: WedProfile
    depth: DepthObservation
    truth: PositioningTruth

    @property
    def patient(self) -> PhantomPatient:
        return PhantomPatient(self.params)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "params": self.params.to_dict(),
            "profile": self.profile.to_dict(),
            "depth": self.depth.to_dict(),
            "positioning": self.truth.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PatientRecord":
        return cls(
            data["id"],
            PhantomParams.from_dict(data["params"]),
            WedProfile.from_dict(data["profile"]),
            DepthObservation.from_dict(data["depth"]),
            PositioningTruth.from_dict(data["positioning"]),
        )

    def validate(self) -> None:
        validate_params(self.params)
        self.profile.validate()
        self.depth.validate(self.params.body_length_mm)
        if not self.truth.lung_top_mm < self.truth.lung_bottom_mm:
            raise DomainError("positioning truth lung bounds inverted")


def make_record(seed: int, config: PopulationConfig, camera: CameraConfig, index: int) -> PatientRecord:
    patient = sample_patient(seed, config)
    return PatientRecord(
        id=f"p{index:05d}",
        params=patient.params,
        profile=patient.lung_profile(1.0),
        depth=patient.render_depth(camera),
        truth=patient.positioning_truth(),
    )


def generate_records(n: int, seed: int, config: PopulationConfig = PopulationConfig(),
                     camera: CameraConfig = CameraConfig()) -> Iterator[PatientRecord]:
    if n < 1:
        raise DomainError("n must be >= 1")
    for i, s in enumerate(patient_seeds(seed, n)):
        yield make_record(s, config, camera, i)


def generate_dataset(n: int, seed: int, out_path, config: PopulationConfig = PopulationConfig(),
                     camera: CameraConfig = CameraConfig(), extra: dict | None = None) -> Path:
    """Write n patient records plus a manifest into directory `out_path`."""
    config.validate()
    out = Path(out_path)
    ids = []
    try:
        (out / "records").mkdir(parents=True, exist_ok=True)
        for record in generate_records(n, seed, config, camera):
            with open(out / "records" / f"{record.id}.json", "w") as fh:
                json.dump(record.to_dict(), fh, separators=(",", ":"))
            ids.append(record.id)
        manifest = {
            **(extra or {}),
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "seed": seed,
            "n": n,
            "population": config.to_dict(),
            "camera": camera.to_dict(),
            "records": ids,
        }
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {out}: {exc}") from exc
    return out


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"{path} is not a dataset directory (no manifest.json)") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a {DATASET_FORMAT} directory")
    if manifest.get("version") != DATASET_VERSION:
        raise VersionError(f"{path}: dataset version {manifest.get('version')!r}, expected {DATASET_VERSION!r}")
    return manifest


def load_dataset(path, limit: int | None = None) -> list[PatientRecord]:
    path = Path(path)
    manifest = read_manifest(path)
    ids: Sequence[str] = manifest["records"]
    if limit is not None:
        ids = ids[:limit]
    records = []
    for rid in ids:
        try:
            with open(path / "records" / f"{rid}.json") as fh:
                records.append(PatientRecord.from_dict(json.load(fh)))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"bad record {rid} in {path}: {exc}") from exc
    return records
