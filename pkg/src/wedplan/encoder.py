"""Depth observation -> latent code, plus the direct-regression baseline.

Both models read the same compact description of the depth image: the
body height along the centerline and the body width, sampled at N_z rows
spread evenly over the detected body, followed by the body length and
table height estimates.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import net
from .autodecoder import DecoderModel
from .errors import ConfigError, DetectionError, DomainError, FormatError, NumericError, ShapeError
from .phantom import DepthObservation, WedProfile

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DepthFeatures:
    centerline_mm: np.ndarray
    width_mm: np.ndarray
    body_length_mm: float
    table_height_mm: float
    z_mm: np.ndarray  # craniocaudal position of each sampled row

    def vector(self) -> np.ndarray:
        return np.concatenate([self.centerline_mm, self.width_mm, [self.body_length_mm, self.table_height_mm]])


def extract_features(obs: DepthObservation, n_z: int = 64, threshold_mm: float = 5.0,
                     min_cols: int = 3) -> DepthFeatures:
    grid = np.asarray(obs.grid, dtype=float)
    # outermost columns see bare table
    table_dist = float(np.median(np.concatenate([grid[:, 0], grid[:, -1]])))
    table_height = obs.camera_height_mm - table_dist
    height = obs.camera_height_mm - table_height - grid
    footprint = height > threshold_mm
    is_body = footprint.sum(axis=1) >= min_cols
    if not is_body.any():
        raise DetectionError("no body detected in depth observation")

    # longest contiguous run of body rows
    edges = np.diff(np.concatenate([[0], is_body.astype(int), [0]]))
    starts, stops = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    k = int(np.argmax(stops - starts))
    first, last = int(starts[k]), int(stops[k]) - 1

    rows = np.round(np.linspace(first, last, n_z)).astype(int)
    h = np.where(footprint[rows], height[rows], 0.0)
    return DepthFeatures(
        centerline_mm=h.max(axis=1),
        width_mm=footprint[rows].sum(axis=1) * obs.pixel_pitch_mm,
        body_length_mm=(last - first) * obs.pixel_pitch_mm,
        table_height_mm=table_height,
        z_mm=obs.row_z()[rows],
    )


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.mean.size:
            raise ShapeError(f"feature vector of width {x.shape[-1]}, expected {self.mean.size}")
        return (x - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def _stack(features: Sequence[DepthFeatures]) -> np.ndarray:
    return np.stack([f.vector() for f in features])


# --- encoder -----------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    hidden: tuple[int, ...] = (128, 128)
    epochs: int = 300
    batch_size: int = 16
    points_per_patient: int = 32
    lr: float = 1e-3
    latent_l2: float = 1e-4
    spectral_bound: float = 3.0
    spectral_every: int = 10
    # "wed": L1 through the frozen decoder; "latent": L1 onto given latent codes
    loss: str = "wed"
    latent_dim: int | None = None
    seed: int = 0

    def validate(self):
        if self.loss not in ("wed", "latent"):
            raise ConfigError(f"unknown encoder loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.points_per_patient < 1 or self.lr <= 0:
            raise ConfigError("encoder schedule values must be positive")
        if self.latent_l2 < 0 or self.spectral_bound <= 0:
            raise ConfigError("latent_l2 must be >= 0 and spectral_bound > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown encoder keys: {sorted(unknown)}")
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        return cls(**data)


@dataclass
class EncoderModel:
    mlp: net.Mlp
    scaler: FeatureScaler
    spectral_bound: float = 3.0

    @property
    def latent_dim(self) -> int:
        return self.mlp.out_dim


def encode(model: EncoderModel, features: DepthFeatures) -> np.ndarray:
    return net.forward(model.mlp, model.scaler(features.vector()))


def _wed_targets(decoder: DecoderModel, profiles):
    return [(decoder.normalize_z(p.z_mm), p.channels() / decoder.wed_scale_mm) for p in profiles]


def encoder_loss(model: EncoderModel, decoder: DecoderModel, features, profiles, latent_l2=0.0) -> float:
    """Mean over patients of full-profile L1 (scaled units) + latent penalty."""
    lats = net.forward(model.mlp, model.scaler(_stack(features)))
    total = 0.0
    for lat, (zn, tgt) in zip(lats, _wed_targets(decoder, profiles)):
        x = np.column_stack([np.broadcast_to(lat, (zn.size, lat.size)), zn])
        total += float(np.mean(np.abs(net.forward(decoder.mlp, x) - tgt))) + latent_l2 * float(lat @ lat)
    return total / len(lats)


@dataclass
class EncoderTrainResult:
    model: EncoderModel
    history: list[float] = field(default_factory=list)


def train_encoder(features: Sequence[DepthFeatures], profiles: Sequence[WedProfile], decoder: DecoderModel,
                  config: EncoderConfig = EncoderConfig(), latent_targets=None) -> EncoderTrainResult:
    """Fit the encoder so that decode(encode(features)) matches the profiles.

    Gradients pass through the decoder, whose parameters are never touched.
    """
    config.validate()
    n = len(features)
    if n == 0 or n != len(profiles):
        raise DomainError("need equally many features and profiles (at least one)")
    L = decoder.latent_dim
    if config.latent_dim is not None and config.latent_dim != L:
        raise ConfigError(f"encoder latent_dim {config.latent_dim} does not match decoder latent_dim {L}")
    if config.loss == "latent":
        if latent_targets is None:
            raise ConfigError("latent loss needs latent_targets")
        latent_targets = np.asarray(latent_targets, dtype=float)
        if latent_targets.shape != (n, L):
            raise ConfigError(f"latent targets shape {latent_targets.shape}, expected {(n, L)}")

    rng = np.random.default_rng(config.seed)
    x_all = _stack(features)
    scaler = FeatureScaler.fit(x_all)
    xs = scaler(x_all)
    mlp = net.init_mlp([xs.shape[1], *config.hidden, L], seed=int(rng.integers(2**31)), layernorm=False)
    model = EncoderModel(mlp, scaler, config.spectral_bound)
    targets = _wed_targets(decoder, profiles)
    opt = net.adam_init(mlp.params, lr=config.lr)
    P = config.points_per_patient
    lam = config.latent_l2
    dec = decoder.mlp

    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            B = len(batch)
            lat, enc_cache = net.forward_cached(mlp, xs[batch])
            if config.loss == "wed":
                zs, tg = [], []
                for b in batch:
                    zn, t = targets[b]
                    idx = rng.integers(0, zn.size, P)
                    zs.append(zn[idx])
                    tg.append(t[idx])
                x = np.column_stack([np.repeat(lat, P, axis=0), np.concatenate(zs)])
                out, dec_cache = net.forward_cached(dec, x)
                data_loss, dout = net.l1_loss(out, np.concatenate(tg))
                gdec = net.backward_cached(dec, dec_cache, dout, need_params=False)
                dlat = gdec.dx[:, :L].reshape(B, P, L).sum(axis=1)
            else:
                data_loss, dlat = net.l1_loss(lat, latent_targets[batch])
            loss = data_loss + lam * float(np.sum(lat * lat)) / B
            if not np.isfinite(loss):
                raise NumericError("non-finite encoder training loss", step=step)
            dlat = dlat + 2 * lam * lat / B
            genc = net.backward_cached(mlp, enc_cache, dlat, need_dx=False)
            net.adam_step(mlp.params, genc.params, opt)
            step += 1
            if config.spectral_every and step % config.spectral_every == 0:
                net.clip_spectral_norm(mlp, config.spectral_bound)
            total += loss * B
        history.append(total / n)
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("encoder epoch %d loss %.6f", epoch, history[-1])
    net.clip_spectral_norm(mlp, config.spectral_bound)
    return EncoderTrainResult(model, history)


# --- direct regression baseline -------------------------------------------

@dataclass(frozen=True)
class BaselineConfig:
    hidden: tuple[int, ...] = (128, 128)
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    grid_points: int = 64
    z_start_mm: float | None = None
    z_end_mm: float | None = None
    wed_scale_mm: float = 500.0
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.grid_points < 2 or self.lr <= 0:
            raise ConfigError("baseline schedule values out of range")

    @classmethod
    def from_dict(cls, data: dict) -> "BaselineConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown baseline keys: {sorted(unknown)}")
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        return cls(**data)


@dataclass
class BaselineModel:
    mlp: net.Mlp
    scaler: FeatureScaler
    z_grid_mm: np.ndarray
    wed_scale_mm: float = 500.0

    @property
    def grid_points(self) -> int:
        return self.z_grid_mm.size


def train_baseline(features: Sequence[DepthFeatures], profiles: Sequence[WedProfile],
                   config: BaselineConfig = BaselineConfig()) -> BaselineModel:
    """Regress AP and lateral WED on a fixed z grid straight from the features.

    Grid points outside a patient's profile are masked out of that
    patient's loss, except the first one past each end: prediction at the
    range ends interpolates against it, so it is trained on the edge value.
    """
    config.validate()
    n = len(features)
    if n == 0 or n != len(profiles):
        raise DomainError("need equally many features and profiles (at least one)")
    z0 = config.z_start_mm if config.z_start_mm is not None else min(float(p.z_mm[0]) for p in profiles)
    z1 = config.z_end_mm if config.z_end_mm is not None else max(float(p.z_mm[-1]) for p in profiles)
    if not z1 > z0:
        raise ConfigError("baseline grid has zero extent")
    grid = np.linspace(z0, z1, config.grid_points)
    M = grid.size
    targets = np.zeros((n, 2 * M))
    mask = np.zeros((n, 2 * M))
    for i, p in enumerate(profiles):
        step = grid[1] - grid[0]
        inside = (grid > p.z_mm[0] - step) & (grid < p.z_mm[-1] + step)
        targets[i, :M] = np.interp(grid, p.z_mm, p.wed_ap_mm) / config.wed_scale_mm
        targets[i, M:] = np.interp(grid, p.z_mm, p.wed_l_mm) / config.wed_scale_mm
        mask[i, :M] = mask[i, M:] = inside

    rng = np.random.default_rng(config.seed)
    x_all = _stack(features)
    scaler = FeatureScaler.fit(x_all)
    xs = scaler(x_all)
    mlp = net.init_mlp([xs.shape[1], *config.hidden, 2 * M], seed=int(rng.integers(2**31)), layernorm=False)
    opt = net.adam_init(mlp.params, lr=config.lr)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            out, cache = net.forward_cached(mlp, xs[batch])
            mk = mask[batch]
            diff = (out - targets[batch]) * mk
            denom = max(float(mk.sum()), 1.0)
            if not np.all(np.isfinite(diff)):
                raise NumericError("non-finite baseline output", step=epoch)
            g = net.backward_cached(mlp, cache, np.sign(diff) / denom, need_dx=False)
            net.adam_step(mlp.params, g.params, opt)
    return BaselineModel(mlp, scaler, grid, config.wed_scale_mm)


def predict_baseline(model: BaselineModel, features: DepthFeatures, z_mm=None) -> WedProfile:
    out = net.forward(model.mlp, model.scaler(features.vector())) * model.wed_scale_mm
    M = model.grid_points
    if z_mm is None:
        return WedProfile(model.z_grid_mm.copy(), out[:M], out[M:])
    z = np.asarray(z_mm, dtype=float)
    return WedProfile(z, np.interp(z, model.z_grid_mm, out[:M]), np.interp(z, model.z_grid_mm, out[M:]))


# --- persistence -----------------------------------------------------------

def save_encoder(model: EncoderModel, path, meta: dict | None = None) -> None:
    payload = {"scaler": model.scaler.to_dict(), "spectral_bound": model.spectral_bound, **(meta or {})}
    net.save_checkpoint(path, "encoder", {"mlp": model.mlp}, payload)


def load_encoder(path) -> EncoderModel:
    nets, meta = net.load_checkpoint(path, kind="encoder")
    try:
        return EncoderModel(nets["mlp"], FeatureScaler.from_dict(meta["scaler"]), float(meta["spectral_bound"]))
    except KeyError as exc:
        raise FormatError(f"encoder checkpoint {path} missing {exc}") from exc


def save_baseline(model: BaselineModel, path, meta: dict | None = None) -> None:
    payload = {"scaler": model.scaler.to_dict(), "z_grid_mm": model.z_grid_mm.tolist(),
               "wed_scale_mm": model.wed_scale_mm, **(meta or {})}
    net.save_checkpoint(path, "baseline", {"mlp": model.mlp}, payload)


def load_baseline(path) -> BaselineModel:
    nets, meta = net.load_checkpoint(path, kind="baseline")
    try:
        return BaselineModel(nets["mlp"], FeatureScaler.from_dict(meta["scaler"]),
                             np.asarray(meta["z_grid_mm"], dtype=float), float(meta["wed_scale_mm"]))
    except KeyError as exc:
        raise FormatError(f"baseline checkpoint {path} missing {exc}") from exc
