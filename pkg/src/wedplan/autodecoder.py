"""Auto-decoder over WED profiles.

A single MLP maps [latent, normalized z] to the scaled (AP, lateral) WED
pair.  Training jointly optimizes the network and one latent code per
patient; at inference the network is frozen and only a latent is fitted
to whatever part of a profile has been observed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import net
from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError, VersionError
from .phantom import WedProfile

log = logging.getLogger(__name__)

LATENTS_FORMAT = "wedplan-latents"
LATENTS_VERSION = "1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    points_per_patient: int = 16
    lr_weights: float = 1e-3
    lr_latents: float = 1e-2
    # cosine decay of both learning rates down to this fraction by the last epoch
    lr_final_frac: float = 0.1
    latent_l2: float = 1e-4
    latent_dim: int = 32
    hidden_width: int = 128
    hidden_layers: int = 8
    wed_scale_mm: float = 500.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "points_per_patient", "latent_dim", "hidden_width", "hidden_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr_weights <= 0 or self.lr_latents <= 0 or self.wed_scale_mm <= 0:
            raise ConfigError("learning rates and wed_scale_mm must be positive")
        if self.latent_l2 < 0:
            raise ConfigError("latent_l2 must be >= 0")
        if not 0 < self.lr_final_frac <= 1:
            raise ConfigError("lr_final_frac must be in (0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown decoder keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DecoderModel:
    mlp: net.Mlp
    latent_dim: int
    z_center_mm: float
    z_halfspan_mm: float
    wed_scale_mm: float = 500.0
    # normalized |z| allowed beyond the training span
    z_margin: float = 0.25

    def normalize_z(self, z_mm):
        return (np.asarray(z_mm, dtype=float) - self.z_center_mm) / self.z_halfspan_mm

    def z_domain_mm(self) -> tuple[float, float]:
        r = (1 + self.z_margin) * self.z_halfspan_mm
        return self.z_center_mm - r, self.z_center_mm + r

    def inputs(self, latent, z_mm):
        latent = np.asarray(latent, dtype=float)
        if latent.shape != (self.latent_dim,):
            raise ShapeError(f"latent has shape {latent.shape}, decoder expects ({self.latent_dim},)")
        zn = self.normalize_z(z_mm)
        return np.column_stack([np.broadcast_to(latent, (zn.size, self.latent_dim)), zn])

    def lipschitz_bound(self) -> float:
        """Upper bound on |d decode / dz| in mm per mm (both channels jointly).

        Product of spectral norms of the weights, using only the z row of the
        first layer; each layer norm contributes at most max|gain| / sqrt(eps).
        """
        m = self.mlp
        c = float(np.linalg.norm(m.layer(0)[0][-1]))
        for i in range(m.n_layers):
            w, _, g, _ = m.layer(i)
            if i > 0:
                c *= float(np.linalg.norm(w, 2))
            if g is not None:
                c *= float(np.max(np.abs(g))) / np.sqrt(m.ln_eps)
        return c * self.wed_scale_mm / self.z_halfspan_mm


def decode(model: DecoderModel, latent, z_mm) -> WedProfile:
    z = np.atleast_1d(np.asarray(z_mm, dtype=float))
    if z.size == 0:
        raise DomainError("empty z grid")
    out = net.forward(model.mlp, model.inputs(latent, z)) * model.wed_scale_mm
    return WedProfile(z, out[:, 0], out[:, 1])


def _prepare(model: DecoderModel, profile: WedProfile):
    return model.normalize_z(profile.z_mm), profile.channels() / model.wed_scale_mm


@dataclass
class TrainResult:
    model: DecoderModel
    latents: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.model, self.latents))


def _adam_rows(table, grad, rows, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on selected rows of a table, each row with its own step count."""
    t[rows] += 1
    m[rows] = b1 * m[rows] + (1 - b1) * grad
    v[rows] = b2 * v[rows] + (1 - b2) * grad * grad
    c1 = (1 - b1 ** t[rows])[:, None]
    c2 = (1 - b2 ** t[rows])[:, None]
    table[rows] -= lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + eps)


def lr_factor(epoch: int, epochs: int, final_frac: float) -> float:
    """Cosine schedule from 1 at the first epoch to final_frac at the last."""
    if epochs <= 1:
        return 1.0
    return final_frac + (1 - final_frac) * 0.5 * (1 + math.cos(math.pi * epoch / (epochs - 1)))


def train_decoder(profiles: Sequence[WedProfile], config: TrainConfig = TrainConfig(),
                  ids: Sequence[str] | None = None) -> TrainResult:
    """Jointly fit decoder weights and one latent code per profile."""
    config.validate()
    n = len(profiles)
    if n == 0:
        raise DomainError("empty training set")
    if ids is None:
        ids = [str(i) for i in range(n)]
    if len(ids) != n:
        raise DomainError("ids and profiles differ in length")
    for p in profiles:
        p.validate()

    z_lo = min(float(p.z_mm[0]) for p in profiles)
    z_hi = max(float(p.z_mm[-1]) for p in profiles)
    halfspan = (z_hi - z_lo) / 2 if z_hi > z_lo else 1.0
    L = config.latent_dim
    rng = np.random.default_rng(config.seed)
    dims = [L + 1] + [config.hidden_width] * config.hidden_layers + [2]
    mlp = net.init_mlp(dims, seed=int(rng.integers(2**31)), layernorm=True)
    model = DecoderModel(mlp, L, (z_lo + z_hi) / 2, halfspan, config.wed_scale_mm)

    latents = rng.standard_normal((n, L)) / np.sqrt(L)
    lat_m = np.zeros_like(latents)
    lat_v = np.zeros_like(latents)
    lat_t = np.zeros(n, dtype=int)
    opt = net.adam_init(mlp.params, lr=config.lr_weights)
    data = [_prepare(model, p) for p in profiles]
    P = config.points_per_patient
    lam = config.latent_l2

    history = []
    step = 0
    for epoch in range(config.epochs):
        decay = lr_factor(epoch, config.epochs, config.lr_final_frac)
        opt.lr = config.lr_weights * decay
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            B = len(batch)
            zs, targets = [], []
            for b in batch:
                zn, tgt = data[b]
                idx = rng.integers(0, zn.size, P)
                zs.append(zn[idx])
                targets.append(tgt[idx])
            x = np.column_stack([np.repeat(latents[batch], P, axis=0), np.concatenate(zs)])
            out, cache = net.forward_cached(mlp, x)
            l1, dout = net.l1_loss(out, np.concatenate(targets))
            lat_b = latents[batch]
            reg = lam * float(np.sum(lat_b * lat_b)) / B
            loss = l1 + reg
            if not np.isfinite(loss):
                raise NumericError("non-finite decoder training loss", step=step)
            gs = net.backward_cached(mlp, cache, dout)
            dlat = gs.dx[:, :L].reshape(B, P, L).sum(axis=1) + 2 * lam * lat_b / B
            net.adam_step(mlp.params, gs.params, opt)
            _adam_rows(latents, dlat, batch, lat_m, lat_v, lat_t, config.lr_latents * decay)
            total += loss * B
            step += 1
        history.append(total / n)
        if epoch % 20 == 0 or epoch == config.epochs - 1:
            log.info("decoder epoch %d loss %.6f", epoch, history[-1])

    table = {rid: latents[i].copy() for i, rid in enumerate(ids)}
    return TrainResult(model, table, history)


def fit_latent(model: DecoderModel, observed: WedProfile, init, steps: int = 300, lr: float = 1e-2,
               latent_l2: float = 1e-4):
    """Optimize a latent against observed samples with the decoder frozen.

    Minimizes mean L1 (scaled units) + latent_l2 * ||latent||^2 by Adam and
    returns the iterate with the lowest mean-L1 residual, reported in mm.
    Keeping the best iterate means the result never fits worse than `init`.
    """
    if len(observed) == 0:
        raise DomainError("nothing observed")
    lat = np.array(init, dtype=float)
    if lat.shape != (model.latent_dim,):
        raise ShapeError(f"latent has shape {lat.shape}, decoder expects ({model.latent_dim},)")
    zn, target = _prepare(model, observed)
    L = model.latent_dim
    mlp = model.mlp

    def evaluate(v):
        x = np.column_stack([np.broadcast_to(v, (zn.size, L)), zn])
        out, cache = net.forward_cached(mlp, x)
        diff = out - target
        return float(np.mean(np.abs(diff))) * model.wed_scale_mm, cache, diff

    resid, cache, diff = evaluate(lat)
    best_resid, best = resid, lat.copy()
    opt = net.adam_init([lat], lr=lr)
    for step in range(steps):
        dout = np.sign(diff) / diff.size
        gs = net.backward_cached(mlp, cache, dout, need_params=False)
        grad = gs.dx[:, :L].sum(axis=0) + 2 * latent_l2 * lat
        net.adam_step([lat], [grad], opt)
        if not np.all(np.isfinite(lat)):
            raise NumericError("latent became non-finite", step=step)
        resid, cache, diff = evaluate(lat)
        if resid < best_resid:
            best_resid, best = resid, lat.copy()
    return best, best_resid


# --- persistence -----------------------------------------------------------

def save_decoder(model: DecoderModel, path, train_config: TrainConfig | None = None,
                 extra: dict | None = None) -> None:
    meta = {
        **(extra or {}),
        "latent_dim": model.latent_dim,
        "z_center_mm": model.z_center_mm,
        "z_halfspan_mm": model.z_halfspan_mm,
        "wed_scale_mm": model.wed_scale_mm,
        "z_margin": model.z_margin,
    }
    if train_config is not None:
        meta["train_config"] = dataclasses.asdict(train_config)
    net.save_checkpoint(path, "decoder", {"mlp": model.mlp}, meta)


def load_decoder(path) -> DecoderModel:
    nets, meta = net.load_checkpoint(path, kind="decoder")
    try:
        model = DecoderModel(nets["mlp"], int(meta["latent_dim"]), float(meta["z_center_mm"]),
                             float(meta["z_halfspan_mm"]), float(meta["wed_scale_mm"]),
                             float(meta.get("z_margin", 0.25)))
    except KeyError as exc:
        raise FormatError(f"decoder checkpoint {path} missing {exc}") from exc
    if model.mlp.in_dim != model.latent_dim + 1 or model.mlp.out_dim != 2:
        raise FormatError("decoder network does not match its latent dimension")
    return model


def save_latents(latents: dict, path, extra: dict | None = None) -> None:
    dims = {len(v) for v in latents.values()}
    payload = {
        **(extra or {}),
        "format": LATENTS_FORMAT,
        "version": LATENTS_VERSION,
        "latent_dim": dims.pop() if len(dims) == 1 else None,
        "latents": {k: np.asarray(v).tolist() for k, v in latents.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_latents(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != LATENTS_FORMAT:
        raise FormatError(f"{path} is not a latent table")
    if payload.get("version") != LATENTS_VERSION:
        raise VersionError(f"{path}: latent table version {payload.get('version')!r}")
    return {k: np.asarray(v, dtype=float) for k, v in payload["latents"].items()}
