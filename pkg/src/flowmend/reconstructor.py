"""Skip-connected denoising autoencoder that restores occluded flow fields."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from . import nn
from .flow_core import FlowField
from .nn import Tensor

log = logging.getLogger(__name__)

LOSSES = ("mse", "wing", "endpoint")
ALL_SKIPS = (1, 2, 3)


class ConfigError(ValueError):
    pass


def parse_skips(value) -> tuple[int, ...]:
    """Normalise a skip set: iterables of ints, or strings like ``"1+2+3"``, ``"/"``, ``"none"``."""
    if isinstance(value, str):
        text = value.strip().lower()
        if text in ("", "/", "none", "empty"):
            return ()
        value = [int(tok) for tok in text.replace(",", "+").split("+") if tok.strip()]
    skips = tuple(sorted(set(int(v) for v in value)))
    if not set(skips) <= set(ALL_SKIPS):
        raise ConfigError(f"skip connections must be a subset of {{1, 2, 3}}, got {skips}")
    return skips


def skip_label(skips) -> str:
    """Table label for a skip set: ``/`` for none, else e.g. ``1+2+3``."""
    skips = parse_skips(skips)
    return "+".join(str(s) for s in skips) if skips else "/"


def all_skip_sets() -> list[tuple[int, ...]]:
    return [c for r in range(len(ALL_SKIPS) + 1) for c in combinations(ALL_SKIPS, r)]


@dataclass(frozen=True)
class AEConfig:
    input_size: int = 64
    levels: int = 3
    encoder_channels: tuple[int, int, int] = (32, 64, 128)
    skips: tuple[int, ...] = (1, 2, 3)
    loss: str = "endpoint"
    wing_w: float = 10.0
    wing_eps: float = 2.0
    lr: float = 1e-3
    epochs: int = 50
    batch: int = 32
    seed: int = 0
    flow_scale: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "skips", parse_skips(self.skips))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.levels != 3:
            raise ConfigError("the autoencoder has exactly 3 levels")
        if len(self.encoder_channels) != 3 or min(self.encoder_channels) < 1:
            raise ConfigError("encoder_channels needs 3 positive widths")
        if self.input_size < 8 or self.input_size % 8:
            raise ConfigError("input_size must be a positive multiple of 8")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.wing_w <= 0 or self.wing_eps <= 0:
            raise ConfigError("wing_w and wing_eps must be positive")
        if self.lr < 0 or self.epochs < 1 or self.batch < 1:
            raise ConfigError("lr >= 0, epochs >= 1 and batch >= 1 required")
        if self.flow_scale <= 0:
            raise ConfigError("flow_scale must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["skips"] = list(self.skips)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AEConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown autoencoder settings: {sorted(unknown)}")
        return cls(**known)


class Autoencoder(nn.Model):
    """Encoder: 3 x (conv3x3, ReLU, maxpool2).  Decoder: 3 x (upsample2,
    optional concat of the encoder activation at that resolution, conv3x3,
    ReLU), then a linear conv3x3 back to 2 channels.

    Skip 1 joins the full-resolution level, skip 3 the innermost one.
    """

    kind = "autoencoder"

    def __init__(self, cfg: AEConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c1, c2, c3 = cfg.encoder_channels
        s = set(cfg.skips)
        self.layers = {
            "enc1": nn.Conv3x3(2, c1, rng),
            "enc2": nn.Conv3x3(c1, c2, rng),
            "enc3": nn.Conv3x3(c2, c3, rng),
            "dec3": nn.Conv3x3(c3 + (c3 if 3 in s else 0), c3, rng),
            "dec2": nn.Conv3x3(c3 + (c2 if 2 in s else 0), c2, rng),
            "dec1": nn.Conv3x3(c2 + (c1 if 1 in s else 0), c1, rng),
            "out": nn.Conv3x3(c1, 2, rng),
        }

    def config_dict(self) -> dict:
        return self.cfg.to_dict()

    def __call__(self, x) -> Tensor:
        L = self.layers
        skips = self.cfg.skips
        e1 = nn.relu(L["enc1"](x))
        e2 = nn.relu(L["enc2"](nn.maxpool2(e1)))
        e3 = nn.relu(L["enc3"](nn.maxpool2(e2)))
        d = nn.maxpool2(e3)
        for level, enc in ((3, e3), (2, e2), (1, e1)):
            d = nn.upsample2(d)
            if level in skips:
                d = nn.concat_channels(d, enc)
            d = nn.relu(L[f"dec{level}"](d))
        return L["out"](d)


def build_autoencoder(cfg: AEConfig) -> Autoencoder:
    return Autoencoder(cfg).astype(cfg.dtype)


def load_autoencoder(path) -> Autoencoder:
    state, meta = nn.load_checkpoint(path)
    if meta.get("kind") != Autoencoder.kind:
        raise nn.CheckpointError(f"checkpoint holds a {meta.get('kind')!r}, not an autoencoder")
    model = build_autoencoder(AEConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# Losses

def _batched(x) -> Tensor:
    if isinstance(x, FlowField):
        x = x.to_array()
    t = nn.as_tensor(x)
    if t.data.ndim == 3:
        if t.requires_grad:
            raise ValueError("pass batched (N, 2, H, W) tensors when gradients are needed")
        t = Tensor(t.data[None])
    return t


def _residual(pred, target):
    pred, target = _batched(pred), _batched(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    return pred, target, pred.data - target.data


def _finish(value, pred, target, grad):
    def backward(g):
        pred._accumulate(g * grad)
        target._accumulate(-g * grad)

    return nn._make(value, (pred, target), backward)


def mse_loss(pred, target) -> Tensor:
    """Mean squared difference over every cell and channel."""
    pred, target, r = _residual(pred, target)
    return _finish(np.mean(r * r), pred, target, 2.0 * r / r.size)


def wing_constant(w: float, eps: float) -> float:
    return w - w * np.log1p(w / eps)


def wing_loss(pred, target, w: float = 10.0, eps: float = 2.0) -> Tensor:
    """Mean wing loss: ``w*ln(1+|x|/eps)`` below ``w``, ``|x| - C`` above,
    with ``C`` making the two branches meet at ``|x| = w``."""
    if w <= 0 or eps <= 0:
        raise ValueError("wing loss needs w > 0 and eps > 0")
    pred, target, r = _residual(pred, target)
    a = np.abs(r)
    small = a < w
    vals = np.where(small, w * np.log1p(a / eps), a - wing_constant(w, eps))
    slope = np.where(small, w / (eps + a), 1.0)
    return _finish(np.mean(vals), pred, target, np.sign(r) * slope / r.size)


def endpoint_loss(pred, target) -> Tensor:
    """Mean per-pixel Euclidean distance between (u, v) vectors."""
    pred, target, r = _residual(pred, target)
    if r.shape[1] != 2:
        raise ValueError("endpoint loss needs 2-channel flows")
    norm = np.sqrt(r[:, 0] ** 2 + r[:, 1] ** 2)
    count = norm.size
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where(norm > 0, 1.0, 0.0)[:, None] * r / safe[:, None] / count
    return _finish(np.mean(norm), pred, target, grad)


def loss_function(cfg: AEConfig):
    if cfg.loss == "mse":
        return mse_loss
    if cfg.loss == "wing":
        return lambda p, t: wing_loss(p, t, cfg.wing_w, cfg.wing_eps)
    return endpoint_loss


# ---------------------------------------------------------------------------
# Training

@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def record(self, epoch, train, val):
        self.epochs.append(epoch)
        self.train_loss.append(float(train))
        self.val_loss.append(float(val))

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_loss))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, tr, va in self.rows():
                w.writerow([e, f"{tr:.6g}", f"{va:.6g}"])


def stack_flows(flows) -> np.ndarray:
    """Stack FlowFields or (2, H, W) arrays into an (N, 2, H, W) float64 array."""
    arrs = [f.to_array() if isinstance(f, FlowField) else np.asarray(f) for f in flows]
    return np.stack(arrs).astype(np.float64)


def _check_input(cfg, x: np.ndarray):
    expected = (2, cfg.input_size, cfg.input_size)
    if x.shape[1:] != expected:
        raise ValueError(f"flow of shape {x.shape[1:]} does not match the configured input {expected}")


def evaluate_loss(model, x: np.ndarray, y: np.ndarray, loss_fn, batch: int = 64) -> float:
    total = 0.0
    with nn.no_grad():
        for i in range(0, len(x), batch):
            out = model(x[i:i + batch])
            total += loss_fn(out, y[i:i + batch]).item() * len(x[i:i + batch])
    return total / len(x)


def train_reconstructor(cfg: AEConfig, train_pairs, val_pairs=(), model=None):
    """Fit the autoencoder on ``(occluded, clean)`` flow pairs.

    After every epoch the validation loss is measured; the returned model
    holds the parameters of the epoch with the lowest validation loss
    (training loss when no validation pairs are given).
    """
    if len(train_pairs) == 0:
        raise ValueError("empty training set")
    dt = np.dtype(cfg.dtype)
    x = (stack_flows([p[0] for p in train_pairs]) / cfg.flow_scale).astype(dt)
    y = (stack_flows([p[1] for p in train_pairs]) / cfg.flow_scale).astype(dt)
    _check_input(cfg, x)
    if len(val_pairs):
        vx = (stack_flows([p[0] for p in val_pairs]) / cfg.flow_scale).astype(dt)
        vy = (stack_flows([p[1] for p in val_pairs]) / cfg.flow_scale).astype(dt)
        _check_input(cfg, vx)
    model = model or build_autoencoder(cfg)
    loss_fn = loss_function(cfg)
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    history = History()
    best, best_state = np.inf, model.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        running = 0.0
        for i in range(0, len(x), cfg.batch):
            idx = order[i:i + cfg.batch]
            opt.zero_grad()
            loss = loss_fn(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        train_loss = running / len(x)
        val_loss = evaluate_loss(model, vx, vy, loss_fn) if len(val_pairs) else train_loss
        history.record(epoch, train_loss, val_loss)
        log.debug("ae epoch %d train %.5g val %.5g", epoch, train_loss, val_loss)
        if val_loss < best:
            best, best_state = val_loss, model.state_dict()
            history.best_epoch = epoch
    model.load_state_dict(best_state)
    return model, history


def reconstruct_batch(model: Autoencoder, flows: np.ndarray, batch: int = 64) -> np.ndarray:
    """Reconstruct an (N, 2, H, W) stack of occluded flows."""
    cfg = model.cfg
    flows = np.asarray(flows, dtype=np.float64)
    _check_input(cfg, flows)
    out = []
    with nn.no_grad():
        for i in range(0, len(flows), batch):
            x = (flows[i:i + batch] / cfg.flow_scale).astype(model.dtype)
            out.append(model(x).data.astype(np.float64) * cfg.flow_scale)
    return np.concatenate(out) if out else np.zeros_like(flows)


def reconstruct(model: Autoencoder, occluded: FlowField) -> FlowField:
    return FlowField.from_array(reconstruct_batch(model, occluded.to_array()[None])[0])

