"""Expression CNN operating directly on 2-channel flow fields."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .dataset import N_CLASSES
from .flow_core import FlowField
from .reconstructor import ConfigError, stack_flows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CNNConfig:
    input_size: int = 64
    channels: tuple[int, int, int] = (32, 64, 128)
    hidden: int = 256
    n_classes: int = N_CLASSES
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 32
    seed: int = 0
    flow_scale: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError("the classifier has exactly 3 conv blocks with positive widths")
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"the classifier predicts {N_CLASSES} classes")
        if self.input_size < 8 or self.input_size % 8:
            raise ConfigError("input_size must be a positive multiple of 8")
        if self.hidden < 1 or self.lr < 0 or self.epochs < 1 or self.batch < 1:
            raise ConfigError("hidden >= 1, lr >= 0, epochs >= 1 and batch >= 1 required")
        if self.flow_scale <= 0:
            raise ConfigError("flow_scale must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CNNConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown classifier settings: {sorted(unknown)}")
        return cls(**d)


class FlowCNN(nn.Model):
    """3 x (conv3x3, ReLU, maxpool2), flatten, dense + ReLU, dense to 6 logits."""

    kind = "classifier"

    def __init__(self, cfg: CNNConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c1, c2, c3 = cfg.channels
        side = cfg.input_size // 8
        self.layers = {
            "conv1": nn.Conv3x3(2, c1, rng),
            "conv2": nn.Conv3x3(c1, c2, rng),
            "conv3": nn.Conv3x3(c2, c3, rng),
            "fc1": nn.Dense(c3 * side * side, cfg.hidden, rng),
            "fc2": nn.Dense(cfg.hidden, cfg.n_classes, rng),
        }

    def config_dict(self) -> dict:
        return self.cfg.to_dict()

    def __call__(self, x) -> nn.Tensor:
        h = x
        for name in ("conv1", "conv2", "conv3"):
            h = nn.maxpool2(nn.relu(self.layers[name](h)))
        h = nn.relu(self.layers["fc1"](nn.flatten(h)))
        return self.layers["fc2"](h)


def build_classifier(cfg: CNNConfig) -> FlowCNN:
    return FlowCNN(cfg).astype(cfg.dtype)


def load_classifier(path) -> FlowCNN:
    state, meta = nn.load_checkpoint(path)
    if meta.get("kind") != FlowCNN.kind:
        raise nn.CheckpointError(f"checkpoint holds a {meta.get('kind')!r}, not a classifier")
    model = build_classifier(CNNConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model


@dataclass
class ClassifierHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def record(self, epoch, train, val, acc):
        self.epochs.append(epoch)
        self.train_loss.append(float(train))
        self.val_loss.append(float(val))
        self.val_accuracy.append(float(acc))

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_loss, self.val_accuracy))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
            for e, tr, va, acc in self.rows():
                w.writerow([e, f"{tr:.6g}", f"{va:.6g}", f"{acc:.6g}"])


def _unpack(samples, cfg: CNNConfig):
    x = (stack_flows([s[0] for s in samples]) / cfg.flow_scale).astype(cfg.dtype)
    y = np.array([int(s[1]) for s in samples], dtype=np.int64)
    if x.shape[1:] != (2, cfg.input_size, cfg.input_size):
        raise ValueError(f"flow of shape {x.shape[1:]} does not match the configured input")
    if y.min() < 0 or y.max() >= cfg.n_classes:
        raise ValueError("label out of range")
    return x, y


def logits_batch(model: FlowCNN, x: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with nn.no_grad():
        for i in range(0, len(x), batch):
            out.append(model(x[i:i + batch]).data.astype(np.float64))
    return np.concatenate(out)


def _evaluate(model, x, y):
    logits = logits_batch(model, x)
    loss = nn.softmax_cross_entropy(logits, y).item()
    return loss, float(np.mean(logits.argmax(axis=1) == y))


def train_classifier(cfg: CNNConfig, train, val=()):
    """Fit on ``(flow, label)`` samples; keep the epoch with the best
    validation accuracy, ties broken by lower validation loss."""
    if len(train) == 0:
        raise ValueError("empty training set")
    x, y = _unpack(train, cfg)
    if len(val):
        vx, vy = _unpack(val, cfg)
    else:
        vx, vy = x, y
    model = build_classifier(cfg)
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    history = ClassifierHistory()
    best, best_state = (-1.0, np.inf), model.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        running = 0.0
        for i in range(0, len(x), cfg.batch):
            idx = order[i:i + cfg.batch]
            opt.zero_grad()
            loss = nn.softmax_cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        val_loss, val_acc = _evaluate(model, vx, vy)
        history.record(epoch, running / len(x), val_loss, val_acc)
        log.debug("cnn epoch %d loss %.4g val acc %.3f", epoch, running / len(x), val_acc)
        if val_acc > best[0] or (val_acc == best[0] and val_loss < best[1]):
            best, best_state = (val_acc, val_loss), model.state_dict()
            history.best_epoch = epoch
    model.load_state_dict(best_state)
    return model, history


def _as_batch(model, flows) -> np.ndarray:
    if isinstance(flows, FlowField):
        flows = flows.to_array()
    x = np.asarray(flows, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    size = model.cfg.input_size
    if x.shape[1:] != (2, size, size):
        raise ValueError(f"flow of shape {x.shape[1:]} does not match the configured input (2, {size}, {size})")
    return (x / model.cfg.flow_scale).astype(model.dtype)


def predict(model: FlowCNN, flow) -> tuple[int, np.ndarray]:
    """Most likely class of one flow and the softmax probability vector."""
    probs = nn.softmax(logits_batch(model, _as_batch(model, flow))[0])
    return int(probs.argmax()), probs


def predict_batch(model: FlowCNN, flows) -> np.ndarray:
    return logits_batch(model, _as_batch(model, flows)).argmax(axis=1)


def accuracy(model: FlowCNN, test) -> float:
    """Fraction of ``(flow, label)`` samples classified correctly."""
    if len(test) == 0:
        raise ValueError("empty test set")
    x, y = _unpack(test, model.cfg)
    return float(np.mean(logits_batch(model, x).argmax(axis=1) == y))
