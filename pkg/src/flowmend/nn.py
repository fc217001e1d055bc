"""A small reverse-mode autodiff engine over float numpy arrays.

Only the operations the flow autoencoder and the expression CNN need are
provided: 3x3 convolution, ReLU, 2x max pooling, 2x nearest upsampling,
channel concatenation, dense layers and softmax cross-entropy.  Every op
records a closure that pushes its output gradient to its inputs; calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order.
"""
from __future__ import annotations

import contextlib
import json
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Back-propagate from this scalar into every reachable leaf with ``requires_grad``."""
        if self._backward is None:
            raise RuntimeError("backward without forward: tensor was not produced by a recorded op")
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # Intermediate gradients start fresh each pass; leaves accumulate.
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def sum(self) -> Tensor:
        return _make(self.data.sum(), (self,), lambda g: self._accumulate(np.broadcast_to(g, self.shape)))

    def mean(self) -> Tensor:
        n = self.data.size
        return _make(self.data.mean(), (self,), lambda g: self._accumulate(np.broadcast_to(g / n, self.shape)))


_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (per thread)."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def _make(data, parents, backward) -> Tensor:
    needs = not getattr(_state, "disabled", False) and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (),
                  _backward=backward if needs else _no_backward)


def _no_backward(g):
    pass


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Ops

def _im2col(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (n, c*9, h*w) patches, zero padding of 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * 9, h * w)


def conv3x3(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded 3x3 cross-correlation.  ``weight`` is (out, in, 3, 3)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"conv3x3 expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    o = weight.shape[0]
    if weight.shape != (o, c, 3, 3):
        raise ShapeError(f"weight {weight.shape} does not match {c} input channels")
    cols = _im2col(x.data)
    wm = weight.data.reshape(o, c * 9)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, h, w)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, o, h * w)
        if weight.requires_grad:
            weight._accumulate(np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wm.T, g2).reshape(n, c, 3, 3, h, w)
            dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
            x._accumulate(dxp[:, :, 1:-1, 1:-1])

    return _make(out, parents, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: x._accumulate(g * keep))


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        x._accumulate(gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return _make(out, (x,), backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make(out, (x,), lambda g: x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))))


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(x.data.reshape(shape[0], -1), (x,), lambda g: x._accumulate(g.reshape(shape)))


def dense(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weight.data)

    return _make(out, parents, backward)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    z = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} rows of logits")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ShapeError("label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(log_norm - shifted[rows, labels])

    def backward(g):
        p = softmax(z)
        p[rows, labels] -= 1.0
        logits._accumulate((g / z.shape[0] * p).reshape(logits.shape))

    return _make(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# Layers and models

def kaiming_uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv3x3:
    def __init__(self, c_in: int, c_out: int, rng):
        self.weight = parameter(kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x):
        return conv3x3(x, self.weight, self.bias)

    def named_parameters(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class Dense:
    def __init__(self, n_in: int, n_out: int, rng):
        self.weight = parameter(kaiming_uniform(rng, (n_out, n_in), n_in))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x):
        return dense(x, self.weight, self.bias)

    def named_parameters(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class Model:
    """Base for networks: subclasses fill ``self.layers`` (name -> layer) and a ``config``."""

    kind = "model"

    def __init__(self):
        self.layers = {}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, layer in self.layers.items():
            out.extend(layer.named_parameters(name))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ShapeError("state dict keys do not match the model")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.data.dtype, copy=True)

    def astype(self, dtype) -> Model:
        """Cast every parameter to ``dtype`` (float32 or float64) in place."""
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported parameter dtype {dtype}")
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].data.dtype if params else np.dtype(np.float64)

    def config_dict(self) -> dict:
        return {}

    def save(self, path):
        save_checkpoint(path, self.state_dict(), {"kind": self.kind, "config": self.config_dict()})


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of the arrays in ``params``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON manifest, then little-endian float64 blocks

CHECKPOINT_MAGIC = b"FLOWMEND"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None):
    layers = [{"name": k, "shape": list(np.shape(v))} for k, v in state.items()]
    manifest = json.dumps({"meta": meta or {}, "layers": layers}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest)))
        fh.write(manifest)
        for v in state.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, mlen = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = _CKPT_HEADER.size
    try:
        manifest = json.loads(raw[offset:offset + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt manifest") from exc
    offset += mlen
    state = {}
    for layer in manifest["layers"]:
        shape = tuple(layer["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise CheckpointError("truncated parameter data")
        state[layer["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    return state, manifest["meta"]
