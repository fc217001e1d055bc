"""Grayscale frames, dense Farneback optical flow, window-mean resizing and
Middlebury ``.flo`` serialization.

Frames are plain 2-D ``float64`` arrays with luminance in [0, 1].  Flow fields
carry a horizontal component ``u`` (pixels along columns) and a vertical
component ``v`` (pixels along rows) such that ``prev[y, x]`` reappears at
``next[y + v, x + u]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

FLO_MAGIC = 202021.25
_FLO_HEADER = struct.Struct("<fii")

# OpenCV works on 0..255 intensities; its solver regularisation is tuned for that range.
_INTENSITY_SCALE = 255.0
_SOLVE_EPS = 1e-3


class FlowError(ValueError):
    """Raised for malformed images, flows or flow files."""


def as_gray(image) -> np.ndarray:
    """Validate a luminance grid and return it as a float64 array."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise FlowError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise FlowError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise FlowError("image values must lie in [0, 1]")
    return img


def load_image(path) -> np.ndarray:
    """Read an 8-bit PGM/PNG file as a grayscale image scaled by 1/255."""
    from PIL import Image

    with Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64)
    return data / 255.0


def save_image(image, path) -> None:
    """Write a [0, 1] grayscale image as an 8-bit PNG or PGM (by suffix)."""
    from PIL import Image

    img = as_gray(image)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def save_rgb(image, path) -> None:
    """Write an (H, W, 3) uint8 image, or floats in [0, 1], as an 8-bit RGB PNG."""
    from PIL import Image

    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FlowError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.round(np.clip(img.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img).save(path)


@dataclass(frozen=True, eq=False)
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u)
        v = np.asarray(self.v)
        if not np.issubdtype(u.dtype, np.floating):
            u = u.astype(np.float64)
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        if u.ndim != 2 or u.shape != v.shape or u.size == 0:
            raise FlowError(f"u and v must be equal non-empty 2-D grids, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise FlowError("flow contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def to_array(self) -> np.ndarray:
        """Stack as a (2, H, W) array, the layout the networks consume."""
        return np.stack([self.u, self.v])

    @classmethod
    def from_array(cls, arr) -> FlowField:
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise FlowError(f"expected a (2, H, W) array, got {arr.shape}")
        return cls(arr[0], arr[1])

    @classmethod
    def zeros(cls, height: int, width: int) -> FlowField:
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v)


def endpoint_error(a: FlowField, b: FlowField, mask=None) -> float:
    """Mean per-pixel Euclidean distance between two flows, optionally on a boolean mask."""
    if a.shape != b.shape:
        raise FlowError(f"flow shapes differ: {a.shape} vs {b.shape}")
    epe = np.hypot(a.u - b.u, a.v - b.v)
    if mask is not None:
        epe = epe[np.asarray(mask, dtype=bool)]
        if epe.size == 0:
            return 0.0
    return float(epe.mean())


# ---------------------------------------------------------------------------
# Farneback estimation

@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.2

    def __post_init__(self):
        if not 0.0 < self.pyramid_scale < 1.0:
            raise FlowError("pyramid_scale must lie in (0, 1)")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise FlowError("window_size must be a positive odd number")
        if self.iterations < 1:
            raise FlowError("iterations must be >= 1")
        if self.pyramid_levels < 1:
            raise FlowError("pyramid_levels must be >= 1")
        if self.poly_n < 1 or self.poly_sigma <= 0:
            raise FlowError("poly_n must be >= 1 and poly_sigma > 0")


def _poly_basis(n: int, sigma: float):
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-x * x / (2.0 * sigma * sigma))
    g /= g.sum()
    kernels = (g, x * g, x * x * g)
    # Gram matrix of the basis {1, x, y, x^2, y^2, xy} under the weight g(x) g(y).
    yy, xx = np.meshgrid(x, x, indexing="ij")
    w = np.outer(g, g)
    basis = np.stack([np.ones_like(xx), xx, yy, xx * xx, yy * yy, xx * yy]).reshape(6, -1)
    gram = (basis * w.ravel()) @ basis.T
    return kernels, np.linalg.inv(gram)


def _poly_expansion(img: np.ndarray, n: int, sigma: float):
    """Fit f ~ x'Ax + b'x + c around every pixel; returns (a11, a12, a22, b1, b2)."""
    (k0, k1, k2), inv_gram = _poly_basis(n, sigma)

    def proj(kx, ky):
        tmp = ndimage.correlate1d(img, ky, axis=0, mode="nearest")
        return ndimage.correlate1d(tmp, kx, axis=1, mode="nearest")

    p = np.stack([proj(k0, k0), proj(k1, k0), proj(k0, k1),
                  proj(k2, k0), proj(k0, k2), proj(k1, k1)])
    r = np.tensordot(inv_gram, p, axes=1)
    # r = [c, bx, by, axx, ayy, axy]
    return r[3], r[5] / 2.0, r[4], r[1], r[2]


def _resample(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = img.shape
    rows = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    cols = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    rr, cc = np.meshgrid(np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


def _pyramid_shapes(shape, params: FlowParams) -> list[tuple[int, int]]:
    min_side = 2 * params.poly_n + 1
    shapes = []
    for level in range(params.pyramid_levels):
        scale = params.pyramid_scale ** level
        s = (int(round(shape[0] * scale)), int(round(shape[1] * scale)))
        if level > 0 and min(s) < min_side:
            break
        shapes.append(s)
    return shapes


def _refine(poly1, poly2, flow, window: int, iterations: int):
    a11, a12, a22, b1x, b1y = poly1
    h, w = a11.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = flow
    for _ in range(iterations):
        coords = [yy + v, xx + u]
        w11, w12, w22, wbx, wby = (
            ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in poly2
        )
        m11 = (a11 + w11) / 2.0
        m12 = (a12 + w12) / 2.0
        m22 = (a22 + w22) / 2.0
        dbx = -0.5 * (wbx - b1x) + m11 * u + m12 * v
        dby = -0.5 * (wby - b1y) + m12 * u + m22 * v
        g11 = ndimage.uniform_filter(m11 * m11 + m12 * m12, window, mode="nearest")
        g12 = ndimage.uniform_filter(m11 * m12 + m12 * m22, window, mode="nearest")
        g22 = ndimage.uniform_filter(m12 * m12 + m22 * m22, window, mode="nearest")
        h1 = ndimage.uniform_filter(m11 * dbx + m12 * dby, window, mode="nearest")
        h2 = ndimage.uniform_filter(m12 * dbx + m22 * dby, window, mode="nearest")
        det = g11 * g22 - g12 * g12 + _SOLVE_EPS
        u = (g22 * h1 - g12 * h2) / det
        v = (g11 * h2 - g12 * h1) / det
    return u, v


def estimate_flow(prev, next, params: FlowParams | None = None) -> FlowField:
    """Dense Farneback flow from ``prev`` to ``next``.

    Polynomial expansion uses a Gaussian applicability of radius ``poly_n``;
    displacements are refined coarse-to-fine over an image pyramid with a box
    averaging window.  Borders are replicate-padded throughout.
    """
    params = params or FlowParams()
    prev = as_gray(prev)
    next = as_gray(next)
    if prev.shape != next.shape:
        raise FlowError(f"dimension mismatch: {prev.shape} vs {next.shape}")
    if min(prev.shape) < 2 * params.poly_n:
        raise FlowError(f"image {prev.shape} too small for poly_n={params.poly_n}")

    shapes = _pyramid_shapes(prev.shape, params)
    f0 = prev * _INTENSITY_SCALE
    f1 = next * _INTENSITY_SCALE
    flow = None
    for shape in reversed(shapes):
        if shape == prev.shape:
            i0, i1 = f0, f1
        else:
            sigma = (prev.shape[0] / shape[0] - 1.0) * 0.5
            i0 = _resample(ndimage.gaussian_filter(f0, sigma, mode="nearest"), shape)
            i1 = _resample(ndimage.gaussian_filter(f1, sigma, mode="nearest"), shape)
        if flow is None:
            flow = (np.zeros(shape), np.zeros(shape))
        else:
            sy = shape[0] / flow[0].shape[0]
            sx = shape[1] / flow[0].shape[1]
            flow = (_resample(flow[0], shape) * sx, _resample(flow[1], shape) * sy)
        poly1 = _poly_expansion(i0, params.poly_n, params.poly_sigma)
        poly2 = _poly_expansion(i1, params.poly_n, params.poly_sigma)
        flow = _refine(poly1, poly2, flow, params.window_size, params.iterations)
    return FlowField(flow[0], flow[1])


# ---------------------------------------------------------------------------
# Window-mean resizing

@dataclass(frozen=True)
class ResizeSpec:
    orig_size_x: int
    orig_size_y: int
    final_size_x: int
    final_size_y: int

    def __post_init__(self):
        if self.final_size_x < 1 or self.final_size_y < 1:
            raise FlowError("final size must be >= 1")
        if self.final_size_x > self.orig_size_x or self.final_size_y > self.orig_size_y:
            raise FlowError("final size exceeds original size (downscale only)")

    @property
    def dx(self) -> float:
        return self.orig_size_x / self.final_size_x

    @property
    def dy(self) -> float:
        return self.orig_size_y / self.final_size_y

    @classmethod
    def for_flow(cls, flow: FlowField, final_size_x: int, final_size_y: int | None = None) -> ResizeSpec:
        return cls(flow.width, flow.height, final_size_x,
                   final_size_x if final_size_y is None else final_size_y)


def window_bounds(orig: int, final: int) -> list[tuple[int, int]]:
    """Inclusive source ranges [floor(d*i), ceil(d*(i+1)) - 1] with d = orig/final.

    Evaluated in integer arithmetic so the last window ends exactly at ``orig - 1``.
    """
    return [((orig * i) // final, -(-orig * (i + 1) // final) - 1) for i in range(final)]


def _averaging_matrix(orig: int, final: int) -> np.ndarray:
    m = np.zeros((final, orig))
    for i, (lo, hi) in enumerate(window_bounds(orig, final)):
        m[i, lo:hi + 1] = 1.0 / (hi - lo + 1)
    return m


def resize_flow(flow: FlowField, spec: ResizeSpec) -> FlowField:
    """Average-pool a flow onto ``spec``'s final grid.

    Each output cell holds the mean of the source window given by
    :func:`window_bounds` along rows and columns.  Displacement values are
    averaged, not rescaled.
    """
    if (flow.width, flow.height) != (spec.orig_size_x, spec.orig_size_y):
        raise FlowError(
            f"resize spec expects {spec.orig_size_x}x{spec.orig_size_y}, flow is {flow.width}x{flow.height}")
    if (spec.final_size_x, spec.final_size_y) == (spec.orig_size_x, spec.orig_size_y):
        return FlowField(flow.u.copy(), flow.v.copy())
    ry = _averaging_matrix(spec.orig_size_y, spec.final_size_y)
    rx = _averaging_matrix(spec.orig_size_x, spec.final_size_x)
    return FlowField(ry @ flow.u @ rx.T, ry @ flow.v @ rx.T)


# ---------------------------------------------------------------------------
# Visualisation

def flow_to_hsv(flow: FlowField) -> np.ndarray:
    """HSV rendering as an (H, W, 3) array: hue in degrees [0, 360), saturation 1,
    value = magnitude / max magnitude (all zero when the flow is zero)."""
    hue = np.degrees(np.arctan2(flow.v, flow.u)) % 360.0
    mag = np.hypot(flow.u, flow.v)
    peak = mag.max()
    value = mag / peak if peak > 0 else np.zeros_like(mag)
    return np.stack([hue, np.ones_like(hue), value], axis=-1)


def flow_to_rgb(flow: FlowField) -> np.ndarray:
    """8-bit RGB rendering of :func:`flow_to_hsv`."""
    from matplotlib.colors import hsv_to_rgb

    hsv = flow_to_hsv(flow)
    hsv[..., 0] /= 360.0
    return np.round(hsv_to_rgb(hsv) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Middlebury .flo

def write_flo(flow: FlowField, path) -> None:
    """Write ``flow`` as little-endian float32 Middlebury data."""
    if not (np.all(np.isfinite(flow.u)) and np.all(np.isfinite(flow.v))):
        raise FlowError("cannot write non-finite flow")
    data = np.empty((flow.height, flow.width, 2), dtype="<f4")
    data[..., 0] = flow.u
    data[..., 1] = flow.v
    with open(path, "wb") as fh:
        fh.write(_FLO_HEADER.pack(FLO_MAGIC, flow.width, flow.height))
        fh.write(data.tobytes())


def read_flo(path) -> FlowField:
    """Read a Middlebury ``.flo`` file; components come back as float32."""
    raw = Path(path).read_bytes()
    if len(raw) < _FLO_HEADER.size:
        raise FlowError("truncated file: incomplete header")
    magic, width, height = _FLO_HEADER.unpack_from(raw)
    if magic != FLO_MAGIC:
        raise FlowError("bad magic")
    if width < 1 or height < 1:
        raise FlowError(f"invalid dimensions {width}x{height}")
    expected = _FLO_HEADER.size + 8 * width * height
    if len(raw) < expected:
        raise FlowError(f"truncated file: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=_FLO_HEADER.size)
    data = data.reshape(height, width, 2).astype(np.float32)
    return FlowField(data[..., 0].copy(), data[..., 1].copy())
