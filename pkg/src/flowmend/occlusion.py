"""Eye-anchored face cropping and rectangular synthetic occluders."""
from __future__ import annotations

import csv
import enum
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flow_core import as_gray


class OcclusionError(ValueError):
    pass


class CropClampedWarning(UserWarning):
    """The requested crop box left the image and was moved or shrunk to fit."""


@dataclass(frozen=True)
class EyeAnchors:
    left_eye: tuple[float, float]
    right_eye: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "left_eye", tuple(float(c) for c in self.left_eye))
        object.__setattr__(self, "right_eye", tuple(float(c) for c in self.right_eye))
        if self.ipd <= 0:
            raise OcclusionError("degenerate ipd")
        if self.right_eye[0] <= self.left_eye[0]:
            raise OcclusionError("right eye must lie to the right of the left eye")

    @property
    def ipd(self) -> float:
        return math.dist(self.left_eye, self.right_eye)

    @property
    def midpoint(self) -> tuple[float, float]:
        return ((self.left_eye[0] + self.right_eye[0]) / 2, (self.left_eye[1] + self.right_eye[1]) / 2)


@dataclass(frozen=True)
class CropGeometry:
    """Square crop: side = ``side_factor`` * ipd, centred on the eye midpoint,
    top edge ``top_factor`` * ipd above the eye line."""
    side_factor: float = 2.2
    top_factor: float = 0.6


def crop_box(anchors: EyeAnchors, geometry: CropGeometry = CropGeometry()) -> tuple[float, float, float, float]:
    """Return the (x0, y0, x1, y1) crop rectangle in image pixels."""
    side = geometry.side_factor * anchors.ipd
    cx, cy = anchors.midpoint
    x0 = cx - side / 2
    y0 = cy - geometry.top_factor * anchors.ipd
    return x0, y0, x0 + side, y0 + side


def crop_face(image, anchors: EyeAnchors, geometry: CropGeometry = CropGeometry()) -> np.ndarray:
    """Cut the square inner-face region out of ``image``.

    The box from :func:`crop_box` is snapped to whole pixels.  If it leaves
    the image it is shifted back inside (and shrunk if larger than the image)
    and a :class:`CropClampedWarning` is emitted.
    """
    img = as_gray(image)
    h, w = img.shape
    for x, y in (anchors.left_eye, anchors.right_eye):
        if not (0 <= x < w and 0 <= y < h):
            raise OcclusionError(f"anchor ({x}, {y}) outside {w}x{h} image")
    x0, y0, x1, _ = crop_box(anchors, geometry)
    side = max(1, int(round(x1 - x0)))
    left, top = int(round(x0)), int(round(y0))
    clamped_side = min(side, w, h)
    clamped_left = min(max(left, 0), w - clamped_side)
    clamped_top = min(max(top, 0), h - clamped_side)
    if (clamped_side, clamped_left, clamped_top) != (side, left, top):
        warnings.warn(
            f"crop box ({left}, {top}, side {side}) clamped to ({clamped_left}, {clamped_top}, side {clamped_side})",
            CropClampedWarning, stacklevel=2)
    return img[clamped_top:clamped_top + clamped_side, clamped_left:clamped_left + clamped_side].copy()


class MaskKind(str, enum.Enum):
    EYES = "eyes"
    MOUTH = "mouth"
    LOWER_PART = "lower_part"
    CUSTOM = "custom"


# Normalised [x0, y0, x1, y1] extents inside the face crop.
PRESET_RECTS = {
    MaskKind.EYES: ((0.05, 0.18, 0.95, 0.42),),
    MaskKind.MOUTH: ((0.15, 0.62, 0.85, 0.92),),
    MaskKind.LOWER_PART: ((0.0, 0.52, 1.0, 1.0),),
}


@dataclass(frozen=True)
class OcclusionMask:
    kind: MaskKind
    rects: tuple[tuple[float, float, float, float], ...]
    fill: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", MaskKind(self.kind))
        rects = tuple(tuple(float(c) for c in r) for r in self.rects)
        if not rects:
            raise OcclusionError("an occlusion mask needs at least one rectangle")
        for r in rects:
            if len(r) != 4:
                raise OcclusionError(f"rectangle {r} must have 4 coordinates")
            x0, y0, x1, y1 = r
            if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
                raise OcclusionError(f"rectangle {r} not inside [0, 1]^2")
        if not 0.0 <= self.fill <= 1.0:
            raise OcclusionError("fill must lie in [0, 1]")
        object.__setattr__(self, "rects", rects)
        object.__setattr__(self, "fill", float(self.fill))

    @classmethod
    def preset(cls, kind, fill: float = 0.0) -> OcclusionMask:
        kind = MaskKind(kind)
        if kind is MaskKind.CUSTOM:
            raise OcclusionError("custom masks need explicit rectangles")
        return cls(kind, PRESET_RECTS[kind], fill)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "rects": [list(r) for r in self.rects], "fill": self.fill}

    @classmethod
    def from_dict(cls, d: dict) -> OcclusionMask:
        kind = MaskKind(d["kind"])
        rects = d.get("rects")
        if rects is None:
            return cls.preset(kind, d.get("fill", 0.0))
        return cls(kind, tuple(tuple(r) for r in rects), d.get("fill", 0.0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> OcclusionMask:
        return cls.from_dict(json.loads(Path(path).read_text()))


def mask_on_flow(mask: OcclusionMask, w: int, h: int) -> np.ndarray:
    """Boolean (h, w) grid, true where the cell centre falls in a mask rectangle.

    Rectangles are half-open, [x0, x1) x [y0, y1), after scaling to the grid.
    """
    if w < 1 or h < 1:
        raise OcclusionError("grid dimensions must be >= 1")
    cx = (np.arange(w) + 0.5) / w
    cy = (np.arange(h) + 0.5) / h
    grid = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1 in mask.rects:
        grid |= ((cy >= y0) & (cy < y1))[:, None] & ((cx >= x0) & (cx < x1))[None, :]
    return grid


def apply_occlusion(image, mask: OcclusionMask) -> np.ndarray:
    """Overwrite the masked pixels of a face crop with ``mask.fill``."""
    img = as_gray(image)
    out = img.copy()
    out[mask_on_flow(mask, img.shape[1], img.shape[0])] = mask.fill
    return out


ANCHOR_FIELDS = ("frame_path", "left_x", "left_y", "right_x", "right_y")


def read_anchors_csv(path) -> dict[str, EyeAnchors]:
    """Load ``frame_path,left_x,left_y,right_x,right_y`` rows keyed by frame path."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(ANCHOR_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise OcclusionError(f"anchors CSV missing columns: {sorted(missing)}")
        for row in reader:
            out[row["frame_path"]] = EyeAnchors(
                (float(row["left_x"]), float(row["left_y"])),
                (float(row["right_x"]), float(row["right_y"])))
    return out


def write_anchors_csv(path, anchors: dict[str, EyeAnchors]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANCHOR_FIELDS)
        for frame, a in anchors.items():
            writer.writerow([frame, repr(a.left_eye[0]), repr(a.left_eye[1]),
                             repr(a.right_eye[0]), repr(a.right_eye[1])])
