"""Expression sequences: disk ingestion, a synthetic motion generator, flow-pair
strategies and stratified fold plans."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .flow_core import FlowField, as_gray, load_image, save_image
from .occlusion import CropGeometry, EyeAnchors, crop_box, read_anchors_csv, write_anchors_csv

EXPRESSIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")
N_CLASSES = len(EXPRESSIONS)


class DatasetError(ValueError):
    pass


@dataclass
class Sequence:
    id: str
    frames: list
    anchors: EyeAnchors | list
    label: int
    gt_flow: FlowField | None = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise DatasetError(f"sequence {self.id!r} needs at least 2 frames")
        shape = np.shape(self.frames[0])
        if any(np.shape(f) != shape for f in self.frames):
            raise DatasetError(f"sequence {self.id!r} has frames of differing size")
        if not 0 <= int(self.label) < N_CLASSES:
            raise DatasetError(f"label {self.label} outside 0..{N_CLASSES - 1}")
        self.label = int(self.label)
        if isinstance(self.anchors, (list, tuple)) and not isinstance(self.anchors, EyeAnchors):
            if len(self.anchors) != len(self.frames):
                raise DatasetError("per-frame anchors must match the frame count")

    @property
    def n(self) -> int:
        return len(self.frames)

    def anchors_at(self, index: int) -> EyeAnchors:
        """Anchors of the 0-based frame ``index``."""
        if isinstance(self.anchors, EyeAnchors):
            return self.anchors
        return self.anchors[index]


# ---------------------------------------------------------------------------
# Flow-pair strategies

class PairStrategy(str, enum.Enum):
    APEX = "apex"
    THREE_FRAMES = "three_frames"
    ALL_FLOWS = "all_flows"
    FLOWS_AND_APEX = "flows_and_apex"
    MID_FLOWS = "mid_flows"


def enumerate_pairs(n: int, strategy: PairStrategy | str) -> list[tuple[int, int]]:
    """1-based ``(prvs, next)`` frame pairs for a sequence of ``n`` frames.

    ``MID_FLOWS`` pairs every ``t`` in 1..n-1 with every ``next`` in
    ``max(t + 1, ceil(n / 2))..n``.  ``THREE_FRAMES`` needs n >= 4.
    """
    strategy = PairStrategy(strategy)
    if n < 2:
        raise DatasetError("a sequence needs at least 2 frames")
    if strategy is PairStrategy.APEX:
        pairs = {(1, n)}
    elif strategy is PairStrategy.THREE_FRAMES:
        if n < 4:
            raise DatasetError("three_frames needs at least 4 frames")
        pairs = {(1, n - 2), (1, n - 1), (1, n)}
    elif strategy is PairStrategy.ALL_FLOWS:
        pairs = {(t, t + 1) for t in range(1, n)}
    elif strategy is PairStrategy.FLOWS_AND_APEX:
        pairs = {(t, t + 1) for t in range(1, n)} | {(1, n)}
    else:
        half = math.ceil(n / 2)
        pairs = {(t, nxt) for t in range(1, n) for nxt in range(max(t + 1, half), n + 1)}
    return sorted(pairs)


# ---------------------------------------------------------------------------
# Stratified folds

@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict[str, int]

    def folds(self) -> list[list[str]]:
        out = [[] for _ in range(self.k)]
        for sid, f in self.assignment.items():
            out[f].append(sid)
        return [sorted(f) for f in out]

    def rotation(self, test_fold: int) -> tuple[list[str], list[str], list[str]]:
        """(train, val, test) ids for one rotation; validation is the next fold round-robin."""
        if not 0 <= test_fold < self.k:
            raise DatasetError(f"fold {test_fold} outside 0..{self.k - 1}")
        val_fold = (test_fold + 1) % self.k
        folds = self.folds()
        train = sorted(s for i, f in enumerate(folds) if i not in (test_fold, val_fold) for s in f)
        return train, folds[val_fold], folds[test_fold]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "folds": self.folds()}

    @classmethod
    def from_dict(cls, d: dict) -> FoldPlan:
        assignment = {sid: i for i, members in enumerate(d["folds"]) for sid in members}
        return cls(int(d["k"]), int(d["seed"]), assignment)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> FoldPlan:
        return cls.from_dict(json.loads(Path(path).read_text()))


def stratified_folds(labels, k: int = 10, seed: int = 0) -> FoldPlan:
    """Deal each class's shuffled members round-robin over ``k`` folds.

    ``labels`` maps sequence id to class (a plain list is keyed by position).
    The dealing position carries over between classes so fold sizes stay
    balanced as well as per-class counts.
    """
    if k < 2:
        raise DatasetError("k must be >= 2")
    if not isinstance(labels, dict):
        labels = {str(i): lab for i, lab in enumerate(labels)}
    if not labels:
        raise DatasetError("no labels to split")
    rng = np.random.default_rng(seed)
    assignment = {}
    cursor = 0
    for cls in sorted(set(labels.values())):
        members = sorted(sid for sid, lab in labels.items() if lab == cls)
        for j in rng.permutation(len(members)):
            assignment[members[j]] = cursor % k
            cursor += 1
    return FoldPlan(k, seed, assignment)


# ---------------------------------------------------------------------------
# Synthetic expressions
#
# Each class is a sum of anisotropic Gaussian bumps in normalised face-crop
# coordinates: (cx, cy, sx, sy, du, dv).  Eyes sit at y ~ 0.27, the mouth at
# y ~ 0.75.  The summed field is scaled to unit peak magnitude.
#
# Classes come in pairs sharing their upper-face cue (anger/disgust lower the
# brows, fear/surprise raise them, happiness/sadness raise the cheeks); within
# a pair the upper face differs only by a faint mid-face cue, so the mouth
# region carries most of the class evidence.

MOTION_TEMPLATES = {
    0: (  # anger: brows lowered and drawn together, lids tightened, lips pressed
        (0.36, 0.20, 0.12, 0.08, 0.15, 0.25), (0.64, 0.20, 0.12, 0.08, -0.15, 0.25),
        (0.38, 0.40, 0.09, 0.06, 0.08, 0.0), (0.62, 0.40, 0.09, 0.06, -0.08, 0.0),
        (0.50, 0.66, 0.20, 0.07, 0.0, 0.8), (0.50, 0.80, 0.20, 0.07, 0.0, -0.8),
    ),
    1: (  # disgust: brows lowered, nose wrinkled, upper lip raised
        (0.36, 0.20, 0.12, 0.08, 0.15, 0.25), (0.64, 0.20, 0.12, 0.08, -0.15, 0.25),
        (0.50, 0.42, 0.09, 0.07, 0.0, -0.08),
        (0.50, 0.64, 0.15, 0.08, 0.0, -1.0),
    ),
    2: (  # fear: brows raised, lids widened, lips stretched sideways
        (0.33, 0.18, 0.14, 0.08, 0.0, -0.3), (0.67, 0.18, 0.14, 0.08, 0.0, -0.3),
        (0.30, 0.42, 0.09, 0.06, -0.08, 0.0), (0.70, 0.42, 0.09, 0.06, 0.08, 0.0),
        (0.30, 0.76, 0.10, 0.10, -1.0, 0.2), (0.70, 0.76, 0.10, 0.10, 1.0, 0.2),
    ),
    3: (  # happiness: cheeks raised, lip corners pulled up and out
        (0.28, 0.46, 0.11, 0.07, 0.0, -0.45), (0.72, 0.46, 0.11, 0.07, 0.0, -0.45),
        (0.32, 0.74, 0.11, 0.10, -0.7, -0.8), (0.68, 0.74, 0.11, 0.10, 0.7, -0.8),
    ),
    4: (  # sadness: cheeks raised, inner brows raised, lip corners down, chin raised
        (0.28, 0.46, 0.11, 0.07, 0.0, -0.45), (0.72, 0.46, 0.11, 0.07, 0.0, -0.45),
        (0.42, 0.18, 0.09, 0.08, 0.0, -0.08), (0.58, 0.18, 0.09, 0.08, 0.0, -0.08),
        (0.29, 0.74, 0.10, 0.09, 0.5, 0.9), (0.71, 0.74, 0.10, 0.09, -0.5, 0.9),
        (0.50, 0.80, 0.14, 0.06, 0.0, -0.6),
    ),
    5: (  # surprise: brows raised, face lengthened, jaw dropped
        (0.33, 0.18, 0.14, 0.08, 0.0, -0.3), (0.67, 0.18, 0.14, 0.08, 0.0, -0.3),
        (0.50, 0.44, 0.10, 0.07, 0.0, 0.08),
        (0.50, 0.76, 0.15, 0.12, 0.0, 1.2),
    ),
}


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs.  ``magnitude`` is the apex peak displacement in canvas
    pixels; jitters are relative spreads drawn per sequence."""
    magnitude: float = 6.0
    magnitude_jitter: float = 0.2
    component_jitter: float = 0.25
    noise: float = 0.005
    texture_sigma: float = 1.5
    face_fraction: float = 0.875
    anchor_jitter: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def template_field(cls: int, X, Y, weights=None):
    """Unscaled (u, v) of class ``cls`` at normalised crop coordinates."""
    if cls not in MOTION_TEMPLATES:
        raise DatasetError(f"unknown class {cls}")
    bumps = MOTION_TEMPLATES[cls]
    weights = np.ones(len(bumps)) if weights is None else weights
    u = np.zeros_like(X, dtype=np.float64)
    v = np.zeros_like(X, dtype=np.float64)
    for wgt, (cx, cy, sx, sy, du, dv) in zip(weights, bumps):
        g = wgt * np.exp(-0.5 * (((X - cx) / sx) ** 2 + ((Y - cy) / sy) ** 2))
        u += du * g
        v += dv * g
    return u, v


def _template_peak(cls: int) -> float:
    X, Y = np.meshgrid(np.linspace(0, 1, 201), np.linspace(0, 1, 201))
    u, v = template_field(cls, X, Y)
    return float(np.hypot(u, v).max())


_PEAKS = {}


def class_field(cls: int, X, Y, weights=None):
    """Class template normalised to unit peak magnitude (before jitter weights)."""
    if cls not in _PEAKS:
        _PEAKS[cls] = _template_peak(cls)
    u, v = template_field(cls, X, Y, weights)
    return u / _PEAKS[cls], v / _PEAKS[cls]


def _synth_anchors(size: int, cfg: SynthConfig, rng, geometry: CropGeometry) -> EyeAnchors:
    ipd = cfg.face_fraction * size / geometry.side_factor
    side = geometry.side_factor * ipd
    cx = size / 2 + rng.uniform(-cfg.anchor_jitter, cfg.anchor_jitter)
    top = (size - side) / 2 + rng.uniform(-cfg.anchor_jitter, cfg.anchor_jitter)
    eye_y = top + geometry.top_factor * ipd
    return EyeAnchors((cx - ipd / 2, eye_y), (cx + ipd / 2, eye_y))


def _face_texture(size: int, anchors: EyeAnchors, cfg: SynthConfig, rng, geometry: CropGeometry) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.random((size, size)), cfg.texture_sigma, mode="reflect")
    noise = (noise - noise.min()) / (np.ptp(noise) + 1e-12)
    x0, y0, x1, _ = crop_box(anchors, geometry)
    side = x1 - x0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    X = (xx - x0) / side
    Y = (yy - y0) / side

    def blob(cx, cy, sx, sy):
        return np.exp(-0.5 * (((X - cx) / sx) ** 2 + ((Y - cy) / sy) ** 2))

    shade = 0.35 + 0.35 * blob(0.5, 0.5, 0.42, 0.55)
    for cx in (0.27, 0.73):
        shade -= 0.25 * blob(cx, 0.27, 0.07, 0.035)      # eyes
        shade -= 0.15 * blob(cx, 0.17, 0.12, 0.025)      # brows
    shade -= 0.2 * blob(0.5, 0.76, 0.15, 0.035)          # mouth
    shade += 0.1 * blob(0.5, 0.5, 0.05, 0.12)            # nose ridge
    img = 0.55 * shade + 0.45 * noise
    return np.clip(img, 0.0, 1.0)


def synth_sequence(cls: int, n: int = 6, size: int = 80, seed: int = 0,
                   config: SynthConfig | None = None, geometry: CropGeometry = CropGeometry(),
                   seq_id: str | None = None) -> Sequence:
    """Render a synthetic ``n``-frame expression of class ``cls``.

    A textured face-like canvas is warped by the class motion field, whose
    magnitude ramps linearly from 0 at frame 1 to the apex at frame ``n``.
    Frames are exact inverse warps, so ``gt_flow`` (apex displacement of each
    frame-1 pixel, canvas resolution) is the true first-to-last flow.
    """
    if cls not in MOTION_TEMPLATES:
        raise DatasetError(f"unknown class {cls}")
    if n < 2:
        raise DatasetError("a sequence needs at least 2 frames")
    cfg = config or SynthConfig()
    rng = np.random.default_rng([int(seed), int(cls)])
    anchors = _synth_anchors(size, cfg, rng, geometry)
    base = _face_texture(size, anchors, cfg, rng, geometry)
    amp = cfg.magnitude * (1.0 + rng.uniform(-cfg.magnitude_jitter, cfg.magnitude_jitter))
    weights = 1.0 + rng.uniform(-cfg.component_jitter, cfg.component_jitter, len(MOTION_TEMPLATES[cls]))

    x0, y0, x1, _ = crop_box(anchors, geometry)
    side = x1 - x0

    def displacement(xs, ys, scale):
        u, v = class_field(cls, (xs - x0) / side, (ys - y0) / side, weights)
        return scale * amp * u, scale * amp * v

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = []
    for t in range(n):
        s = t / (n - 1)
        # Source point p of every target pixel q solves p + d(p) = q.
        px, py = xx.copy(), yy.copy()
        for _ in range(12):
            du, dv = displacement(px, py, s)
            px, py = xx - du, yy - dv
        frame = ndimage.map_coordinates(base, [py, px], order=3, mode="nearest")
        if cfg.noise > 0:
            frame = frame + rng.normal(0.0, cfg.noise, frame.shape)
        frames.append(np.clip(frame, 0.0, 1.0))
    gu, gv = displacement(xx, yy, 1.0)
    return Sequence(seq_id or f"synth_c{cls}_{seed}", frames, anchors, cls, FlowField(gu, gv))


def synth_dataset(n_per_class, n_frames: int = 6, size: int = 80, seed: int = 0,
                  config: SynthConfig | None = None) -> list[Sequence]:
    """``n_per_class`` sequences per class (int, or one count per class)."""
    counts = [n_per_class] * N_CLASSES if np.isscalar(n_per_class) else list(n_per_class)
    if len(counts) != N_CLASSES:
        raise DatasetError(f"need {N_CLASSES} class counts")
    out = []
    for cls, count in enumerate(counts):
        for i in range(count):
            sub_seed = int(np.random.SeedSequence([seed, cls, i]).generate_state(1)[0])
            out.append(synth_sequence(cls, n_frames, size, sub_seed, config,
                                      seq_id=f"c{cls}_s{i:04d}"))
    return out


# ---------------------------------------------------------------------------
# Disk layout: <root>/<class>/<sequence_id>/frame_%04d.png plus an anchors CSV

def _parse_class(name: str) -> int:
    if name.isdigit():
        return int(name)
    if name.lower() in EXPRESSIONS:
        return EXPRESSIONS.index(name.lower())
    raise DatasetError(f"unrecognised class directory {name!r}")


def load_sequences(root, anchors_csv=None) -> list[Sequence]:
    """Read every sequence under ``root``.

    Anchor rows are matched on the frame path relative to ``root`` (absolute
    paths are accepted too).  Frames lacking a row fall back to the sequence's
    first anchored frame; a sequence with no anchors at all is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} not found")
    anchors_csv = Path(anchors_csv) if anchors_csv else root / "anchors.csv"
    table = read_anchors_csv(anchors_csv)
    sequences = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        label = _parse_class(class_dir.name)
        for seq_dir in sorted(p for p in class_dir.iterdir() if p.is_dir()):
            paths = sorted(seq_dir.glob("frame_*.png")) + sorted(seq_dir.glob("frame_*.pgm"))
            paths = sorted(paths, key=lambda p: p.name)
            if len(paths) < 2:
                raise DatasetError(f"{seq_dir} holds fewer than 2 frames")
            anchors = []
            for p in paths:
                rel = p.relative_to(root).as_posix()
                anchors.append(table.get(rel) or table.get(str(p)) or table.get(str(p.resolve())))
            known = [a for a in anchors if a is not None]
            if not known:
                raise DatasetError(f"no eye anchors for {seq_dir}")
            anchors = [a or known[0] for a in anchors]
            frames = [as_gray(load_image(p)) for p in paths]
            sequences.append(Sequence(f"{class_dir.name}/{seq_dir.name}", frames, anchors, label))
    if not sequences:
        raise DatasetError(f"no sequences under {root}")
    return sequences


def save_sequences(sequences, root) -> Path:
    """Write sequences in the ingestion layout; returns the anchors CSV path."""
    root = Path(root)
    table = {}
    for seq in sequences:
        sid = seq.id.split("/")[-1]
        seq_dir = root / str(seq.label) / sid
        seq_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            path = seq_dir / f"frame_{i + 1:04d}.png"
            save_image(frame, path)
            table[path.relative_to(root).as_posix()] = seq.anchors_at(i)
    csv_path = root / "anchors.csv"
    write_anchors_csv(csv_path, table)
    return csv_path
