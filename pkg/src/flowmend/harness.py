"""End-to-end experiments: flow banks, 10-fold baselines, reconstruction
cross-validation, ablations and report files.

Everything an experiment does is fixed by an :class:`ExperimentManifest`;
rerunning the same manifest rewrites every CSV byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import CNNConfig, accuracy, predict_batch, train_classifier
from .dataset import (
    DatasetError, PairStrategy, SynthConfig, enumerate_pairs, load_sequences,
    stratified_folds, synth_dataset,
)
from .flow_core import FlowError, FlowParams, ResizeSpec, estimate_flow, resize_flow
from .occlusion import CropGeometry, MaskKind, OcclusionMask, apply_occlusion, crop_face, mask_on_flow
from .reconstructor import (
    AEConfig, ConfigError, all_skip_sets, reconstruct_batch, skip_label, train_reconstructor,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ABLATION_AXES = ("loss", "skips", "strategy")


# ---------------------------------------------------------------------------
# Manifest

@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    n_per_class: int | tuple = 50
    n_frames: int = 6
    canvas: int = 80
    seed: int = 0
    synth: SynthConfig = SynthConfig()
    root: str | None = None
    anchors_csv: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "directory" and not self.root:
            raise ConfigError("a directory dataset needs a root")
        if isinstance(self.n_per_class, list):
            object.__setattr__(self, "n_per_class", tuple(self.n_per_class))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "synthetic":
            n = self.n_per_class
            d.update(n_per_class=list(n) if isinstance(n, tuple) else n, n_frames=self.n_frames,
                     canvas=self.canvas, seed=self.seed, synth=self.synth.to_dict())
        else:
            d.update(root=self.root, anchors_csv=self.anchors_csv)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        d = dict(d)
        if "synth" in d:
            d["synth"] = SynthConfig(**d["synth"])
        return cls(**d)

    def load(self):
        if self.kind == "synthetic":
            return synth_dataset(self.n_per_class, self.n_frames, self.canvas, self.seed, self.synth)
        return load_sequences(self.root, self.anchors_csv)


@dataclass(frozen=True)
class ExperimentManifest:
    dataset: DatasetSpec = DatasetSpec()
    mask: OcclusionMask = OcclusionMask.preset(MaskKind.LOWER_PART)
    k: int = 10
    fold_seed: int = 0
    flow: FlowParams = FlowParams()
    flow_size: int = 64
    crop: CropGeometry = CropGeometry()
    ae: AEConfig = AEConfig()
    cnn: CNNConfig = CNNConfig()
    strategy: PairStrategy = PairStrategy.MID_FLOWS
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", PairStrategy(self.strategy))
        if self.k < 3:
            raise ConfigError("k must be >= 3 (one test fold, one validation fold, the rest for training)")
        if self.ae.input_size != self.flow_size or self.cnn.input_size != self.flow_size:
            raise ConfigError("ae.input_size and cnn.input_size must equal flow_size")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "code_version": __version__,
            "dataset": self.dataset.to_dict(),
            "mask": self.mask.to_dict(),
            "k": self.k,
            "fold_seed": self.fold_seed,
            "flow": asdict(self.flow),
            "flow_size": self.flow_size,
            "crop": asdict(self.crop),
            "ae": self.ae.to_dict(),
            "cnn": self.cnn.to_dict(),
            "strategy": self.strategy.value,
            "workers": self.workers,
            "seeds": self.seeds(),
        }

    def seeds(self) -> dict:
        return {"dataset": self.dataset.seed, "folds": self.fold_seed, "ae": self.ae.seed, "cnn": self.cnn.seed}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentManifest:
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported manifest schema version {version}")
        d.pop("code_version", None)
        d.pop("seeds", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        try:
            kwargs = {}
            if "dataset" in d:
                kwargs["dataset"] = DatasetSpec.from_dict(d.pop("dataset"))
            if "mask" in d:
                kwargs["mask"] = OcclusionMask.from_dict(d.pop("mask"))
            if "flow" in d:
                kwargs["flow"] = FlowParams(**d.pop("flow"))
            if "crop" in d:
                kwargs["crop"] = CropGeometry(**d.pop("crop"))
            size = d.get("flow_size", 64)
            kwargs["ae"] = AEConfig.from_dict({"input_size": size, **d.pop("ae", {})})
            kwargs["cnn"] = CNNConfig.from_dict({"input_size": size, **d.pop("cnn", {})})
            kwargs.update(d)
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid manifest: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> ExperimentManifest:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> ExperimentManifest:
        """Copy with every seed (dataset, folds, networks) set to ``seed``."""
        return replace(self, dataset=replace(self.dataset, seed=seed), fold_seed=seed,
                       ae=replace(self.ae, seed=seed), cnn=replace(self.cnn, seed=seed))


def benchmark_manifest() -> ExperimentManifest:
    """Desk-scale synthetic benchmark: 300 sequences, 64x64 flows, lower-face mask.

    Network widths are reduced from the library defaults and both networks
    compute in float32 so that the whole 10-fold protocol fits on one CPU core.
    """
    return ExperimentManifest(
        dataset=DatasetSpec(n_per_class=50, n_frames=6, canvas=80, seed=0),
        mask=OcclusionMask.preset(MaskKind.LOWER_PART),
        strategy=PairStrategy.APEX,
        ae=AEConfig(encoder_channels=(8, 16, 32), skips=(1, 2, 3), loss="endpoint",
                    lr=3e-3, epochs=20, batch=4, dtype="float32"),
        cnn=CNNConfig(channels=(8, 16, 32), hidden=64, lr=1e-3, epochs=25, batch=16, dtype="float32"),
    )


# ---------------------------------------------------------------------------
# Flow bank

class FlowBank:
    """Lazily computed clean and occluded flows at ``flow_size``, keyed by
    ``(sequence id, prvs, next)`` with 1-based frame numbers.

    Occlusion is applied to the cropped frames before the flow is estimated.
    """

    def __init__(self, sequences, manifest: ExperimentManifest):
        self.sequences = {s.id: s for s in sequences}
        if len(self.sequences) != len(sequences):
            raise DatasetError("duplicate sequence ids")
        self.labels = {s.id: s.label for s in sequences}
        self.manifest = manifest
        self._crops = {}
        self._flows = {}
        self._lock = threading.Lock()

    def _cropped(self, sid: str):
        if sid not in self._crops:
            seq = self.sequences[sid]
            m = self.manifest
            anchors = seq.anchors_at(0)
            clean = [crop_face(f, anchors, m.crop) for f in seq.frames]
            occluded = [apply_occlusion(f, m.mask) for f in clean]
            self._crops[sid] = (clean, occluded)
        return self._crops[sid]

    def flow(self, sid: str, prvs: int, nxt: int, occluded: bool) -> np.ndarray:
        key = (sid, prvs, nxt, occluded)
        with self._lock:
            if key not in self._flows:
                frames = self._cropped(sid)[1 if occluded else 0]
                raw = estimate_flow(frames[prvs - 1], frames[nxt - 1], self.manifest.flow)
                size = self.manifest.flow_size
                if min(raw.shape) < size:
                    raise FlowError(f"crop of {sid} ({raw.width}x{raw.height}) smaller than flow_size {size}")
                spec = ResizeSpec(raw.width, raw.height, size, size)
                self._flows[key] = resize_flow(raw, spec).to_array()
            return self._flows[key]

    def apex(self, ids, occluded: bool) -> np.ndarray:
        return np.stack([self.flow(sid, 1, self.sequences[sid].n, occluded) for sid in ids])

    def training_pairs(self, ids, strategy: PairStrategy) -> list[tuple[np.ndarray, np.ndarray]]:
        """(occluded, clean) flow pairs of every sequence in ``ids`` under ``strategy``."""
        out = []
        for sid in ids:
            for prvs, nxt in enumerate_pairs(self.sequences[sid].n, strategy):
                out.append((self.flow(sid, prvs, nxt, True), self.flow(sid, prvs, nxt, False)))
        return out

    def labelled(self, ids, occluded: bool) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.apex(ids, occluded), (self.labels[s] for s in ids)))


# ---------------------------------------------------------------------------
# Reports

REPORT_COLUMNS = ("fold", "n_test", "clean_acc", "occluded_acc", "reconstructed_acc",
                  "epe_in_occluded", "epe_in_reconstructed", "epe_out_occluded", "epe_out_reconstructed")


@dataclass
class FoldResult:
    fold: int
    n_test: int
    clean_acc: float
    occluded_acc: float
    reconstructed_acc: float = math.nan
    epe_in_occluded: float = math.nan
    epe_in_reconstructed: float = math.nan
    epe_out_occluded: float = math.nan
    epe_out_reconstructed: float = math.nan
    cnn_history: object = field(default=None, repr=False, compare=False)
    ae_history: object = field(default=None, repr=False, compare=False)

    def values(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class CVReport:
    folds: list[FoldResult]
    label: str = ""

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(f, name) for f in self.folds], dtype=np.float64)

    def mean(self, name: str) -> float:
        return float(np.mean(self.column(name)))

    def summary(self) -> dict:
        return {c: self.mean(c) for c in REPORT_COLUMNS[2:]}


def fmt(x) -> str:
    """Fixed 6-significant-digit rendering used in every CSV."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{float(x):.6g}"


def write_report_csv(report: CVReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for f in report.folds:
            w.writerow([fmt(v) for v in f.values()])
        w.writerow(["mean", fmt(sum(f.n_test for f in report.folds))]
                   + [fmt(report.mean(c)) for c in REPORT_COLUMNS[2:]])


def read_report(path) -> CVReport:
    """Parse a ``cv_report.csv`` back into a report (histories are not stored there)."""
    folds = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["fold"] == "mean":
                continue
            folds.append(FoldResult(int(row["fold"]), int(row["n_test"]),
                                    *(float(row[c]) for c in REPORT_COLUMNS[2:])))
    return CVReport(folds, label=Path(path).parent.name)


def emit_report(report: CVReport, out_dir, manifest: ExperimentManifest | None = None,
                plan=None) -> Path:
    """Write ``cv_report.csv``, per-fold bar data, per-epoch training curves and
    (when given) the manifest and fold plan into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out / "cv_report.csv")

    def num(x):
        return None if isinstance(x, float) and math.isnan(x) else float(fmt(x)) if isinstance(x, float) else x

    summary = {
        "schema_version": SCHEMA_VERSION,
        "label": report.label,
        "folds": [{c: num(v) for c, v in zip(REPORT_COLUMNS, f.values())} for f in report.folds],
        "mean": {c: num(v) for c, v in report.summary().items()},
    }
    (out / "cv_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / "fold_bars.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "condition", "accuracy"])
        for f in report.folds:
            for cond in ("clean", "occluded", "reconstructed"):
                w.writerow([f.fold, cond, fmt(getattr(f, f"{cond}_acc"))])
    curves = out / "curves"
    for f in report.folds:
        if f.cnn_history is not None or f.ae_history is not None:
            curves.mkdir(exist_ok=True)
        if f.cnn_history is not None:
            f.cnn_history.to_csv(curves / f"fold{f.fold:02d}_cnn.csv")
        if f.ae_history is not None:
            f.ae_history.to_csv(curves / f"fold{f.fold:02d}_ae.csv")
    if manifest is not None:
        manifest.save(out / "manifest.json")
    if plan is not None:
        plan.save(out / "folds.json")
    return out


@dataclass
class AblationTable:
    axis: str
    rows: list[tuple[str, CVReport]]

    def to_csv(self, path) -> None:
        k = len(self.rows[0][1].folds) if self.rows else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis", "value", "mean_reconstructed_acc", "mean_occluded_acc", "mean_clean_acc",
                        "mean_epe_in_reconstructed"] + [f"fold{i}" for i in range(k)])
            for value, rep in self.rows:
                w.writerow([self.axis, value, fmt(rep.mean("reconstructed_acc")), fmt(rep.mean("occluded_acc")),
                            fmt(rep.mean("clean_acc")), fmt(rep.mean("epe_in_reconstructed"))]
                           + [fmt(a) for a in rep.column("reconstructed_acc")])


# ---------------------------------------------------------------------------
# Experiments

class Experiment:
    """One manifest's data, folds, per-fold classifiers and flow bank.

    Classifiers are trained on clean apex flows once per fold and reused by
    every reconstruction run, which keeps ablations comparable.
    """

    def __init__(self, manifest: ExperimentManifest, sequences=None):
        self.manifest = manifest
        self.sequences = sequences if sequences is not None else manifest.dataset.load()
        self.bank = FlowBank(self.sequences, manifest)
        self.plan = stratified_folds(self.bank.labels, manifest.k, manifest.fold_seed)
        self._classifiers = {}
        self._lock = threading.Lock()

    def rotation(self, fold: int):
        train, val, test = self.plan.rotation(fold)
        if set(train) & set(test) or set(val) & set(test) or set(train) & set(val):
            raise RuntimeError(f"fold {fold}: train/val/test id sets overlap")
        return train, val, test

    def _map_folds(self, fn):
        folds = range(self.manifest.k)
        if self.manifest.workers == 1:
            return [fn(f) for f in folds]
        with ThreadPoolExecutor(self.manifest.workers) as pool:
            return list(pool.map(fn, folds))

    def prepare_flows(self, strategies=()):
        """Compute every flow the runs will need up front (single-threaded)."""
        for seq in self.sequences:
            self.bank.apex([seq.id], False)
            self.bank.apex([seq.id], True)
            for strategy in strategies:
                self.bank.training_pairs([seq.id], strategy)

    def classifier(self, fold: int):
        with self._lock:
            cached = self._classifiers.get(fold)
        if cached is None:
            train, val, _ = self.rotation(fold)
            cached = train_classifier(self.manifest.cnn, self.bank.labelled(train, False),
                                      self.bank.labelled(val, False))
            with self._lock:
                self._classifiers[fold] = cached
        return cached

    def _baseline_fold(self, fold: int) -> FoldResult:
        _, _, test = self.rotation(fold)
        model, hist = self.classifier(fold)
        return FoldResult(fold, len(test),
                          accuracy(model, self.bank.labelled(test, False)),
                          accuracy(model, self.bank.labelled(test, True)),
                          cnn_history=hist)

    def baselines(self) -> CVReport:
        self.prepare_flows()
        return CVReport(self._map_folds(self._baseline_fold), label="baselines")

    def _reconstruction_fold(self, fold: int, ae_cfg: AEConfig, strategy: PairStrategy) -> FoldResult:
        train, val, test = self.rotation(fold)
        base = self._baseline_fold(fold)
        ae, ae_hist = train_reconstructor(ae_cfg, self.bank.training_pairs(train, strategy),
                                          self.bank.training_pairs(val, strategy))
        clean = self.bank.apex(test, False)
        occluded = self.bank.apex(test, True)
        rebuilt = reconstruct_batch(ae, occluded)
        labels = np.array([self.bank.labels[s] for s in test])
        model, _ = self.classifier(fold)
        inside = mask_on_flow(self.manifest.mask, self.manifest.flow_size, self.manifest.flow_size)

        def epe(a, region):
            e = np.sqrt(((a - clean) ** 2).sum(axis=1))
            return float(e[:, region].mean()) if region.any() else 0.0

        base.reconstructed_acc = float(np.mean(predict_batch(model, rebuilt) == labels))
        base.epe_in_occluded = epe(occluded, inside)
        base.epe_in_reconstructed = epe(rebuilt, inside)
        base.epe_out_occluded = epe(occluded, ~inside)
        base.epe_out_reconstructed = epe(rebuilt, ~inside)
        base.ae_history = ae_hist
        return base

    def reconstruction_cv(self, ae_cfg: AEConfig | None = None, strategy=None, label="reconstruction") -> CVReport:
        ae_cfg = ae_cfg or self.manifest.ae
        strategy = PairStrategy(strategy or self.manifest.strategy)
        self.prepare_flows([strategy])
        results = self._map_folds(lambda f: self._reconstruction_fold(f, ae_cfg, strategy))
        return CVReport(results, label=label)

    def ablation(self, axis: str, values=None) -> AblationTable:
        if axis not in ABLATION_AXES:
            raise ConfigError(f"ablation axis must be one of {ABLATION_AXES}")
        ae = self.manifest.ae
        rows = []
        if axis == "loss":
            for loss in values or ("mse", "wing", "endpoint"):
                rows.append((loss, self.reconstruction_cv(replace(ae, loss=loss), label=f"loss={loss}")))
        elif axis == "skips":
            for skips in values or all_skip_sets():
                name = skip_label(skips)
                rows.append((name, self.reconstruction_cv(replace(ae, skips=skips), label=f"skips={name}")))
        else:
            for strategy in values or list(PairStrategy):
                strategy = PairStrategy(strategy)
                rows.append((strategy.value, self.reconstruction_cv(strategy=strategy,
                                                                    label=f"strategy={strategy.value}")))
        return AblationTable(axis, rows)


def run_baselines(manifest: ExperimentManifest, experiment: Experiment | None = None) -> CVReport:
    """Clean-trained classifier per fold, scored on clean and occluded test flows."""
    return (experiment or Experiment(manifest)).baselines()


def run_reconstruction_cv(manifest: ExperimentManifest, experiment: Experiment | None = None) -> CVReport:
    """Full protocol: per fold, train the autoencoder on 8 folds, select on the
    validation fold, reconstruct the test fold's occluded apex flows and score
    them with that fold's clean-trained classifier."""
    return (experiment or Experiment(manifest)).reconstruction_cv()


def run_ablation(manifest: ExperimentManifest, axis: str, experiment: Experiment | None = None,
                 values=None) -> AblationTable:
    return (experiment or Experiment(manifest)).ablation(axis, values)


def run_size_sweep(manifest: ExperimentManifest, sizes=(24, 48, 64, 96, 128), seeds=range(100)) -> list[dict]:
    """Clean 10-fold accuracy of the classifier per input size and seed.

    Sizes larger than the face crop are skipped (flows are only downscaled).
    """
    sequences = manifest.dataset.load()
    rows = []
    for size in sizes:
        try:
            sized = replace(manifest, flow_size=size, ae=replace(manifest.ae, input_size=size),
                            cnn=replace(manifest.cnn, input_size=size))
            exp = Experiment(sized, sequences)
            exp.prepare_flows()
        except (ConfigError, FlowError) as exc:
            log.warning("skipping size %d: %s", size, exc)
            continue
        accs = []
        for seed in seeds:
            exp.manifest = replace(sized, cnn=replace(sized.cnn, seed=seed))
            exp._classifiers.clear()
            accs.append(exp.baselines().mean("clean_acc"))
        rows.append({"size": size, "mean": float(np.mean(accs)), "median": float(np.median(accs)),
                     "n_seeds": len(accs)})
    return rows
