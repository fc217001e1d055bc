"""The whole protocol on a toy manifest (seconds): baselines, reconstruction
cross-validation, a skip-connection ablation and the report files.

    python demos/tiny_protocol.py [out_dir]
"""
import sys
from dataclasses import replace
from pathlib import Path

from flowmend.classifier import CNNConfig
from flowmend.harness import DatasetSpec, Experiment, ExperimentManifest, emit_report
from flowmend.reconstructor import AEConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out/tiny")

m = ExperimentManifest(
    dataset=DatasetSpec(n_per_class=4, n_frames=4, canvas=48),
    k=4,
    flow_size=32,
    strategy="apex",
    ae=AEConfig(input_size=32, encoder_channels=(4, 8, 8), epochs=6, batch=4, lr=3e-3, dtype="float32"),
    cnn=CNNConfig(input_size=32, channels=(4, 8, 8), hidden=16, epochs=10, batch=4, lr=3e-3, dtype="float32"),
)
exp = Experiment(m)
report = exp.reconstruction_cv()
emit_report(report, out / "cv", m, exp.plan)
for name, value in report.summary().items():
    print(f"{name:24s} {value:.4f}")

table = exp.ablation("skips", [(), (1, 2, 3)])
table.to_csv(out / "ablation_skips.csv")
for value, rep in table.rows:
    print(f"skips {value:6s} reconstructed acc {rep.mean('reconstructed_acc'):.4f}")

# the manifest is the whole experiment: save it, and `flowmend cv --config` reruns it
m.save(out / "manifest.json")
print(f"wrote {out}/")
