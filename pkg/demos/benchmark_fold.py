"""Fold 0 of the synthetic benchmark with pictures: clean, occluded and
reconstructed apex flows of a few test sequences (a few minutes on one core).

    python demos/benchmark_fold.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from flowmend.classifier import predict_batch
from flowmend.dataset import EXPRESSIONS
from flowmend.flow_core import FlowField, flow_to_rgb, save_rgb
from flowmend.harness import Experiment, benchmark_manifest
from flowmend.reconstructor import reconstruct_batch, train_reconstructor

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out/fold0")
out.mkdir(parents=True, exist_ok=True)

m = benchmark_manifest()
exp = Experiment(m)
train, val, test = exp.rotation(0)
cnn, _ = exp.classifier(0)
ae, hist = train_reconstructor(m.ae, exp.bank.training_pairs(train, m.strategy),
                               exp.bank.training_pairs(val, m.strategy))
print(f"autoencoder: best epoch {hist.best_epoch}, val EPE {min(hist.val_loss):.3f} px")

labels = np.array([exp.bank.labels[s] for s in test])
clean, occluded = exp.bank.apex(test, False), exp.bank.apex(test, True)
rebuilt = reconstruct_batch(ae, occluded)
for name, flows in (("clean", clean), ("occluded", occluded), ("reconstructed", rebuilt)):
    print(f"{name:14s} accuracy {np.mean(predict_batch(cnn, flows) == labels):.3f}")

for i in range(0, len(test), 5):
    row = [flow_to_rgb(FlowField.from_array(f[i])) for f in (clean, occluded, rebuilt)]
    save_rgb(np.concatenate(row, axis=1), out / f"{test[i]}_{EXPRESSIONS[labels[i]]}.png")
print(f"wrote {out}/ (each picture: clean | occluded | reconstructed)")
