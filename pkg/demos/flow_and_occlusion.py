"""One synthetic sequence end to end: crop, occlude, estimate apex flows,
compare with the known motion, write .flo files and HSV pictures.

    python demos/flow_and_occlusion.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from flowmend.dataset import EXPRESSIONS, synth_sequence
from flowmend.flow_core import (
    FlowField, ResizeSpec, endpoint_error, estimate_flow, flow_to_rgb, resize_flow, save_image, save_rgb, write_flo,
)
from flowmend.occlusion import OcclusionMask, apply_occlusion, crop_box, crop_face, mask_on_flow

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(parents=True, exist_ok=True)

seq = synth_sequence(cls=3, n=6, size=80, seed=7)  # happiness
anchors = seq.anchors_at(0)
first, apex = (crop_face(f, anchors) for f in (seq.frames[0], seq.frames[-1]))
mask = OcclusionMask.preset("lower_part")

# ground truth lives on the canvas; cut the same box out of it
x0, y0, x1, y1 = (int(round(v)) for v in crop_box(anchors))
gt = FlowField(seq.gt_flow.u[y0:y1, x0:x1], seq.gt_flow.v[y0:y1, x0:x1])

clean = estimate_flow(first, apex)
occluded = estimate_flow(apply_occlusion(first, mask), apply_occlusion(apex, mask))
print(f"{EXPRESSIONS[seq.label]}: crop {first.shape}, peak motion {np.hypot(gt.u, gt.v).max():.2f} px")
print(f"EPE clean flow vs truth     {endpoint_error(clean, gt):.3f} px")
print(f"EPE occluded flow vs truth  {endpoint_error(occluded, gt):.3f} px")

spec = ResizeSpec(clean.width, clean.height, 64, 64)
inside = mask_on_flow(mask, 64, 64)
for name, flow in (("clean", clean), ("occluded", occluded), ("truth", gt)):
    small = resize_flow(flow, spec)
    write_flo(small, out / f"{name}.flo")
    save_rgb(flow_to_rgb(small), out / f"{name}_hsv.png")
    print(f"{name:9s} mean |flow| inside mask {np.hypot(small.u, small.v)[inside].mean():.3f} px")
save_image(apply_occlusion(apex, mask), out / "apex_occluded.png")
print(f"wrote {out}/")
