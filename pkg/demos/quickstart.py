"""Generate two small domains, build rendering masks, train briefly and evaluate.

Run:  python demos/quickstart.py [workdir]

Everything fits in a few minutes on one CPU. The numbers are not meaningful at
this size; the point is to walk the full pipeline once.
"""

import sys
from pathlib import Path

import numpy as np

from cddod import docgen, maskpipe, training

work = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart_out")

# 1. two synthetic domains with different layout and ink statistics
for name, seed in (("A", 11), ("B", 22)):
    docgen.generate_dataset(docgen.DOMAINS[name](), 12, seed, work / name, test_fraction=0.25)
page = training.load_split(work / "A", "train", 1)[0]
print(f"page {page.page_id}: {len(page.boxes)} blocks, ink {docgen.ink_fraction(page.image):.3f}")

# 2. the rendering-layer mask that supervises the segmentation head
mask = maskpipe.build_mask(page.layers, page_id=page.page_id)
counts = np.bincount(mask.classes.ravel(), minlength=3)
print("mask pixels (background, text, raster):", counts.tolist())
print("mask at the C4 grid:", maskpipe.downsample_mask(mask, 64).classes.shape)

# 3. train with all three alignment losses for two epochs
cfg = training.TrainConfig(epochs=2, lr=0.01, momentum=0.9, clip_norm=10.0)
src = [training.prepare_page(p, cfg.input_scale) for p in training.load_split(work / "A", "train")]
tgt = [training.prepare_page(p, cfg.input_scale) for p in training.load_split(work / "B", "train")]
result = training.train(cfg, src, tgt, log_path=work / "train_log.jsonl")
last = result.log[-1]
print(f"trained {len(result.log)} steps in {result.seconds:.0f}s; last step "
      f"l_det {last['l_det']:.3f} l_p {last['l_p']:.3f} l_r {last['l_r']:.3f} l_s {last['l_s']:.3f}")

# 4. persist, reload and evaluate on the target domain
training.save_model(work / "model.ckpt", result.model.detector, cfg, cfg.epochs)
detector, meta = training.load_model(work / "model.ckpt")
report = training.evaluate(detector, training.load_split(work / "B", "test"), overlay_dir=work / "overlays")
print(f"target mAP@0.5 {report.map:.3f}", {k: v for k, v in report.per_class_ap.items() if v is not None})
