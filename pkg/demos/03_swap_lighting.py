"""
Relighting a trained model
==========================

Render one camera under the light embedding of every training photo. The
geometry is shared, so the alpha maps match exactly while the colours follow
each photo's exposure and tint. Run ``02_train_and_evaluate.py`` first.
"""

import sys
from pathlib import Path

import numpy as np

from wildsplat.io import load_checkpoint, write_image
from wildsplat.synth import SynthConfig, ring_cameras
from wildsplat.trainer import render_view

here = Path(__file__).parent
ckpt_path = Path(sys.argv[1]) if len(sys.argv) > 1 else here / "02_train_and_evaluate" / "model.nxsp"
out_dir = Path(__file__).with_suffix("")
out_dir.mkdir(exist_ok=True)

model = load_checkpoint(ckpt_path).model
cam = ring_cameras(SynthConfig())[0]

###############################################################################
# One render per light; stack them side by side.

renders = [render_view(model, cam, iid) for iid in model.image_ids]
strip = np.concatenate([np.clip(r.mapped, 0, 1) for r in renders], axis=1)
write_image(out_dir / "lights.ppm", strip)

same = all(np.array_equal(renders[0].alpha, r.alpha) for r in renders)
print("alpha maps identical across lights:", same)
for iid, r in zip(model.image_ids, renders):
    print(f"{iid}: mean colour {np.round(r.mapped.mean(axis=(0, 1)), 3)}")
