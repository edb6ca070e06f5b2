"""
Where the model expects occluders
=================================

Render the uncertainty map of each training photo with its own transient
embedding and put it next to the photo and the true occluder mask. Run
``02_train_and_evaluate.py`` first.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from wildsplat.io import load_checkpoint, load_dataset, write_image
from wildsplat.synth import SynthConfig, synth_scene
from wildsplat.trainer import render_view, roc_auc

here = Path(__file__).parent
ckpt_path = Path(sys.argv[1]) if len(sys.argv) > 1 else here / "02_train_and_evaluate" / "model.nxsp"
out_dir = Path(__file__).with_suffix("")
out_dir.mkdir(exist_ok=True)

model = load_checkpoint(ckpt_path).model
ds = load_dataset(synth_scene(SynthConfig(seed=0), Path(tempfile.mkdtemp()) / "scene"))

###############################################################################
# Each row: photo, uncertainty scaled to [0, 1], ground-truth mask.

rows = []
for rec in ds.train:
    beta = render_view(model, rec.camera, rec.id).uncertainty
    print(f"{rec.id}: auc={roc_auc(beta, rec.occluder_mask):.3f}")
    scaled = (beta - beta.min()) / max(np.ptp(beta), 1e-12)
    gray = lambda a: np.repeat(a[..., None], 3, axis=2)  # noqa: E731
    rows.append(np.concatenate([rec.image, gray(scaled), gray(rec.occluder_mask * 1.0)], axis=1))
write_image(out_dir / "uncertainty.ppm", np.concatenate(rows, axis=0))
print("wrote", out_dir / "uncertainty.ppm")
