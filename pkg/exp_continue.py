"""Continue proxy training from a checkpoint, evaluating periodically."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np
import torch

from vesselreg.pipeline import (TrainConfig, train, register, make_pair,
                                NoHomographyError, load_checkpoint)
from vesselreg.synthdata import (AugmentConfig, PhotometricConfig,
                                 GeometricConfig, save_image)
from vesselreg.geometry import (HomographySampleConfig, mean_homography_error,
                                Homography)
from vesselreg.phantom import vessel_phantom

CKPT = sys.argv[1]
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 60
N_MAX_EVAL = int(sys.argv[3]) if len(sys.argv) > 3 else 48

torch.manual_seed(0)
tmp = Path(tempfile.mkdtemp())
print("workdir", tmp, flush=True)

sources = []
for i in range(20):
    img = vessel_phantom((192, 192), seed=100 + i, n_trees=7)
    p = tmp / f"src{i}.png"
    save_image(p, img)
    sources.append(str(p))
entries = [{"source_path": sources[k % 20], "seed": k, "mode": "invert"}
           for k in range(250)]

HCFG = HomographySampleConfig(max_corner_displacement=0.035,
                              rotation_range_deg=6.0,
                              scale_range=(0.97, 1.03),
                              translation_range=0.02)
AUG = AugmentConfig(
    patch_size=96,
    photometric=PhotometricConfig(0.1, (0, 0.5), 0.2, (0, 0.01), 2),
    geometric_joint=GeometricConfig(0.5, 0.5, 4.0, 0.5, 8.0))

cfg = TrainConfig(
    epochs_flat=EPOCHS, epochs_decay=0, lr_matcher=1.5e-3,
    lr_detector_heads=1e-4, lr_describe_head=1e-3, batch_size=1,
    n_max=48, early_stop_patience=10 ** 6, resample_each_epoch=True,
    val_fraction=0.1, checkpoint_every=10, seed=100, homography=HCFG,
    augment=AUG)

det, mat, _ = load_checkpoint(CKPT)
t0 = time.time()
hist = train(det, mat, entries, cfg, tmp / "run", max_epochs=EPOCHS)
print(f"continue {EPOCHS} ep in {time.time()-t0:.0f}s "
      f"loss {hist['train_loss'][0]:.1f}->{hist['train_loss'][-1]:.1f}", flush=True)

test_sources = {f"t{i}": vessel_phantom((192, 192), seed=900 + i, n_trees=7)
                for i in range(10)}
test_entries = [{"source_path": f"t{k % 10}", "seed": 7000 + k, "mode": "invert"}
                for k in range(50)]


def evaluate(d, m, label, n_max):
    mhes, nmatch = [], []
    for e in test_entries:
        pair = make_pair(e, cfg, test_sources)
        try:
            out = register(d, m, pair.patch_a, pair.patch_b, n_max=n_max,
                           score_threshold=0.2, border_margin=6)
            mhes.append(mean_homography_error(out.h, pair.h_gt, (96, 96)))
            nmatch.append(out.diagnostics["n_matches"])
        except NoHomographyError as err:
            mhes.append(np.inf)
            nmatch.append(err.diagnostics["n_matches"])
    mhes = np.array(mhes)
    print(f"{label} (n_max={n_max}): matches={np.mean(nmatch):.1f} "
          f"SR@5={np.mean(mhes <= 5):.2f} SR@3={np.mean(mhes <= 3):.2f} "
          f"median={np.median(mhes):.2f}", flush=True)


for ck in sorted((tmp / "run").glob("checkpoint_epoch*.pt")):
    d, m, _ = load_checkpoint(ck)
    evaluate(d, m, ck.name, N_MAX_EVAL)
evaluate(det, mat, "final-restored", N_MAX_EVAL)
evaluate(det, mat, "final-restored", 96)
