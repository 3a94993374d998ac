"""Full proxy candidate with trajectory checkpoints."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np
import torch

from vesselreg.detector import DetectorConfig, VesselKeypointNet
from vesselreg.matcher import GraphMatcher, MatcherConfig
from vesselreg.pipeline import (TrainConfig, train, register, make_pair,
                                NoHomographyError, load_checkpoint)
from vesselreg.synthdata import (AugmentConfig, PhotometricConfig,
                                 GeometricConfig, save_image)
from vesselreg.geometry import (HomographySampleConfig, mean_homography_error,
                                Homography)
from vesselreg.phantom import vessel_phantom

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 30
N_PAIRS = int(sys.argv[2]) if len(sys.argv) > 2 else 200
LR_MATCH = float(sys.argv[3]) if len(sys.argv) > 3 else 1.5e-3
N_MAX = int(sys.argv[4]) if len(sys.argv) > 4 else 48

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
           for k in range(N_PAIRS)]

HCFG = HomographySampleConfig(max_corner_displacement=0.035,
                              rotation_range_deg=6.0,
                              scale_range=(0.97, 1.03),
                              translation_range=0.02)
AUG = AugmentConfig(
    patch_size=96,
    photometric=PhotometricConfig(0.1, (0, 0.5), 0.2, (0, 0.01), 2),
    geometric_joint=GeometricConfig(0.5, 0.5, 4.0, 0.5, 8.0))

cfg = TrainConfig(
    epochs_flat=EPOCHS, epochs_decay=0, lr_matcher=LR_MATCH,
    lr_detector_heads=1e-4, lr_describe_head=1e-3, batch_size=1,
    n_max=N_MAX, early_stop_patience=10 ** 6, resample_each_epoch=True,
    val_fraction=0.05, checkpoint_every=5, homography=HCFG, augment=AUG)

det = VesselKeypointNet(DetectorConfig(descriptor_dim=64, base_channels=24,
                                       num_blocks=1))
mat = GraphMatcher(MatcherConfig(dim=64, num_layers=4, num_heads=4,
                                 sinkhorn_iterations=100,
                                 encoder_hidden=(32, 64)))
t0 = time.time()
hist = train(det, mat, entries, cfg, tmp / "run", max_epochs=EPOCHS)
print(f"proxy: {EPOCHS} ep in {time.time()-t0:.0f}s loss "
      f"{hist['train_loss'][0]:.1f}->{hist['train_loss'][-1]:.1f} "
      f"val {hist['val_loss'][-1]:.1f}", flush=True)

# held-out evaluation incl. identity baseline
test_sources = {f"t{i}": vessel_phantom((192, 192), seed=900 + i, n_trees=7)
                for i in range(10)}
test_entries = [{"source_path": f"t{k % 10}", "seed": 7000 + k, "mode": "invert"}
                for k in range(50)]


def evaluate(d, m, label):
    mhes, nmatch, id_mhes = [], [], []
    for e in test_entries:
        pair = make_pair(e, cfg, test_sources)
        id_mhes.append(mean_homography_error(Homography.identity(), pair.h_gt,
                                             (96, 96)))
        try:
            out = register(d, m, pair.patch_a, pair.patch_b, n_max=N_MAX,
                           score_threshold=0.2, border_margin=6)
            mhes.append(mean_homography_error(out.h, pair.h_gt, (96, 96)))
            nmatch.append(out.diagnostics["n_matches"])
        except NoHomographyError as err:
            mhes.append(np.inf)
            nmatch.append(err.diagnostics["n_matches"])
    mhes = np.array(mhes)
    id_mhes = np.array(id_mhes)
    print(f"{label}: matches={np.mean(nmatch):.1f} SR@5={np.mean(mhes <= 5):.2f} "
          f"SR@3={np.mean(mhes <= 3):.2f} median={np.median(mhes):.2f} "
          f"[identity SR@5={np.mean(id_mhes <= 5):.2f} "
          f"med={np.median(id_mhes):.1f}]", flush=True)


for ck in sorted((tmp / "run").glob("checkpoint_epoch*.pt")):
    d, m, _ = load_checkpoint(ck)
    evaluate(d, m, ck.name)
evaluate(det, mat, "final")
