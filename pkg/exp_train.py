"""Desk-scale learnability experiment (not part of the package)."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np
import torch

from vesselreg.detector import DetectorConfig, VesselKeypointNet
from vesselreg.matcher import GraphMatcher, MatcherConfig
from vesselreg.pipeline import (TrainConfig, train, register, make_pair,
                                NoHomographyError)
from vesselreg.synthdata import (AugmentConfig, PhotometricConfig,
                                 GeometricConfig, save_image)
from vesselreg.geometry import HomographySampleConfig, mean_homography_error
from vesselreg.phantom import vessel_phantom

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 25
N_PAIRS = int(sys.argv[2]) if len(sys.argv) > 2 else 240
BATCH = int(sys.argv[3]) if len(sys.argv) > 3 else 4
LR_HEADS = float(sys.argv[4]) if len(sys.argv) > 4 else 1e-4
LR_MATCH = float(sys.argv[5]) if len(sys.argv) > 5 else 3e-4
N_MAX = int(sys.argv[6]) if len(sys.argv) > 6 else 96
PATCH = int(sys.argv[7]) if len(sys.argv) > 7 else 128

torch.manual_seed(0)
tmp = Path(tempfile.mkdtemp())
print("workdir", tmp, flush=True)

sources = []
for i in range(20):
    img = vessel_phantom((224, 224), seed=100 + i, n_trees=7)
    p = tmp / f"src{i}.png"
    save_image(p, img)
    sources.append(str(p))

entries = [{"source_path": sources[k % 20], "seed": k, "mode": "invert"}
           for k in range(N_PAIRS)]

cfg = TrainConfig(
    epochs_flat=EPOCHS, epochs_decay=0, lr_matcher=LR_MATCH,
    lr_detector_heads=LR_HEADS,
    batch_size=BATCH, n_max=N_MAX, early_stop_patience=10 ** 6,
    homography=HomographySampleConfig(max_corner_displacement=0.05,
                                      rotation_range_deg=8,
                                      scale_range=(0.95, 1.05),
                                      translation_range=0.02),
    augment=AugmentConfig(
        patch_size=PATCH,
        photometric=PhotometricConfig(color_jitter_strength=0.15,
                                      blur_sigma_range=(0, 0.8),
                                      sharpen_strength=0.3,
                                      noise_std_range=(0, 0.02),
                                      small_crop_max_px=4),
        geometric_joint=GeometricConfig(hflip_prob=0.5, vflip_prob=0.5,
                                        rotation_range_deg=5,
                                        elastic_noise_strength=1.0)))

det = VesselKeypointNet(DetectorConfig(descriptor_dim=48, base_channels=16,
                                       num_blocks=1))
mat = GraphMatcher(MatcherConfig(dim=48, num_layers=4, num_heads=4,
                                 sinkhorn_iterations=100, encoder_hidden=(32,)))

t0 = time.time()
hist = train(det, mat, entries, cfg, tmp / "run", max_epochs=EPOCHS)
print(f"train {EPOCHS} epochs: {time.time()-t0:.0f}s", flush=True)
print("loss first/last:", hist["train_loss"][:2], hist["train_loss"][-2:],
      flush=True)
print("dustbin:", float(mat.dustbin.detach()), flush=True)

test_sources = {}
test_entries = []
for i in range(10):
    img = vessel_phantom((224, 224), seed=900 + i, n_trees=7)
    key = f"test{i}"
    test_sources[key] = img
    for k in range(5):
        test_entries.append({"source_path": key, "seed": 7000 + i * 5 + k,
                             "mode": "invert"})

mhes, nm = [], []
for e in test_entries:
    pair = make_pair(e, cfg, test_sources)
    try:
        out = register(det, mat, pair.patch_a, pair.patch_b, n_max=cfg.n_max,
                       score_threshold=cfg.match_threshold,
                       border_margin=cfg.border_margin)
        mhe = mean_homography_error(out.h, pair.h_gt, (PATCH, PATCH))
        nm.append(out.diagnostics["n_matches"])
    except NoHomographyError as err:
        mhe = np.inf
        nm.append(err.diagnostics["n_matches"])
    mhes.append(mhe)
mhes = np.array(mhes)
print("n_matches mean:", float(np.mean(nm)), flush=True)
print("MHE median:", float(np.median(mhes)), "SR@5:", float(np.mean(mhes <= 5)),
      "SR@3:", float(np.mean(mhes <= 3)), flush=True)
print("MHEs:", np.round(mhes, 2).tolist(), flush=True)
