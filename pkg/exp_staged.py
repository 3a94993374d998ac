"""Staged proxy validation: matcher-first on quasi-static detector, then joint.
Evaluates on held-out sources."""
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

STAGE1 = int(sys.argv[1]) if len(sys.argv) > 1 else 60
STAGE2 = int(sys.argv[2]) if len(sys.argv) > 2 else 0
N_PAIRS = int(sys.argv[3]) if len(sys.argv) > 3 else 150
LR1 = float(sys.argv[4]) if len(sys.argv) > 4 else 1e-3

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

AUG = AugmentConfig(
    patch_size=128,
    photometric=PhotometricConfig(color_jitter_strength=0.15,
                                  blur_sigma_range=(0, 0.8),
                                  sharpen_strength=0.3,
                                  noise_std_range=(0, 0.02),
                                  small_crop_max_px=4),
    geometric_joint=GeometricConfig(hflip_prob=0.5, vflip_prob=0.5,
                                    rotation_range_deg=5,
                                    elastic_noise_strength=1.0))
HCFG = HomographySampleConfig(max_corner_displacement=0.05, rotation_range_deg=8,
                              scale_range=(0.95, 1.05), translation_range=0.02)


def stage_cfg(epochs, lr_matcher, lr_heads, seed):
    return TrainConfig(
        epochs_flat=epochs, epochs_decay=0, lr_matcher=lr_matcher,
        lr_detector_heads=lr_heads, batch_size=4, n_max=96,
        early_stop_patience=10 ** 6, resample_each_epoch=False, seed=seed,
        homography=HCFG, augment=AUG)


det = VesselKeypointNet(DetectorConfig(descriptor_dim=48, base_channels=16,
                                       num_blocks=1))
mat = GraphMatcher(MatcherConfig(dim=48, num_layers=4, num_heads=4,
                                 sinkhorn_iterations=100, encoder_hidden=(32,)))

t0 = time.time()
cfg1 = stage_cfg(STAGE1, LR1, 1e-6, seed=0)
h1 = train(det, mat, entries, cfg1, tmp / "run1", max_epochs=STAGE1)
print(f"stage1 {STAGE1} ep: {time.time()-t0:.0f}s loss "
      f"{h1['train_loss'][0]:.1f}->{h1['train_loss'][-1]:.1f} "
      f"val {h1['val_loss'][-1]:.1f}", flush=True)

if STAGE2:
    t1 = time.time()
    cfg2 = stage_cfg(STAGE2, 2e-4, 1e-4, seed=1)
    h2 = train(det, mat, entries, cfg2, tmp / "run2", max_epochs=STAGE2)
    print(f"stage2 {STAGE2} ep: {time.time()-t1:.0f}s loss "
          f"{h2['train_loss'][0]:.1f}->{h2['train_loss'][-1]:.1f}", flush=True)

cfg = stage_cfg(1, 1e-4, 1e-4, 0)
test_sources = {}
test_entries = []
for i in range(10):
    img = vessel_phantom((224, 224), seed=900 + i, n_trees=7)
    test_sources[f"t{i}"] = img
    for k in range(5):
        test_entries.append({"source_path": f"t{i}", "seed": 7000 + i * 5 + k,
                             "mode": "invert"})

mhes, nm = [], []
for e in test_entries:
    pair = make_pair(e, cfg, test_sources)
    try:
        out = register(det, mat, pair.patch_a, pair.patch_b, n_max=96,
                       score_threshold=0.2, border_margin=6)
        mhes.append(mean_homography_error(out.h, pair.h_gt, (128, 128)))
        nm.append(out.diagnostics["n_matches"])
    except NoHomographyError as err:
        mhes.append(np.inf)
        nm.append(err.diagnostics["n_matches"])
mhes = np.array(mhes)
print("held-out: n_matches mean", float(np.mean(nm)), flush=True)
print("MHE median:", float(np.median(mhes)), "SR@5:", float(np.mean(mhes <= 5)),
      "SR@3:", float(np.mean(mhes <= 3)), flush=True)
print("MHEs:", np.round(mhes, 2).tolist()[:25], flush=True)
