"""Architecture comparison for matcher rule-learning speed."""
import sys
import time
import tempfile
from pathlib import Path

import numpy as np
import torch

from vesselreg.detector import (DetectorConfig, VesselKeypointNet,
                                detect_and_describe, find_positive_pairs,
                                interpolate_descriptors)
from vesselreg.matcher import GraphMatcher, MatcherConfig, extract_matches
from vesselreg.pipeline import TrainConfig, train, extract_keypoints, make_pair
from vesselreg.synthdata import (AugmentConfig, PhotometricConfig,
                                 GeometricConfig, save_image)
from vesselreg.geometry import HomographySampleConfig, warp_points
from vesselreg.phantom import vessel_phantom

ARM = sys.argv[1]
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 30

torch.manual_seed(0)
tmp = Path(tempfile.mkdtemp())
sources = []
for i in range(12):
    img = vessel_phantom((192, 192), seed=300 + i, n_trees=7)
    p = tmp / f"s{i}.png"
    save_image(p, img)
    sources.append(str(p))
entries = [{"source_path": sources[k % 12], "seed": k, "mode": "invert"}
           for k in range(60)]

cfg = TrainConfig(
    epochs_flat=EPOCHS, epochs_decay=0, lr_matcher=1e-3, lr_detector_heads=1e-6,
    batch_size=2, n_max=64, early_stop_patience=10 ** 6,
    resample_each_epoch=True, val_fraction=0.1,
    homography=HomographySampleConfig(0.04, 6, (0.97, 1.03), 0.02),
    augment=AugmentConfig(patch_size=96,
                          photometric=PhotometricConfig(0.1, (0, 0.5), 0.2,
                                                        (0, 0.01), 2),
                          geometric_joint=GeometricConfig(0.5, 0.5, 4, 0.5, 8.0)))

det = VesselKeypointNet(DetectorConfig(descriptor_dim=48, base_channels=16,
                                       num_blocks=1))
arms = {
    "A": MatcherConfig(dim=48, num_layers=4, num_heads=4, sinkhorn_iterations=100,
                       encoder_hidden=(32,)),
    "B": MatcherConfig(dim=48, num_layers=6, num_heads=4, sinkhorn_iterations=100,
                       encoder_hidden=(32, 64, 128)),
    "C": MatcherConfig(dim=48, num_layers=4, num_heads=4, sinkhorn_iterations=100,
                       encoder_hidden=(32, 64, 128)),
}
mat = GraphMatcher(arms[ARM])
t0 = time.time()
hist = train(det, mat, entries, cfg, tmp / "run", max_epochs=EPOCHS)
print(f"arm {ARM}: {EPOCHS} ep in {time.time()-t0:.0f}s loss "
      f"{hist['train_loss'][0]:.1f}->{hist['train_loss'][-1]:.1f}", flush=True)

tot_m = tot_c = 0
for i in range(8):
    img = vessel_phantom((192, 192), seed=900 + i, n_trees=7)
    pair = make_pair({"source_path": "t", "seed": 7000 + i, "mode": "invert"},
                     cfg, {"t": img})
    heat_a, fld_a = detect_and_describe(det, pair.patch_a)
    heat_b, fld_b = detect_and_describe(det, pair.patch_b)
    kps_a, _ = extract_keypoints(heat_a, 64, 2, 6, 0.1)
    kps_b, _ = extract_keypoints(heat_b, 64, 2, 6, 0.1)
    da = interpolate_descriptors(torch.from_numpy(fld_a).permute(2, 0, 1),
                                 torch.from_numpy(kps_a.coords), 4).float()
    db = interpolate_descriptors(torch.from_numpy(fld_b).permute(2, 0, 1),
                                 torch.from_numpy(kps_b.coords), 4).float()
    with torch.no_grad():
        p = mat(da, torch.from_numpy(kps_a.coords).float(),
                torch.from_numpy(kps_a.scores).float(), (96, 96),
                db, torch.from_numpy(kps_b.coords).float(),
                torch.from_numpy(kps_b.scores).float(), (96, 96))
    pn = p.numpy()
    gt, _ = find_positive_pairs(kps_a, kps_b, pair.h_gt, 3.0)
    gt_mass = float(np.mean([pn[i_, j_] for i_, j_ in gt])) if len(gt) else -1
    res = extract_matches(pn, 0.2)
    c = 0
    if len(res):
        w = warp_points(kps_a.coords[res.pairs[:, 0]], pair.h_gt)
        c = int((np.linalg.norm(w - kps_b.coords[res.pairs[:, 1]], axis=1) < 3).sum())
    tot_m += len(res)
    tot_c += c
    print(f"  test{i}: gt={len(gt)} gt_mass={gt_mass:.3f} m@0.2={len(res)} ok={c}",
          flush=True)
print(f"arm {ARM} TOTAL matches={tot_m} correct={tot_c}", flush=True)
