"""Arm D: joint training with split head learning rates, long horizon."""
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

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 60
LR_DETECT = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-4
N_PAIRS = int(sys.argv[3]) if len(sys.argv) > 3 else 60
RESAMPLE = bool(int(sys.argv[4])) if len(sys.argv) > 4 else True

torch.manual_seed(0)
tmp = Path(tempfile.mkdtemp())
print("workdir", tmp, flush=True)
sources = []
for i in range(12):
    img = vessel_phantom((192, 192), seed=300 + i, n_trees=7)
    p = tmp / f"s{i}.png"
    save_image(p, img)
    sources.append(str(p))
entries = [{"source_path": sources[k % 12], "seed": k, "mode": "invert"}
           for k in range(N_PAIRS)]

cfg = TrainConfig(
    epochs_flat=EPOCHS, epochs_decay=0, lr_matcher=1e-3,
    lr_detector_heads=LR_DETECT, lr_describe_head=1e-3, batch_size=2,
    n_max=64, early_stop_patience=10 ** 6, resample_each_epoch=RESAMPLE,
    val_fraction=0.1,
    homography=HomographySampleConfig(0.04, 6, (0.97, 1.03), 0.02),
    augment=AugmentConfig(patch_size=96,
                          photometric=PhotometricConfig(0.1, (0, 0.5), 0.2,
                                                        (0, 0.01), 2),
                          geometric_joint=GeometricConfig(0.5, 0.5, 4, 0.5, 8.0)))

det = VesselKeypointNet(DetectorConfig(descriptor_dim=48, base_channels=16,
                                       num_blocks=1))
mat = GraphMatcher(MatcherConfig(dim=48, num_layers=4, num_heads=4,
                                 sinkhorn_iterations=100,
                                 encoder_hidden=(32, 64)))
t0 = time.time()
hist = train(det, mat, entries, cfg, tmp / "run", max_epochs=EPOCHS)
print(f"armD: {EPOCHS} ep in {time.time()-t0:.0f}s loss "
      f"{hist['train_loss'][0]:.1f}->{hist['train_loss'][-1]:.1f}", flush=True)

import json
rows = [json.loads(l) for l in open(tmp / "run" / "training_log.jsonl")
        if "n_p_mean" in l]
for chunk in range(0, len(rows), max(1, len(rows) // 6)):
    sub = rows[chunk:chunk + max(1, len(rows) // 6)]
    print(f"  ep~{sub[0]['epoch']}: n_p={np.mean([r['n_p_mean'] for r in sub]):.1f} "
          f"l_sg={np.mean([r['l_sg'] for r in sub]):.1f}", flush=True)

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
print(f"armD TOTAL matches={tot_m} correct={tot_c}", flush=True)
